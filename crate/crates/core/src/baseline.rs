//! The common-practice surrogate estimator and its bias characterizations.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dgp::FiniteSpec;
use crate::error::{Error, Result};
use crate::predict::{fit_predictors, PredictorConfig, PredictorSet};
use crate::util::mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// μ̃(1) − μ̃(0).
    pub theta_tilde: f64,
    pub beta_tilde: Option<f64>,
    pub beta: Option<f64>,
    pub bias_weight: Option<BiasWeight>,
}

fn zero(event: &str) -> Error {
    Error::ZeroCount {
        event: event.into(),
        context: String::new(),
    }
}

/// Difference across arms of the mean of `surrogate(R)` over experimental units.
pub fn surrogate_estimate_by(ds: &Dataset, surrogate: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let arm = |d: u8| -> Result<f64> {
        let v: Vec<f64> = ds.units.iter().filter(|u| u.is_arm_e(d)).map(|u| surrogate(&u.rsv)).collect();
        if v.is_empty() {
            return Err(zero(&format!("experimental units with D={d}")));
        }
        Ok(mean(&v))
    };
    Ok(arm(1)? - arm(0)?)
}

/// Plugs the outcome model's expected value E(Y|R,o) in as a surrogate outcome.
pub fn surrogate_estimate(ds: &Dataset, ps: &PredictorSet) -> Result<f64> {
    if let Some(u) = ds.units.iter().find(|u| u.rsv.len() != ps.rsv_dim) {
        return Err(Error::DimMismatch {
            expected: ps.rsv_dim,
            got: u.rsv.len(),
        });
    }
    let values = &ds.outcome_values;
    surrogate_estimate_by(ds, |r| {
        let p = ps.predict(r).expect("dimension checked");
        p.prob_y.iter().zip(values).map(|(p, y)| p * y).sum()
    })
}

/// Common practice end to end: fit the outcome model on observational units, then average by arm.
pub fn common_practice(ds: &Dataset, cfg: &PredictorConfig) -> Result<f64> {
    let refs: Vec<_> = ds.units.iter().collect();
    let ps = fit_predictors(&refs, ds.k_outcomes, ds.mode, cfg)?;
    surrogate_estimate(ds, &ps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryDecomposition {
    /// Pr(Y=1|R=1,o) − Pr(Y=1|R=0,o).
    pub beta_tilde: f64,
    /// E(R|Y=1,e) − E(R|Y=0,e) on labeled experimental units.
    pub beta: f64,
    /// Labeled difference in means.
    pub theta: f64,
    /// β̃·β·θ.
    pub predicted_theta_tilde: f64,
}

/// Binary-everything slopes; needs a scalar 0/1 RSV and labeled experimental units.
pub fn binary_bias_decomposition(ds: &Dataset) -> Result<BinaryDecomposition> {
    if ds.k_outcomes != 2 || ds.rsv_dim != 1 || ds.units.iter().any(|u| u.rsv[0] != 0.0 && u.rsv[0] != 1.0) {
        return Err(Error::Unsupported("binary decomposition needs binary Y and a scalar 0/1 RSV".into()));
    }
    let cond_mean = |xs: Vec<f64>, what: &str| -> Result<f64> {
        if xs.is_empty() {
            Err(zero(what))
        } else {
            Ok(mean(&xs))
        }
    };
    let o_y_given_r = |r: f64| {
        cond_mean(
            ds.units.iter().filter(|u| u.sample.in_o() && u.rsv[0] == r).filter_map(|u| u.outcome).map(|y| y as f64).collect(),
            &format!("observational units with R={r}"),
        )
    };
    let labeled_e = || ds.units.iter().filter(|u| u.sample.in_e() && u.outcome.is_some());
    let e_r_given_y = |y: usize| {
        cond_mean(
            labeled_e().filter(|u| u.outcome == Some(y)).map(|u| u.rsv[0]).collect(),
            &format!("labeled experimental units with Y={y}"),
        )
    };
    let e_y_given_d = |d: u8| {
        cond_mean(
            labeled_e().filter(|u| u.treatment == Some(d)).map(|u| u.outcome.unwrap() as f64).collect(),
            &format!("labeled experimental units with D={d}"),
        )
    };
    let beta_tilde = o_y_given_r(1.0)? - o_y_given_r(0.0)?;
    let beta = e_r_given_y(1)? - e_r_given_y(0)?;
    let theta = e_y_given_d(1)? - e_y_given_d(0)?;
    Ok(BinaryDecomposition {
        beta_tilde,
        beta,
        theta,
        predicted_theta_tilde: beta_tilde * beta * theta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasWeight {
    /// w(r) per support point.
    pub w: Vec<f64>,
    /// μ(1)·Σ_r {w(r) − 1} f(r|Y=1).
    pub integrated_bias: f64,
}

/// Reweighting function of the common-practice bias on a binary finite population.
///
/// Equals θ̃ − θ when OBS units are untreated draws from the experimental
/// population, so that S ⫫ (Y,R) | D.
pub fn bias_weight_w(spec: &FiniteSpec) -> Result<BiasWeight> {
    spec.check()?;
    if spec.k() != 2 {
        return Err(Error::Unsupported("bias weights need a binary outcome".into()));
    }
    let m = spec.support();
    let mu = [spec.y_dist[0][1], spec.y_dist[1][1]];
    if mu[1] == 0.0 {
        return Err(zero("Pr{Y(1)=1}"));
    }
    let f_rd = |d: usize, r: usize| -> f64 { (0..2).map(|y| spec.y_dist[d][y] * spec.r_given_y[y][r]).sum() };
    let mut w = Vec::with_capacity(m);
    let mut bias = 0.0;
    for r in 0..m {
        let f1 = spec.r_given_y[1][r];
        let f_d0 = f_rd(0, r);
        if f_d0 == 0.0 {
            if f1 > 0.0 || f_rd(1, r) > 0.0 {
                return Err(zero(&format!("f(r={r} | D=0)")));
            }
            w.push(f64::NAN);
            continue;
        }
        let wr = mu[0] * f_rd(1, r) / (mu[1] * f_d0);
        bias += (wr - 1.0) * f1;
        w.push(wr);
    }
    Ok(BiasWeight {
        w,
        integrated_bias: mu[1] * bias,
    })
}
