//! Learned representation Ĥ(R) = Ê(Δᵒ|R) / σ̂²(θ_init, R).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::UnitRecord;
use crate::error::{Error, Result};
use crate::moments::{EEvent, MarginalCounts, Moment, OutcomeCoding};
use crate::predict::{Prediction, PredictorSet};
use crate::util::median;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresentConfig {
    /// Variance floor as a multiple of the median training σ̂².
    pub sigma_floor_rel: f64,
    /// Gram condition number above which a ridge is added.
    pub ridge_condition: f64,
    /// Ridge as a multiple of the Gram trace.
    pub ridge_rel: f64,
    /// Gram condition number above which the design is singular.
    pub max_condition: f64,
}

impl Default for RepresentConfig {
    fn default() -> Self {
        RepresentConfig {
            sigma_floor_rel: 1e-8,
            ridge_condition: 1e8,
            ridge_rel: 1e-10,
            max_condition: 1e12,
        }
    }
}

/// Significand bits kept in stored representation values. Rescaling by a
/// constant with a short significand (−2, 0.5, 10, ...) is then exact.
pub const H_SIGNIFICAND_BITS: u32 = 40;

/// Rounds to [`H_SIGNIFICAND_BITS`] significand bits, nearest, ties away from zero.
pub fn shorten(x: f64) -> f64 {
    if !x.is_normal() {
        return x;
    }
    let drop = 53 - H_SIGNIFICAND_BITS;
    let bits = x.to_bits();
    let rounded = (bits + (1u64 << (drop - 1))) & !((1u64 << drop) - 1);
    f64::from_bits(rounded)
}

fn e_event_prob(ev: EEvent, p: &Prediction) -> f64 {
    match ev {
        EEvent::Arm(1) => p.prob_d,
        EEvent::Arm(_) => 1.0 - p.prob_d,
        EEvent::Cell(d, z) => p.prob_cell.as_ref().expect("IV predictor")[2 * d as usize + z as usize],
    }
}

/// Conditional probabilities of the observational outcome events given o and R.
fn o_event_probs(m: Moment, p: &Prediction, k: usize) -> Vec<f64> {
    match m {
        Moment::CompleteArm(d) => {
            let v = p.prob_yd.as_ref().expect("complete-mode predictor");
            v[d as usize * k..(d as usize + 1) * k].to_vec()
        }
        _ => p.prob_y.clone(),
    }
}

/// Plug-in (Ê(Δᵉ|R), Ê(Δᵒ|R)) from predictions and marginal probabilities.
pub fn cond_variation_for(m: Moment, p: &Prediction, c: &MarginalCounts, coding: &OutcomeCoding) -> (f64, Vec<f64>) {
    let q = o_event_probs(m, p, coding.k);
    let po = m.o_marginals(c);
    let r = coding.reference;
    let qref = q[r] / po[r];
    let mut ce: f64 = m
        .e_terms(c)
        .iter()
        .map(|t| t.sign * e_event_prob(t.event, p) / t.p)
        .sum::<f64>()
        * p.prob_s;
    if m.arm_level() {
        ce -= qref * p.prob_so;
    }
    let co = coding
        .components()
        .into_iter()
        .map(|j| (q[j] / po[j] - qref) * p.prob_so)
        .collect();
    (ce, co)
}

/// Contrast-moment conditional variation for one unit.
pub fn cond_variation(ps: &PredictorSet, c: &MarginalCounts, unit: &UnitRecord, coding: &OutcomeCoding) -> Result<(f64, Vec<f64>)> {
    Ok(cond_variation_for(Moment::Contrast, &ps.predict(&unit.rsv)?, c, coding))
}

/// Prediction-weighted exclusive-event expansion of E[(Δᵉ − Δᵒᵀθ)² | R].
pub fn sigma2_plugin(m: Moment, p: &Prediction, c: &MarginalCounts, coding: &OutcomeCoding, theta: &[f64]) -> f64 {
    let e: f64 = m
        .e_terms(c)
        .iter()
        .map(|t| e_event_prob(t.event, p) / (t.p * t.p))
        .sum::<f64>()
        * p.prob_s;
    let q = o_event_probs(m, p, coding.k);
    let po = m.o_marginals(c);
    let o: f64 = (0..coding.k)
        .map(|y| {
            let a = m.o_coefficient(y, coding, theta);
            q[y] * a * a / (po[y] * po[y])
        })
        .sum::<f64>()
        * p.prob_so;
    e + o
}

/// No-intercept least squares of `ce` on `co`.
pub fn theta_init(ce: &[f64], co: &[Vec<f64>], cfg: &RepresentConfig) -> Result<Vec<f64>> {
    let m = co.first().map_or(0, |v| v.len());
    if m == 0 {
        return Err(Error::SingularDesign("no training units".into()));
    }
    let mut g = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (e, o) in ce.iter().zip(co) {
        for a in 0..m {
            b[a] += o[a] * e;
            for c in 0..m {
                g[(a, c)] += o[a] * o[c];
            }
        }
    }
    let trace = g.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::SingularDesign("outcome variation identically zero".into()));
    }
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v.abs())));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > cfg.max_condition {
        return Err(Error::SingularDesign(format!("Gram condition number {cond:e}")));
    }
    if cond > cfg.ridge_condition {
        for a in 0..m {
            g[(a, a)] += cfg.ridge_rel * trace;
        }
    }
    let sol = g
        .cholesky()
        .map(|ch| ch.solve(&b))
        .ok_or_else(|| Error::SingularDesign("Gram not positive definite".into()))?;
    Ok(sol.iter().copied().collect())
}

/// A representation fitted on a training fold, evaluable anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub moment: Moment,
    pub coding: OutcomeCoding,
    pub predictors: PredictorSet,
    pub train_counts: MarginalCounts,
    pub theta_init: Vec<f64>,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepPoint {
    pub h: Vec<f64>,
    pub ce: f64,
    pub co: Vec<f64>,
    pub sigma2: f64,
}

impl Representation {
    pub fn point(&self, unit: &UnitRecord) -> Result<RepPoint> {
        let p = self.predictors.predict(&unit.rsv)?;
        let (ce, co) = cond_variation_for(self.moment, &p, &self.train_counts, &self.coding);
        let sigma2 = sigma2_plugin(self.moment, &p, &self.train_counts, &self.coding, &self.theta_init).max(self.sigma_floor);
        let h = co.iter().map(|v| shorten(v / sigma2)).collect();
        Ok(RepPoint { h, ce, co, sigma2 })
    }

    pub fn h(&self, unit: &UnitRecord) -> Result<Vec<f64>> {
        Ok(self.point(unit)?.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationFit {
    pub representation: Representation,
    /// Training-fold values, aligned with the training units.
    pub h: Vec<Vec<f64>>,
    pub theta_init: Vec<f64>,
    pub ce: Vec<f64>,
    pub co: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
}

/// Initial estimate, variance surrogate and Ĥ on the training fold.
pub fn learn_representation(
    train: &[&UnitRecord],
    moment: Moment,
    coding: OutcomeCoding,
    predictors: PredictorSet,
    train_counts: MarginalCounts,
    cfg: &RepresentConfig,
) -> Result<RepresentationFit> {
    let preds: Vec<Prediction> = train.iter().map(|u| predictors.predict(&u.rsv)).collect::<Result<_>>()?;
    let (ce, co): (Vec<f64>, Vec<Vec<f64>>) = preds
        .iter()
        .map(|p| cond_variation_for(moment, p, &train_counts, &coding))
        .unzip();
    let theta0 = theta_init(&ce, &co, cfg)?;
    let raw: Vec<f64> = preds
        .iter()
        .map(|p| sigma2_plugin(moment, p, &train_counts, &coding, &theta0))
        .collect();
    let sigma_floor = (cfg.sigma_floor_rel * median(&raw)).max(f64::MIN_POSITIVE);
    let sigma2: Vec<f64> = raw.iter().map(|s| s.max(sigma_floor)).collect();
    let h = co
        .iter()
        .zip(&sigma2)
        .map(|(o, s)| o.iter().map(|v| shorten(v / s)).collect())
        .collect();
    Ok(RepresentationFit {
        representation: Representation {
            moment,
            coding,
            predictors,
            train_counts,
            theta_init: theta0.clone(),
            sigma_floor,
        },
        h,
        theta_init: theta0,
        ce,
        co,
        sigma2,
    })
}

/// Simple representations that need no variance surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NaiveSpec {
    /// Predicted probabilities of the non-reference outcome categories.
    PredY,
    FirstFeature,
    /// User-supplied values aligned with the queried units.
    Custom(Vec<Vec<f64>>),
}

pub fn naive_representation(spec: &NaiveSpec, ps: &PredictorSet, units: &[&UnitRecord], coding: &OutcomeCoding) -> Result<Vec<Vec<f64>>> {
    match spec {
        NaiveSpec::PredY => units
            .iter()
            .map(|u| {
                let p = ps.predict(&u.rsv)?;
                Ok(coding.components().into_iter().map(|j| shorten(p.prob_y[j])).collect())
            })
            .collect(),
        NaiveSpec::FirstFeature => Ok(units.iter().map(|u| vec![u.rsv[0]; coding.dim()]).collect()),
        NaiveSpec::Custom(v) => {
            if v.len() != units.len() {
                return Err(Error::DimMismatch {
                    expected: units.len(),
                    got: v.len(),
                });
            }
            Ok(v.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(prob_y1: f64, prob_d: f64, prob_s: f64) -> Prediction {
        Prediction {
            prob_y: vec![1.0 - prob_y1, prob_y1],
            prob_d,
            prob_s,
            prob_so: 1.0 - prob_s,
            prob_yd: None,
            prob_cell: None,
        }
    }

    fn counts(p_d1e: f64, p_d0e: f64, p_yo: Vec<f64>) -> MarginalCounts {
        MarginalCounts {
            n: 0,
            p_d1e,
            p_d0e,
            p_yo,
            p_ydo: None,
            p_cell: None,
        }
    }

    #[test]
    fn symmetric_treatment_has_no_variation() {
        let c = counts(0.5, 0.5, vec![0.4, 0.4]);
        let (ce, _) = cond_variation_for(Moment::Contrast, &pred(0.5, 0.5, 1.0), &c, &OutcomeCoding::binary());
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn outcome_variation_arithmetic() {
        let c = counts(0.5, 0.5, vec![0.4, 0.4]);
        let (_, co) = cond_variation_for(Moment::Contrast, &pred(0.8, 0.5, 0.0), &c, &OutcomeCoding::binary());
        assert!((co[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_and_degenerate_design() {
        let co: Vec<Vec<f64>> = [0.5, -1.0, 2.0].iter().map(|v| vec![*v]).collect();
        let ce: Vec<f64> = co.iter().map(|v| 2.0 * v[0]).collect();
        let t = theta_init(&ce, &co, &RepresentConfig::default()).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-14);
        let zero = vec![vec![0.0]; 3];
        assert_eq!(
            theta_init(&ce, &zero, &RepresentConfig::default()).unwrap_err().name(),
            "SingularDesign"
        );
    }

    #[test]
    fn sigma2_without_initial_effect_is_experimental_only() {
        let c = counts(0.5, 0.25, vec![0.3, 0.2]);
        let p = pred(0.7, 0.4, 0.6);
        let s = sigma2_plugin(Moment::Contrast, &p, &c, &OutcomeCoding::binary(), &[0.0]);
        let expect = (0.4 / 0.25 + 0.6 / 0.0625) * 0.6;
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn sigma2_plugin_matches_expected_square_on_exclusive_events() {
        // Average the closed form over the four exclusive unit types with the
        // prediction probabilities as weights.
        let c = counts(0.3, 0.2, vec![0.25, 0.25]);
        let p = pred(0.35, 0.6, 0.45);
        let th = 0.7;
        let cod = OutcomeCoding::binary();
        let types = [
            (UnitRecord::exp(1, vec![0.0]), p.prob_s * p.prob_d),
            (UnitRecord::exp(0, vec![0.0]), p.prob_s * (1.0 - p.prob_d)),
            (UnitRecord::obs(1, vec![0.0]), p.prob_so * p.prob_y[1]),
            (UnitRecord::obs(0, vec![0.0]), p.prob_so * p.prob_y[0]),
        ];
        let direct: f64 = types
            .iter()
            .map(|(u, w)| {
                let v = Moment::Contrast.variation(u, &c, &cod);
                w * (v.delta_e - v.delta_o[0] * th).powi(2)
            })
            .sum();
        let plug = sigma2_plugin(Moment::Contrast, &p, &c, &cod, &[th]);
        assert!((direct - plug).abs() < 1e-12 * plug);
    }

    #[test]
    fn shorten_makes_decimal_rescaling_exact() {
        for x in [0.1, 1.0 / 3.0, -7.123456789e-5, 2.0f64.sqrt() * 1e10] {
            let s = shorten(x);
            assert!((s - x).abs() <= x.abs() * 2f64.powi(-40));
            // Exact product: the fused residual vanishes.
            assert_eq!(10f64.mul_add(s, -(10.0 * s)), 0.0);
        }
    }
}
