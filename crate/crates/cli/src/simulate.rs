use clap::{Args, ValueEnum};
use rayon::prelude::*;
use rsv_core::baseline::common_practice;
use rsv_core::dgp::{generate, DgpKind, DgpSpec, MissingPattern};
use rsv_core::estimate::{benchmark_difference, estimate_ate, EstimateConfig, Inference};
use rsv_core::quasi::{did_att, iv_late, DEFAULT_WEAK_FLOOR};
use rsv_core::util::{derive_seed, fmt17, mean, sd, z_two_sided};
use rsv_core::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::output::{csv_payload, out_dir, write};
use crate::{Common, FitArgs, Format};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpArg {
    Calibrated,
    Adversarial,
    Iv,
    Did,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Common,
    Benchmark,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Common => "common",
            Method::Benchmark => "benchmark",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = DgpArg::Calibrated)]
    pub dgp: DgpArg,
    /// Effects to simulate; the IV and DiD processes read them as complier effect and ATT.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub tau_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000")]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ours,common")]
    pub methods: Vec<Method>,
    /// Adversarial Pr{Y(0)=1}.
    #[arg(long, default_value_t = 0.6)]
    pub a: f64,
    /// Adversarial Pr{Y(1)=1}.
    #[arg(long, default_value_t = 0.2)]
    pub b: f64,
    #[arg(long, default_value_t = 16)]
    pub rsv_dim: usize,
    /// Inference for our estimator; bootstrap is B times slower per replication.
    #[arg(long, value_enum, default_value_t = crate::estimate::InferenceArg::Analytic)]
    pub inference: crate::estimate::InferenceArg,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone)]
struct Draw {
    method: Method,
    tau_index: usize,
    n: usize,
    rep: usize,
    truth: f64,
    outcome: std::result::Result<(f64, Option<(f64, f64, f64)>), &'static str>,
}

impl SimulateArgs {
    fn spec(&self, tau: f64, n: usize, seed: u64) -> DgpSpec {
        let base = DgpSpec {
            n,
            seed,
            rsv_dim: self.rsv_dim,
            ..Default::default()
        };
        match self.dgp {
            DgpArg::Calibrated => DgpSpec { theta_shift: tau, ..base },
            DgpArg::Adversarial => DgpSpec {
                kind: DgpKind::Adversarial,
                a: self.a,
                b: self.b,
                rsv_dim: 1,
                ..base
            },
            DgpArg::Iv => DgpSpec {
                kind: DgpKind::Iv,
                iv_effect: tau,
                ..base
            },
            DgpArg::Did => DgpSpec {
                kind: DgpKind::Did,
                did_effect: tau,
                ..base
            },
        }
    }

    fn inference(&self) -> Inference {
        match self.inference {
            crate::estimate::InferenceArg::Bootstrap => Inference::Bootstrap {
                replications: self.bootstrap,
                cluster: true,
                whole_pipeline: false,
            },
            crate::estimate::InferenceArg::Analytic => Inference::Analytic,
            crate::estimate::InferenceArg::None => Inference::None,
        }
    }
}

type Interval = (f64, f64, f64);

fn ours(a: &SimulateArgs, spec: &DgpSpec, cfg: &EstimateConfig) -> Result<(f64, f64, Option<Interval>)> {
    let g = generate(spec)?;
    let with_ci = |se: f64, lo: f64, hi: f64| if se.is_finite() { Some((se, lo, hi)) } else { None };
    match a.dgp {
        DgpArg::Iv => {
            let r = iv_late(&g.data, cfg, DEFAULT_WEAK_FLOOR)?;
            Ok((g.truth.late.unwrap_or(f64::NAN), r.late, with_ci(r.se, r.ci_low, r.ci_high)))
        }
        DgpArg::Did => {
            let panel = g.panel.as_ref().ok_or_else(|| Error::Unsupported("DiD process returned no panel".into()))?;
            let r = did_att(panel, cfg)?;
            Ok((g.truth.att.unwrap_or(f64::NAN), r.att, with_ci(r.se, r.ci_low, r.ci_high)))
        }
        _ => {
            let r = estimate_ate(&g.data, cfg)?;
            Ok((g.truth.theta, r.theta_hat, with_ci(r.se, r.ci_low, r.ci_high)))
        }
    }
}

fn one_draw(a: &SimulateArgs, method: Method, tau_index: usize, n: usize, rep: usize) -> Draw {
    let seed = derive_seed(a.common.seed, &[tau_index as u64, n as u64, rep as u64]);
    let spec = a.spec(a.tau_grid[tau_index], n, seed);
    let cfg = a.fit.config(seed, a.inference()).expect("validated before the run");
    let quasi = matches!(a.dgp, DgpArg::Iv | DgpArg::Did);
    let truth_of = |spec: &DgpSpec| generate(spec).map(|g| g.truth.theta).unwrap_or(f64::NAN);
    let (truth, outcome) = match method {
        Method::Ours => match ours(a, &spec, &cfg) {
            Ok((t, est, ci)) => (t, Ok((est, ci))),
            Err(e) => (truth_of(&spec), Err(e.name())),
        },
        _ if quasi => (f64::NAN, Err("Unsupported")),
        Method::Common => match generate(&spec).and_then(|g| Ok((g.truth.theta, common_practice(&g.data, &cfg.predictor)?))) {
            Ok((t, est)) => (t, Ok((est, None))),
            Err(e) => (truth_of(&spec), Err(e.name())),
        },
        Method::Benchmark => {
            // Same draws with every experimental label kept.
            let full = DgpSpec {
                missing_pattern: MissingPattern::None,
                ..spec.clone()
            };
            match generate(&full).and_then(|g| Ok((g.truth.theta, benchmark_difference(&g.data)?, benchmark_se(&g.data)))) {
                Ok((t, est, se)) => {
                    let z = z_two_sided(a.fit.alpha);
                    (t, Ok((est, Some((se, est - z * se, est + z * se)))))
                }
                Err(e) => (truth_of(&spec), Err(e.name())),
            }
        }
    };
    Draw {
        method,
        tau_index,
        n,
        rep,
        truth,
        outcome,
    }
}

/// Unequal-variance standard error of the labeled difference in means.
fn benchmark_se(ds: &rsv_core::data::Dataset) -> f64 {
    let arm = |d: u8| -> (f64, f64) {
        let ys: Vec<f64> = ds.units.iter().filter(|u| u.is_arm_e(d)).filter_map(|u| u.outcome.map(|y| ds.outcome_values[y])).collect();
        (sd(&ys).powi(2), ys.len() as f64)
    };
    let ((v1, n1), (v0, n0)) = (arm(1), arm(0));
    (v1 / n1 + v0 / n0).sqrt()
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt17).unwrap_or_else(|| "NA".into())
}

pub fn run(a: &SimulateArgs, echo: &Value) -> Result<()> {
    if a.tau_grid.is_empty() || a.n_grid.is_empty() || a.reps == 0 || a.methods.is_empty() {
        return Err(Error::InvalidSpec("tau grid, n grid, reps and methods must be nonempty".into()));
    }
    a.fit.config(a.common.seed, a.inference())?;
    for (i, &tau) in a.tau_grid.iter().enumerate() {
        for &n in &a.n_grid {
            a.spec(tau, n, derive_seed(a.common.seed, &[i as u64, n as u64, 0])).check()?;
        }
    }
    let mut methods = a.methods.clone();
    methods.sort();
    methods.dedup();
    let jobs: Vec<(Method, usize, usize, usize)> = methods
        .iter()
        .flat_map(|&m| (0..a.tau_grid.len()).flat_map(move |t| a.n_grid.iter().flat_map(move |&n| (0..a.reps).map(move |r| (m, t, n, r)))))
        .collect();
    let draws: Vec<Draw> = jobs.par_iter().map(|&(m, t, n, r)| one_draw(a, m, t, n, r)).collect();

    let rows: Vec<String> = draws
        .iter()
        .map(|d| {
            let (est, ci, status) = match &d.outcome {
                Ok((e, ci)) => (Some(*e), *ci, "ok"),
                Err(name) => (None, None, *name),
            };
            format!(
                "{},{},{},{},{},{},{},{},{},{}",
                d.method.name(),
                fmt17(a.tau_grid[d.tau_index]),
                d.n,
                d.rep,
                opt(est),
                opt(ci.map(|c| c.0)),
                opt(ci.map(|c| c.1)),
                opt(ci.map(|c| c.2)),
                fmt17(d.truth),
                status
            )
        })
        .collect();

    let mut summary = Vec::new();
    for chunk in draws.chunk_by(|x, y| (x.method, x.tau_index, x.n) == (y.method, y.tau_index, y.n)) {
        let ok: Vec<&Draw> = chunk.iter().filter(|d| d.outcome.is_ok()).collect();
        let errs: Vec<f64> = ok.iter().map(|d| d.outcome.as_ref().unwrap().0 - d.truth).collect();
        let ests: Vec<f64> = ok.iter().map(|d| d.outcome.as_ref().unwrap().0).collect();
        let cis: Vec<bool> = ok
            .iter()
            .filter_map(|d| d.outcome.as_ref().unwrap().1.map(|(_, lo, hi)| lo <= d.truth && d.truth <= hi))
            .collect();
        let stat = |f: &dyn Fn() -> f64| if ok.is_empty() { None } else { Some(f()) };
        let d0 = chunk[0].clone();
        summary.push(format!(
            "{},{},{},{},{},{},{},{},{},{}",
            d0.method.name(),
            fmt17(a.tau_grid[d0.tau_index]),
            d0.n,
            ok.len(),
            chunk.len() - ok.len(),
            opt(stat(&|| mean(&ok.iter().map(|d| d.truth).collect::<Vec<_>>()))),
            opt(stat(&|| mean(&errs))),
            opt(if ests.len() > 1 { Some(sd(&ests)) } else { None }),
            opt(stat(&|| mean(&errs.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt())),
            opt(if cis.is_empty() { None } else { Some(cis.iter().filter(|c| **c).count() as f64 / cis.len() as f64) }),
        ));
    }

    let dir = out_dir(&a.common.out)?;
    let results = csv_payload(echo, "method,tau,n,rep,estimate,se,ci_low,ci_high,truth,status", &rows);
    let summary = csv_payload(echo, "method,tau,n,reps_ok,reps_failed,truth,bias,sd,rmse,coverage", &summary);
    write(&dir, "mc_results.csv", &results)?;
    write(&dir, "mc_summary.csv", &summary)?;
    match a.common.format {
        Format::Csv => print!("{summary}"),
        Format::Json => println!("{}", serde_json::json!({ "run_config": echo, "summary_file": dir.join("mc_summary.csv"), "replications": draws.len() })),
    }
    Ok(())
}
