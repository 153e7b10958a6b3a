//! End-to-end acceptance checks, one printed PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! terminal. `ACCEPTANCE_ONLY=3,7` restricts the run to listed criteria.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use rsv_core::baseline::{common_practice, surrogate_estimate_by};
use rsv_core::data::{split_folds, Dataset, Mode, UnitRecord};
use rsv_core::dgp::{adversarial_finite, gen_adversarial, gen_calibrated, gen_did, gen_iv, population_oracle, random_finite_spec, DgpKind, DgpSpec};
use rsv_core::diagnostics::{relevance_test, specification_test};
use rsv_core::estimate::{estimate_ate, CrossFit, EstimateConfig, Inference, RepChoice};
use rsv_core::moments::{sigma2_expansion, MarginalCounts, Moment};
use rsv_core::multivalued::{binned_population, uniform_pair, BinningSpec};
use rsv_core::quasi::{did_att, iv_late, DEFAULT_WEAK_FLOOR};
use rsv_core::represent::NaiveSpec;
use rsv_core::util::{mean, rng_for, sd};

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn no_inference(seed: u64) -> EstimateConfig {
    EstimateConfig {
        seed,
        inference: Inference::None,
        ..Default::default()
    }
}

fn bootstrap(seed: u64, replications: usize) -> EstimateConfig {
    EstimateConfig {
        seed,
        inference: Inference::Bootstrap {
            replications,
            cluster: false,
            whole_pipeline: false,
        },
        ..Default::default()
    }
}

fn rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
}

fn oracle_identity() -> Outcome {
    let mut worst = 0.0f64;
    let specs = 40;
    for seed in 0..specs {
        let o = population_oracle(&random_finite_spec(seed)).expect("random specs are valid");
        for (r, d) in o.theta_ratio.iter().zip(&o.theta_direct) {
            worst = worst.max((r - d).abs());
        }
        worst = worst.max((o.theta_scalar_ratio - o.theta_scalar_direct).abs());
    }
    verdict(worst <= 1e-10, format!("{specs} random specs, max |ratio - direct| = {worst:.2e} (tol 1e-10)"))
}

fn sigma2_identity() -> Outcome {
    let mut rng = rng_for(2, &[]);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for _ in 0..1000 {
        let (p1, p0, q1, q0) = (rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5));
        let theta: f64 = rng.gen_range(-3.0..3.0);
        let c = MarginalCounts {
            n: 1000,
            p_d1e: p1,
            p_d0e: p0,
            p_yo: vec![q0, q1],
            p_ydo: None,
            p_cell: None,
        };
        // Δᵉ and Δᵒ written out per exclusive unit type.
        let types = [
            (UnitRecord::exp(1, vec![0.0]), 1.0 / p1, 0.0),
            (UnitRecord::exp(0, vec![0.0]), -1.0 / p0, 0.0),
            (UnitRecord::obs(1, vec![0.0]), 0.0, 1.0 / q1),
            (UnitRecord::obs(0, vec![0.0]), 0.0, -1.0 / q0),
        ];
        for (u, de, dobs) in &types {
            let direct = (de - dobs * theta).powi(2);
            let expansion = sigma2_expansion(theta, u, &c);
            worst = worst.max((expansion - direct).abs() / direct.abs().max(f64::MIN_POSITIVE));
            draws += 1;
        }
    }
    verdict(worst <= 1e-12, format!("{draws} unit draws over 4 types, max rel err = {worst:.2e} (tol 1e-12)"))
}

fn monte_carlo() -> Outcome {
    let taus = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let ns = [1000usize, 2000, 3000];
    let reps = 500u64;
    let mut lines = Vec::new();
    let mut pass = true;
    for &n in &ns {
        for (ti, &tau) in taus.iter().enumerate() {
            let res: Vec<(f64, f64, f64)> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let seed = r + 1_000_000 * (ti as u64 + 1) + 10_000_000 * n as u64;
                    let g = gen_calibrated(&DgpSpec::calibrated(tau, n, seed)).unwrap();
                    let cfg = no_inference(seed);
                    let ours = estimate_ate(&g.data, &cfg).map(|e| e.theta_hat).unwrap_or(f64::NAN);
                    let common = common_practice(&g.data, &cfg.predictor).unwrap_or(f64::NAN);
                    (ours, common, g.truth.theta)
                })
                .collect();
            let ok: Vec<_> = res.iter().filter(|r| r.0.is_finite() && r.1.is_finite()).collect();
            let bias = |f: fn(&(f64, f64, f64)) -> f64| mean(&ok.iter().map(|r| f(r) - r.2).collect::<Vec<_>>());
            let rmse = |f: fn(&(f64, f64, f64)) -> f64| mean(&ok.iter().map(|r| (f(r) - r.2).powi(2)).collect::<Vec<_>>()).sqrt();
            let (bo, bc) = (bias(|r| r.0), bias(|r| r.1));
            let (ro, rc) = (rmse(|r| r.0), rmse(|r| r.1));
            if n == 3000 {
                let a = bo.abs() <= 0.03;
                let b = bc.abs() > bo.abs();
                let c = tau < 0.2 || ro < rc;
                pass &= a && b && c && ok.len() as u64 == reps;
            }
            lines.push(format!(
                "      n={n:>4} tau={tau:.1} ok={:>3} bias ours {bo:+.4} common {bc:+.4} | rmse ours {ro:.4} common {rc:.4}",
                ok.len()
            ));
        }
    }
    verdict(pass, format!("6 tau x 3 n x {reps} reps; at n=3000 |bias ours| <= 0.03, |bias common| > |bias ours|, rmse ours < common for tau >= 0.2\n{}", lines.join("\n")))
}

/// Saturated common practice: Pr(Y=1 | R=r, o) by counting, averaged by arm.
fn saturated_common(ds: &Dataset) -> f64 {
    let cell = |r: f64| {
        let ys: Vec<f64> = ds.units.iter().filter(|u| u.sample.in_o() && u.rsv[0] == r).filter_map(|u| u.outcome).map(|y| y as f64).collect();
        mean(&ys)
    };
    let (m0, m1) = (cell(0.0), cell(1.0));
    surrogate_estimate_by(ds, |r| if r[0] == 1.0 { m1 } else { m0 }).unwrap()
}

fn adversarial() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (a, b) in [(0.6, 0.2), (0.2, 0.6), (0.5, 0.5)] {
        let closed = (a - b) / (a + 1.0);
        let o = population_oracle(&adversarial_finite(a, b)).unwrap();
        let pop = o.theta_tilde - o.theta_scalar_direct;
        let g = gen_adversarial(&DgpSpec::adversarial(a, b, 100_000, 4)).unwrap();
        let emp = saturated_common(&g.data) - g.truth.theta;
        let logistic = common_practice(&g.data, &Default::default()).unwrap() - g.truth.theta;
        let ok = (emp - closed).abs() <= 0.01 && (pop - closed).abs() <= 1e-10;
        pass &= ok;
        parts.push(format!("(a,b)=({a},{b}) closed {closed:+.4} empirical {emp:+.4} [clipped logistic {logistic:+.4}] oracle err {:.1e}", (pop - closed).abs()));
    }
    verdict(pass, parts.join("; "))
}

fn table_relation() -> Outcome {
    // R|Y in the experiment has slope 0.53; in the observational sample R = Y.
    let (p0, p1) = (0.30, 0.45);
    let (r_y0, r_y1) = (0.20, 0.73);
    let beta = r_y1 - r_y0;
    let theta = p1 - p0;
    let reps = 200u64;
    let n = 20_000;
    let draws: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(5, &[rep]);
            let mut units = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let d = rng.gen_bool(0.5) as u8;
                let y = rng.gen_bool(if d == 1 { p1 } else { p0 });
                let r = rng.gen_bool(if y { r_y1 } else { r_y0 }) as u8 as f64;
                units.push(UnitRecord::exp(d, vec![r]));
                let yo = rng.gen_bool(0.4);
                units.push(UnitRecord::obs(yo as usize, vec![yo as u8 as f64]));
            }
            saturated_common(&Dataset::new(units, 2, Mode::Incomplete))
        })
        .collect();
    let m = mean(&draws);
    let mc_err = sd(&draws) / (reps as f64).sqrt();
    let anchor = (0.530f64 * 0.148 - 0.079).abs();
    let pass = (m - beta * theta).abs() <= 3.0 * mc_err && anchor < 1e-3;
    verdict(
        pass,
        format!("mean theta_tilde {m:.5} vs beta*theta {:.5} (3 MC se = {:.5}); anchor |0.530*0.148 - 0.079| = {anchor:.4}", beta * theta, 3.0 * mc_err),
    )
}

fn coverage() -> Outcome {
    let reps = 500u64;
    let hits: Vec<bool> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let g = gen_calibrated(&DgpSpec::calibrated(0.2, 2000, 60_000 + r)).unwrap();
            match estimate_ate(&g.data, &bootstrap(r, 500)) {
                Ok(e) => e.ci_low <= g.truth.theta && g.truth.theta <= e.ci_high,
                Err(_) => false,
            }
        })
        .collect();
    let c = rate(&hits);
    verdict((0.85..=0.94).contains(&c), format!("90% bootstrap CI (B=500) coverage {c:.3} over {reps} reps at n=2000 (target [0.85, 0.94])"))
}

fn scale_invariance() -> Outcome {
    let g = gen_calibrated(&DgpSpec::calibrated(0.3, 1000, 7)).unwrap();
    let cfg = no_inference(7);
    let folds = split_folds(&g.data, 2, 7).unwrap();
    let cf = CrossFit::fit(&g.data, &[Moment::Contrast], folds, &cfg).unwrap();
    let samples = cf.identity_samples();
    let base = cf.evaluate(&g.data, &samples, true).unwrap().theta[0][0];
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [-2.0, 0.5, 10.0] {
        let scaled: Vec<Vec<Vec<f64>>> = cf.h.iter().map(|m| m.iter().map(|h| h.iter().map(|x| a * x).collect()).collect()).collect();
        let t = cf.evaluate_with(&g.data, &samples, true, Some(&scaled)).unwrap().theta[0][0];
        pass &= t.to_bits() == base.to_bits();
        parts.push(format!("a={a}: {}", if t.to_bits() == base.to_bits() { "identical" } else { "differs" }));
    }
    verdict(pass, format!("theta_hat {base:.17e}; {}", parts.join(", ")))
}

fn discretization() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for eps in [0.2, 0.1, 0.05] {
        let spec = BinningSpec::new(0.0, 1.0, eps).unwrap();
        let o = population_oracle(&binned_population(&spec)).unwrap();
        let gap = (o.theta_scalar_ratio - uniform_pair::EFFECT).abs();
        let routes = (o.theta_scalar_ratio - o.theta_scalar_direct).abs();
        pass &= gap <= 2.0 * eps && routes <= 1e-10;
        parts.push(format!("eps={eps}: |theta(eps) - theta| = {gap:.4} <= {:.2}", 2.0 * eps));
    }
    verdict(pass, parts.join("; "))
}

fn quasi_experimental() -> Outcome {
    let reps = 100u64;
    let lates: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let spec = DgpSpec {
                kind: DgpKind::Iv,
                n: 5000,
                seed: 90_000 + r,
                iv_effect: 0.3,
                ..Default::default()
            };
            let g = gen_iv(&spec).unwrap();
            iv_late(&g.data, &no_inference(r), DEFAULT_WEAK_FLOOR).map(|x| x.late).unwrap_or(f64::NAN)
        })
        .collect();
    let atts: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let spec = DgpSpec {
                kind: DgpKind::Did,
                n: 5000,
                seed: 95_000 + r,
                did_effect: 0.2,
                ..Default::default()
            };
            let g = gen_did(&spec).unwrap();
            did_att(g.panel.as_ref().unwrap(), &no_inference(r)).map(|x| x.att).unwrap_or(f64::NAN)
        })
        .collect();
    let (ml, ma) = (mean(&lates), mean(&atts));
    let pass = (ml - 0.3).abs() <= 0.05 && (ma - 0.2).abs() <= 0.05;
    verdict(pass, format!("mean LATE {ml:.4} (truth 0.3), mean ATT {ma:.4} (truth 0.2) over {reps} reps at n=5000; tol 0.05"))
}

fn diagnostics_calibration() -> Outcome {
    let reps = 500u64;
    let n = 2000;
    let relevant: Vec<bool> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let spec = DgpSpec {
                signal_shift: 0.0,
                ..DgpSpec::calibrated(0.2, n, 70_000 + r)
            };
            let g = gen_calibrated(&spec).unwrap();
            relevance_test(&g.data, &bootstrap(r, 200)).map(|x| !x.weak).unwrap_or(false)
        })
        .collect();
    let spec_rate = |shift: f64, base: u64| -> f64 {
        let rejections: Vec<bool> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let spec = DgpSpec {
                    obs_fraction: 0.5,
                    obs_shift: shift,
                    ..DgpSpec::calibrated(0.2, n, base + r)
                };
                let g = gen_calibrated(&spec).unwrap();
                specification_test(&g.data, &RepChoice::Learned, &RepChoice::Naive(NaiveSpec::PredY), &bootstrap(r, 200))
                    .map(|t| t.p_value < 0.10)
                    .unwrap_or(false)
            })
            .collect();
        rate(&rejections)
    };
    let size_rel = rate(&relevant);
    let size_spec = spec_rate(0.0, 80_000);
    let power_spec = spec_rate(2.0, 85_000);
    let pass = (0.06..=0.14).contains(&size_rel) && (0.06..=0.14).contains(&size_spec) && power_spec > 0.5;
    verdict(
        pass,
        format!("relevance size {size_rel:.3} (pure-noise RSV); spec-test size {size_spec:.3}, power {power_spec:.3} under a 2-sd shift; alpha 0.10, {reps} reps, n={n}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "oracle ratio identity", oracle_identity),
        (2, "variance expansion identity", sigma2_identity),
        (3, "Monte Carlo bias and RMSE", monte_carlo),
        (4, "adversarial bias closed form", adversarial),
        (5, "attenuation relation", table_relation),
        (6, "bootstrap coverage", coverage),
        (7, "scale invariance", scale_invariance),
        (8, "discretization bound", discretization),
        (9, "IV and DiD recovery", quasi_experimental),
        (10, "diagnostics calibration", diagnostics_calibration),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] criterion {id:>2} {name} ({:.1}s): {}", t0.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance failures: {failed:?}");
        std::process::exit(1);
    }
}
