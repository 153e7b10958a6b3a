//! RSV relevance, the two-representation specification test, and stability
//! density exports.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, Dataset, SampleTag};
use crate::error::{Error, Result};
use crate::estimate::{ate_moments, bootstrap_draws, check_valid, effect_vector, CrossFit, EstimateConfig, Inference, RepChoice};
use crate::util::{derive_seed, fmt17, mean, rng_for, sd, std_normal_cdf, z_two_sided};

/// Replicates used when the configuration does not request a bootstrap.
pub const DEFAULT_DIAGNOSTIC_REPLICATIONS: usize = 200;
/// Cells with fewer units are skipped.
pub const MIN_CELL_UNITS: usize = 20;
pub const GRID_POINTS: usize = 256;
pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 1000;
/// Pooled-resample draws for the density-gap noise band.
pub const GAP_NULL_DRAWS: usize = 200;

fn plan(cfg: &EstimateConfig) -> (usize, bool) {
    match cfg.inference {
        Inference::Bootstrap { replications, cluster, .. } => (replications, cluster),
        _ => (DEFAULT_DIAGNOSTIC_REPLICATIONS, true),
    }
}

/// Relevance on one held-out fold; the interval is conditional on that fold's Ĥ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRelevance {
    pub fold: usize,
    /// Mean of Ĥ·Δ̂ᵒ over the fold.
    pub stat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The interval covers zero.
    pub weak: bool,
    pub bootstrap_failed: usize,
}

/// Per-fold relevance; the verdict is fold 0's. Fold statistics share their
/// data through the crossed fits, so they are not pooled into one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub stat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub weak: bool,
    pub folds: Vec<FoldRelevance>,
}

fn only_fold(samples: Vec<Vec<usize>>, fold: usize) -> Vec<Vec<usize>> {
    samples.into_iter().enumerate().map(|(f, s)| if f == fold { s } else { Vec::new() }).collect()
}

/// Relevance of a fitted cross-fit on one test fold, with a bootstrap interval.
pub fn relevance_on_fold(ds: &Dataset, cf: &CrossFit, fold: usize, cfg: &EstimateConfig) -> Result<FoldRelevance> {
    if fold >= cf.n_folds {
        return Err(Error::InvalidSpec(format!("fold {fold} out of range for {} folds", cf.n_folds)));
    }
    let stat = cf.relevance(ds, &only_fold(cf.identity_samples(), fold), true)?;
    let (b, cluster) = plan(cfg);
    let draws = bootstrap_draws(
        b,
        derive_seed(cfg.seed, &[0x2E1, fold as u64]),
        |rng| only_fold(cf.resample(ds, cluster, rng), fold),
        |s| Ok(vec![cf.relevance(ds, s, false)?]),
    );
    let se = draws.se().first().copied().unwrap_or(f64::NAN);
    let z = z_two_sided(cfg.alpha);
    let (ci_low, ci_high) = (stat - z * se, stat + z * se);
    Ok(FoldRelevance {
        fold,
        stat,
        se,
        ci_low,
        ci_high,
        weak: !(ci_low > 0.0 || ci_high < 0.0),
        bootstrap_failed: draws.failed,
    })
}

pub fn relevance_from_fit(ds: &Dataset, cf: &CrossFit, cfg: &EstimateConfig) -> Result<RelevanceResult> {
    let folds = (0..cf.n_folds).map(|f| relevance_on_fold(ds, cf, f, cfg)).collect::<Result<Vec<_>>>()?;
    let head = &folds[0];
    Ok(RelevanceResult {
        stat: head.stat,
        ci_low: head.ci_low,
        ci_high: head.ci_high,
        weak: head.weak,
        folds,
    })
}

pub fn relevance_test(ds: &Dataset, cfg: &EstimateConfig) -> Result<RelevanceResult> {
    check_valid(ds)?;
    let folds = split_folds(ds, cfg.n_folds, cfg.seed)?;
    let cf = CrossFit::fit(ds, &ate_moments(ds.mode)?, folds, cfg)?;
    relevance_from_fit(ds, &cf, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecTest {
    pub theta_a: f64,
    pub theta_b: f64,
    pub diff: f64,
    pub diff_se: f64,
    pub p_value: f64,
    pub bootstrap_failed: usize,
}

/// Effect estimates from two representations on the same folds, with a paired
/// bootstrap of their difference.
pub fn specification_test(ds: &Dataset, rep_a: &RepChoice, rep_b: &RepChoice, cfg: &EstimateConfig) -> Result<SpecTest> {
    check_valid(ds)?;
    let moments = ate_moments(ds.mode)?;
    let folds = split_folds(ds, cfg.n_folds, cfg.seed)?;
    let cf_a = CrossFit::fit_with(ds, &moments, folds.clone(), cfg, rep_a)?;
    let cf_b = CrossFit::fit_with(ds, &moments, folds, cfg, rep_b)?;
    spec_test_from_fits(ds, &cf_a, &cf_b, cfg)
}

fn scalar_effect(ds: &Dataset, cf: &CrossFit, samples: &[Vec<usize>], exact: bool) -> Result<f64> {
    let a = cf.evaluate(ds, samples, exact)?;
    Ok(cf.coding.reduce(&ds.outcome_values, &effect_vector(ds.mode, &a.theta)))
}

pub fn spec_test_from_fits(ds: &Dataset, cf_a: &CrossFit, cf_b: &CrossFit, cfg: &EstimateConfig) -> Result<SpecTest> {
    let samples = cf_a.identity_samples();
    let theta_a = scalar_effect(ds, cf_a, &samples, true).map_err(|e| e.with_context("representation A"))?;
    let theta_b = scalar_effect(ds, cf_b, &samples, true).map_err(|e| e.with_context("representation B"))?;
    let diff = theta_a - theta_b;
    let (b, cluster) = plan(cfg);
    let draws = bootstrap_draws(
        b,
        derive_seed(cfg.seed, &[0x5BEC]),
        |rng| cf_a.resample(ds, cluster, rng),
        |s| Ok(vec![scalar_effect(ds, cf_a, s, false)? - scalar_effect(ds, cf_b, s, false)?]),
    );
    if !draws.reliable() {
        return Err(Error::DegenerateBootstrap {
            failed: draws.failed,
            total: draws.total,
        });
    }
    let diff_se = draws.se()[0];
    let p_value = if diff == 0.0 {
        1.0
    } else {
        2.0 * (1.0 - std_normal_cdf((diff / diff_se).abs()))
    };
    Ok(SpecTest {
        theta_a,
        theta_b,
        diff,
        diff_se,
        p_value,
        bootstrap_failed: draws.failed,
    })
}

/// Leading eigenvector of a symmetric matrix by power iteration, largest loading positive.
pub fn first_principal_component(cov: &[Vec<f64>]) -> Vec<f64> {
    let p = cov.len();
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    for _ in 0..POWER_MAX_ITER {
        let mut w: Vec<f64> = (0..p).map(|i| (0..p).map(|j| cov[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let change = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if change < POWER_TOL {
            break;
        }
    }
    let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Standardized RSV scores on the first principal component.
pub fn pc_scores(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let p = ds.rsv_dim;
    let cols: Vec<Vec<f64>> = (0..p).map(|j| ds.units.iter().map(|u| u.rsv[j]).collect()).collect();
    let mu: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let sdv: Vec<f64> = cols.iter().map(|c| sd(c)).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    let z: Vec<Vec<f64>> = ds.units.iter().map(|u| (0..p).map(|j| (u.rsv[j] - mu[j]) / sdv[j]).collect()).collect();
    let n = z.len().max(2) as f64;
    let mut cov = vec![vec![0.0; p]; p];
    for row in &z {
        for a in 0..p {
            for b in 0..p {
                cov[a][b] += row[a] * row[b] / (n - 1.0);
            }
        }
    }
    let v = first_principal_component(&cov);
    let scores = z.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    (v, scores)
}

fn silverman(x: &[f64]) -> f64 {
    let s = sd(x);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round()) as usize];
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { s.min(iqr) } else { s };
    let bw = 0.9 * spread * (x.len() as f64).powf(-0.2);
    if bw > 0.0 {
        bw
    } else {
        1e-3
    }
}

/// Gaussian KDE on `grid`, normalized to unit trapezoid mass.
pub fn kde(x: &[f64], grid: &[f64]) -> Vec<f64> {
    let bw = silverman(x);
    let norm = 1.0 / (x.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|g| x.iter().map(|xi| (-0.5 * ((g - xi) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect();
    let mass = trapezoid(grid, &dens);
    if mass > 0.0 {
        dens.iter_mut().for_each(|d| *d /= mass);
    }
    dens
}

pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2).zip(f.windows(2)).map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1])).sum()
}

fn ks(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    /// `<sample>_d<d>_y<y>`, sample `e` for BOTH-tagged units and `o` for OBS-tagged units.
    pub cell: String,
    pub n: usize,
    pub density: Vec<f64>,
}

/// Comparison of the two samples within one (d, y) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    pub d: u8,
    pub y: usize,
    pub max_gap: f64,
    /// 95th percentile of the max gap under pooled resampling.
    pub noise_band: f64,
    pub ks: f64,
    /// Asymptotic 5% two-sample KS critical value.
    pub ks_critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub loadings: Vec<f64>,
    pub grid: Vec<f64>,
    pub curves: Vec<StabilityCurve>,
    pub gaps: Vec<GapStat>,
    pub notices: Vec<String>,
}

impl StabilityReport {
    /// Rows `cell,grid_point,density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cell,grid_point,density")?;
        for c in &self.curves {
            for (g, d) in self.grid.iter().zip(&c.density) {
                writeln!(w, "{},{},{}", c.cell, fmt17(*g), fmt17(*d))?;
            }
        }
        Ok(())
    }
}

/// Kernel densities of the first principal component per (sample, d, y) cell.
pub fn stability_export(ds: &Dataset, seed: u64) -> Result<StabilityReport> {
    let (loadings, scores) = pc_scores(ds);
    let mut cells: std::collections::BTreeMap<(char, u8, usize), Vec<f64>> = Default::default();
    for (u, s) in ds.units.iter().zip(&scores) {
        let sample = match u.sample {
            SampleTag::Both => 'e',
            SampleTag::Obs => 'o',
            SampleTag::Exp => continue,
        };
        if let Some(y) = u.outcome {
            cells.entry((sample, u.treatment.unwrap_or(0), y)).or_default().push(*s);
        }
    }
    let mut notices = Vec::new();
    cells.retain(|(s, d, y), v| {
        if v.len() < MIN_CELL_UNITS {
            let e = Error::InsufficientCell {
                cell: format!("{s}_d{d}_y{y}"),
                count: v.len(),
            };
            notices.push(format!("{}: {e}", e.name()));
            false
        } else {
            true
        }
    });
    let all: Vec<f64> = cells.values().flatten().copied().collect();
    let (lo, hi) = if all.is_empty() {
        (-1.0, 1.0)
    } else {
        let pad = 3.0 * cells.values().map(|v| silverman(v)).fold(0.0, f64::max);
        (all.iter().copied().fold(f64::INFINITY, f64::min) - pad, all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad)
    };
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).collect();
    let curves: Vec<StabilityCurve> = cells
        .par_iter()
        .map(|((s, d, y), v)| StabilityCurve {
            cell: format!("{s}_d{d}_y{y}"),
            n: v.len(),
            density: kde(v, &grid),
        })
        .collect();
    let pairs: Vec<(u8, usize)> = cells.keys().filter(|(s, _, _)| *s == 'e').map(|&(_, d, y)| (d, y)).filter(|&(d, y)| cells.contains_key(&('o', d, y))).collect();
    if pairs.is_empty() {
        notices.push("InsufficientCell: no (d, y) cell has enough labeled units in both samples".into());
    }
    let gaps = pairs
        .par_iter()
        .map(|&(d, y)| {
            let a = &cells[&('e', d, y)];
            let b = &cells[&('o', d, y)];
            let gap = |x: &[f64], z: &[f64]| kde(x, &grid).iter().zip(kde(z, &grid)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let mut rng = rng_for(seed, &[0x57AB, d as u64, y as u64]);
            let mut null: Vec<f64> = (0..GAP_NULL_DRAWS)
                .map(|_| {
                    let x: Vec<f64> = (0..a.len()).map(|_| pooled[rng.gen_range(0..pooled.len())]).collect();
                    let z: Vec<f64> = (0..b.len()).map(|_| pooled[rng.gen_range(0..pooled.len())]).collect();
                    gap(&x, &z)
                })
                .collect();
            null.sort_by(f64::total_cmp);
            let (na, nb) = (a.len() as f64, b.len() as f64);
            GapStat {
                d,
                y,
                max_gap: gap(a, b),
                noise_band: null[((0.95 * (null.len() - 1) as f64).round()) as usize],
                ks: ks(a, b),
                ks_critical: 1.358 * ((na + nb) / (na * nb)).sqrt(),
            }
        })
        .collect();
    Ok(StabilityReport {
        loadings,
        grid,
        curves,
        gaps,
        notices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub relevance: Option<RelevanceResult>,
    pub spec_test: Option<SpecTest>,
    pub stability: Option<StabilityReport>,
}
