//! Cross-fitted ratio estimation, aggregation, and inference.
//!
//! [`CrossFit`] learns one representation per (fold, stratum, moment) on the
//! complement of each fold and freezes Ĥ on the fold's units. Evaluating it on
//! a set of per-fold unit samples recounts marginals on those samples and
//! returns the fold-size-weighted, stratum-weighted moment estimates. Point
//! estimates evaluate the original folds; bootstrap replicates evaluate
//! resampled folds.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fold_members, split_folds, validate, Dataset, Mode, UnitRecord};
use crate::error::{Error, Result};
use crate::exact::{exact_ratio, EventSum};
use crate::moments::{MarginalCounts, Moment, OutcomeCoding};
use crate::predict::{fit_predictors, PredictorConfig, PredictorKind, LOGISTIC_PENALTY_PER_UNIT, STUMP_LEARNERS};
use crate::represent::{learn_representation, naive_representation, NaiveSpec, RepresentConfig};
use crate::util::{derive_seed, mean, rng_for, sd, z_two_sided};

/// Share of failed bootstrap replicates above which the interval is unreliable.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Inference {
    None,
    Analytic,
    Bootstrap {
        replications: usize,
        /// Resample clusters instead of units; ignored without cluster ids.
        cluster: bool,
        /// Refit the whole pipeline on each resample instead of freezing Ĥ.
        whole_pipeline: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub predictor: PredictorConfig,
    pub represent: RepresentConfig,
    /// IrrelevantRSV threshold, relative to sd(Ĥ)·sd(Δ̂ᵒ)/√n.
    pub irrelevance_rel: f64,
    pub reference: Option<usize>,
    /// `None` stratifies whenever a covariate is present.
    pub stratify: Option<bool>,
    pub alpha: f64,
    pub inference: Inference,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            n_folds: 2,
            seed: 0,
            predictor: PredictorConfig::default(),
            represent: RepresentConfig::default(),
            irrelevance_rel: 1e-3,
            reference: None,
            stratify: None,
            alpha: 0.10,
            inference: Inference::Bootstrap {
                replications: 1000,
                cluster: true,
                whole_pipeline: false,
            },
        }
    }
}

/// Sums entering the ratio for one moment on one unit set.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioParts {
    pub n: usize,
    /// Σ Ĥ Δ̂ᵉ, length m.
    pub numerator: Vec<f64>,
    /// Σ Ĥ Δ̂ᵒᵀ, row-major m × m.
    pub gram: Vec<f64>,
    pub tolerance: f64,
}

impl RatioParts {
    /// Mean of Ĥ·Δ̂ᵒ (first component); the relevance statistic.
    pub fn relevance(&self) -> f64 {
        self.gram[0] / self.n as f64
    }
}

pub fn ratio_parts(
    units: &[&UnitRecord],
    h: &[&[f64]],
    counts: &MarginalCounts,
    moment: Moment,
    coding: &OutcomeCoding,
    irrelevance_rel: f64,
) -> RatioParts {
    let m = coding.dim();
    let n = units.len();
    let mut numerator = vec![0.0; m];
    let mut gram = vec![0.0; m * m];
    let mut abs_mass = 0.0;
    let mut d0 = Vec::with_capacity(n);
    for (u, hv) in units.iter().zip(h) {
        let v = moment.variation(u, counts, coding);
        for a in 0..m {
            numerator[a] += hv[a] * v.delta_e;
            for b in 0..m {
                gram[a * m + b] += hv[a] * v.delta_o[b];
            }
        }
        abs_mass += (hv[0] * v.delta_o[0]).abs();
        d0.push(v.delta_o[0]);
    }
    let h0: Vec<f64> = h.iter().map(|v| v[0]).collect();
    let nf = n as f64;
    let scale = irrelevance_rel * sd(&h0) * sd(&d0) * (1.0 / nf).sqrt();
    let tolerance = scale.max(64.0 * f64::EPSILON * abs_mass / nf);
    RatioParts {
        n,
        numerator,
        gram,
        tolerance,
    }
}

fn irrelevant(den: f64, tol: f64) -> Error {
    Error::IrrelevantRsv {
        denominator: den,
        tolerance: tol,
        context: String::new(),
    }
}

/// Solves the ratio from its sums (floating point).
pub fn solve_parts(p: &RatioParts) -> Result<Vec<f64>> {
    let m = p.numerator.len();
    let nf = p.n as f64;
    if m == 1 {
        let den = p.gram[0] / nf;
        if !(den.abs() > p.tolerance) {
            return Err(irrelevant(den, p.tolerance));
        }
        return Ok(vec![p.numerator[0] / p.gram[0]]);
    }
    let g = DMatrix::from_row_slice(m, m, &p.gram) / nf;
    let sv = g.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > p.tolerance) {
        return Err(irrelevant(smin, p.tolerance));
    }
    let b = DVector::from_column_slice(&p.numerator) / nf;
    g.lu()
        .solve(&b)
        .map(|s| s.iter().copied().collect())
        .ok_or_else(|| irrelevant(0.0, p.tolerance))
}

/// Event sums of Σ Ĥ Δ̂ᵉ and of Σ Ĥ Δ̂ᵒ (first component), each up to the factor n.
fn scalar_events(units: &[&UnitRecord], h: &[&[f64]], moment: Moment, coding: &OutcomeCoding) -> (Vec<EventSum>, Vec<EventSum>) {
    let counts_and_values = |fires: &dyn Fn(&UnitRecord) -> bool| {
        let vals: Vec<f64> = units.iter().zip(h).filter(|(u, _)| fires(u)).map(|(_, v)| v[0]).collect();
        (vals.len() as u64, vals)
    };
    // Counts are over the same unit set, so the common factor n cancels.
    let probe = MarginalCounts {
        n: 0,
        p_d1e: 1.0,
        p_d0e: 1.0,
        p_yo: vec![1.0; coding.k],
        p_ydo: Some(vec![[1.0; 2]; coding.k]),
        p_cell: Some([1.0; 4]),
    };
    let o_event = |y: usize| move |u: &UnitRecord| moment.o_event(u) == Some(y);
    let mut num = Vec::new();
    for t in moment.e_terms(&probe) {
        let (c, v) = counts_and_values(&|u| t.event.fires(u));
        num.push(EventSum {
            sign: t.sign as i64,
            count: c,
            values: v,
        });
    }
    let r = coding.reference;
    let (cr, vr) = counts_and_values(&o_event(r));
    if moment.arm_level() {
        num.push(EventSum {
            sign: -1,
            count: cr,
            values: vr.clone(),
        });
    }
    let j = coding.components()[0];
    let (cj, vj) = counts_and_values(&o_event(j));
    let den = vec![
        EventSum {
            sign: 1,
            count: cj,
            values: vj,
        },
        EventSum {
            sign: -1,
            count: cr,
            values: vr,
        },
    ];
    (num, den)
}

/// Exact evaluation of the scalar ratio Σ Ĥ Δ̂ᵉ / Σ Ĥ Δ̂ᵒ.
fn exact_scalar(units: &[&UnitRecord], h: &[&[f64]], moment: Moment, coding: &OutcomeCoding) -> Option<f64> {
    let (num, den) = scalar_events(units, h, moment, coding);
    if num.iter().chain(&den).any(|e| e.count == 0) {
        return None;
    }
    exact_ratio(&num, &den)
}

/// Mean of Ĥ·Δ̂ᵒ (first component) on one unit set: the ratio's denominator over n.
///
/// The exact route rounds once, so a constant Ĥ gives exactly zero.
pub fn relevance_stat(units: &[&UnitRecord], h: &[&[f64]], counts: &MarginalCounts, moment: Moment, coding: &OutcomeCoding, exact: bool) -> f64 {
    if exact {
        let (_, den) = scalar_events(units, h, moment, coding);
        if den.iter().all(|e| e.count > 0) {
            let one = [EventSum {
                sign: 1,
                count: 1,
                values: vec![1.0],
            }];
            if let Some(v) = exact_ratio(&den, &one) {
                return v;
            }
        }
    }
    ratio_parts(units, h, counts, moment, coding, 0.0).relevance()
}

/// θ̂ = [Σ Ĥ Δ̂ᵒᵀ]⁻¹ Σ Ĥ Δ̂ᵉ on one unit set; scalar ratios are evaluated exactly.
pub fn ratio_estimate(
    units: &[&UnitRecord],
    h: &[&[f64]],
    counts: &MarginalCounts,
    moment: Moment,
    coding: &OutcomeCoding,
    irrelevance_rel: f64,
) -> Result<Vec<f64>> {
    let parts = ratio_parts(units, h, counts, moment, coding, irrelevance_rel);
    let approx = solve_parts(&parts)?;
    if coding.dim() == 1 {
        if let Some(t) = exact_scalar(units, h, moment, coding) {
            return Ok(vec![t]);
        }
        return Err(irrelevant(0.0, parts.tolerance));
    }
    Ok(approx)
}

/// Representation family fitted per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RepChoice {
    /// Plug-in efficient representation.
    Learned,
    Naive(NaiveSpec),
}

/// Representations for every (fold, stratum, moment), frozen on the fold's units.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub moments: Vec<Moment>,
    pub coding: OutcomeCoding,
    pub mode: Mode,
    pub n_folds: usize,
    /// Fold index per unit.
    pub folds: Vec<usize>,
    pub strata: Vec<String>,
    /// Stratum index per unit.
    pub stratum_of: Vec<usize>,
    /// Ĥ per moment per unit.
    pub h: Vec<Vec<Vec<f64>>>,
    /// Initial estimates per (fold, stratum) per moment.
    pub theta_init: BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    pub irrelevance_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub fold: usize,
    pub stratum: String,
    pub n: usize,
    /// Per moment.
    pub theta: Vec<Vec<f64>>,
    /// Mean Ĥ·Δ̂ᵒ per moment.
    pub relevance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumEstimate {
    pub stratum: String,
    pub n: usize,
    /// Experimental-sample share used as the aggregation weight.
    pub weight: f64,
    pub theta: Vec<Vec<f64>>,
}

/// Moment estimates aggregated over folds and strata.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub theta: Vec<Vec<f64>>,
    pub relevance: Vec<f64>,
    pub strata: Vec<StratumEstimate>,
    pub cells: Vec<CellEstimate>,
}

pub fn resolve_stratify(ds: &Dataset, flag: Option<bool>) -> bool {
    flag.unwrap_or_else(|| ds.units.iter().any(|u| u.covariate.is_some()))
}

impl CrossFit {
    pub fn fit(ds: &Dataset, moments: &[Moment], folds: Vec<usize>, cfg: &EstimateConfig) -> Result<CrossFit> {
        CrossFit::fit_with(ds, moments, folds, cfg, &RepChoice::Learned)
    }

    /// As [`CrossFit::fit`] with a chosen representation family.
    pub fn fit_with(ds: &Dataset, moments: &[Moment], folds: Vec<usize>, cfg: &EstimateConfig, rep: &RepChoice) -> Result<CrossFit> {
        if let RepChoice::Naive(NaiveSpec::Custom(_)) = rep {
            return Err(Error::Unsupported("custom representations are not cross-fitted".into()));
        }
        let coding = OutcomeCoding::new(ds.k_outcomes, cfg.reference)?;
        let stratify = resolve_stratify(ds, cfg.stratify);
        let strata: Vec<String> = if stratify {
            let mut s: Vec<String> = ds.units.iter().map(|u| u.covariate.clone().unwrap_or_default()).collect();
            s.sort();
            s.dedup();
            s
        } else {
            vec![String::new()]
        };
        let stratum_of: Vec<usize> = ds
            .units
            .iter()
            .map(|u| {
                if stratify {
                    let key = u.covariate.clone().unwrap_or_default();
                    strata.binary_search(&key).expect("known stratum")
                } else {
                    0
                }
            })
            .collect();
        let n_folds = folds.iter().copied().max().map_or(0, |m| m + 1);
        let m = coding.dim();
        let mut h = vec![vec![vec![0.0; m]; ds.len()]; moments.len()];
        let mut theta_init = BTreeMap::new();
        let jobs: Vec<(usize, usize)> = (0..n_folds).flat_map(|f| (0..strata.len()).map(move |s| (f, s))).collect();
        let fitted: Vec<Result<((usize, usize), Vec<Vec<f64>>, Vec<(usize, Vec<Vec<f64>>)>)>> = jobs
            .par_iter()
            .map(|&(f, s)| {
                let ctx = if stratify {
                    format!("fold {f}, stratum {:?}", strata[s])
                } else {
                    format!("fold {f}")
                };
                let train: Vec<&UnitRecord> = (0..ds.len())
                    .filter(|&i| folds[i] != f && stratum_of[i] == s)
                    .map(|i| &ds.units[i])
                    .collect();
                let test: Vec<usize> = (0..ds.len()).filter(|&i| folds[i] == f && stratum_of[i] == s).collect();
                if test.is_empty() {
                    return Ok(((f, s), Vec::new(), Vec::new()));
                }
                let inner = || -> Result<_> {
                    let counts = MarginalCounts::from_units(train.iter().copied(), ds.k_outcomes, ds.mode)?;
                    let pcfg = PredictorConfig {
                        seed: derive_seed(cfg.predictor.seed ^ cfg.seed, &[f as u64, s as u64]),
                        ..cfg.predictor.clone()
                    };
                    let ps = fit_predictors(&train, ds.k_outcomes, ds.mode, &pcfg)?;
                    let mut inits = Vec::new();
                    let mut values: Vec<(usize, Vec<Vec<f64>>)> = test.iter().map(|&i| (i, Vec::new())).collect();
                    for &mo in moments {
                        match rep {
                            RepChoice::Learned => {
                                let fit = learn_representation(&train, mo, coding, ps.clone(), counts.clone(), &cfg.represent)?;
                                inits.push(fit.theta_init.clone());
                                for (i, slot) in values.iter_mut() {
                                    slot.push(fit.representation.h(&ds.units[*i])?);
                                }
                            }
                            RepChoice::Naive(spec) => {
                                let test_units: Vec<&UnitRecord> = test.iter().map(|&i| &ds.units[i]).collect();
                                let hs = naive_representation(spec, &ps, &test_units, &coding)?;
                                inits.push(Vec::new());
                                for ((_, slot), hv) in values.iter_mut().zip(hs) {
                                    slot.push(hv);
                                }
                            }
                        }
                    }
                    Ok(((f, s), inits, values))
                };
                inner().map_err(|e| e.with_context(&ctx))
            })
            .collect();
        for r in fitted {
            let (key, inits, values) = r?;
            if inits.is_empty() {
                continue;
            }
            theta_init.insert(key, inits);
            for (i, per_moment) in values {
                for (j, hv) in per_moment.into_iter().enumerate() {
                    h[j][i] = hv;
                }
            }
        }
        Ok(CrossFit {
            moments: moments.to_vec(),
            coding,
            mode: ds.mode,
            n_folds,
            folds,
            strata,
            stratum_of,
            h,
            theta_init,
            irrelevance_rel: cfg.irrelevance_rel,
        })
    }

    /// The original folds as samples.
    pub fn identity_samples(&self) -> Vec<Vec<usize>> {
        fold_members(&self.folds, self.n_folds)
    }

    /// Estimates on per-fold unit samples (indices may repeat). `exact` selects
    /// exact scalar ratios.
    pub fn evaluate(&self, ds: &Dataset, samples: &[Vec<usize>], exact: bool) -> Result<Aggregate> {
        self.evaluate_with(ds, samples, exact, None)
    }

    /// As [`CrossFit::evaluate`], with Ĥ optionally replaced per unit.
    pub fn evaluate_with(&self, ds: &Dataset, samples: &[Vec<usize>], exact: bool, h_override: Option<&[Vec<Vec<f64>>]>) -> Result<Aggregate> {
        self.evaluate_inner(ds, samples, exact, h_override, true)
    }

    /// Size-weighted relevance of the first moment; never solves the ratio.
    pub fn relevance(&self, ds: &Dataset, samples: &[Vec<usize>], exact: bool) -> Result<f64> {
        Ok(self.evaluate_inner(ds, samples, exact, None, false)?.relevance[0])
    }

    fn evaluate_inner(&self, ds: &Dataset, samples: &[Vec<usize>], exact: bool, h_override: Option<&[Vec<Vec<f64>>]>, want_theta: bool) -> Result<Aggregate> {
        let h_table = h_override.unwrap_or(&self.h);
        let ns = self.strata.len();
        let nm = self.moments.len();
        let m = self.coding.dim();
        let mut cells = Vec::new();
        for (f, sample) in samples.iter().enumerate() {
            let mut by_stratum: Vec<Vec<usize>> = vec![Vec::new(); ns];
            for &i in sample {
                by_stratum[self.stratum_of[i]].push(i);
            }
            for (s, idx) in by_stratum.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let ctx = || {
                    if ns > 1 {
                        format!("fold {f}, stratum {:?}", self.strata[s])
                    } else {
                        format!("fold {f}")
                    }
                };
                let units: Vec<&UnitRecord> = idx.iter().map(|&i| &ds.units[i]).collect();
                let counts = MarginalCounts::from_units(units.iter().copied(), ds.k_outcomes, ds.mode).map_err(|e| e.with_context(&ctx()))?;
                let mut theta = Vec::with_capacity(nm);
                let mut relevance = Vec::with_capacity(nm);
                for (j, &mo) in self.moments.iter().enumerate() {
                    let h: Vec<&[f64]> = idx.iter().map(|&i| h_table[j][i].as_slice()).collect();
                    relevance.push(relevance_stat(&units, &h, &counts, mo, &self.coding, exact));
                    if !want_theta {
                        theta.push(vec![0.0; m]);
                        continue;
                    }
                    let t = if exact {
                        ratio_estimate(&units, &h, &counts, mo, &self.coding, self.irrelevance_rel)
                    } else {
                        solve_parts(&ratio_parts(&units, &h, &counts, mo, &self.coding, self.irrelevance_rel))
                    }
                    .map_err(|e| e.with_context(&ctx()))?;
                    theta.push(t);
                }
                cells.push(CellEstimate {
                    fold: f,
                    stratum: self.strata[s].clone(),
                    n: idx.len(),
                    theta,
                    relevance,
                });
            }
        }
        // Experimental-sample stratum shares over all sampled units.
        let mut e_count = vec![0usize; ns];
        for sample in samples {
            for &i in sample {
                if ds.units[i].sample.in_e() {
                    e_count[self.stratum_of[i]] += 1;
                }
            }
        }
        let e_total: usize = e_count.iter().sum();
        let mut strata = Vec::new();
        let mut theta = vec![vec![0.0; m]; nm];
        let mut relevance = vec![0.0; nm];
        let n_total: usize = cells.iter().map(|c| c.n).sum();
        for c in &cells {
            for j in 0..nm {
                relevance[j] += c.n as f64 / n_total as f64 * c.relevance[j];
            }
        }
        for s in 0..ns {
            let mine: Vec<&CellEstimate> = cells.iter().filter(|c| c.stratum == self.strata[s]).collect();
            let n_s: usize = mine.iter().map(|c| c.n).sum();
            if n_s == 0 {
                continue;
            }
            let mut ts = vec![vec![0.0; m]; nm];
            for c in &mine {
                let w = c.n as f64 / n_s as f64;
                for j in 0..nm {
                    for a in 0..m {
                        ts[j][a] += w * c.theta[j][a];
                    }
                }
            }
            let weight = if ns == 1 { 1.0 } else { e_count[s] as f64 / e_total as f64 };
            for j in 0..nm {
                for a in 0..m {
                    theta[j][a] += weight * ts[j][a];
                }
            }
            strata.push(StratumEstimate {
                stratum: self.strata[s].clone(),
                n: n_s,
                weight,
                theta: ts,
            });
        }
        Ok(Aggregate {
            theta,
            relevance,
            strata,
            cells,
        })
    }

    /// Resamples groups (clusters or units) with replacement within each fold.
    pub fn resample<R: Rng>(&self, ds: &Dataset, cluster: bool, rng: &mut R) -> Vec<Vec<usize>> {
        let use_clusters = cluster && ds.has_clusters();
        self.identity_samples()
            .into_iter()
            .map(|members| {
                let groups = group_units(ds, &members, use_clusters);
                let mut out = Vec::with_capacity(members.len());
                for _ in 0..groups.len() {
                    out.extend_from_slice(&groups[rng.gen_range(0..groups.len())]);
                }
                out
            })
            .collect()
    }
}

/// Partitions `members` into resampling groups.
pub fn group_units(ds: &Dataset, members: &[usize], by_cluster: bool) -> Vec<Vec<usize>> {
    if !by_cluster {
        return members.iter().map(|&i| vec![i]).collect();
    }
    let mut named: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut singles = Vec::new();
    for &i in members {
        match &ds.units[i].cluster {
            Some(c) => named.entry(c.as_str()).or_default().push(i),
            None => singles.push(vec![i]),
        }
    }
    let mut g: Vec<Vec<usize>> = named.into_values().collect();
    g.extend(singles);
    g
}

/// Successful replicate draws of a vector-valued statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub draws: Vec<Vec<f64>>,
    pub failed: usize,
    pub total: usize,
}

impl BootstrapDraws {
    pub fn reliable(&self) -> bool {
        (self.failed as f64) <= MAX_BOOTSTRAP_FAILURE * self.total as f64 && !self.draws.is_empty()
    }

    /// Standard deviation of each coordinate across successful draws.
    pub fn se(&self) -> Vec<f64> {
        let dim = self.draws.first().map_or(0, |d| d.len());
        (0..dim)
            .map(|a| sd(&self.draws.iter().map(|d| d[a]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Runs `stat` on `replications` resamples; replicate `b` uses its own stream.
pub fn bootstrap_draws<F>(replications: usize, seed: u64, sampler: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> + Sync, stat: F) -> BootstrapDraws
where
    F: Fn(&[Vec<usize>]) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, &[0xB007, b as u64]);
            let samples = sampler(&mut rng);
            stat(&samples).ok().filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    BootstrapDraws {
        draws: results.into_iter().flatten().collect(),
        failed,
        total: replications,
    }
}

/// Bootstrap se and normal interval for a scalar statistic with Ĥ frozen.
pub fn bootstrap_ci(
    ds: &Dataset,
    cf: &CrossFit,
    point: f64,
    replications: usize,
    alpha: f64,
    cluster: bool,
    seed: u64,
    stat: impl Fn(&Aggregate) -> f64 + Sync,
) -> Result<(f64, (f64, f64))> {
    let draws = bootstrap_draws(replications, seed, |rng| cf.resample(ds, cluster, rng), |s| Ok(vec![stat(&cf.evaluate(ds, s, false)?)]));
    if !draws.reliable() {
        return Err(Error::DegenerateBootstrap {
            failed: draws.failed,
            total: draws.total,
        });
    }
    let se = draws.se()[0];
    let z = z_two_sided(alpha);
    Ok((se, (point - z * se, point + z * se)))
}

/// Delta-method ingredients for the binary ratio with estimated counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticVariance {
    pub n: usize,
    pub v_vec: Vec<f64>,
    pub sigma_mat: Vec<Vec<f64>>,
    pub b_moments: Vec<f64>,
    /// Asymptotic variance of √n(θ̂ − θ) with estimated counts.
    pub variance: f64,
    /// Same with counts treated as known.
    pub known_variance: f64,
}

/// Analytic variance on one test unit set.
pub fn analytic_variance(units: &[&UnitRecord], h: &[f64], theta: f64) -> Result<AnalyticVariance> {
    let n = units.len();
    let nf = n as f64;
    let rows: Vec<[f64; 8]> = units
        .iter()
        .zip(h)
        .map(|(u, &hv)| {
            let ind = [
                u.is_arm_e(1) as u8 as f64,
                u.is_arm_e(0) as u8 as f64,
                u.is_outcome_o(1) as u8 as f64,
                u.is_outcome_o(0) as u8 as f64,
            ];
            [ind[0] * hv, ind[1] * hv, ind[2] * hv, ind[3] * hv, ind[0], ind[1], ind[2], ind[3]]
        })
        .collect();
    let mut eb = [0.0; 8];
    for r in &rows {
        for a in 0..8 {
            eb[a] += r[a] / nf;
        }
    }
    if eb[4..].contains(&0.0) {
        return Err(Error::ZeroCount {
            event: "analytic variance cell".into(),
            context: String::new(),
        });
    }
    let mut sigma = vec![vec![0.0; 8]; 8];
    for r in &rows {
        for a in 0..8 {
            for b in 0..8 {
                sigma[a][b] += (r[a] - eb[a]) * (r[b] - eb[b]) / nf;
            }
        }
    }
    let t = theta;
    let v = vec![
        1.0 / eb[4],
        -1.0 / eb[5],
        -t / eb[6],
        t / eb[7],
        -eb[0] / (eb[4] * eb[4]),
        eb[1] / (eb[5] * eb[5]),
        t * eb[2] / (eb[6] * eb[6]),
        -t * eb[3] / (eb[7] * eb[7]),
    ];
    let mut big_v = 0.0;
    for a in 0..8 {
        for b in 0..8 {
            big_v += v[a] * sigma[a][b] * v[b];
        }
    }
    let den = eb[2] / eb[6] - eb[3] / eb[7];
    if den == 0.0 {
        return Err(irrelevant(0.0, 0.0));
    }
    let known: f64 = units
        .iter()
        .zip(h)
        .map(|(u, &hv)| {
            let de = u.is_arm_e(1) as u8 as f64 / eb[4] - u.is_arm_e(0) as u8 as f64 / eb[5];
            let dob = u.is_outcome_o(1) as u8 as f64 / eb[6] - u.is_outcome_o(0) as u8 as f64 / eb[7];
            let r = (de - t * dob) * hv;
            r * r
        })
        .sum::<f64>()
        / nf;
    Ok(AnalyticVariance {
        n,
        v_vec: v,
        sigma_mat: sigma,
        b_moments: eb.to_vec(),
        variance: big_v.max(0.0) / (den * den),
        known_variance: known / (den * den),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSummary {
    pub se: f64,
    pub se_known_counts: f64,
    pub folds: Vec<AnalyticVariance>,
}

/// Fold-combined analytic standard errors for a binary, unstratified contrast fit.
pub fn analytic_summary(ds: &Dataset, cf: &CrossFit, agg: &Aggregate) -> Result<AnalyticSummary> {
    if cf.coding.k != 2 || cf.strata.len() > 1 || cf.moments != [Moment::Contrast] || cf.mode != Mode::Incomplete {
        return Err(Error::Unsupported(
            "analytic variance covers binary, unstratified, incomplete-case runs; use the bootstrap".into(),
        ));
    }
    let n: usize = agg.cells.iter().map(|c| c.n).sum();
    let mut var = 0.0;
    let mut var_known = 0.0;
    let mut folds = Vec::new();
    for (f, members) in cf.identity_samples().iter().enumerate() {
        let cell = agg.cells.iter().find(|c| c.fold == f).expect("fold estimate");
        let units: Vec<&UnitRecord> = members.iter().map(|&i| &ds.units[i]).collect();
        let h: Vec<f64> = members.iter().map(|&i| cf.h[0][i][0]).collect();
        let av = analytic_variance(&units, &h, cell.theta[0][0])?;
        let w = members.len() as f64 / n as f64;
        var += w * w * av.variance / members.len() as f64;
        var_known += w * w * av.known_variance / members.len() as f64;
        folds.push(av);
    }
    Ok(AnalyticSummary {
        se: var.sqrt(),
        se_known_counts: var_known.sqrt(),
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replications: usize,
    pub failed: usize,
    pub reliable: bool,
    pub cluster: bool,
    pub whole_pipeline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub seed: u64,
    pub n_folds: usize,
    pub mode: Mode,
    pub k_outcomes: usize,
    pub reference: usize,
    pub predictor: PredictorKind,
    pub clip: f64,
    pub class_weights: Option<Vec<f64>>,
    pub n_by_tag: BTreeMap<String, usize>,
    pub stratified: bool,
    pub logistic_penalty_per_unit: f64,
    pub knn_neighbors: String,
    pub stump_learners: usize,
    pub sigma_floor_rel: f64,
    pub irrelevance_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: f64,
    pub theta_vec: Vec<f64>,
    /// NaN when no inference was requested.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub inference: String,
    pub per_stratum: Option<Vec<StratumEstimate>>,
    pub per_fold: Vec<CellEstimate>,
    /// Complete mode: per-arm category probabilities μ(0), μ(1).
    pub arm_means: Option<[Vec<f64>; 2]>,
    pub relevance: f64,
    pub analytic: Option<AnalyticSummary>,
    pub bootstrap: Option<BootstrapSummary>,
    pub value_map: Vec<f64>,
    pub discretization_bias_bound: Option<f64>,
    pub meta: EstimateMeta,
}

impl EstimateResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str = "theta_hat,se,ci_low,ci_high,alpha,inference,n_folds,seed,predictor";

    /// One-row summary with 17 significant digits.
    pub fn to_csv_row(&self) -> String {
        use crate::util::fmt17;
        format!(
            "{},{},{},{},{},{},{},{},{:?}",
            fmt17(self.theta_hat),
            fmt17(self.se),
            fmt17(self.ci_low),
            fmt17(self.ci_high),
            fmt17(self.alpha),
            self.inference,
            self.meta.n_folds,
            self.meta.seed,
            self.meta.predictor
        )
        .replace("Logistic", "logistic")
        .replace("Knn", "knn")
        .replace("Stumps", "stumps")
    }
}

/// Moments whose estimates combine into the effect vector for a mode.
/// Moments whose estimates give the effect in each mode.
pub fn ate_moments(mode: Mode) -> Result<Vec<Moment>> {
    match mode {
        Mode::Incomplete => Ok(vec![Moment::Contrast]),
        Mode::Complete => Ok(vec![Moment::CompleteArm(0), Moment::CompleteArm(1)]),
        _ => Err(Error::Unsupported("estimate_ate needs incomplete or complete mode".into())),
    }
}

pub(crate) fn effect_vector(mode: Mode, theta: &[Vec<f64>]) -> Vec<f64> {
    match mode {
        Mode::Complete => theta[1].iter().zip(&theta[0]).map(|(a, b)| a - b).collect(),
        _ => theta[0].clone(),
    }
}

pub(crate) fn check_valid(ds: &Dataset) -> Result<()> {
    if let Some(v) = validate(ds).into_iter().next() {
        if v.rule == "sample_presence" {
            return Err(Error::EmptySample(v.message));
        }
        return Err(Error::SchemaViolation {
            row: v.row.map_or(0, |r| r + 1),
            message: format!("{}: {}", v.rule, v.message),
        });
    }
    Ok(())
}

fn meta(ds: &Dataset, cfg: &EstimateConfig, coding: &OutcomeCoding, stratified: bool) -> EstimateMeta {
    EstimateMeta {
        seed: cfg.seed,
        n_folds: cfg.n_folds,
        mode: ds.mode,
        k_outcomes: ds.k_outcomes,
        reference: coding.reference,
        predictor: cfg.predictor.kind,
        clip: cfg.predictor.clip,
        class_weights: cfg.predictor.class_weights.clone(),
        n_by_tag: ds.count_by_tag(),
        stratified,
        logistic_penalty_per_unit: LOGISTIC_PENALTY_PER_UNIT,
        knn_neighbors: "ceil(sqrt(n))".into(),
        stump_learners: STUMP_LEARNERS,
        sigma_floor_rel: cfg.represent.sigma_floor_rel,
        irrelevance_rel: cfg.irrelevance_rel,
    }
}

/// Cross-fitted ATE with the configured inference.
pub fn estimate_ate(ds: &Dataset, cfg: &EstimateConfig) -> Result<EstimateResult> {
    check_valid(ds)?;
    let moments = ate_moments(ds.mode)?;
    let folds = split_folds(ds, cfg.n_folds, cfg.seed)?;
    let cf = CrossFit::fit(ds, &moments, folds, cfg)?;
    let agg = cf.evaluate(ds, &cf.identity_samples(), true)?;
    let coding = cf.coding;
    let theta_vec = effect_vector(ds.mode, &agg.theta);
    let theta_hat = coding.reduce(&ds.outcome_values, &theta_vec);
    let z = z_two_sided(cfg.alpha);
    let mut se = f64::NAN;
    let analytic;
    let mut bootstrap = None;
    let inference_name;
    match &cfg.inference {
        Inference::None => {
            inference_name = "none";
            analytic = analytic_summary(ds, &cf, &agg).ok();
        }
        Inference::Analytic => {
            inference_name = "analytic";
            let a = analytic_summary(ds, &cf, &agg)?;
            se = a.se;
            analytic = Some(a);
        }
        Inference::Bootstrap {
            replications,
            cluster,
            whole_pipeline,
        } => {
            inference_name = if *whole_pipeline { "bootstrap_whole_pipeline" } else { "bootstrap" };
            analytic = analytic_summary(ds, &cf, &agg).ok();
            let seed = derive_seed(cfg.seed, &[0xC1]);
            let draws = if *whole_pipeline {
                whole_pipeline_draws(ds, cfg, *replications, *cluster, seed)
            } else {
                bootstrap_draws(
                    *replications,
                    seed,
                    |rng| cf.resample(ds, *cluster, rng),
                    |s| {
                        let a = cf.evaluate(ds, s, false)?;
                        Ok(vec![coding.reduce(&ds.outcome_values, &effect_vector(ds.mode, &a.theta))])
                    },
                )
            };
            se = draws.se().first().copied().unwrap_or(f64::NAN);
            bootstrap = Some(BootstrapSummary {
                replications: *replications,
                failed: draws.failed,
                reliable: draws.reliable(),
                cluster: *cluster && ds.has_clusters(),
                whole_pipeline: *whole_pipeline,
            });
        }
    }
    let stratified = cf.strata.len() > 1;
    let arm_means = (ds.mode == Mode::Complete).then(|| [agg.theta[0].clone(), agg.theta[1].clone()]);
    Ok(EstimateResult {
        theta_hat,
        theta_vec,
        se,
        ci_low: theta_hat - z * se,
        ci_high: theta_hat + z * se,
        alpha: cfg.alpha,
        inference: inference_name.into(),
        per_stratum: stratified.then(|| agg.strata.clone()),
        per_fold: agg.cells.clone(),
        arm_means,
        relevance: agg.relevance[0],
        analytic,
        bootstrap,
        value_map: ds.outcome_values.clone(),
        discretization_bias_bound: None,
        meta: meta(ds, cfg, &coding, stratified),
    })
}

/// Resamples the full dataset and refits everything per replicate.
fn whole_pipeline_draws(ds: &Dataset, cfg: &EstimateConfig, replications: usize, cluster: bool, seed: u64) -> BootstrapDraws {
    let all: Vec<usize> = (0..ds.len()).collect();
    let groups = group_units(ds, &all, cluster && ds.has_clusters());
    let inner = EstimateConfig {
        inference: Inference::None,
        ..cfg.clone()
    };
    let results: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, &[0xA11, b as u64]);
            let mut units = Vec::with_capacity(ds.len());
            for copy in 0..groups.len() {
                let g = &groups[rng.gen_range(0..groups.len())];
                for &i in g {
                    let mut u = ds.units[i].clone();
                    // Duplicated clusters become distinct clusters.
                    if let Some(c) = &u.cluster {
                        u.cluster = Some(format!("{c}#{copy}"));
                    }
                    units.push(u);
                }
            }
            let rs = Dataset {
                units,
                ..ds.subset(&[])
            };
            let c = EstimateConfig {
                seed: derive_seed(inner.seed, &[b as u64]),
                ..inner.clone()
            };
            estimate_ate(&rs, &c).ok().map(|r| vec![r.theta_hat])
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    BootstrapDraws {
        draws: results.into_iter().flatten().collect(),
        failed,
        total: replications,
    }
}

/// Difference in mean outcome value between arms among fully labeled experimental units.
pub fn benchmark_difference(ds: &Dataset) -> Result<f64> {
    let arm = |d: u8| -> Result<f64> {
        let ys: Vec<f64> = ds
            .units
            .iter()
            .filter(|u| u.is_arm_e(d))
            .filter_map(|u| u.outcome.map(|y| ds.outcome_values[y]))
            .collect();
        if ys.is_empty() {
            return Err(Error::ZeroCount {
                event: format!("labeled experimental units in arm {d}"),
                context: String::new(),
            });
        }
        Ok(mean(&ys))
    };
    Ok(arm(1)? - arm(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleTag;

    fn unit(tag: SampleTag, d: Option<u8>, y: Option<usize>) -> UnitRecord {
        UnitRecord::new(tag, d, y, vec![0.0])
    }

    #[test]
    fn constant_representation_is_irrelevant() {
        let units = [
            unit(SampleTag::Exp, Some(1), None),
            unit(SampleTag::Exp, Some(0), None),
            unit(SampleTag::Exp, Some(1), None),
            unit(SampleTag::Obs, None, Some(1)),
            unit(SampleTag::Obs, None, Some(0)),
            unit(SampleTag::Obs, None, Some(0)),
        ];
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let c = MarginalCounts::from_units(refs.iter().copied(), 2, Mode::Incomplete).unwrap();
        let hv = [0.7];
        let h: Vec<&[f64]> = vec![&hv[..]; units.len()];
        let err = ratio_estimate(&refs, &h, &c, Moment::Contrast, &OutcomeCoding::binary(), 1e-3).unwrap_err();
        assert_eq!(err.name(), "IrrelevantRSV");
    }

    #[test]
    fn tripling_h_keeps_bits() {
        let units: Vec<UnitRecord> = (0..40)
            .map(|i| match i % 4 {
                0 => unit(SampleTag::Exp, Some(1), None),
                1 => unit(SampleTag::Exp, Some(0), None),
                2 => unit(SampleTag::Obs, None, Some(1)),
                _ => unit(SampleTag::Obs, None, Some(0)),
            })
            .collect();
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let c = MarginalCounts::from_units(refs.iter().copied(), 2, Mode::Incomplete).unwrap();
        let base: Vec<Vec<f64>> = (0..40).map(|i| vec![crate::represent::shorten(((i * 37) % 11) as f64 / 7.0 - 0.3)]).collect();
        let est = |scale: f64| {
            let hv: Vec<Vec<f64>> = base.iter().map(|v| vec![v[0] * scale]).collect();
            let h: Vec<&[f64]> = hv.iter().map(|v| v.as_slice()).collect();
            ratio_estimate(&refs, &h, &c, Moment::Contrast, &OutcomeCoding::binary(), 1e-3).unwrap()[0]
        };
        let t = est(1.0);
        assert_eq!(t.to_bits(), est(3.0).to_bits());
        assert_eq!(t.to_bits(), est(10.0).to_bits());
    }
}
