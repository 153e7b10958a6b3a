//! Plug-in probability models from the RSV.
//!
//! All learners standardize features with training statistics and emit raw
//! class probabilities; [`PredictorSet`] applies clipping on output.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Mode, UnitRecord};
use crate::error::{Error, Result};
use crate::util::rng_for;

pub const DEFAULT_CLIP: f64 = 0.01;
/// Ridge penalty per training unit for the logistic learner.
pub const LOGISTIC_PENALTY_PER_UNIT: f64 = 1e-3;
pub const LOGISTIC_MAX_ITER: usize = 100;
pub const STUMP_LEARNERS: usize = 100;
pub const STUMP_MIN_LEAF: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Logistic,
    Knn,
    Stumps,
}

impl PredictorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Some(PredictorKind::Logistic),
            "knn" => Some(PredictorKind::Knn),
            "stumps" | "stump_ensemble" => Some(PredictorKind::Stumps),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[&[f64]]) -> Self {
        let p = x.first().map_or(0, |r| r.len());
        let n = x.len() as f64;
        let mut mean = vec![0.0; p];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for r in x {
            for j in 0..p {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        // Constant features map to 0 after centering.
        let sd = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, sd }
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Penalized binary logistic model on standardized features; `coef[0]` is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticBinary {
    pub coef: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LogisticBinary {
    /// Damped Newton (IRLS) on the weighted, ridge-penalized log-likelihood.
    /// The intercept is not penalized.
    pub fn fit(z: &[Vec<f64>], y: &[bool], w: &[f64], lambda: f64) -> Self {
        let n = z.len();
        let q = z.first().map_or(0, |r| r.len()) + 1;
        let row = |i: usize, j: usize| if j == 0 { 1.0 } else { z[i][j - 1] };
        let objective = |b: &[f64]| -> f64 {
            let mut obj = 0.0;
            for i in 0..n {
                let eta: f64 = b[0] + z[i].iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>();
                obj += w[i] * (softplus(eta) - if y[i] { eta } else { 0.0 });
            }
            obj + 0.5 * lambda * b[1..].iter().map(|v| v * v).sum::<f64>()
        };
        let wsum: f64 = w.iter().sum();
        let wpos: f64 = w.iter().zip(y).filter(|(_, &t)| t).map(|(a, _)| a).sum();
        let base = (wpos / wsum).clamp(1e-6, 1.0 - 1e-6);
        let mut beta = vec![0.0; q];
        beta[0] = (base / (1.0 - base)).ln();
        let mut obj = objective(&beta);
        for _ in 0..LOGISTIC_MAX_ITER {
            let mut h = DMatrix::<f64>::zeros(q, q);
            let mut g = DVector::<f64>::zeros(q);
            for i in 0..n {
                let eta: f64 = beta[0] + z[i].iter().zip(&beta[1..]).map(|(a, c)| a * c).sum::<f64>();
                let p = sigmoid(eta);
                let r = w[i] * ((if y[i] { 1.0 } else { 0.0 }) - p);
                let v = w[i] * p * (1.0 - p);
                for a in 0..q {
                    let xa = row(i, a);
                    g[a] += r * xa;
                    let vx = v * xa;
                    for b in 0..=a {
                        h[(a, b)] += vx * row(i, b);
                    }
                }
            }
            for a in 0..q {
                for b in 0..a {
                    h[(b, a)] = h[(a, b)];
                }
            }
            for a in 1..q {
                g[a] -= lambda * beta[a];
                h[(a, a)] += lambda;
            }
            h[(0, 0)] += 1e-10 * (1.0 + wsum);
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => break,
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
                let o = objective(&trial);
                if o <= obj {
                    let gain = obj - o;
                    beta = trial;
                    obj = o;
                    accepted = true;
                    if gain <= 1e-12 * (1.0 + obj.abs()) {
                        return LogisticBinary { coef: beta };
                    }
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.amax() * t < 1e-10 {
                break;
            }
        }
        LogisticBinary { coef: beta }
    }

    pub fn prob(&self, z: &[f64]) -> f64 {
        sigmoid(self.coef[0] + z.iter().zip(&self.coef[1..]).map(|(a, c)| a * c).sum::<f64>())
    }
}

/// Depth-2 classification tree with class-distribution leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Vec<f64>),
}

impl Tree {
    pub fn predict(&self, z: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf(p) => return p,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if z[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Classifier {
    Constant {
        probs: Vec<f64>,
    },
    /// One model for two classes (probability of class 1), else one-vs-rest.
    Logistic {
        standardizer: Standardizer,
        models: Vec<LogisticBinary>,
        n_classes: usize,
    },
    Knn {
        standardizer: Standardizer,
        memo: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_weights: Vec<f64>,
        k: usize,
        n_classes: usize,
    },
    Stumps {
        standardizer: Standardizer,
        trees: Vec<Tree>,
        n_classes: usize,
    },
}

impl Classifier {
    /// Raw (unclipped) class probabilities summing to one.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Classifier::Constant { probs } => probs.clone(),
            Classifier::Logistic {
                standardizer,
                models,
                n_classes,
            } => {
                let z = standardizer.apply(x);
                if *n_classes == 2 {
                    let p = models[0].prob(&z);
                    vec![1.0 - p, p]
                } else {
                    let raw: Vec<f64> = models.iter().map(|m| m.prob(&z)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                }
            }
            Classifier::Knn {
                standardizer,
                memo,
                labels,
                class_weights,
                k,
                n_classes,
            } => {
                let z = standardizer.apply(x);
                let mut d: Vec<(f64, usize)> = memo
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (m.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                let kk = (*k).min(d.len());
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if kk < d.len() {
                    d.select_nth_unstable_by(kk - 1, cmp);
                }
                let mut p = vec![0.0; *n_classes];
                for &(_, i) in &d[..kk] {
                    p[labels[i]] += class_weights[labels[i]];
                }
                let s: f64 = p.iter().sum();
                p.into_iter().map(|v| v / s).collect()
            }
            Classifier::Stumps {
                standardizer,
                trees,
                n_classes,
            } => {
                let z = standardizer.apply(x);
                let mut p = vec![0.0; *n_classes];
                for t in trees {
                    for (a, b) in p.iter_mut().zip(t.predict(&z)) {
                        *a += b;
                    }
                }
                let s: f64 = p.iter().sum();
                p.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

/// Fits a classifier for labels in `0..n_classes`. A single observed class
/// yields the constant empirical frequency.
pub fn fit_classifier(
    x: &[&[f64]],
    y: &[usize],
    n_classes: usize,
    class_weights: Option<&[f64]>,
    kind: PredictorKind,
    seed: u64,
) -> Classifier {
    let n = y.len();
    let mut freq = vec![0.0; n_classes];
    for &c in y {
        freq[c] += 1.0;
    }
    if freq.iter().filter(|&&f| f > 0.0).count() < 2 {
        return Classifier::Constant {
            probs: freq.into_iter().map(|f| f / n as f64).collect(),
        };
    }
    let cw: Vec<f64> = class_weights.map_or_else(|| vec![1.0; n_classes], |w| w.to_vec());
    let standardizer = Standardizer::fit(x);
    let z: Vec<Vec<f64>> = x.iter().map(|r| standardizer.apply(r)).collect();
    let w: Vec<f64> = y.iter().map(|&c| cw[c]).collect();
    match kind {
        PredictorKind::Logistic => {
            let lambda = LOGISTIC_PENALTY_PER_UNIT * n as f64;
            let targets: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
            let models = targets
                .into_iter()
                .map(|c| {
                    let yb: Vec<bool> = y.iter().map(|&v| v == c).collect();
                    if yb.iter().all(|&b| !b) {
                        // Absent class: intercept-only model pinned near zero.
                        let mut coef = vec![0.0; z[0].len() + 1];
                        coef[0] = -30.0;
                        LogisticBinary { coef }
                    } else {
                        LogisticBinary::fit(&z, &yb, &w, lambda)
                    }
                })
                .collect();
            Classifier::Logistic {
                standardizer,
                models,
                n_classes,
            }
        }
        PredictorKind::Knn => Classifier::Knn {
            standardizer,
            memo: z,
            labels: y.to_vec(),
            class_weights: cw,
            k: ((n as f64).sqrt().ceil() as usize).max(1),
            n_classes,
        },
        PredictorKind::Stumps => {
            let trees = (0..STUMP_LEARNERS)
                .map(|t| {
                    let mut rng = rng_for(seed, &[0x7ee5, t as u64]);
                    let boot: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                    grow_tree(&z, y, &w, n_classes, boot, &mut rng)
                })
                .collect();
            Classifier::Stumps {
                standardizer,
                trees,
                n_classes,
            }
        }
    }
}

fn class_mass(idx: &[usize], y: &[usize], w: &[f64], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for &i in idx {
        m[y[i]] += w[i];
    }
    m
}

fn leaf(idx: &[usize], y: &[usize], w: &[f64], k: usize) -> TreeNode {
    let m = class_mass(idx, y, w, k);
    let s: f64 = m.iter().sum();
    TreeNode::Leaf(m.into_iter().map(|v| v / s).collect())
}

fn gini_sum(m: &[f64]) -> f64 {
    let s: f64 = m.iter().sum();
    if s <= 0.0 {
        return 0.0;
    }
    s - m.iter().map(|v| v * v).sum::<f64>() / s
}

/// Best weighted-Gini split over a random subset of ⌈√p⌉ features.
fn best_split<R: Rng>(z: &[Vec<f64>], y: &[usize], w: &[f64], k: usize, idx: &[usize], rng: &mut R) -> Option<(usize, f64)> {
    if idx.len() < 2 * STUMP_MIN_LEAF {
        return None;
    }
    let p = z[0].len();
    let mtry = ((p as f64).sqrt().ceil() as usize).clamp(1, p);
    let mut feats: Vec<usize> = (0..p).collect();
    feats.shuffle(rng);
    feats.truncate(mtry);
    feats.sort_unstable();
    let total = class_mass(idx, y, w, k);
    let parent = gini_sum(&total);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for &f in &feats {
        order.sort_by(|&a, &b| z[a][f].total_cmp(&z[b][f]));
        let mut left = vec![0.0; k];
        for pos in 0..order.len() - 1 {
            let i = order[pos];
            left[y[i]] += w[i];
            let (a, b) = (z[i][f], z[order[pos + 1]][f]);
            if a == b || pos + 1 < STUMP_MIN_LEAF || order.len() - pos - 1 < STUMP_MIN_LEAF {
                continue;
            }
            let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let gain = parent - gini_sum(&left) - gini_sum(&right);
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, 0.5 * (a + b)));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

fn grow_tree<R: Rng>(z: &[Vec<f64>], y: &[usize], w: &[f64], k: usize, boot: Vec<usize>, rng: &mut R) -> Tree {
    let mut nodes = vec![TreeNode::Leaf(Vec::new())];
    let mut stack = vec![(0usize, boot, 0usize)];
    while let Some((at, idx, depth)) = stack.pop() {
        let split = if depth < 2 { best_split(z, y, w, k, &idx, rng) } else { None };
        match split {
            None => nodes[at] = leaf(&idx, y, w, k),
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| z[i][feature] <= threshold);
                let left = nodes.len();
                nodes.push(TreeNode::Leaf(Vec::new()));
                nodes.push(TreeNode::Leaf(Vec::new()));
                nodes[at] = TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right: left + 1,
                };
                stack.push((left + 1, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    Tree { nodes }
}

/// Clamps into [clip, 1−clip] and rescales the unclamped entries so the
/// vector sums to one.
pub fn clip_simplex(p: &[f64], clip: f64) -> Vec<f64> {
    let mut v: Vec<f64> = p.iter().map(|x| x.clamp(clip, 1.0 - clip)).collect();
    if v.len() == 2 {
        // Symmetric bounds keep binary vectors on the simplex.
        v[0] = 1.0 - v[1];
        return v;
    }
    for _ in 0..=v.len() {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() <= 1e-15 {
            break;
        }
        let free: Vec<usize> = (0..v.len())
            .filter(|&i| if s > 1.0 { v[i] > clip } else { v[i] < 1.0 - clip })
            .collect();
        let fixed: f64 = (0..v.len()).filter(|i| !free.contains(i)).map(|i| v[i]).sum();
        let fs: f64 = free.iter().map(|&i| v[i]).sum();
        if free.is_empty() || fs <= 0.0 {
            break;
        }
        let scale = (1.0 - fixed) / fs;
        for &i in &free {
            v[i] = (v[i] * scale).clamp(clip, 1.0 - clip);
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Weights for outcome classes, applied to the outcome model only.
    pub class_weights: Option<Vec<f64>>,
    pub clip: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Logistic,
            class_weights: None,
            clip: DEFAULT_CLIP,
            seed: 0,
        }
    }
}

/// Fitted models for Pr(Y|o,R), Pr(D=1|e,R) and sample membership given R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub kind: PredictorKind,
    pub clip: f64,
    pub class_weights: Option<Vec<f64>>,
    pub rsv_dim: usize,
    pub k_outcomes: usize,
    pub pred_y: Classifier,
    pub pred_d: Classifier,
    /// Pr(e ∈ S̃ | R).
    pub pred_s: Classifier,
    /// Pr(o ∈ S̃ | R) when some training unit is in both samples; otherwise 1 − pred_s.
    pub pred_so: Option<Classifier>,
    /// Complete mode: Pr(Y=k, D=d | o, R) over classes `d·K + k`.
    pub pred_yd: Option<Classifier>,
    /// IV mode: Pr(D=d, Z=z | e, R) over classes `2d + z`.
    pub pred_cell: Option<Classifier>,
}

/// Clipped predictions for one RSV value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob_y: Vec<f64>,
    pub prob_d: f64,
    pub prob_s: f64,
    pub prob_so: f64,
    pub prob_yd: Option<Vec<f64>>,
    pub prob_cell: Option<Vec<f64>>,
}

pub fn fit_predictors(train: &[&UnitRecord], k_outcomes: usize, mode: Mode, cfg: &PredictorConfig) -> Result<PredictorSet> {
    if !(cfg.clip > 0.0 && cfg.clip < 0.5) {
        return Err(Error::InvalidSpec("clip must lie in (0, 0.5)".into()));
    }
    if let Some(w) = &cfg.class_weights {
        if w.len() != k_outcomes || w.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidSpec("class weights need K positive entries".into()));
        }
    }
    let rsv_dim = train.first().map_or(0, |u| u.rsv.len());
    let fit = |units: Vec<&UnitRecord>, labels: Vec<usize>, k: usize, weights: Option<&[f64]>, id: u64, name: &str| {
        if units.is_empty() {
            return Err(Error::EmptyTraining(name.to_string()));
        }
        let x: Vec<&[f64]> = units.iter().map(|u| u.rsv.as_slice()).collect();
        Ok(fit_classifier(&x, &labels, k, weights, cfg.kind, crate::util::derive_seed(cfg.seed, &[id])))
    };
    let o_units: Vec<&UnitRecord> = train.iter().copied().filter(|u| u.sample.in_o() && u.outcome.is_some()).collect();
    let e_units: Vec<&UnitRecord> = train.iter().copied().filter(|u| u.sample.in_e() && u.treatment.is_some()).collect();
    let weights = cfg.class_weights.as_deref();
    let pred_y = fit(o_units.clone(), o_units.iter().map(|u| u.outcome.unwrap()).collect(), k_outcomes, weights, 1, "outcome")?;
    let pred_d = fit(
        e_units.clone(),
        e_units.iter().map(|u| u.treatment.unwrap() as usize).collect(),
        2,
        None,
        2,
        "treatment",
    )?;
    let all: Vec<&UnitRecord> = train.to_vec();
    let pred_s = fit(all.clone(), all.iter().map(|u| u.sample.in_e() as usize).collect(), 2, None, 3, "sample")?;
    let pred_so = if all.iter().any(|u| u.sample.in_e() && u.sample.in_o()) {
        Some(fit(all.clone(), all.iter().map(|u| u.sample.in_o() as usize).collect(), 2, None, 4, "o-membership")?)
    } else {
        None
    };
    let pred_yd = if mode == Mode::Complete {
        let us: Vec<&UnitRecord> = o_units.iter().copied().filter(|u| u.treatment.is_some()).collect();
        let labels = us
            .iter()
            .map(|u| u.treatment.unwrap() as usize * k_outcomes + u.outcome.unwrap())
            .collect();
        let w2: Option<Vec<f64>> = weights.map(|w| w.iter().chain(w.iter()).copied().collect());
        Some(fit(us, labels, 2 * k_outcomes, w2.as_deref(), 5, "outcome-by-arm")?)
    } else {
        None
    };
    let pred_cell = if mode == Mode::Iv {
        let us: Vec<&UnitRecord> = e_units.iter().copied().filter(|u| u.instrument.is_some()).collect();
        let labels = us
            .iter()
            .map(|u| 2 * u.treatment.unwrap() as usize + u.instrument.unwrap() as usize)
            .collect();
        Some(fit(us, labels, 4, None, 6, "treatment-instrument cell")?)
    } else {
        None
    };
    Ok(PredictorSet {
        kind: cfg.kind,
        clip: cfg.clip,
        class_weights: cfg.class_weights.clone(),
        rsv_dim,
        k_outcomes,
        pred_y,
        pred_d,
        pred_s,
        pred_so,
        pred_yd,
        pred_cell,
    })
}

impl PredictorSet {
    pub fn predict(&self, rsv: &[f64]) -> Result<Prediction> {
        if rsv.len() != self.rsv_dim {
            return Err(Error::DimMismatch {
                expected: self.rsv_dim,
                got: rsv.len(),
            });
        }
        let c = self.clip;
        let bin = |m: &Classifier| m.predict_proba(rsv)[1].clamp(c, 1.0 - c);
        let prob_s = bin(&self.pred_s);
        Ok(Prediction {
            prob_y: clip_simplex(&self.pred_y.predict_proba(rsv), c),
            prob_d: bin(&self.pred_d),
            prob_s,
            prob_so: self.pred_so.as_ref().map_or(1.0 - prob_s, bin),
            prob_yd: self.pred_yd.as_ref().map(|m| clip_simplex(&m.predict_proba(rsv), c)),
            prob_cell: self.pred_cell.as_ref().map(|m| clip_simplex(&m.predict_proba(rsv), c)),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Clipped (probY, probD, probS) for one unit.
pub fn predict_all(ps: &PredictorSet, unit: &UnitRecord) -> Result<(Vec<f64>, f64, f64)> {
    let p = ps.predict(&unit.rsv)?;
    Ok((p.prob_y, p.prob_d, p.prob_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn threshold_units(n: usize, seed: u64) -> Vec<UnitRecord> {
        let mut rng = rng_for(seed, &[]);
        (0..n)
            .map(|i| {
                let r: f64 = StandardNormal.sample(&mut rng);
                let r2: f64 = StandardNormal.sample(&mut rng);
                if i % 2 == 0 {
                    UnitRecord::obs((r > 0.3) as usize, vec![r, r2])
                } else {
                    UnitRecord::exp((i % 4 == 1) as u8, vec![r, r2])
                }
            })
            .collect()
    }

    fn accuracy(kind: PredictorKind) -> f64 {
        let train = threshold_units(2000, 1);
        let test = threshold_units(2000, 2);
        let refs: Vec<&UnitRecord> = train.iter().collect();
        let cfg = PredictorConfig {
            kind,
            seed: 5,
            ..PredictorConfig::default()
        };
        let ps = fit_predictors(&refs, 2, Mode::Incomplete, &cfg).unwrap();
        let held: Vec<&UnitRecord> = test.iter().filter(|u| u.outcome.is_some()).collect();
        let hits = held
            .iter()
            .filter(|u| {
                let p = ps.predict(&u.rsv).unwrap();
                (p.prob_y[1] > 0.5) as usize == u.outcome.unwrap()
            })
            .count();
        hits as f64 / held.len() as f64
    }

    #[test]
    fn threshold_dgp_is_learned_by_every_kind() {
        for kind in [PredictorKind::Logistic, PredictorKind::Knn, PredictorKind::Stumps] {
            let acc = accuracy(kind);
            assert!(acc >= 0.95, "{kind:?} accuracy {acc}");
        }
    }

    #[test]
    fn single_class_treatment_is_constant() {
        let units = [
            UnitRecord::exp(1, vec![0.1]),
            UnitRecord::exp(1, vec![0.9]),
            UnitRecord::obs(0, vec![0.3]),
            UnitRecord::obs(1, vec![0.4]),
        ];
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let ps = fit_predictors(&refs, 2, Mode::Incomplete, &PredictorConfig::default()).unwrap();
        for r in [-5.0, 0.0, 8.0] {
            assert_eq!(ps.predict(&[r]).unwrap().prob_d, 0.99);
        }
    }

    #[test]
    fn constant_frequency_passes_through() {
        let m = Classifier::Constant { probs: vec![0.3, 0.7] };
        let p = m.predict_proba(&[1.0])[1].clamp(0.01, 0.99);
        assert_eq!(p, 0.7);
        assert_eq!(clip_simplex(&[0.9995, 0.0005], 0.01)[1], 0.01);
    }

    #[test]
    fn separable_logistic_stays_finite() {
        let z: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 10.0 - 5.0]).collect();
        let y: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let m = LogisticBinary::fit(&z, &y, &vec![1.0; 100], 0.1);
        assert!(m.coef.iter().all(|c| c.is_finite()));
        assert!(m.prob(&[1.0]) > 0.9);
    }

    #[test]
    fn simplex_clipping_sums_to_one() {
        for p in [vec![0.98, 0.015, 0.005], vec![0.0, 0.0, 1.0], vec![0.2, 0.3, 0.5], vec![0.001, 0.001, 0.499, 0.499]] {
            let v = clip_simplex(&p, 0.01);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{v:?}");
            assert!(v.iter().all(|x| *x >= 0.01 - 1e-15 && *x <= 0.99 + 1e-15), "{v:?}");
        }
    }

    #[test]
    fn dim_mismatch() {
        let units = threshold_units(40, 3);
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let ps = fit_predictors(&refs, 2, Mode::Incomplete, &PredictorConfig::default()).unwrap();
        assert_eq!(ps.predict(&[0.0]).unwrap_err().name(), "DimMismatch");
    }

    #[test]
    fn empty_outcome_training() {
        let units = [UnitRecord::exp(1, vec![0.0]), UnitRecord::exp(0, vec![1.0])];
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let err = fit_predictors(&refs, 2, Mode::Incomplete, &PredictorConfig::default()).unwrap_err();
        assert_eq!(err.name(), "EmptyTraining");
    }

    #[test]
    fn json_round_trip() {
        let units = threshold_units(200, 4);
        let refs: Vec<&UnitRecord> = units.iter().collect();
        for kind in [PredictorKind::Logistic, PredictorKind::Knn, PredictorKind::Stumps] {
            let cfg = PredictorConfig {
                kind,
                ..PredictorConfig::default()
            };
            let ps = fit_predictors(&refs, 2, Mode::Incomplete, &cfg).unwrap();
            let back = PredictorSet::from_json(&ps.to_json().unwrap()).unwrap();
            assert_eq!(back.predict(&[0.2, -0.1]).unwrap(), ps.predict(&[0.2, -0.1]).unwrap());
        }
    }
}
