//! Synthetic data-generating processes with known truth, and an exact
//! population oracle for finite RSV supports.
//!
//! The calibrated process draws the RSV from a Gaussian mean shift in the
//! outcome. It is a synthetic stand-in for real image features, and every
//! generated truth record says so.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mode, SampleTag, UnitRecord};
use crate::error::{Error, Result};
use crate::moments::OutcomeCoding;
use crate::quasi::{DidPanel, PanelUnit};
use crate::util::rng_for;

/// Label attached to every calibrated truth record.
pub const RSV_STAND_IN: &str = "synthetic gaussian mean-shift RSV (stand-in for image features)";

/// Largest RSV support the oracle enumerates.
pub const ORACLE_SUPPORT_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DgpKind {
    Calibrated,
    Adversarial,
    Iv,
    Did,
    CustomFinite,
}

impl DgpKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "calibrated" => Some(DgpKind::Calibrated),
            "adversarial" => Some(DgpKind::Adversarial),
            "iv" => Some(DgpKind::Iv),
            "did" => Some(DgpKind::Did),
            "custom_finite" | "finite" => Some(DgpKind::CustomFinite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissingPattern {
    /// Treated units lose the outcome (EXP); untreated units keep it (BOTH).
    DeleteTreated,
    /// Each experimental unit keeps its outcome with probability 1/2.
    RandomHalf,
    /// Every experimental unit keeps its outcome.
    None,
}

impl MissingPattern {
    fn tag<R: Rng>(self, d: u8, rng: &mut R) -> SampleTag {
        let keep = match self {
            MissingPattern::DeleteTreated => d == 0,
            MissingPattern::RandomHalf => rng.gen_bool(0.5),
            MissingPattern::None => true,
        };
        if keep {
            SampleTag::Both
        } else {
            SampleTag::Exp
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    /// Added to `theta_base` to give the calibrated effect.
    pub theta_shift: f64,
    pub theta_base: f64,
    /// Pr(Y=1 | D=0); a modeling choice, not an empirical value.
    pub p0: f64,
    /// Adversarial Pr{Y(0)=1}.
    pub a: f64,
    /// Adversarial Pr{Y(1)=1}.
    pub b: f64,
    pub rsv_dim: usize,
    pub seed: u64,
    pub missing_pattern: MissingPattern,
    /// Mean shift of R given Y=1 on each signal coordinate; 0 gives a pure-noise RSV.
    pub signal_shift: f64,
    /// Share of the n units drawn as untreated OBS-only units.
    pub obs_fraction: f64,
    /// Extra shift of the first RSV coordinate for OBS-only units with Y=1.
    pub obs_shift: f64,
    pub complier_share: f64,
    pub always_share: f64,
    pub iv_effect: f64,
    pub did_drift: f64,
    pub did_effect: f64,
    /// Period-1 difference in Pr(Y=1) between arms.
    pub did_gap: f64,
    /// Contiguous cluster blocks; `None` leaves units unclustered.
    pub n_clusters: Option<usize>,
    pub finite: Option<FiniteSpec>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            kind: DgpKind::Calibrated,
            n: 1000,
            theta_shift: 0.0,
            theta_base: -0.07,
            p0: 0.25,
            a: 0.6,
            b: 0.2,
            rsv_dim: 16,
            seed: 0,
            missing_pattern: MissingPattern::DeleteTreated,
            signal_shift: 1.0,
            obs_fraction: 0.0,
            obs_shift: 0.0,
            complier_share: 0.6,
            always_share: 0.2,
            iv_effect: 0.3,
            did_drift: 0.1,
            did_effect: 0.2,
            did_gap: 0.1,
            n_clusters: None,
            finite: None,
        }
    }
}

fn prob_ok(p: f64) -> bool {
    p > 0.0 && p < 1.0
}

impl DgpSpec {
    pub fn calibrated(tau: f64, n: usize, seed: u64) -> Self {
        DgpSpec {
            theta_shift: tau,
            n,
            seed,
            ..Default::default()
        }
    }

    pub fn adversarial(a: f64, b: f64, n: usize, seed: u64) -> Self {
        DgpSpec {
            kind: DgpKind::Adversarial,
            a,
            b,
            n,
            seed,
            rsv_dim: 1,
            ..Default::default()
        }
    }

    /// Calibrated Pr(Y=1|D=1).
    pub fn p1(&self) -> f64 {
        self.p0 + self.theta_base + self.theta_shift
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.rsv_dim == 0 {
            return bad("rsv_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.obs_fraction) {
            return bad("obs_fraction must lie in [0, 1)");
        }
        match self.kind {
            DgpKind::Calibrated => {
                if !prob_ok(self.p0) || !prob_ok(self.p1()) {
                    return bad("p0 and p0 + theta must lie in (0, 1)");
                }
            }
            DgpKind::Adversarial => {
                if !prob_ok(self.a) || !prob_ok(self.b) {
                    return bad("a and b must lie in (0, 1)");
                }
            }
            DgpKind::Iv => {
                let never = 1.0 - self.complier_share - self.always_share;
                if self.complier_share < 0.0 || self.always_share < 0.0 || never < -1e-12 {
                    return bad("compliance shares must be nonnegative and sum to at most 1");
                }
                for p in self.iv_outcome_probs().iter().flatten() {
                    if !prob_ok(*p) {
                        return bad("IV outcome probabilities must lie in (0, 1)");
                    }
                }
            }
            DgpKind::Did => {
                for p in self.did_probs().iter().flatten() {
                    if !prob_ok(*p) {
                        return bad("DiD outcome probabilities must lie in (0, 1)");
                    }
                }
            }
            DgpKind::CustomFinite => match &self.finite {
                Some(f) => f.check()?,
                None => return bad("CUSTOM_FINITE needs a finite spec"),
            },
        }
        Ok(())
    }

    /// Pr{Y(d)=1} for (complier, always-taker, never-taker) strata.
    fn iv_outcome_probs(&self) -> [[f64; 2]; 3] {
        let p = self.p0;
        [[p, p + self.iv_effect], [p + 0.1, p + 0.15], [p - 0.05, p]]
    }

    /// Pr(Y_t=1 | D=d) indexed [t-1][d].
    fn did_probs(&self) -> [[f64; 2]; 2] {
        let p = self.p0;
        [
            [p, p + self.did_gap],
            [p + self.did_drift, p + self.did_gap + self.did_drift + self.did_effect],
        ]
    }

    fn signal_coords(&self) -> usize {
        self.rsv_dim.div_ceil(4)
    }

    fn cluster_of(&self, i: usize) -> Option<String> {
        self.n_clusters.map(|g| format!("c{}", i * g.max(1) / self.n))
    }
}

/// Known population quantities for a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: f64,
    /// Population common-practice bias θ̃ − θ, when closed-form.
    pub common_bias: Option<f64>,
    pub late: Option<f64>,
    pub att: Option<f64>,
    pub weak_instrument: bool,
    pub rsv_model: String,
}

impl Truth {
    fn effect(theta: f64, rsv_model: &str) -> Self {
        Truth {
            theta,
            common_bias: None,
            late: None,
            att: None,
            weak_instrument: false,
            rsv_model: rsv_model.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub data: Dataset,
    pub truth: Truth,
    /// Wide two-period panel for DiD processes.
    pub panel: Option<DidPanel>,
}

pub fn generate(spec: &DgpSpec) -> Result<Generated> {
    match spec.kind {
        DgpKind::Calibrated => gen_calibrated(spec),
        DgpKind::Adversarial => gen_adversarial(spec),
        DgpKind::Iv => gen_iv(spec),
        DgpKind::Did => gen_did(spec),
        DgpKind::CustomFinite => {
            spec.check()?;
            let f = spec.finite.as_ref().expect("checked");
            let data = f.sample(spec.n, spec.seed);
            let o = population_oracle(f)?;
            Ok(Generated {
                data,
                truth: Truth {
                    common_bias: Some(o.theta_tilde - o.theta_scalar_direct),
                    ..Truth::effect(o.theta_scalar_direct, "finite support")
                },
                panel: None,
            })
        }
    }
}

fn gaussian_rsv(rng: &mut ChaCha8Rng, dim: usize, signal: usize, shift: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let z: f64 = rng.sample(StandardNormal);
            if j < signal {
                z + shift
            } else {
                z
            }
        })
        .collect()
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> usize {
    rng.gen_bool(p) as usize
}

pub fn gen_calibrated(spec: &DgpSpec) -> Result<Generated> {
    if spec.kind != DgpKind::Calibrated {
        return Err(Error::InvalidSpec("gen_calibrated needs kind CALIBRATED".into()));
    }
    spec.check()?;
    let mut rng = rng_for(spec.seed, &[0xCA1]);
    let n_obs = (spec.obs_fraction * spec.n as f64).round() as usize;
    let probs = [spec.p0, spec.p1()];
    let signal = spec.signal_coords();
    let mut units = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let obs_only = i >= spec.n - n_obs;
        let d = if obs_only { 0 } else { rng.gen_bool(0.5) as u8 };
        let y = bern(&mut rng, probs[d as usize]);
        let mut r = gaussian_rsv(&mut rng, spec.rsv_dim, signal, spec.signal_shift * y as f64);
        let u = if obs_only {
            if y == 1 {
                r[0] += spec.obs_shift;
            }
            UnitRecord::obs(y, r)
        } else {
            match spec.missing_pattern.tag(d, &mut rng) {
                SampleTag::Both => UnitRecord::both(d, y, r),
                _ => UnitRecord::exp(d, r),
            }
        };
        units.push(UnitRecord {
            cluster: spec.cluster_of(i),
            ..u
        });
    }
    Ok(Generated {
        data: Dataset::new(units, 2, Mode::Incomplete),
        truth: Truth::effect(probs[1] - probs[0], RSV_STAND_IN),
        panel: None,
    })
}

/// The two-sample process behind the common-practice bias closed form.
pub fn adversarial_finite(a: f64, b: f64) -> FiniteSpec {
    FiniteSpec {
        values: vec![0.0, 1.0],
        obs_share: 0.5,
        treat_prob: 0.5,
        label_prob: [0.0, 0.0],
        y_dist: [vec![1.0 - a, a], vec![1.0 - b, b]],
        obs_y_dist: vec![1.0 - a, a],
        r_given_y: vec![vec![0.5, 0.5], vec![0.0, 1.0]],
        r_values: vec![vec![0.0], vec![1.0]],
    }
}

pub fn gen_adversarial(spec: &DgpSpec) -> Result<Generated> {
    if spec.kind != DgpKind::Adversarial {
        return Err(Error::InvalidSpec("gen_adversarial needs kind ADVERSARIAL".into()));
    }
    spec.check()?;
    let (a, b) = (spec.a, spec.b);
    let mut rng = rng_for(spec.seed, &[0xAD5]);
    let mut units = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let in_e = rng.gen_bool(0.5);
        let d = if in_e { rng.gen_bool(0.5) as u8 } else { 0 };
        let y = bern(&mut rng, if d == 1 { b } else { a });
        let r = if rng.gen_bool(0.5) { y as f64 } else { 1.0 };
        let u = if in_e {
            // The full label is kept in a BOTH copy only under pattern NONE.
            match spec.missing_pattern {
                MissingPattern::None => UnitRecord::both(d, y, vec![r]),
                _ => UnitRecord::exp(d, vec![r]),
            }
        } else {
            UnitRecord::obs(y, vec![r])
        };
        units.push(UnitRecord {
            cluster: spec.cluster_of(i),
            ..u
        });
    }
    Ok(Generated {
        data: Dataset::new(units, 2, Mode::Incomplete),
        truth: Truth {
            common_bias: Some((a - b) / (a + 1.0)),
            ..Truth::effect(b - a, "R = Y with probability 1/2, else 1")
        },
        panel: None,
    })
}

/// Finite-support RSV used by the IV process: one-hot over four levels.
const IV_R_GIVEN_Y: [[f64; 4]; 2] = [[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]];

fn one_hot_draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> Vec<f64> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = probs.len() - 1;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = j;
            break;
        }
    }
    (0..probs.len()).map(|j| (j == pick) as u8 as f64).collect()
}

/// Below this first-stage gap the IV truth is flagged weak.
pub const IV_WEAK_FLOOR: f64 = 0.05;

/// Population Wald ratio by enumeration over compliance strata.
pub fn iv_population_late(spec: &DgpSpec) -> (f64, f64) {
    let shares = [spec.complier_share, spec.always_share, 1.0 - spec.complier_share - spec.always_share];
    let probs = spec.iv_outcome_probs();
    let take = |stratum: usize, z: u8| -> usize {
        match stratum {
            0 => z as usize,
            1 => 1,
            _ => 0,
        }
    };
    let mut alpha = [0.0; 2];
    let mut beta = [0.0; 2];
    for z in 0..2u8 {
        for s in 0..3 {
            let d = take(s, z);
            alpha[z as usize] += shares[s] * probs[s][d];
            beta[z as usize] += shares[s] * d as f64;
        }
    }
    let gap = beta[1] - beta[0];
    ((alpha[1] - alpha[0]) / gap, gap)
}

pub fn gen_iv(spec: &DgpSpec) -> Result<Generated> {
    if spec.kind != DgpKind::Iv {
        return Err(Error::InvalidSpec("gen_iv needs kind IV".into()));
    }
    spec.check()?;
    let mut rng = rng_for(spec.seed, &[0x1F]);
    let probs = spec.iv_outcome_probs();
    let mut units = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let z = rng.gen_bool(0.5) as u8;
        let u: f64 = rng.gen();
        let stratum = if u < spec.complier_share {
            0
        } else if u < spec.complier_share + spec.always_share {
            1
        } else {
            2
        };
        let d = match stratum {
            0 => z,
            1 => 1,
            _ => 0,
        };
        let y = bern(&mut rng, probs[stratum][d as usize]);
        let r = one_hot_draw(&mut rng, &IV_R_GIVEN_Y[y]);
        let rec = match spec.missing_pattern.tag(d, &mut rng) {
            SampleTag::Both => UnitRecord::both(d, y, r),
            _ => UnitRecord::exp(d, r),
        };
        units.push(UnitRecord {
            cluster: spec.cluster_of(i),
            ..rec.with_instrument(z)
        });
    }
    let (late, gap) = iv_population_late(spec);
    Ok(Generated {
        data: Dataset::new(units, 2, Mode::Iv),
        truth: Truth {
            late: Some(late),
            weak_instrument: gap.abs() < IV_WEAK_FLOOR,
            ..Truth::effect(late, "one-hot RSV over four levels")
        },
        panel: None,
    })
}

pub fn gen_did(spec: &DgpSpec) -> Result<Generated> {
    if spec.kind != DgpKind::Did {
        return Err(Error::InvalidSpec("gen_did needs kind DID".into()));
    }
    spec.check()?;
    let mut rng = rng_for(spec.seed, &[0xD1D]);
    let probs = spec.did_probs();
    let signal = spec.signal_coords();
    let mut units = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let d = rng.gen_bool(0.5) as u8;
        let y1 = bern(&mut rng, probs[0][d as usize]);
        let y2 = bern(&mut rng, probs[1][d as usize]);
        let r1 = gaussian_rsv(&mut rng, spec.rsv_dim, signal, spec.signal_shift * y1 as f64);
        let r2 = gaussian_rsv(&mut rng, spec.rsv_dim, signal, spec.signal_shift * y2 as f64);
        let tag = spec.missing_pattern.tag(d, &mut rng);
        let labeled = tag == SampleTag::Both;
        units.push(PanelUnit {
            sample: tag,
            treatment: Some(d),
            outcomes: [labeled.then_some(y1), labeled.then_some(y2)],
            rsv: [r1, r2],
            covariate: None,
            cluster: spec.cluster_of(i),
        });
    }
    let panel = DidPanel {
        units,
        k_outcomes: 2,
        rsv_dim: spec.rsv_dim,
        outcome_values: vec![0.0, 1.0],
    };
    Ok(Generated {
        data: panel.to_long(),
        truth: Truth {
            att: Some(spec.did_effect),
            ..Truth::effect(spec.did_effect, RSV_STAND_IN)
        },
        panel: Some(panel),
    })
}

/// A fully enumerable population: experimental units (treated with
/// `treat_prob`, labeled with `label_prob[d]`) and OBS-only units, with the
/// RSV drawn from one outcome-conditional law shared by both samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSpec {
    /// Outcome value per category.
    pub values: Vec<f64>,
    pub obs_share: f64,
    pub treat_prob: f64,
    pub label_prob: [f64; 2],
    /// Pr{Y(d)=k | e}.
    pub y_dist: [Vec<f64>; 2],
    /// Pr(Y=k) among OBS-only units.
    pub obs_y_dist: Vec<f64>,
    /// Pr(R=r | Y=k), K × M.
    pub r_given_y: Vec<Vec<f64>>,
    /// RSV vector per support point.
    pub r_values: Vec<Vec<f64>>,
}

fn simplex_ok(p: &[f64]) -> bool {
    p.iter().all(|x| (0.0..=1.0).contains(x)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

/// One enumerated population state with its probability.
#[derive(Debug, Clone, Copy)]
struct State {
    tag: SampleTag,
    d: Option<u8>,
    y: usize,
    r: usize,
    prob: f64,
}

impl FiniteSpec {
    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn support(&self) -> usize {
        self.r_values.len()
    }

    pub fn check(&self) -> Result<()> {
        let k = self.k();
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if k < 2 {
            return bad("at least two outcome categories");
        }
        if self.support() > ORACLE_SUPPORT_LIMIT {
            return Err(Error::SupportTooLarge {
                size: self.support(),
                limit: ORACLE_SUPPORT_LIMIT,
            });
        }
        if !(0.0..1.0).contains(&self.obs_share) || !prob_ok(self.treat_prob) {
            return bad("obs_share in [0,1) and treat_prob in (0,1)");
        }
        if self.label_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("label probabilities in [0,1]");
        }
        let dists = [&self.y_dist[0], &self.y_dist[1], &self.obs_y_dist];
        if dists.iter().any(|d| d.len() != k || !simplex_ok(d)) {
            return bad("outcome distributions must be K-simplices");
        }
        if self.r_given_y.len() != k || self.r_given_y.iter().any(|row| row.len() != self.support() || !simplex_ok(row)) {
            return bad("RSV law must be K rows of M-simplices");
        }
        let p = self.r_values.first().map_or(0, |v| v.len());
        if p == 0 || self.r_values.iter().any(|v| v.len() != p) {
            return bad("RSV values must share a positive dimension");
        }
        Ok(())
    }

    fn states(&self) -> Vec<State> {
        let mut out = Vec::new();
        let pe = 1.0 - self.obs_share;
        for d in 0..2u8 {
            let pd = if d == 1 { self.treat_prob } else { 1.0 - self.treat_prob };
            for (y, &py) in self.y_dist[d as usize].iter().enumerate() {
                for (r, &pr) in self.r_given_y[y].iter().enumerate() {
                    let base = pe * pd * py * pr;
                    let lab = self.label_prob[d as usize];
                    for (tag, w) in [(SampleTag::Both, lab), (SampleTag::Exp, 1.0 - lab)] {
                        if base * w > 0.0 {
                            out.push(State {
                                tag,
                                d: Some(d),
                                y,
                                r,
                                prob: base * w,
                            });
                        }
                    }
                }
            }
        }
        for (y, &py) in self.obs_y_dist.iter().enumerate() {
            for (r, &pr) in self.r_given_y[y].iter().enumerate() {
                let p = self.obs_share * py * pr;
                if p > 0.0 {
                    out.push(State {
                        tag: SampleTag::Obs,
                        d: None,
                        y,
                        r,
                        prob: p,
                    });
                }
            }
        }
        out
    }

    /// Random draw of `n` units.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let states = self.states();
        let mut rng = rng_for(seed, &[0xF1]);
        let units = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = states[states.len() - 1];
                for s in &states {
                    acc += s.prob;
                    if u < acc {
                        pick = *s;
                        break;
                    }
                }
                self.unit(&pick)
            })
            .collect();
        self.dataset(units)
    }

    /// Deterministic dataset with state counts ⌊n·prob⌉, for population-scale checks.
    pub fn exact_counts(&self, n: usize) -> Dataset {
        let mut units = Vec::new();
        for s in self.states() {
            let c = (s.prob * n as f64).round() as usize;
            units.extend(std::iter::repeat_with(|| self.unit(&s)).take(c));
        }
        self.dataset(units)
    }

    fn unit(&self, s: &State) -> UnitRecord {
        let r = self.r_values[s.r].clone();
        match s.tag {
            SampleTag::Obs => UnitRecord::obs(s.y, r),
            SampleTag::Both => UnitRecord::both(s.d.expect("e state"), s.y, r),
            SampleTag::Exp => UnitRecord::exp(s.d.expect("e state"), r),
        }
    }

    fn dataset(&self, units: Vec<UnitRecord>) -> Dataset {
        let mut ds = Dataset::new(units, self.k(), Mode::Incomplete);
        ds.rsv_dim = self.r_values[0].len();
        ds.outcome_values = self.values.clone();
        ds
    }
}

/// Population quantities at one RSV support point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub r: usize,
    pub f_r: f64,
    pub e_delta_e: f64,
    pub e_delta_o: Vec<f64>,
    pub sigma2: f64,
    pub h_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub reference: usize,
    /// Effect vector from the conditional-moment ratio.
    pub theta_ratio: Vec<f64>,
    /// Effect vector from potential-outcome distributions.
    pub theta_direct: Vec<f64>,
    pub theta_scalar_ratio: f64,
    pub theta_scalar_direct: f64,
    /// Largest |ratio − direct| over components.
    pub discrepancy: f64,
    /// Common-practice estimand μ̃(1) − μ̃(0).
    pub theta_tilde: f64,
    /// E(Δᵒ|R) vanishes on the support.
    pub irrelevant: bool,
    pub points: Vec<OraclePoint>,
}

/// Exact population moments by enumeration of every (tag, D, Y, R) state.
pub fn population_oracle(spec: &FiniteSpec) -> Result<OracleReport> {
    spec.check()?;
    let k = spec.k();
    let m = spec.support();
    let coding = OutcomeCoding::new(k, None)?;
    let comps = coding.components();
    let reference = coding.reference;
    let states = spec.states();

    let mut p_de = [0.0; 2];
    let mut p_yo = vec![0.0; k];
    for s in &states {
        if s.tag.in_e() {
            p_de[s.d.expect("e state") as usize] += s.prob;
        }
        if s.tag.in_o() {
            p_yo[s.y] += s.prob;
        }
    }
    if p_yo.contains(&0.0) {
        return Err(Error::ZeroCount {
            event: "observational outcome category".into(),
            context: " (population)".into(),
        });
    }
    let delta = |s: &State| -> (f64, Vec<f64>) {
        let de = match (s.tag.in_e(), s.d) {
            (true, Some(1)) => 1.0 / p_de[1],
            (true, Some(0)) => -1.0 / p_de[0],
            _ => 0.0,
        };
        let ind = |j: usize| (s.tag.in_o() && s.y == j) as u8 as f64 / p_yo[j];
        let dob = comps.iter().map(|&j| ind(j) - ind(reference)).collect();
        (de, dob)
    };

    let mut f_r = vec![0.0; m];
    let mut ce = vec![0.0; m];
    let mut co = vec![vec![0.0; comps.len()]; m];
    for s in &states {
        let (de, dob) = delta(s);
        f_r[s.r] += s.prob;
        ce[s.r] += s.prob * de;
        for (a, v) in dob.iter().enumerate() {
            co[s.r][a] += s.prob * v;
        }
    }
    for r in 0..m {
        if f_r[r] > 0.0 {
            ce[r] /= f_r[r];
            co[r].iter_mut().for_each(|v| *v /= f_r[r]);
        }
    }

    // Ratio route: f_R-weighted normal equations of E(Δᵉ|r) = E(Δᵒ|r)ᵀθ.
    let dim = comps.len();
    let mut g = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut bvec = nalgebra::DVector::<f64>::zeros(dim);
    for r in 0..m {
        for a in 0..dim {
            bvec[a] += f_r[r] * co[r][a] * ce[r];
            for b in 0..dim {
                g[(a, b)] += f_r[r] * co[r][a] * co[r][b];
            }
        }
    }
    let scale = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let irrelevant = scale < 1e-14 || g.singular_values().iter().fold(f64::INFINITY, |a, &v| a.min(v)) < 1e-12 * scale.max(1e-300);
    let theta_ratio: Vec<f64> = if irrelevant {
        vec![f64::NAN; dim]
    } else {
        g.lu().solve(&bvec).map(|s| s.iter().copied().collect()).unwrap_or_else(|| vec![f64::NAN; dim])
    };

    let theta_direct: Vec<f64> = comps.iter().map(|&j| spec.y_dist[1][j] - spec.y_dist[0][j]).collect();
    let discrepancy = theta_ratio
        .iter()
        .zip(&theta_direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut points = Vec::with_capacity(m);
    let mut sig = vec![0.0; m];
    for s in &states {
        let (de, dob) = delta(s);
        let fit: f64 = dob.iter().zip(&theta_direct).map(|(o, t)| o * t).sum();
        sig[s.r] += s.prob * (de - fit) * (de - fit);
    }
    for r in 0..m {
        let sigma2 = if f_r[r] > 0.0 { sig[r] / f_r[r] } else { f64::NAN };
        points.push(OraclePoint {
            r,
            f_r: f_r[r],
            e_delta_e: ce[r],
            e_delta_o: co[r].clone(),
            sigma2,
            h_star: co[r].iter().map(|v| v / sigma2).collect(),
        });
    }

    // Common practice: E(Y|R, o) averaged over R | D=d, e.
    let mut num_o = vec![0.0; m];
    let mut den_o = vec![0.0; m];
    let mut f_rd = [vec![0.0; m], vec![0.0; m]];
    for s in &states {
        if s.tag.in_o() {
            num_o[s.r] += s.prob * spec.values[s.y];
            den_o[s.r] += s.prob;
        }
        if s.tag.in_e() {
            f_rd[s.d.expect("e state") as usize][s.r] += s.prob;
        }
    }
    let mu_tilde = |d: usize| -> f64 {
        (0..m)
            .filter(|&r| f_rd[d][r] > 0.0)
            .map(|r| num_o[r] / den_o[r] * f_rd[d][r] / p_de[d])
            .sum()
    };
    let theta_tilde = mu_tilde(1) - mu_tilde(0);

    Ok(OracleReport {
        reference,
        theta_scalar_ratio: coding.reduce(&spec.values, &theta_ratio),
        theta_scalar_direct: coding.reduce(&spec.values, &theta_direct),
        theta_ratio,
        theta_direct,
        discrepancy,
        theta_tilde,
        irrelevant,
        points,
    })
}

/// Random finite-support population with full-support laws.
pub fn random_finite_spec(seed: u64) -> FiniteSpec {
    let mut rng = rng_for(seed, &[0x0A]);
    let k = rng.gen_range(2..=4);
    let m = rng.gen_range(k..=k + 5);
    let simplex = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    let y0 = simplex(k, &mut rng);
    let y1 = simplex(k, &mut rng);
    let q = simplex(k, &mut rng);
    let rgy: Vec<Vec<f64>> = (0..k).map(|_| simplex(m, &mut rng)).collect();
    let mut values: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    values.sort_by(f64::total_cmp);
    FiniteSpec {
        values,
        obs_share: rng.gen_range(0.1..0.6),
        treat_prob: rng.gen_range(0.2..0.8),
        label_prob: [rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7)],
        y_dist: [y0, y1],
        obs_y_dist: q,
        r_given_y: rgy,
        r_values: (0..m).map(|r| vec![r as f64]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_tags_and_truth() {
        let g = gen_calibrated(&DgpSpec::calibrated(0.0, 400, 3)).unwrap();
        assert!((g.truth.theta + 0.07).abs() < 1e-12);
        for u in &g.data.units {
            match u.treatment {
                Some(1) => assert!(u.sample == SampleTag::Exp && u.outcome.is_none()),
                _ => assert_eq!(u.sample, SampleTag::Both),
            }
        }
        assert!(g.truth.rsv_model.contains("stand-in"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = DgpSpec::calibrated(0.2, 300, 11);
        let a = gen_calibrated(&s).unwrap().data;
        let b = gen_calibrated(&s).unwrap().data;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        crate::data::write_csv_to(&a, &mut x).unwrap();
        crate::data::write_csv_to(&b, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn invalid_probabilities() {
        let s = DgpSpec::calibrated(0.9, 10, 0);
        assert_eq!(gen_calibrated(&s).unwrap_err().name(), "InvalidSpec");
        let a = DgpSpec::adversarial(1.0, 0.2, 10, 0);
        assert_eq!(gen_adversarial(&a).unwrap_err().name(), "InvalidSpec");
    }

    #[test]
    fn adversarial_metadata() {
        let g = gen_adversarial(&DgpSpec::adversarial(0.6, 0.2, 10, 0)).unwrap();
        assert!((g.truth.common_bias.unwrap() - 0.25).abs() < 1e-12);
        assert!((g.truth.theta + 0.4).abs() < 1e-12);
        let g = gen_adversarial(&DgpSpec::adversarial(0.2, 0.6, 10, 0)).unwrap();
        assert!((g.truth.common_bias.unwrap() + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_on_adversarial() {
        // θ̃ by hand: Pr(Y=1|R=1,o) = 2a/(1+a), Pr(R=1|D=d) = (1+p_d)/2.
        let (a, b) = (0.6, 0.2);
        let tilde_by_hand = 2.0 * a / (1.0 + a) * ((1.0 + b) / 2.0 - (1.0 + a) / 2.0);
        let o = population_oracle(&adversarial_finite(a, b)).unwrap();
        assert!((o.theta_scalar_ratio - (b - a)).abs() < 1e-12);
        assert!((o.theta_scalar_direct - (b - a)).abs() < 1e-12);
        assert!((o.theta_tilde - tilde_by_hand).abs() < 1e-12);
        assert!((o.theta_tilde - o.theta_scalar_direct - 0.25).abs() < 1e-12);
    }

    #[test]
    fn oracle_flags_irrelevance() {
        let mut f = adversarial_finite(0.6, 0.2);
        f.r_given_y = vec![vec![0.3, 0.7], vec![0.3, 0.7]];
        let o = population_oracle(&f).unwrap();
        assert!(o.irrelevant);
        assert!(o.points.iter().all(|p| p.e_delta_o[0].abs() < 1e-12));
    }

    #[test]
    fn oracle_support_limit() {
        let mut f = adversarial_finite(0.6, 0.2);
        f.r_values = vec![vec![0.0]; ORACLE_SUPPORT_LIMIT + 1];
        assert_eq!(population_oracle(&f).unwrap_err().name(), "SupportTooLarge");
    }

    #[test]
    fn iv_truth() {
        let mut s = DgpSpec {
            kind: DgpKind::Iv,
            complier_share: 1.0,
            always_share: 0.0,
            ..Default::default()
        };
        let (late, gap) = iv_population_late(&s);
        assert!((late - 0.3).abs() < 1e-12 && (gap - 1.0).abs() < 1e-12);
        s.complier_share = 0.0;
        s.always_share = 0.3;
        let g = gen_iv(&s).unwrap();
        assert!(g.truth.weak_instrument);
    }

    #[test]
    fn did_truth_ignores_drift() {
        for drift in [0.0, 0.1, 0.2] {
            let s = DgpSpec {
                kind: DgpKind::Did,
                did_drift: drift,
                ..Default::default()
            };
            let p = s.did_probs();
            let att = (p[1][1] - p[0][1]) - (p[1][0] - p[0][0]);
            assert!((att - 0.2).abs() < 1e-12);
            assert_eq!(gen_did(&s).unwrap().truth.att, Some(0.2));
        }
    }
}
