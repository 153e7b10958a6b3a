//! Continuous outcomes by ε-binning onto the discrete machinery.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dgp::FiniteSpec;
use crate::error::{Error, Result};

/// Largest category count chosen by [`BinningSpec::with_default_epsilon`].
pub const DEFAULT_MAX_BINS: usize = 20;

/// Bins of radius ε centred on a grid with spacing 2ε over [lo, hi].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub epsilon: f64,
    pub lo: f64,
    pub hi: f64,
    pub centers: Vec<f64>,
}

impl BinningSpec {
    pub fn new(lo: f64, hi: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidSpec(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(hi > lo) {
            return Err(Error::InvalidSpec(format!("need lo < hi, got [{lo}, {hi}]")));
        }
        let span = (hi - lo) / (2.0 * epsilon);
        // Round-off in span must not add a spurious bin.
        let k = ((span - 1e-9).ceil() as usize).max(1);
        let centers = (0..k).map(|j| lo + epsilon * (2 * j + 1) as f64).collect();
        Ok(BinningSpec { epsilon, lo, hi, centers })
    }

    /// ε giving at most [`DEFAULT_MAX_BINS`] bins.
    pub fn with_default_epsilon(lo: f64, hi: f64) -> Result<Self> {
        BinningSpec::new(lo, hi, (hi - lo) / (2.0 * DEFAULT_MAX_BINS as f64))
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Nearest center; midpoints go to the lower center.
    pub fn bin_index(&self, y: f64) -> Result<usize> {
        let tol = 1e-12 * (self.hi - self.lo);
        if !(y >= self.lo - tol && y <= self.hi + tol) {
            return Err(Error::OutOfSupport {
                value: y,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let k = self.k();
        let guess = (((y - self.lo) / (2.0 * self.epsilon)).floor().max(0.0) as usize).min(k - 1);
        let mut best = guess.saturating_sub(1);
        for j in guess.saturating_sub(1)..=(guess + 1).min(k - 1) {
            if (y - self.centers[j]).abs() < (y - self.centers[best]).abs() {
                best = j;
            }
        }
        Ok(best)
    }

    /// Worst-case discretization bias of the effect.
    pub fn bias_bound(&self) -> f64 {
        bias_bound(self.epsilon)
    }
}

pub fn bias_bound(epsilon: f64) -> f64 {
    2.0 * epsilon
}

/// Maps real outcomes to bin indices; the value map becomes the bin centers.
pub fn discretize(ds: &Dataset, outcomes: &[Option<f64>], spec: &BinningSpec) -> Result<Dataset> {
    if outcomes.len() != ds.len() {
        return Err(Error::DimMismatch {
            expected: ds.len(),
            got: outcomes.len(),
        });
    }
    let mut out = ds.clone();
    for (u, y) in out.units.iter_mut().zip(outcomes) {
        u.outcome = match y {
            Some(v) => Some(spec.bin_index(*v)?),
            None => None,
        };
    }
    out.k_outcomes = spec.k();
    out.outcome_values = spec.centers.clone();
    Ok(out)
}

/// Closed-form continuous process: Y(0) ~ U[0,1], Y(1) with density 2y on [0,1].
pub mod uniform_pair {
    /// CDF of Y(d) on [0,1].
    pub fn cdf(d: u8, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        if d == 0 {
            y
        } else {
            y * y
        }
    }

    pub fn density(d: u8, y: f64) -> f64 {
        if !(0.0..=1.0).contains(&y) {
            0.0
        } else if d == 0 {
            1.0
        } else {
            2.0 * y
        }
    }

    /// E Y(1) − E Y(0) by composite Simpson integration.
    pub fn effect_by_quadrature(panels: usize) -> f64 {
        let n = panels + panels % 2;
        let h = 1.0 / n as f64;
        let g = |y: f64| y * (density(1, y) - density(0, y));
        let mut s = g(0.0) + g(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        s * h / 3.0
    }

    pub const EFFECT: f64 = 2.0 / 3.0 - 0.5;
}

/// Population with the binned outcome of [`uniform_pair`] and an RSV drawn
/// from a confusion law over bins, shared by both samples.
pub fn binned_population(spec: &BinningSpec) -> FiniteSpec {
    let k = spec.k();
    let bin_probs = |d: u8| -> Vec<f64> {
        (0..k)
            .map(|j| {
                let a = spec.centers[j] - spec.epsilon;
                let b = spec.centers[j] + spec.epsilon;
                uniform_pair::cdf(d, b) - uniform_pair::cdf(d, a)
            })
            .collect()
    };
    let r_given_y = (0..k)
        .map(|j| {
            let w: Vec<f64> = (0..k).map(|r| (-(r as f64 - j as f64).abs()).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    FiniteSpec {
        values: spec.centers.clone(),
        obs_share: 0.5,
        treat_prob: 0.5,
        label_prob: [0.0, 0.0],
        y_dist: [bin_probs(0), bin_probs(1)],
        obs_y_dist: bin_probs(0),
        r_given_y,
        r_values: (0..k).map(|r| vec![r as f64]).collect(),
    }
}
