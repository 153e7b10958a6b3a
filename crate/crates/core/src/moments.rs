//! Marginal event probabilities and per-unit variation statistics.
//!
//! Every moment in the crate has the same shape: a treatment-side statistic
//! built from experimental events and an outcome-side vector built from
//! observational outcome events, each an indicator divided by its marginal
//! probability. [`Moment`] enumerates the variants in use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mode, UnitRecord};
use crate::error::{Error, Result};

/// Outcome categories and the reference category that is differenced out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCoding {
    pub k: usize,
    pub reference: usize,
}

impl OutcomeCoding {
    /// Binary outcomes pivot on category 0 so the single component is Y=1;
    /// otherwise the last category is the pivot.
    pub fn default_reference(k: usize) -> usize {
        if k == 2 {
            0
        } else {
            k - 1
        }
    }

    pub fn new(k: usize, reference: Option<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidSpec("K must be at least 2".into()));
        }
        let reference = reference.unwrap_or_else(|| Self::default_reference(k));
        if reference >= k {
            return Err(Error::InvalidSpec(format!("reference category {reference} >= K")));
        }
        Ok(OutcomeCoding { k, reference })
    }

    pub fn binary() -> Self {
        OutcomeCoding { k: 2, reference: 0 }
    }

    /// Non-reference categories in ascending order.
    pub fn components(&self) -> Vec<usize> {
        (0..self.k).filter(|&j| j != self.reference).collect()
    }

    pub fn dim(&self) -> usize {
        self.k - 1
    }

    /// Scalar effect Σ_j (y_j − y_ref)·θ_j from the component vector.
    pub fn reduce(&self, values: &[f64], theta: &[f64]) -> f64 {
        let y_ref = values[self.reference];
        self.components()
            .iter()
            .zip(theta)
            .map(|(&j, t)| (values[j] - y_ref) * t)
            .sum()
    }
}

/// Empirical probabilities of the events entering the variation statistics,
/// each relative to the size of the unit set they were counted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCounts {
    pub n: usize,
    pub p_d1e: f64,
    pub p_d0e: f64,
    /// Pr(Y = k, o ∈ S̃).
    pub p_yo: Vec<f64>,
    /// Pr(Y = k, D = d, o ∈ S̃) indexed `[k][d]`; complete mode only.
    pub p_ydo: Option<Vec<[f64; 2]>>,
    /// Pr(D = d, Z = z, e ∈ S̃) indexed `2d + z`; IV mode only.
    pub p_cell: Option<[f64; 4]>,
}

impl MarginalCounts {
    /// Counts over an arbitrary multiset of units (bootstrap resamples repeat units).
    pub fn from_units<'a>(units: impl IntoIterator<Item = &'a UnitRecord>, k: usize, mode: Mode) -> Result<Self> {
        let mut n = 0usize;
        let mut d = [0usize; 2];
        let mut yo = vec![0usize; k];
        let mut ydo = vec![[0usize; 2]; k];
        let mut cell = [0usize; 4];
        for u in units {
            n += 1;
            if u.sample.in_e() {
                if let Some(t) = u.treatment {
                    d[t as usize] += 1;
                    if let Some(z) = u.instrument {
                        cell[2 * t as usize + z as usize] += 1;
                    }
                }
            }
            if u.sample.in_o() {
                if let Some(y) = u.outcome {
                    yo[y] += 1;
                    if let Some(t) = u.treatment {
                        ydo[y][t as usize] += 1;
                    }
                }
            }
        }
        if n == 0 {
            return Err(Error::ZeroCount {
                event: "empty unit set".into(),
                context: String::new(),
            });
        }
        let nf = n as f64;
        let mut c = MarginalCounts {
            n,
            p_d1e: d[1] as f64 / nf,
            p_d0e: d[0] as f64 / nf,
            p_yo: yo.iter().map(|&c| c as f64 / nf).collect(),
            p_ydo: None,
            p_cell: None,
        };
        let zero = |event: String| {
            Err(Error::ZeroCount {
                event,
                context: String::new(),
            })
        };
        match mode {
            Mode::Iv => {
                let pc = cell.map(|c| c as f64 / nf);
                for (i, p) in pc.iter().enumerate() {
                    if *p == 0.0 {
                        return zero(format!("D={},Z={},e", i / 2, i % 2));
                    }
                }
                c.p_cell = Some(pc);
            }
            _ => {
                if d[1] == 0 {
                    return zero("D=1,e".into());
                }
                if d[0] == 0 {
                    return zero("D=0,e".into());
                }
            }
        }
        if mode == Mode::Complete {
            let p: Vec<[f64; 2]> = ydo.iter().map(|r| [r[0] as f64 / nf, r[1] as f64 / nf]).collect();
            for (y, r) in p.iter().enumerate() {
                for (t, v) in r.iter().enumerate() {
                    if *v == 0.0 {
                        return zero(format!("Y={y},D={t},o"));
                    }
                }
            }
            c.p_ydo = Some(p);
        } else {
            for (y, v) in c.p_yo.iter().enumerate() {
                if *v == 0.0 {
                    return zero(format!("Y={y},o"));
                }
            }
        }
        Ok(c)
    }
}

/// Counts on the selected units, either pooled (key `""`) or per covariate stratum.
pub fn marginal_counts(ds: &Dataset, fold: &[usize], stratify: bool) -> Result<BTreeMap<String, MarginalCounts>> {
    if fold.is_empty() {
        return Err(Error::ZeroCount {
            event: "empty fold".into(),
            context: String::new(),
        });
    }
    let mut groups: BTreeMap<String, Vec<&UnitRecord>> = BTreeMap::new();
    for &i in fold {
        let u = &ds.units[i];
        let key = if stratify {
            u.covariate.clone().unwrap_or_default()
        } else {
            String::new()
        };
        groups.entry(key).or_default().push(u);
    }
    groups
        .into_iter()
        .map(|(k, us)| {
            let c = MarginalCounts::from_units(us, ds.k_outcomes, ds.mode)
                .map_err(|e| e.with_context(&format!("stratum {k:?}")))?;
            Ok((k, c))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationValues {
    pub delta_e: f64,
    /// Length K − 1, ordered as [`OutcomeCoding::components`].
    pub delta_o: Vec<f64>,
}

/// Which moment a variation statistic belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Moment {
    /// Treated minus untreated contrast; identifies the effect vector directly.
    Contrast,
    /// Arm-level moment for arm `d` (outcome side untreated); identifies the arm mean.
    Arm(u8),
    /// Arm-level moment with treatment-specific observational outcomes.
    CompleteArm(u8),
    /// Arm-level moment for the (treatment, instrument) cell.
    IvCell(u8, u8),
}

/// A treatment-side event: its sign in Δᵉ and marginal probability.
#[derive(Debug, Clone, Copy)]
pub struct ETerm {
    pub sign: f64,
    pub event: EEvent,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EEvent {
    Arm(u8),
    Cell(u8, u8),
}

impl EEvent {
    pub fn fires(&self, u: &UnitRecord) -> bool {
        match *self {
            EEvent::Arm(d) => u.is_arm_e(d),
            EEvent::Cell(d, z) => u.is_arm_e(d) && u.instrument == Some(z),
        }
    }
}

impl Moment {
    /// Arm-level moments subtract the reference outcome event from Δᵉ.
    pub fn arm_level(&self) -> bool {
        !matches!(self, Moment::Contrast)
    }

    pub fn e_terms(&self, c: &MarginalCounts) -> Vec<ETerm> {
        let arm = |d: u8, sign: f64| ETerm {
            sign,
            event: EEvent::Arm(d),
            p: if d == 1 { c.p_d1e } else { c.p_d0e },
        };
        match *self {
            Moment::Contrast => vec![arm(1, 1.0), arm(0, -1.0)],
            Moment::Arm(d) | Moment::CompleteArm(d) => vec![arm(d, 1.0)],
            Moment::IvCell(d, z) => vec![ETerm {
                sign: 1.0,
                event: EEvent::Cell(d, z),
                p: c.p_cell.expect("IV counts")[2 * d as usize + z as usize],
            }],
        }
    }

    /// Marginal probability of each observational outcome event.
    pub fn o_marginals(&self, c: &MarginalCounts) -> Vec<f64> {
        match *self {
            Moment::CompleteArm(d) => c
                .p_ydo
                .as_ref()
                .expect("complete-mode counts")
                .iter()
                .map(|r| r[d as usize])
                .collect(),
            _ => c.p_yo.clone(),
        }
    }

    /// Outcome category of the observational event the unit realizes, if any.
    pub fn o_event(&self, u: &UnitRecord) -> Option<usize> {
        if !u.sample.in_o() {
            return None;
        }
        match *self {
            Moment::CompleteArm(d) if u.treatment != Some(d) => None,
            _ => u.outcome,
        }
    }

    /// Realized (Δᵉ, Δᵒ) for one unit.
    pub fn variation(&self, u: &UnitRecord, c: &MarginalCounts, coding: &OutcomeCoding) -> VariationValues {
        let p_o = self.o_marginals(c);
        let r = coding.reference;
        let y = self.o_event(u);
        let ref_term = if y == Some(r) { 1.0 / p_o[r] } else { 0.0 };
        let mut delta_e: f64 = self
            .e_terms(c)
            .iter()
            .filter(|t| t.event.fires(u))
            .map(|t| t.sign / t.p)
            .sum();
        if self.arm_level() {
            delta_e -= ref_term;
        }
        let delta_o = coding
            .components()
            .into_iter()
            .map(|j| if y == Some(j) { 1.0 / p_o[j] } else { 0.0 } - ref_term)
            .collect();
        VariationValues { delta_e, delta_o }
    }

    /// Exclusive-event expansion of (Δᵉ − Δᵒᵀθ)² for one unit. Equal to the
    /// direct square whenever at most one event fires; for BOTH units the
    /// cross term is dropped.
    pub fn sigma2_expansion(&self, u: &UnitRecord, c: &MarginalCounts, coding: &OutcomeCoding, theta: &[f64]) -> f64 {
        let e: f64 = self
            .e_terms(c)
            .iter()
            .filter(|t| t.event.fires(u))
            .map(|t| 1.0 / (t.p * t.p))
            .sum();
        let p_o = self.o_marginals(c);
        let o = match self.o_event(u) {
            None => 0.0,
            Some(y) => {
                let coef = self.o_coefficient(y, coding, theta);
                coef * coef / (p_o[y] * p_o[y])
            }
        };
        e + o
    }

    /// Multiplier of 1{Y=y,o}/p_y in Δᵉ − Δᵒᵀθ, up to sign.
    pub fn o_coefficient(&self, y: usize, coding: &OutcomeCoding, theta: &[f64]) -> f64 {
        if y == coding.reference {
            let s: f64 = theta.iter().sum();
            if self.arm_level() {
                1.0 - s
            } else {
                s
            }
        } else {
            let pos = coding.components().iter().position(|&j| j == y).expect("component");
            theta[pos]
        }
    }
}

/// Contrast-moment variation (Δᵉ, Δᵒ) for one unit.
pub fn variation(u: &UnitRecord, c: &MarginalCounts, coding: &OutcomeCoding) -> VariationValues {
    Moment::Contrast.variation(u, c, coding)
}

/// Complete-mode arm-`d` variation; errors when the arm's counts are absent.
pub fn variation_complete(u: &UnitRecord, d: u8, c: &MarginalCounts, coding: &OutcomeCoding) -> Result<VariationValues> {
    let p = c.p_ydo.as_ref().ok_or_else(|| Error::ZeroCount {
        event: "complete-mode counts missing".into(),
        context: String::new(),
    })?;
    let pd = if d == 1 { c.p_d1e } else { c.p_d0e };
    if pd == 0.0 || p.iter().any(|r| r[d as usize] == 0.0) {
        return Err(Error::ZeroCount {
            event: format!("arm {d}"),
            context: String::new(),
        });
    }
    Ok(Moment::CompleteArm(d).variation(u, c, coding))
}

/// Binary closed form 1{D=1,e}/p² + 1{D=0,e}/p² + θ²[1{Y=1,o}/p² + 1{Y=0,o}/p²].
pub fn sigma2_expansion(theta: f64, u: &UnitRecord, c: &MarginalCounts) -> f64 {
    Moment::Contrast.sigma2_expansion(u, c, &OutcomeCoding::binary(), &[theta])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleTag;

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
    fn four_singletons_quarter_each() {
        let units = [
            UnitRecord::exp(1, vec![0.0]),
            UnitRecord::exp(0, vec![0.0]),
            UnitRecord::obs(1, vec![0.0]),
            UnitRecord::obs(0, vec![0.0]),
        ];
        let c = MarginalCounts::from_units(&units, 2, Mode::Incomplete).unwrap();
        assert_eq!((c.p_d1e, c.p_d0e), (0.25, 0.25));
        assert_eq!(c.p_yo, vec![0.25, 0.25]);
    }

    #[test]
    fn missing_outcome_class_is_zero_count() {
        let units = [
            UnitRecord::exp(1, vec![0.0]),
            UnitRecord::exp(0, vec![0.0]),
            UnitRecord::obs(0, vec![0.0]),
        ];
        let err = MarginalCounts::from_units(&units, 2, Mode::Incomplete).unwrap_err();
        assert_eq!(err.name(), "ZeroCount");
    }

    #[test]
    fn both_unit_enters_both_sides() {
        // Enumerate tag membership: BOTH is in e and in o.
        for tag in [SampleTag::Exp, SampleTag::Obs, SampleTag::Both] {
            assert_eq!(tag.in_e(), tag != SampleTag::Obs);
            assert_eq!(tag.in_o(), tag != SampleTag::Exp);
        }
        let units = [
            UnitRecord::both(1, 0, vec![0.0]),
            UnitRecord::exp(0, vec![0.0]),
            UnitRecord::obs(1, vec![0.0]),
            UnitRecord::obs(0, vec![0.0]),
        ];
        let c = MarginalCounts::from_units(&units, 2, Mode::Incomplete).unwrap();
        assert_eq!(c.p_d1e, 0.25);
        assert_eq!(c.p_yo[0], 0.5);
    }

    #[test]
    fn binary_variation_examples() {
        let c = counts(0.5, 0.5, vec![0.25, 0.5]);
        let cod = OutcomeCoding::binary();
        let v = variation(&UnitRecord::exp(1, vec![0.0]), &c, &cod);
        assert_eq!((v.delta_e, v.delta_o[0]), (2.0, 0.0));
        let v = variation(&UnitRecord::obs(0, vec![0.0]), &c, &cod);
        assert_eq!((v.delta_e, v.delta_o[0]), (0.0, -4.0));
    }

    #[test]
    fn three_category_vector() {
        // Componentwise 1{Y=y_j}/p_j − 1{Y=y_K}/p_K over all three realizations.
        let c = counts(0.5, 0.5, vec![0.2, 0.2, 0.1]);
        let cod = OutcomeCoding::new(3, None).unwrap();
        let expect = |y: usize| -> Vec<f64> {
            (0..2)
                .map(|j| {
                    let a = if y == j { 1.0 / c.p_yo[j] } else { 0.0 };
                    let b = if y == 2 { 1.0 / c.p_yo[2] } else { 0.0 };
                    a - b
                })
                .collect()
        };
        for y in 0..3 {
            let v = variation(&UnitRecord::obs(y, vec![0.0]), &c, &cod);
            assert_eq!(v.delta_o, expect(y));
            assert_eq!(v.delta_e, 0.0);
        }
        assert_eq!(variation(&UnitRecord::obs(0, vec![0.0]), &c, &cod).delta_o, vec![5.0, 0.0]);
    }

    fn complete_counts() -> MarginalCounts {
        let mut c = counts(0.25, 0.25, vec![0.25, 0.25]);
        c.p_ydo = Some(vec![[0.15, 0.1], [0.1, 0.15]]);
        c
    }

    #[test]
    fn complete_variation_examples() {
        let c = complete_counts();
        let cod = OutcomeCoding::binary();
        let v = variation_complete(&UnitRecord::exp(1, vec![0.0]), 1, &c, &cod).unwrap();
        assert_eq!((v.delta_e, v.delta_o[0]), (4.0, 0.0));
        // Shared active indicator 1{Y=0,D=1,o}: Δ̃ᵉ(1) = 0 − 1/0.1 and Δ̃ᵒ(1) = 0 − 1/0.1.
        let mut u = UnitRecord::obs(0, vec![0.0]);
        u.treatment = Some(1);
        let v = variation_complete(&u, 1, &c, &cod).unwrap();
        assert_eq!((v.delta_e, v.delta_o[0]), (-1.0 / 0.1, -1.0 / 0.1));
        let mut u = UnitRecord::obs(1, vec![0.0]);
        u.treatment = Some(0);
        let v = variation_complete(&u, 1, &c, &cod).unwrap();
        assert_eq!((v.delta_e, v.delta_o[0]), (0.0, 0.0));
    }

    #[test]
    fn sigma2_examples() {
        let c = counts(0.25, 0.5, vec![0.5, 0.5]);
        for th in [-3.0, 0.0, 7.5] {
            assert_eq!(sigma2_expansion(th, &UnitRecord::exp(1, vec![0.0]), &c), 16.0);
        }
        assert_eq!(sigma2_expansion(2.0, &UnitRecord::obs(1, vec![0.0]), &c), 16.0);
    }

    #[test]
    fn fold_means_vanish() {
        let units: Vec<UnitRecord> = (0..13)
            .map(|i| match i % 5 {
                0 => UnitRecord::exp(1, vec![0.0]),
                1 => UnitRecord::exp(0, vec![0.0]),
                2 => UnitRecord::obs(1, vec![0.0]),
                3 => UnitRecord::obs(0, vec![0.0]),
                _ => UnitRecord::both(1, 1, vec![0.0]),
            })
            .collect();
        let c = MarginalCounts::from_units(&units, 2, Mode::Incomplete).unwrap();
        let cod = OutcomeCoding::binary();
        let (se, so) = units.iter().fold((0.0, 0.0), |(a, b), u| {
            let v = variation(u, &c, &cod);
            (a + v.delta_e, b + v.delta_o[0])
        });
        assert!(se.abs() < 1e-12 && so.abs() < 1e-12);
    }

    #[test]
    fn reduction_uses_differences() {
        let cod = OutcomeCoding::new(3, None).unwrap();
        assert_eq!(cod.reduce(&[0.0, 1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert!((cod.reduce(&[0.0, 1.0, 2.0], &[0.1, 0.2]) - (-2.0 * 0.1 - 0.2)).abs() < 1e-15);
        assert_eq!(OutcomeCoding::binary().reduce(&[0.0, 1.0], &[0.3]), 0.3);
    }
}
