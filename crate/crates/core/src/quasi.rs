//! Instrumented (LATE) and two-period difference-in-differences (ATT)
//! estimation on top of the cross-fitted ratio machinery.
//!
//! Each α component is an arm-level ratio estimate of an outcome mean. LATE is
//! the Wald ratio of instrument-arm means, ATT the double difference of
//! period-arm means. Bootstrap replicates resample units once and reuse the
//! draw for every component, so the components stay paired.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_folds, Dataset, Mode, SampleTag, UnitRecord};
use crate::error::{Error, Result};
use crate::estimate::{bootstrap_draws, check_valid, CrossFit, EstimateConfig, Inference};
use crate::moments::{Moment, OutcomeCoding};
use crate::util::{derive_seed, fmt17, z_two_sided};

pub const DEFAULT_WEAK_FLOOR: f64 = 0.05;

/// E[Y] from arm-level category probabilities of the non-reference categories.
pub fn arm_mean(coding: &OutcomeCoding, values: &[f64], mu: &[f64]) -> f64 {
    let comps = coding.components();
    let rest: f64 = mu.iter().sum();
    comps.iter().zip(mu).map(|(&j, m)| values[j] * m).sum::<f64>() + values[coding.reference] * (1.0 - rest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvResult {
    /// α(d,z), indexed [d][z].
    pub alpha: [[f64; 2]; 2],
    pub alpha_z: [f64; 2],
    /// β(z) = E(D | e, Z=z).
    pub beta_z: [f64; 2],
    pub late: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha_level: f64,
    pub bootstrap_failed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidResult {
    /// α_t(d), indexed [t-1][d].
    pub alpha_t: [[f64; 2]; 2],
    pub att: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha_level: f64,
    pub bootstrap_failed: Option<usize>,
}

/// (β(0), β(1)) among experimental units of the given indices.
fn first_stage(ds: &Dataset, idx: impl Iterator<Item = usize>) -> Result<[f64; 2]> {
    let mut n = [0usize; 2];
    let mut treated = [0usize; 2];
    for i in idx {
        let u = &ds.units[i];
        if let (true, Some(z), Some(d)) = (u.sample.in_e(), u.instrument, u.treatment) {
            n[z as usize] += 1;
            treated[z as usize] += d as usize;
        }
    }
    if n.contains(&0) {
        return Err(Error::ZeroCount {
            event: "experimental units with Z=z".into(),
            context: String::new(),
        });
    }
    Ok([treated[0] as f64 / n[0] as f64, treated[1] as f64 / n[1] as f64])
}

const IV_CELLS: [Moment; 4] = [Moment::IvCell(0, 0), Moment::IvCell(0, 1), Moment::IvCell(1, 0), Moment::IvCell(1, 1)];

fn assemble_iv(coding: &OutcomeCoding, values: &[f64], theta: &[Vec<f64>], beta: [f64; 2]) -> ([[f64; 2]; 2], [f64; 2], f64) {
    let mut alpha = [[0.0; 2]; 2];
    for d in 0..2 {
        for z in 0..2 {
            alpha[d][z] = arm_mean(coding, values, &theta[2 * d + z]);
        }
    }
    let alpha_z = [0, 1].map(|z| alpha[1][z] * beta[z] + alpha[0][z] * (1.0 - beta[z]));
    let late = (alpha_z[1] - alpha_z[0]) / (beta[1] - beta[0]);
    (alpha, alpha_z, late)
}

fn unstratified(cfg: &EstimateConfig) -> EstimateConfig {
    EstimateConfig {
        stratify: Some(false),
        ..cfg.clone()
    }
}

/// Bootstrap replicate count and cluster flag, if the bootstrap is requested.
fn bootstrap_plan(cfg: &EstimateConfig) -> Result<Option<(usize, bool)>> {
    match cfg.inference {
        Inference::None => Ok(None),
        Inference::Bootstrap {
            replications,
            cluster,
            whole_pipeline: false,
        } => Ok(Some((replications, cluster))),
        _ => Err(Error::Unsupported("quasi-experimental designs support the frozen-representation bootstrap only".into())),
    }
}

pub fn iv_late(ds: &Dataset, cfg: &EstimateConfig, weak_floor: f64) -> Result<IvResult> {
    if ds.mode != Mode::Iv {
        return Err(Error::Unsupported("iv_late needs IV mode".into()));
    }
    check_valid(ds)?;
    let beta = first_stage(ds, 0..ds.len())?;
    let gap = beta[1] - beta[0];
    if gap.abs() < weak_floor {
        return Err(Error::WeakInstrument { gap, floor: weak_floor });
    }
    let cfg = unstratified(cfg);
    let folds = split_folds(ds, cfg.n_folds, cfg.seed)?;
    let cf = CrossFit::fit(ds, &IV_CELLS, folds, &cfg)?;
    let agg = cf.evaluate(ds, &cf.identity_samples(), true)?;
    let (alpha, alpha_z, late) = assemble_iv(&cf.coding, &ds.outcome_values, &agg.theta, beta);
    let mut se = f64::NAN;
    let mut failed = None;
    if let Some((b, cluster)) = bootstrap_plan(&cfg)? {
        let draws = bootstrap_draws(
            b,
            derive_seed(cfg.seed, &[0x1A7E]),
            |rng| cf.resample(ds, cluster, rng),
            |s| {
                let a = cf.evaluate(ds, s, false)?;
                let bz = first_stage(ds, s.iter().flatten().copied())?;
                if (bz[1] - bz[0]).abs() < weak_floor {
                    return Err(Error::WeakInstrument { gap: bz[1] - bz[0], floor: weak_floor });
                }
                Ok(vec![assemble_iv(&cf.coding, &ds.outcome_values, &a.theta, bz).2])
            },
        );
        if !draws.reliable() {
            return Err(Error::DegenerateBootstrap {
                failed: draws.failed,
                total: draws.total,
            });
        }
        se = draws.se()[0];
        failed = Some(draws.failed);
    }
    let z = z_two_sided(cfg.alpha);
    Ok(IvResult {
        alpha,
        alpha_z,
        beta_z: beta,
        late,
        se,
        ci_low: late - z * se,
        ci_high: late + z * se,
        alpha_level: cfg.alpha,
        bootstrap_failed: failed,
    })
}

/// One unit observed in both periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelUnit {
    pub sample: SampleTag,
    pub treatment: Option<u8>,
    /// Outcome category per period.
    pub outcomes: [Option<usize>; 2],
    /// RSV per period.
    pub rsv: [Vec<f64>; 2],
    pub covariate: Option<String>,
    pub cluster: Option<String>,
}

/// Wide two-period panel; both periods of a unit travel together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidPanel {
    pub units: Vec<PanelUnit>,
    pub k_outcomes: usize,
    pub rsv_dim: usize,
    pub outcome_values: Vec<f64>,
}

impl DidPanel {
    /// Cross-section of period `t` (1 or 2), unit order preserved.
    pub fn period(&self, t: u8) -> Dataset {
        let i = (t - 1) as usize;
        let units = self
            .units
            .iter()
            .map(|p| UnitRecord {
                sample: p.sample,
                treatment: p.treatment,
                outcome: p.outcomes[i],
                covariate: p.covariate.clone(),
                rsv: p.rsv[i].clone(),
                cluster: p.cluster.clone(),
                instrument: None,
                period: Some(t),
            })
            .collect();
        let mut ds = Dataset::new(units, self.k_outcomes, Mode::Did);
        ds.rsv_dim = self.rsv_dim;
        ds.outcome_values = self.outcome_values.clone();
        ds
    }

    /// Long format: period 1 rows, then period 2 rows.
    pub fn to_long(&self) -> Dataset {
        let mut ds = self.period(1);
        ds.units.extend(self.period(2).units);
        ds
    }

    /// Reads `sample, treatment, y_1, y_2, r1_1.., r2_1.., [cluster], [x]`.
    pub fn read_csv<R: Read>(reader: R, k_outcomes: usize) -> Result<DidPanel> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &str| {
            find(name).ok_or_else(|| Error::SchemaViolation {
                row: 0,
                message: format!("missing column {name:?}"),
            })
        };
        let sample_col = need("sample")?;
        let treat_col = need("treatment")?;
        let y_cols = [need("y_1")?, need("y_2")?];
        let rsv_cols = |prefix: &str| -> Vec<usize> {
            (1..)
                .map_while(|j| find(&format!("{prefix}{j}")))
                .collect()
        };
        let r_cols = [rsv_cols("r1_"), rsv_cols("r2_")];
        if r_cols[0].is_empty() || r_cols[0].len() != r_cols[1].len() {
            return Err(Error::SchemaViolation {
                row: 0,
                message: "need matching r1_1.. and r2_1.. columns".into(),
            });
        }
        let cluster_col = find("cluster");
        let x_col = find("x");
        let mut units = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let cell = |c: usize| rec.get(c).unwrap_or("").trim();
            let missing = |s: &str| s.is_empty() || s == "NA";
            let malformed = |m: String| Error::MalformedRow { row, message: m };
            let sample = SampleTag::parse(cell(sample_col)).ok_or_else(|| malformed(format!("bad sample {:?}", cell(sample_col))))?;
            let treatment = match cell(treat_col) {
                s if missing(s) => None,
                "0" => Some(0),
                "1" => Some(1),
                s => return Err(malformed(format!("treatment must be 0 or 1, got {s:?}"))),
            };
            let mut outcomes = [None, None];
            for t in 0..2 {
                let s = cell(y_cols[t]);
                if !missing(s) {
                    outcomes[t] = Some(s.parse::<usize>().map_err(|_| malformed(format!("outcome must be a category index, got {s:?}")))?);
                }
            }
            let mut rsv = [Vec::new(), Vec::new()];
            for t in 0..2 {
                for &c in &r_cols[t] {
                    rsv[t].push(cell(c).parse::<f64>().map_err(|_| malformed(format!("non-numeric rsv {:?}", cell(c))))?);
                }
            }
            let opt = |c: Option<usize>| c.map(cell).filter(|s| !missing(s)).map(str::to_string);
            units.push(PanelUnit {
                sample,
                treatment,
                outcomes,
                rsv,
                covariate: opt(x_col),
                cluster: opt(cluster_col),
            });
        }
        let panel = DidPanel {
            rsv_dim: r_cols[0].len(),
            units,
            k_outcomes,
            outcome_values: (0..k_outcomes).map(|k| k as f64).collect(),
        };
        check_valid(&panel.to_long())?;
        Ok(panel)
    }

    pub fn load_csv(path: impl AsRef<Path>, k_outcomes: usize) -> Result<DidPanel> {
        DidPanel::read_csv(std::fs::File::open(path)?, k_outcomes)
    }

    pub fn write_csv_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["sample".to_string(), "treatment".into(), "y_1".into(), "y_2".into()];
        for t in 1..=2 {
            header.extend((1..=self.rsv_dim).map(|j| format!("r{t}_{j}")));
        }
        header.push("cluster".into());
        writeln!(w, "{}", header.join(","))?;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
        for u in &self.units {
            let mut row = vec![
                u.sample.as_str().to_string(),
                opt(u.treatment.map(|d| d.to_string())),
                opt(u.outcomes[0].map(|y| y.to_string())),
                opt(u.outcomes[1].map(|y| y.to_string())),
            ];
            for r in &u.rsv {
                row.extend(r.iter().map(|v| format!("{v:?}")));
            }
            row.push(opt(u.cluster.clone()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(f))
    }
}

const DID_ARMS: [Moment; 2] = [Moment::Arm(0), Moment::Arm(1)];

fn assemble_did(coding: &OutcomeCoding, values: &[f64], periods: [&[Vec<f64>]; 2]) -> ([[f64; 2]; 2], f64) {
    let mut a = [[0.0; 2]; 2];
    for t in 0..2 {
        for d in 0..2 {
            a[t][d] = arm_mean(coding, values, &periods[t][d]);
        }
    }
    (a, (a[1][1] - a[0][1]) - (a[1][0] - a[0][0]))
}

pub fn did_att(panel: &DidPanel, cfg: &EstimateConfig) -> Result<DidResult> {
    let cfg = unstratified(cfg);
    let ds = [panel.period(1), panel.period(2)];
    for d in &ds {
        check_valid(d)?;
    }
    let folds = split_folds(&ds[0], cfg.n_folds, cfg.seed)?;
    let cf: Vec<CrossFit> = ds
        .iter()
        .enumerate()
        .map(|(t, d)| CrossFit::fit(d, &DID_ARMS, folds.clone(), &cfg).map_err(|e| e.with_context(&format!("period {}", t + 1))))
        .collect::<Result<_>>()?;
    let samples = cf[0].identity_samples();
    let aggs: Vec<_> = (0..2)
        .map(|t| cf[t].evaluate(&ds[t], &samples, true).map_err(|e| e.with_context(&format!("period {}", t + 1))))
        .collect::<Result<_>>()?;
    let coding = cf[0].coding;
    let values = &panel.outcome_values;
    let (alpha_t, att) = assemble_did(&coding, values, [&aggs[0].theta, &aggs[1].theta]);
    let mut se = f64::NAN;
    let mut failed = None;
    if let Some((b, cluster)) = bootstrap_plan(&cfg)? {
        let draws = bootstrap_draws(
            b,
            derive_seed(cfg.seed, &[0xD1D]),
            |rng| cf[0].resample(&ds[0], cluster, rng),
            |s| {
                let a1 = cf[0].evaluate(&ds[0], s, false)?;
                let a2 = cf[1].evaluate(&ds[1], s, false)?;
                Ok(vec![assemble_did(&coding, values, [&a1.theta, &a2.theta]).1])
            },
        );
        if !draws.reliable() {
            return Err(Error::DegenerateBootstrap {
                failed: draws.failed,
                total: draws.total,
            });
        }
        se = draws.se()[0];
        failed = Some(draws.failed);
    }
    let z = z_two_sided(cfg.alpha);
    Ok(DidResult {
        alpha_t,
        att,
        se,
        ci_low: att - z * se,
        ci_high: att + z * se,
        alpha_level: cfg.alpha,
        bootstrap_failed: failed,
    })
}

impl IvResult {
    pub const CSV_HEADER: &'static str = "late,se,ci_low,ci_high,beta_0,beta_1,alpha_0,alpha_1";

    pub fn to_csv_row(&self) -> String {
        [self.late, self.se, self.ci_low, self.ci_high, self.beta_z[0], self.beta_z[1], self.alpha_z[0], self.alpha_z[1]]
            .map(fmt17)
            .join(",")
    }
}

impl DidResult {
    pub const CSV_HEADER: &'static str = "att,se,ci_low,ci_high,alpha_1_0,alpha_1_1,alpha_2_0,alpha_2_1";

    pub fn to_csv_row(&self) -> String {
        [
            self.att,
            self.se,
            self.ci_low,
            self.ci_high,
            self.alpha_t[0][0],
            self.alpha_t[0][1],
            self.alpha_t[1][0],
            self.alpha_t[1][1],
        ]
        .map(fmt17)
        .join(",")
    }
}
