use clap::{Args, ValueEnum};
use rsv_core::data::{load_csv, read_csv_real_outcome, CsvSchema, Mode};
use rsv_core::estimate::{estimate_ate, EstimateResult, Inference};
use rsv_core::multivalued::{discretize, BinningSpec};
use rsv_core::quasi::{did_att, iv_late, DidPanel, DidResult, IvResult, DEFAULT_WEAK_FLOOR};
use rsv_core::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::output::{csv_payload, json_payload, out_dir, write};
use crate::{Common, FitArgs, Format};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Incomplete,
    Complete,
    Iv,
    Did,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceArg {
    Bootstrap,
    Analytic,
    None,
}

#[derive(Args, Debug, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Incomplete)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    pub k_outcomes: usize,
    /// Bin a real-valued outcome into bins of radius ε.
    #[arg(long)]
    pub bin_epsilon: Option<f64>,
    /// Outcome support `lo,hi` for binning; defaults to the observed range.
    #[arg(long)]
    pub bin_range: Option<String>,
    /// Bootstrap replications.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, value_enum, default_value_t = InferenceArg::Bootstrap)]
    pub inference: InferenceArg,
    /// Refit the representation on every bootstrap resample.
    #[arg(long)]
    pub whole_pipeline: bool,
    #[arg(long)]
    pub cluster_col: Option<String>,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub common: Common,
}

impl EstimateArgs {
    fn inference(&self) -> Inference {
        match self.inference {
            InferenceArg::Bootstrap => Inference::Bootstrap {
                replications: self.bootstrap,
                cluster: true,
                whole_pipeline: self.whole_pipeline,
            },
            InferenceArg::Analytic => Inference::Analytic,
            InferenceArg::None => Inference::None,
        }
    }

    fn schema(&self, mode: Mode) -> CsvSchema {
        let mut s = CsvSchema { mode, ..Default::default() };
        if let Some(c) = &self.cluster_col {
            s.cluster = c.clone();
        }
        s
    }
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidSpec(format!("--bin-range expects lo,hi, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn emit<T: Serialize>(a: &EstimateArgs, echo: &Value, result: &T, header: &str, row: String) -> Result<()> {
    let dir = out_dir(&a.common.out)?;
    let json = json_payload(echo, result)?;
    let csv = csv_payload(echo, header, &[row]);
    write(&dir, "estimate.json", &json)?;
    write(&dir, "estimate.csv", &csv)?;
    match a.common.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{csv}"),
    }
    Ok(())
}

pub fn run(a: &EstimateArgs, echo: &Value) -> Result<()> {
    let cfg = a.fit.config(a.common.seed, a.inference())?;
    match a.mode {
        ModeArg::Iv => {
            let ds = load_csv(&a.data, &a.schema(Mode::Iv), a.k_outcomes)?;
            let r: IvResult = iv_late(&ds, &cfg, DEFAULT_WEAK_FLOOR)?;
            emit(a, echo, &r, IvResult::CSV_HEADER, r.to_csv_row())
        }
        ModeArg::Did => {
            let panel = DidPanel::load_csv(&a.data, a.k_outcomes)?;
            let r: DidResult = did_att(&panel, &cfg)?;
            emit(a, echo, &r, DidResult::CSV_HEADER, r.to_csv_row())
        }
        ModeArg::Incomplete | ModeArg::Complete => {
            let mode = if a.mode == ModeArg::Complete { Mode::Complete } else { Mode::Incomplete };
            let schema = a.schema(mode);
            let r: EstimateResult = match a.bin_epsilon {
                None => estimate_ate(&load_csv(&a.data, &schema, a.k_outcomes)?, &cfg)?,
                Some(eps) => {
                    let (ds, ys) = read_csv_real_outcome(std::fs::File::open(&a.data)?, &schema)?;
                    let (lo, hi) = match &a.bin_range {
                        Some(s) => parse_range(s)?,
                        None => {
                            let seen: Vec<f64> = ys.iter().flatten().copied().collect();
                            if seen.is_empty() {
                                return Err(Error::EmptySample("no observed outcomes to bin".into()));
                            }
                            (seen.iter().copied().fold(f64::INFINITY, f64::min), seen.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                        }
                    };
                    let spec = BinningSpec::new(lo, hi, eps)?;
                    let mut r = estimate_ate(&discretize(&ds, &ys, &spec)?, &cfg)?;
                    r.discretization_bias_bound = Some(spec.bias_bound());
                    r
                }
            };
            emit(a, echo, &r, EstimateResult::CSV_HEADER, r.to_csv_row())
        }
    }
}
