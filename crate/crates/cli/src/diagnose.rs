use clap::{Args, ValueEnum};
use rsv_core::data::{load_csv, split_folds, CsvSchema, Mode};
use rsv_core::diagnostics::{relevance_from_fit, spec_test_from_fits, stability_export, DiagnosticReport};
use rsv_core::estimate::{ate_moments, CrossFit, Inference, RepChoice};
use rsv_core::represent::NaiveSpec;
use rsv_core::Result;
use serde::Serialize;
use serde_json::Value;

use crate::output::{json_payload, out_dir, write};
use crate::{Common, FitArgs, Format};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Relevance,
    Specification,
    Stability,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RepArg {
    Learned,
    PredY,
    FirstFeature,
}

impl RepArg {
    fn choice(self) -> RepChoice {
        match self {
            RepArg::Learned => RepChoice::Learned,
            RepArg::PredY => RepChoice::Naive(NaiveSpec::PredY),
            RepArg::FirstFeature => RepChoice::Naive(NaiveSpec::FirstFeature),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum, default_value_t = Check::All)]
    pub check: Check,
    /// incomplete or complete.
    #[arg(long, value_parser = ["incomplete", "complete"], default_value = "incomplete")]
    pub mode: String,
    #[arg(long, default_value_t = 2)]
    pub k_outcomes: usize,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    #[arg(long)]
    pub cluster_col: Option<String>,
    #[arg(long, value_enum, default_value_t = RepArg::Learned)]
    pub rep_a: RepArg,
    #[arg(long, value_enum, default_value_t = RepArg::PredY)]
    pub rep_b: RepArg,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Serialize)]
struct Payload<'a> {
    #[serde(flatten)]
    report: &'a DiagnosticReport,
    notices: Vec<String>,
}

pub fn run(a: &DiagnoseArgs, echo: &Value) -> Result<()> {
    let mode = Mode::parse(&a.mode).expect("restricted by clap");
    let mut schema = CsvSchema { mode, ..Default::default() };
    if let Some(c) = &a.cluster_col {
        schema.cluster = c.clone();
    }
    let ds = load_csv(&a.data, &schema, a.k_outcomes)?;
    let cfg = a.fit.config(
        a.common.seed,
        Inference::Bootstrap {
            replications: a.bootstrap,
            cluster: true,
            whole_pipeline: false,
        },
    )?;
    let wants = |c: Check| a.check == c || a.check == Check::All;
    let needs_fit = wants(Check::Relevance) || wants(Check::Specification);
    let mut report = DiagnosticReport {
        relevance: None,
        spec_test: None,
        stability: None,
    };
    if needs_fit {
        let moments = ate_moments(ds.mode)?;
        let folds = split_folds(&ds, cfg.n_folds, cfg.seed)?;
        let fit_a = CrossFit::fit_with(&ds, &moments, folds.clone(), &cfg, &a.rep_a.choice())?;
        if wants(Check::Relevance) {
            report.relevance = Some(relevance_from_fit(&ds, &fit_a, &cfg)?);
        }
        if wants(Check::Specification) {
            let fit_b = CrossFit::fit_with(&ds, &moments, folds, &cfg, &a.rep_b.choice())?;
            report.spec_test = Some(spec_test_from_fits(&ds, &fit_a, &fit_b, &cfg)?);
        }
    }
    let dir = out_dir(&a.common.out)?;
    let mut notices = Vec::new();
    if wants(Check::Stability) {
        let s = stability_export(&ds, a.common.seed)?;
        for n in &s.notices {
            eprintln!("warning: {n}");
        }
        notices.extend(s.notices.iter().cloned());
        let mut buf = format!("# run_config: {echo}\n").into_bytes();
        s.write_csv(&mut buf)?;
        write(&dir, "stability.csv", std::str::from_utf8(&buf).expect("ascii output"))?;
        report.stability = Some(s);
    }
    let json = json_payload(echo, &Payload { report: &report, notices })?;
    write(&dir, "diagnostics.json", &json)?;
    match a.common.format {
        Format::Json => print!("{json}"),
        Format::Csv => {
            if let Some(r) = &report.relevance {
                println!("relevance,{},{},{},{}", r.stat, r.ci_low, r.ci_high, r.weak);
            }
            if let Some(t) = &report.spec_test {
                println!("specification,{},{},{},{}", t.diff, t.diff_se, t.p_value, t.theta_a - t.theta_b);
            }
        }
    }
    Ok(())
}
