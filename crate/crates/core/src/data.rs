//! Two-sample data model, CSV ingest/egress, validation, and fold splits.
//!
//! A unit belongs to the experimental sample (`e`), the observational sample
//! (`o`), or both. Every moment in the crate is phrased through the membership
//! predicates [`SampleTag::in_e`] and [`SampleTag::in_o`], so BOTH units enter
//! each side exactly once.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;

/// Upper bound on cross-fitting folds.
pub const MAX_FOLDS: usize = 10;
/// Re-randomizations attempted before a split is declared infeasible.
pub const SPLIT_RETRIES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleTag {
    #[serde(rename = "e")]
    Exp,
    #[serde(rename = "o")]
    Obs,
    #[serde(rename = "eo")]
    Both,
}

impl SampleTag {
    pub fn in_e(self) -> bool {
        matches!(self, SampleTag::Exp | SampleTag::Both)
    }

    pub fn in_o(self) -> bool {
        matches!(self, SampleTag::Obs | SampleTag::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleTag::Exp => "e",
            SampleTag::Obs => "o",
            SampleTag::Both => "eo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "e" => Some(SampleTag::Exp),
            "o" => Some(SampleTag::Obs),
            "eo" | "oe" => Some(SampleTag::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub sample: SampleTag,
    /// Binary treatment, 0 or 1.
    pub treatment: Option<u8>,
    /// Outcome category index in `0..k_outcomes`.
    pub outcome: Option<usize>,
    /// Discrete covariate label.
    pub covariate: Option<String>,
    pub rsv: Vec<f64>,
    pub cluster: Option<String>,
    /// Binary instrument, IV mode only.
    pub instrument: Option<u8>,
    /// Period 1 or 2, DiD mode only.
    pub period: Option<u8>,
}

impl UnitRecord {
    pub fn new(sample: SampleTag, treatment: Option<u8>, outcome: Option<usize>, rsv: Vec<f64>) -> Self {
        UnitRecord {
            sample,
            treatment,
            outcome,
            covariate: None,
            rsv,
            cluster: None,
            instrument: None,
            period: None,
        }
    }

    pub fn exp(d: u8, rsv: Vec<f64>) -> Self {
        Self::new(SampleTag::Exp, Some(d), None, rsv)
    }

    pub fn obs(y: usize, rsv: Vec<f64>) -> Self {
        Self::new(SampleTag::Obs, None, Some(y), rsv)
    }

    pub fn both(d: u8, y: usize, rsv: Vec<f64>) -> Self {
        Self::new(SampleTag::Both, Some(d), Some(y), rsv)
    }

    pub fn with_covariate(mut self, x: impl Into<String>) -> Self {
        self.covariate = Some(x.into());
        self
    }

    pub fn with_cluster(mut self, c: impl Into<String>) -> Self {
        self.cluster = Some(c.into());
        self
    }

    pub fn with_instrument(mut self, z: u8) -> Self {
        self.instrument = Some(z);
        self
    }

    /// 1{D = d, e ∈ S̃}.
    pub fn is_arm_e(&self, d: u8) -> bool {
        self.sample.in_e() && self.treatment == Some(d)
    }

    /// 1{Y = k, o ∈ S̃}.
    pub fn is_outcome_o(&self, k: usize) -> bool {
        self.sample.in_o() && self.outcome == Some(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Observational sample untreated (treatment absent or 0).
    Incomplete,
    /// Observational sample carries both treatment values.
    Complete,
    Iv,
    Did,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "incomplete" => Some(Mode::Incomplete),
            "complete" => Some(Mode::Complete),
            "iv" => Some(Mode::Iv),
            "did" => Some(Mode::Did),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub units: Vec<UnitRecord>,
    pub k_outcomes: usize,
    pub rsv_dim: usize,
    pub mode: Mode,
    /// Real value of each outcome category; defaults to `0..K`.
    pub outcome_values: Vec<f64>,
}

impl Dataset {
    pub fn new(units: Vec<UnitRecord>, k_outcomes: usize, mode: Mode) -> Self {
        let rsv_dim = units.first().map_or(0, |u| u.rsv.len());
        Dataset {
            units,
            k_outcomes,
            rsv_dim,
            mode,
            outcome_values: (0..k_outcomes).map(|k| k as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn count_by_tag(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for u in &self.units {
            *m.entry(u.sample.as_str().to_string()).or_insert(0) += 1;
        }
        m
    }

    /// Sorted distinct covariate labels; empty when no unit has one.
    pub fn strata(&self) -> Vec<String> {
        let mut s: Vec<String> = self.units.iter().filter_map(|u| u.covariate.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn has_clusters(&self) -> bool {
        self.units.iter().any(|u| u.cluster.is_some())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            units: Vec::new(),
            k_outcomes: self.k_outcomes,
            rsv_dim: self.rsv_dim,
            mode: self.mode,
            outcome_values: self.outcome_values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: String,
    pub row: Option<usize>,
    pub message: String,
}

impl Violation {
    fn at(rule: &str, row: usize, message: impl Into<String>) -> Self {
        Violation {
            rule: rule.to_string(),
            row: Some(row),
            message: message.into(),
        }
    }

    fn global(rule: &str, message: impl Into<String>) -> Self {
        Violation {
            rule: rule.to_string(),
            row: None,
            message: message.into(),
        }
    }
}

/// Checks every dataset invariant; empty iff the dataset is valid.
pub fn validate(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.k_outcomes < 2 {
        out.push(Violation::global("k_outcomes", "K must be at least 2"));
    }
    if ds.outcome_values.len() != ds.k_outcomes {
        out.push(Violation::global("value_map", "value map length differs from K"));
    }
    if ds.rsv_dim == 0 {
        out.push(Violation::global("rsv_dim", "RSV dimension must be at least 1"));
    }
    for (i, u) in ds.units.iter().enumerate() {
        if u.rsv.len() != ds.rsv_dim {
            out.push(Violation::at(
                "rsv_dim",
                i,
                format!("rsv has {} entries, expected {}", u.rsv.len(), ds.rsv_dim),
            ));
        }
        if u.rsv.iter().any(|v| !v.is_finite()) {
            out.push(Violation::at("rsv_finite", i, "non-finite rsv entry"));
        }
        if matches!(u.treatment, Some(t) if t > 1) {
            out.push(Violation::at("binary_treatment", i, "treatment not in {0,1}"));
        }
        if matches!(u.instrument, Some(z) if z > 1) {
            out.push(Violation::at("binary_instrument", i, "instrument not in {0,1}"));
        }
        if matches!(u.outcome, Some(y) if y >= ds.k_outcomes) {
            out.push(Violation::at("outcome_range", i, "outcome index >= K"));
        }
        match u.sample {
            SampleTag::Exp => {
                if u.treatment.is_none() {
                    out.push(Violation::at("exp_treatment", i, "EXP unit without treatment"));
                }
                if u.outcome.is_some() {
                    out.push(Violation::at("exp_outcome", i, "EXP unit with an outcome"));
                }
            }
            SampleTag::Obs => {
                if u.outcome.is_none() {
                    out.push(Violation::at("obs_outcome", i, "OBS unit without outcome"));
                }
                match ds.mode {
                    Mode::Complete if u.treatment.is_none() => {
                        out.push(Violation::at("complete_regime", i, "OBS unit without treatment in complete mode"))
                    }
                    Mode::Incomplete | Mode::Iv | Mode::Did if u.treatment == Some(1) => out.push(Violation::at(
                        "incomplete_regime",
                        i,
                        "treated OBS unit in incomplete-case mode (observational sample must be untreated)",
                    )),
                    _ => {}
                }
            }
            SampleTag::Both => {
                if u.treatment.is_none() || u.outcome.is_none() {
                    out.push(Violation::at("both_fields", i, "BOTH unit needs treatment and outcome"));
                }
            }
        }
        if ds.mode == Mode::Iv && u.sample.in_e() && u.instrument.is_none() {
            out.push(Violation::at("iv_instrument", i, "experimental unit without instrument"));
        }
        if ds.mode == Mode::Did && !matches!(u.period, Some(1) | Some(2)) {
            out.push(Violation::at("did_period", i, "period must be 1 or 2"));
        }
    }
    if !ds.units.iter().any(|u| u.sample.in_e()) {
        out.push(Violation::global("sample_presence", "no experimental units"));
    }
    if !ds.units.iter().any(|u| u.sample.in_o()) {
        out.push(Violation::global("sample_presence", "no observational units"));
    }
    if ds.mode == Mode::Complete {
        for d in 0..=1u8 {
            if !ds.units.iter().any(|u| u.sample.in_o() && u.treatment == Some(d)) {
                out.push(Violation::global(
                    "complete_regime",
                    format!("observational sample lacks treatment value {d}"),
                ));
            }
        }
    }
    out
}

/// Column names used by [`load_csv`] and [`write_csv`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub sample: String,
    pub treatment: String,
    pub outcome: String,
    pub covariate: String,
    pub cluster: String,
    pub instrument: String,
    pub period: String,
    pub rsv_prefix: String,
    pub strict: bool,
    pub mode: Mode,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            sample: "sample".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariate: "x".into(),
            cluster: "cluster".into(),
            instrument: "instrument".into(),
            period: "period".into(),
            rsv_prefix: "r_".into(),
            strict: true,
            mode: Mode::Incomplete,
        }
    }
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

fn parse_binary(cell: &str, row: usize, col: &str) -> Result<Option<u8>> {
    if is_missing(cell) {
        return Ok(None);
    }
    match cell.trim() {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(Error::MalformedRow {
            row,
            message: format!("{col} must be 0 or 1, got {other:?}"),
        }),
    }
}

struct Columns {
    sample: usize,
    treatment: Option<usize>,
    outcome: Option<usize>,
    covariate: Option<usize>,
    cluster: Option<usize>,
    instrument: Option<usize>,
    period: Option<usize>,
    rsv: Vec<usize>,
}

fn locate_columns(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let sample = find(&schema.sample).ok_or_else(|| Error::SchemaViolation {
        row: 0,
        message: format!("missing column {:?}", schema.sample),
    })?;
    let mut rsv: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.trim()
                .strip_prefix(schema.rsv_prefix.as_str())
                .and_then(|s| s.parse::<usize>().ok())
                .map(|j| (j, i))
        })
        .collect();
    rsv.sort();
    if rsv.is_empty() {
        return Err(Error::SchemaViolation {
            row: 0,
            message: format!("no {}* columns", schema.rsv_prefix),
        });
    }
    for (pos, (j, _)) in rsv.iter().enumerate() {
        if *j != pos + 1 {
            return Err(Error::SchemaViolation {
                row: 0,
                message: format!("rsv columns must be {p}1..{p}p without gaps", p = schema.rsv_prefix),
            });
        }
    }
    Ok(Columns {
        sample,
        treatment: find(&schema.treatment),
        outcome: find(&schema.outcome),
        covariate: find(&schema.covariate),
        cluster: find(&schema.cluster),
        instrument: find(&schema.instrument),
        period: find(&schema.period),
        rsv: rsv.into_iter().map(|(_, i)| i).collect(),
    })
}

/// Parses rows; outcome cells are returned raw so callers choose index or real parsing.
fn parse_rows<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<(UnitRecord, Option<String>)>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = locate_columns(&headers, schema)?;
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    let mut row = 0usize;
    while rdr.read_record(&mut rec)? {
        row += 1;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let sample = SampleTag::parse(cell(cols.sample)).ok_or_else(|| Error::MalformedRow {
            row,
            message: format!("sample must be e, o or eo, got {:?}", cell(cols.sample)),
        })?;
        let mut rsv = Vec::with_capacity(cols.rsv.len());
        for &i in &cols.rsv {
            let v: f64 = cell(i).trim().parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("non-numeric rsv value {:?} in column {}", cell(i), &headers[i]),
            })?;
            rsv.push(v);
        }
        let opt_str = |c: Option<usize>| c.map(cell).filter(|s| !is_missing(s)).map(|s| s.trim().to_string());
        let treatment = match cols.treatment {
            Some(i) => parse_binary(cell(i), row, "treatment")?,
            None => None,
        };
        let instrument = match cols.instrument {
            Some(i) => parse_binary(cell(i), row, "instrument")?,
            None => None,
        };
        let period = match opt_str(cols.period) {
            Some(s) => Some(s.parse::<u8>().map_err(|_| Error::MalformedRow {
                row,
                message: format!("period must be 1 or 2, got {s:?}"),
            })?),
            None => None,
        };
        let unit = UnitRecord {
            sample,
            treatment,
            outcome: None,
            covariate: opt_str(cols.covariate),
            rsv,
            cluster: opt_str(cols.cluster),
            instrument,
            period,
        };
        out.push((unit, opt_str(cols.outcome)));
    }
    Ok(out)
}

/// Applies the strict/lenient EXP-outcome rule and returns the kept outcome cell.
fn exp_outcome_rule(unit: &UnitRecord, raw: Option<String>, row: usize, strict: bool) -> Result<Option<String>> {
    if unit.sample == SampleTag::Exp && raw.is_some() {
        if strict {
            return Err(Error::SchemaViolation {
                row,
                message: "EXP unit with outcome present".into(),
            });
        }
        return Ok(None);
    }
    Ok(raw)
}

fn finish(ds: Dataset) -> Result<Dataset> {
    if !ds.units.iter().any(|u| u.sample.in_e()) {
        return Err(Error::EmptySample("no experimental units".into()));
    }
    if !ds.units.iter().any(|u| u.sample.in_o()) {
        return Err(Error::EmptySample("no observational units".into()));
    }
    if let Some(v) = validate(&ds).into_iter().next() {
        return Err(Error::SchemaViolation {
            row: v.row.map_or(0, |r| r + 1),
            message: format!("{}: {}", v.rule, v.message),
        });
    }
    Ok(ds)
}

/// Reads a dataset whose outcome column holds category indices `0..k_outcomes`.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, k_outcomes: usize) -> Result<Dataset> {
    let rows = parse_rows(reader, schema)?;
    let mut units = Vec::with_capacity(rows.len());
    for (i, (mut u, raw)) in rows.into_iter().enumerate() {
        let row = i + 1;
        if let Some(s) = exp_outcome_rule(&u, raw, row, schema.strict)? {
            let k: usize = s.parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("outcome must be a category index, got {s:?}"),
            })?;
            u.outcome = Some(k);
        }
        units.push(u);
    }
    finish(Dataset::new(units, k_outcomes, schema.mode))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, k_outcomes: usize) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), schema, k_outcomes)
}

/// Reads a dataset whose outcome column is real-valued; the returned
/// dataset has no outcome indices until it is discretized.
pub fn read_csv_real_outcome<R: Read>(reader: R, schema: &CsvSchema) -> Result<(Dataset, Vec<Option<f64>>)> {
    let rows = parse_rows(reader, schema)?;
    let mut units = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for (i, (u, raw)) in rows.into_iter().enumerate() {
        let row = i + 1;
        let y = match exp_outcome_rule(&u, raw, row, schema.strict)? {
            Some(s) => Some(s.parse::<f64>().map_err(|_| Error::MalformedRow {
                row,
                message: format!("non-numeric outcome {s:?}"),
            })?),
            None => None,
        };
        units.push(u);
        ys.push(y);
    }
    let ds = Dataset::new(units, 2, schema.mode);
    if !ds.units.iter().any(|u| u.sample.in_e()) {
        return Err(Error::EmptySample("no experimental units".into()));
    }
    if !ds.units.iter().any(|u| u.sample.in_o()) {
        return Err(Error::EmptySample("no observational units".into()));
    }
    Ok((ds, ys))
}

pub fn load_csv_real_outcome(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Dataset, Vec<Option<f64>>)> {
    let f = std::fs::File::open(path)?;
    read_csv_real_outcome(std::io::BufReader::new(f), schema)
}

fn opt_cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes the standard layout; floats use shortest round-trip formatting.
pub fn write_csv_to<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["sample", "treatment", "outcome", "x", "cluster", "instrument", "period"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=ds.rsv_dim).map(|j| format!("r_{j}")));
    w.write_record(&header)?;
    for u in &ds.units {
        let mut rec = vec![
            u.sample.as_str().to_string(),
            opt_cell(&u.treatment),
            opt_cell(&u.outcome),
            opt_cell(&u.covariate),
            opt_cell(&u.cluster),
            opt_cell(&u.instrument),
            opt_cell(&u.period),
        ];
        rec.extend(u.rsv.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv_to(ds, std::io::BufWriter::new(f))
}

/// Cluster-respecting fold assignment, deterministic in `seed`.
///
/// Groups (clusters, or single units without a cluster id) are shuffled, then
/// dealt round-robin after a stable sort on (covariate, tag, treatment,
/// outcome) of each group's first unit, which balances folds across those
/// cells. Each fold must contain at least one `e` and one `o` unit.
pub fn split_folds(ds: &Dataset, n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    split_units(&ds.units, n_folds, seed)
}

pub fn split_units(units: &[UnitRecord], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if !(2..=MAX_FOLDS).contains(&n_folds) {
        return Err(Error::InvalidSpec(format!("n_folds must be in 2..={MAX_FOLDS}")));
    }
    let mut by_cluster: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        match &u.cluster {
            Some(c) => by_cluster.entry(c.as_str()).or_default().push(i),
            None => groups.push(vec![i]),
        }
    }
    groups.extend(by_cluster.into_values());
    if groups.len() < n_folds {
        return Err(Error::InfeasibleSplit(format!(
            "{} groups cannot fill {n_folds} folds",
            groups.len()
        )));
    }
    let key = |g: &Vec<usize>| {
        let u = &units[g[0]];
        (u.covariate.clone(), u.sample, u.treatment, u.outcome)
    };
    for attempt in 0..SPLIT_RETRIES {
        let mut rng = rng_for(seed, &[0x5917, attempt]);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        if attempt == 0 {
            order.sort_by_key(|&g| key(&groups[g]));
        }
        let mut fold = vec![0usize; units.len()];
        let mut has_e = vec![false; n_folds];
        let mut has_o = vec![false; n_folds];
        for (pos, &g) in order.iter().enumerate() {
            let f = pos % n_folds;
            for &i in &groups[g] {
                fold[i] = f;
                has_e[f] |= units[i].sample.in_e();
                has_o[f] |= units[i].sample.in_o();
            }
        }
        if has_e.iter().all(|&b| b) && has_o.iter().all(|&b| b) {
            return Ok(fold);
        }
    }
    Err(Error::InfeasibleSplit(format!(
        "no assignment with e and o units in all {n_folds} folds after {SPLIT_RETRIES} attempts"
    )))
}

/// Unit indices per fold, ascending.
pub fn fold_members(folds: &[usize], n_folds: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_folds];
    for (i, &f) in folds.iter().enumerate() {
        out[f].push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_unit_csv() -> &'static str {
        "sample,treatment,outcome,r_1\ne,1,NA,0.3\no,NA,1,0.5\n"
    }

    #[test]
    fn parses_minimal_csv() {
        let ds = read_csv(two_unit_csv().as_bytes(), &CsvSchema::default(), 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rsv_dim, 1);
        assert_eq!(ds.k_outcomes, 2);
        assert_eq!(ds.units[0].treatment, Some(1));
        assert_eq!(ds.units[0].outcome, None);
        assert_eq!(ds.units[1].outcome, Some(1));
        assert_eq!(ds.units[1].rsv, vec![0.5]);
    }

    #[test]
    fn strict_rejects_exp_outcome() {
        let csv = "sample,treatment,outcome,r_1\ne,1,1,0.3\no,NA,1,0.5\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default(), 2).unwrap_err();
        assert_eq!(err.name(), "SchemaViolation");
        let lenient = CsvSchema {
            strict: false,
            ..CsvSchema::default()
        };
        let ds = read_csv(csv.as_bytes(), &lenient, 2).unwrap();
        assert_eq!(ds.units[0].outcome, None);
    }

    #[test]
    fn non_numeric_rsv_is_malformed() {
        let csv = "sample,r_1\ne,abc\no,0.1\n";
        assert_eq!(
            read_csv(csv.as_bytes(), &CsvSchema::default(), 2).unwrap_err().name(),
            "MalformedRow"
        );
    }

    #[test]
    fn missing_sample_side_is_empty_sample() {
        let csv = "sample,treatment,r_1\ne,1,0.1\ne,0,0.2\n";
        assert_eq!(
            read_csv(csv.as_bytes(), &CsvSchema::default(), 2).unwrap_err().name(),
            "EmptySample"
        );
    }

    #[test]
    fn empty_cell_counts_as_missing() {
        let csv = "sample,treatment,outcome,r_1\ne,0,,0.3\no,,0,0.5\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::default(), 2).unwrap();
        assert_eq!(ds.units[1].treatment, None);
    }

    #[test]
    fn validate_flags_treated_obs_in_incomplete_mode() {
        let mut ds = Dataset::new(
            vec![UnitRecord::exp(1, vec![0.0]), UnitRecord::exp(0, vec![0.0]), {
                let mut u = UnitRecord::obs(1, vec![0.0]);
                u.treatment = Some(1);
                u
            }],
            2,
            Mode::Incomplete,
        );
        let v = validate(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "incomplete_regime");
        assert_eq!(v[0].row, Some(2));
        ds.units[2].treatment = Some(0);
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn validate_all_exp() {
        let ds = Dataset::new(vec![UnitRecord::exp(1, vec![0.0])], 2, Mode::Incomplete);
        let v = validate(&ds);
        assert!(v.iter().any(|v| v.message == "no observational units"));
    }

    #[test]
    fn round_trip() {
        let mut units = vec![
            UnitRecord::exp(1, vec![0.1, -2.5e-7]).with_covariate("a").with_cluster("c1"),
            UnitRecord::obs(2, vec![1.0 / 3.0, 4.0]).with_covariate("b"),
            UnitRecord::both(0, 0, vec![f64::MIN_POSITIVE, 1e300]).with_instrument(1),
        ];
        units[1].period = Some(2);
        let ds = Dataset::new(units, 3, Mode::Incomplete);
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default(), 3).unwrap();
        assert_eq!(back, ds);
    }

    fn four_units() -> Dataset {
        Dataset::new(
            vec![
                UnitRecord::exp(1, vec![0.0]),
                UnitRecord::exp(0, vec![0.0]),
                UnitRecord::obs(1, vec![0.0]),
                UnitRecord::obs(0, vec![0.0]),
            ],
            2,
            Mode::Incomplete,
        )
    }

    #[test]
    fn split_is_deterministic() {
        let ds = four_units();
        let a = split_folds(&ds, 2, 7).unwrap();
        assert_eq!(a, split_folds(&ds, 2, 7).unwrap());
        for f in 0..2 {
            assert!(ds.units.iter().zip(&a).any(|(u, &g)| g == f && u.sample.in_e()));
            assert!(ds.units.iter().zip(&a).any(|(u, &g)| g == f && u.sample.in_o()));
        }
    }

    #[test]
    fn split_keeps_clusters_whole() {
        let mut units = Vec::new();
        for c in ["a", "b"] {
            units.push(UnitRecord::exp(1, vec![0.0]).with_cluster(c));
            units.push(UnitRecord::exp(0, vec![0.0]).with_cluster(c));
            units.push(UnitRecord::obs(1, vec![0.0]).with_cluster(c));
        }
        let ds = Dataset::new(units, 2, Mode::Incomplete);
        let f = split_folds(&ds, 2, 1).unwrap();
        assert!(f[0] == f[1] && f[1] == f[2]);
        assert!(f[3] == f[4] && f[4] == f[5]);
        assert_ne!(f[0], f[3]);
    }

    #[test]
    fn split_all_exp_is_infeasible() {
        let ds = Dataset::new((0..3).map(|i| UnitRecord::exp(i % 2, vec![0.0])).collect(), 2, Mode::Incomplete);
        assert_eq!(split_folds(&ds, 2, 0).unwrap_err().name(), "InfeasibleSplit");
    }
}
