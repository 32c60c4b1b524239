use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::li::LIProfile;
use crate::metrics::{
    auroc, delta_groups, ece, fit_calibrator, overhead_ratio, rejection_auroc, Calibrator, GroupDelta, OverheadCounter,
    ScoredSet,
};
use crate::{Error, Result};

/// One score of one method on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub template_id: String,
    pub example_id: String,
    pub answerable: bool,
    pub method: Method,
    pub value: f64,
}

/// One layer of one LI profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub template_id: String,
    pub example_id: String,
    pub answerable: bool,
    pub layer: usize,
    pub h_null: f64,
    pub h_ctx: f64,
    pub i_layer: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub template_id: String,
    pub answerable: bool,
    pub profile: LIProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub template_id: String,
    pub example_id: String,
    /// `None` when the example could not be rendered at all.
    pub method: Option<Method>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    pub fraction: f64,
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceResult {
    pub train_size: usize,
    pub eval_size: usize,
    pub ece: Option<f64>,
    pub calibrator: Option<Calibrator>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub template_id: String,
    pub method: Method,
    pub n: usize,
    pub n_answerable: usize,
    pub auroc: Option<f64>,
    pub rejection: Vec<RejectionResult>,
    pub delta: Option<GroupDelta>,
    pub ece: Vec<EceResult>,
    /// Why `auroc` or `delta` is missing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub template_id: String,
    pub counter: OverheadCounter,
    /// Examples that contributed to the counter.
    pub examples: usize,
    /// Tokens relative to one plain pass over context and question.
    pub ratio: Option<f64>,
}

/// Name of the reference counter: one ordinary with-context pass.
pub const SINGLE_PASS: &str = "single_pass";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model_id: String,
    pub dataset: String,
    pub layer_ids: Vec<usize>,
    pub num_examples: usize,
    pub num_answerable: usize,
    pub results: Vec<MethodResult>,
    pub overhead: Vec<OverheadRow>,
    pub skipped: Vec<SkipRecord>,
    pub per_example: Vec<ScoreRow>,
    pub profiles: Vec<ProfileRecord>,
}

impl EvalReport {
    pub fn result(&self, template_id: &str, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.template_id == template_id && r.method == method)
    }

    pub fn overhead_for(&self, template_id: &str, method: &str) -> Option<&OverheadRow> {
        self.overhead.iter().find(|r| r.template_id == template_id && r.counter.method == method)
    }

    /// Pretty JSON with a trailing newline; field and row order are fixed,
    /// so equal reports serialize to equal bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn dump(&self) -> Dump {
        let profiles = self
            .profiles
            .iter()
            .flat_map(|rec| {
                let p = &rec.profile;
                let cumulative = p.cumulative();
                (0..p.layer_ids.len()).map(move |i| ProfileRow {
                    template_id: rec.template_id.clone(),
                    example_id: p.example_id.clone(),
                    answerable: rec.answerable,
                    layer: p.layer_ids[i],
                    h_null: p.h_null[i],
                    h_ctx: p.h_ctx[i],
                    i_layer: p.i_layer[i],
                    cumulative: cumulative[i],
                })
            })
            .collect();
        Dump { scores: self.per_example.clone(), profiles }
    }
}

/// The per-example tables written next to a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dump {
    pub scores: Vec<ScoreRow>,
    pub profiles: Vec<ProfileRow>,
}

pub const SCORES_CSV: &str = "scores.csv";
pub const PROFILES_CSV: &str = "profiles.csv";

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).map_err(csv_error)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

impl Dump {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_rows(
            &dir.join(SCORES_CSV),
            &self.scores,
            &["template_id", "example_id", "answerable", "method", "value"],
        )?;
        write_rows(
            &dir.join(PROFILES_CSV),
            &self.profiles,
            &["template_id", "example_id", "answerable", "layer", "h_null", "h_ctx", "i_layer", "cumulative"],
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let profiles_path = dir.join(PROFILES_CSV);
        Ok(Self {
            scores: read_scores(&dir.join(SCORES_CSV))?,
            profiles: if profiles_path.is_file() { read_rows(&profiles_path)? } else { Vec::new() },
        })
    }

    /// Templates in first-appearance order.
    pub fn templates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.scores.iter().map(|r| &r.template_id).chain(self.profiles.iter().map(|r| &r.template_id)) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }

    /// Methods in first-appearance order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        for r in &self.scores {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }

    pub fn scored_set(&self, template_id: &str, method: Method) -> ScoredSet {
        select(&self.scores, template_id, method)
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    read_rows(path)
}

fn select(rows: &[ScoreRow], template_id: &str, method: Method) -> ScoredSet {
    ScoredSet {
        method: method.to_string(),
        pairs: rows
            .iter()
            .filter(|r| r.template_id == template_id && r.method == method)
            .map(|r| (r.example_id.clone(), r.value, r.answerable))
            .collect(),
        metadata: template_id.to_string(),
    }
}

/// Fits on `train` and reports ECE of the calibrated `eval` scores.
pub fn calibrate_sets(train: &ScoredSet, eval: &ScoredSet, bins: usize) -> Result<(Calibrator, f64)> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let calibrator = fit_calibrator(train)?;
    let predictions: Vec<(f64, bool)> = eval.pairs.iter().map(|p| (calibrator.predict(p.1), p.2)).collect();
    Ok((calibrator, ece(&predictions, bins)?))
}

/// Calibration from two score dumps, as used by the `calibrate` command.
pub fn calibrate_rows(
    train: &[ScoreRow],
    eval: &[ScoreRow],
    template_id: &str,
    method: Method,
    bins: usize,
) -> Result<(Calibrator, f64)> {
    calibrate_sets(&select(train, template_id, method), &select(eval, template_id, method), bins)
}

/// Metrics for one method under one template. `split_order` ranks
/// example ids for the calibration split: the first `size` present ids
/// train, the rest evaluate.
pub(crate) fn method_result(
    template_id: &str,
    method: Method,
    set: &ScoredSet,
    reject_fractions: &[f64],
    calibration_sizes: &[usize],
    bins: usize,
    split_order: &BTreeMap<String, usize>,
) -> MethodResult {
    let n_answerable = set.pairs.iter().filter(|p| p.2).count();
    let (auroc_value, note) = match auroc(set) {
        Ok(v) => (Some(v), None),
        Err(_) if set.is_empty() => (None, Some("no scored examples; see skipped".to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    let rejection = reject_fractions
        .iter()
        .map(|&fraction| match rejection_auroc(set, fraction) {
            Ok(v) => RejectionResult { fraction, auroc: Some(v), note: None },
            Err(e) => RejectionResult { fraction, auroc: None, note: Some(e.to_string()) },
        })
        .collect();

    let mut ordered = set.pairs.clone();
    ordered.sort_by_key(|p| split_order.get(&p.0).copied().unwrap_or(usize::MAX));
    let ece_rows = calibration_sizes
        .iter()
        .map(|&size| {
            let cut = size.min(ordered.len());
            let train = ScoredSet { pairs: ordered[..cut].to_vec(), ..set.clone() };
            let eval = ScoredSet { pairs: ordered[cut..].to_vec(), ..set.clone() };
            let (calibrator, ece, note) = if size >= ordered.len() {
                (None, None, Some(format!("needs more than {size} scored examples, have {}", ordered.len())))
            } else {
                match calibrate_sets(&train, &eval, bins) {
                    Ok((c, e)) => (Some(c), Some(e), None),
                    Err(e) => (None, None, Some(e.to_string())),
                }
            };
            EceResult { train_size: train.len(), eval_size: eval.len(), ece, calibrator, note }
        })
        .collect();

    MethodResult {
        template_id: template_id.to_string(),
        method,
        n: set.len(),
        n_answerable,
        auroc: auroc_value,
        rejection,
        delta: delta_groups(set).ok(),
        ece: ece_rows,
        note,
    }
}

pub(crate) fn overhead_row(
    template_id: &str,
    counter: OverheadCounter,
    examples: usize,
    reference: &OverheadCounter,
) -> OverheadRow {
    let ratio = overhead_ratio(&counter, reference).ok();
    OverheadRow { template_id: template_id.to_string(), counter, examples, ratio }
}
