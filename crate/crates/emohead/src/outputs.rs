//! CSV and JSON artifacts written by the CLI.

use std::fs;
use std::path::Path;

use emohead_core::fusion::{FitReport, FusionWeights, PredictionSet};
use emohead_core::metrics::{F1Report, EMOTIONS, NUM_CLASSES};
use emohead_core::train::{EpochLog, Evaluation};
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};

/// Per-class values keyed by emotion name, in label order.
pub struct ClassMap<'a>(pub &'a [f64]);

impl Serialize for ClassMap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (name, v) in EMOTIONS.iter().zip(self.0) {
            m.serialize_entry(name, v)?;
        }
        m.end()
    }
}

#[derive(Serialize)]
struct Metrics<'a> {
    f1_macro: f64,
    f1_per_class: ClassMap<'a>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn metrics_json(report: &F1Report) -> String {
    let m = Metrics { f1_macro: report.macro_f1, f1_per_class: ClassMap(&report.per_class) };
    serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n"
}

pub fn write_metrics(path: impl AsRef<Path>, report: &F1Report) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_json(report)).map_err(|e| Error::io(path, e))
}

pub fn prediction_header() -> Vec<String> {
    let mut h = vec!["utterance_id".to_string(), "label".to_string()];
    h.extend(EMOTIONS.iter().map(|e| format!("p_{}", e)));
    h
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv { path: path.into(), source: e }
}

pub fn write_predictions(path: impl AsRef<Path>, eval: &Evaluation) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(prediction_header()).map_err(csv_err(path))?;
    for ((id, label), probs) in eval.ids.iter().zip(&eval.references).zip(&eval.probabilities) {
        let mut row = vec![id.clone(), label.to_string()];
        row.extend(probs.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One model's predictions: ids, reference labels, class probabilities.
pub struct ModelPredictions {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<ModelPredictions> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != prediction_header() {
        return Err(Error::Input(format!("{}: header must be {}", path.display(), prediction_header().join(","))));
    }
    let mut out = ModelPredictions { ids: Vec::new(), labels: Vec::new(), probs: Vec::new() };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |what: &str| Error::Input(format!("{}: row {}: bad {}", path.display(), i + 2, what));
        out.ids.push(rec[0].to_string());
        let label: usize = rec[1].parse().map_err(|_| bad("label"))?;
        if label >= NUM_CLASSES {
            return Err(bad("label"));
        }
        out.labels.push(label);
        let probs = (2..2 + NUM_CLASSES).map(|k| rec[k].parse::<f64>().map_err(|_| bad("probability"))).collect::<Result<Vec<_>>>()?;
        out.probs.push(probs);
    }
    Ok(out)
}

/// Joins per-model prediction files on utterance id, in the first file's order.
pub fn load_prediction_set(paths: &[impl AsRef<Path>]) -> Result<PredictionSet> {
    if paths.is_empty() {
        return Err(Error::Input("no prediction files given".into()));
    }
    let models: Vec<ModelPredictions> = paths.iter().map(read_predictions).collect::<Result<_>>()?;
    let stem = |p: &Path| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
    let stems: Vec<String> = paths.iter().map(|p| stem(p.as_ref())).collect();
    let names: Vec<String> = paths
        .iter()
        .zip(&stems)
        .map(|(p, s)| {
            let parent = p.as_ref().parent().and_then(|d| d.file_name());
            match parent {
                Some(dir) if stems.iter().filter(|t| *t == s).count() > 1 => format!("{}/{}", dir.to_string_lossy(), s),
                _ => s.clone(),
            }
        })
        .collect();
    let first = &models[0];
    let mut probs = Vec::with_capacity(first.ids.len());
    let lookups: Vec<std::collections::HashMap<&str, usize>> =
        models.iter().map(|m| m.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()).collect();
    for (k, m) in models.iter().enumerate() {
        if m.ids.len() != first.ids.len() || lookups[k].len() != m.ids.len() {
            return Err(Error::Input(format!(
                "{}: utterance ids differ from {} or repeat",
                paths[k].as_ref().display(),
                paths[0].as_ref().display()
            )));
        }
    }
    for (u, id) in first.ids.iter().enumerate() {
        let mut rows = Vec::with_capacity(models.len());
        for (k, m) in models.iter().enumerate() {
            let i = *lookups[k]
                .get(id.as_str())
                .ok_or_else(|| Error::Input(format!("{}: missing utterance {}", paths[k].as_ref().display(), id)))?;
            if m.labels[i] != first.labels[u] {
                return Err(Error::Input(format!("utterance {} has conflicting labels", id)));
            }
            rows.push(m.probs[i].clone());
        }
        probs.push(rows);
    }
    Ok(PredictionSet::new(names, first.ids.clone(), first.labels.clone(), probs, NUM_CLASSES)?)
}

pub fn write_fused(path: impl AsRef<Path>, ids: &[String], predictions: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["utterance_id", "predicted_class"]).map_err(csv_err(path))?;
    for (id, p) in ids.iter().zip(predictions) {
        w.write_record([id.as_str(), &p.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ReportRow<'a> {
    name: &'a str,
    f1_macro: f64,
    f1_per_class: ClassMap<'a>,
}

#[derive(Serialize)]
struct FusionReportJson<'a> {
    mode: &'a str,
    evaluations: usize,
    constraint_residual: f64,
    no_gain: bool,
    rows: Vec<ReportRow<'a>>,
    weights: Vec<WeightRow<'a>>,
}

#[derive(Serialize)]
struct WeightRow<'a> {
    model: &'a str,
    weights: ClassMap<'a>,
}

/// Table of per-class F1: one row per model, then uniform and fitted fusion.
pub fn write_fusion_report(path: impl AsRef<Path>, preds: &PredictionSet, weights: &FusionWeights, report: &FitReport) -> Result<()> {
    let mut rows: Vec<ReportRow> = preds
        .model_names
        .iter()
        .zip(&report.per_model)
        .map(|(n, r)| ReportRow { name: n, f1_macro: r.macro_f1, f1_per_class: ClassMap(&r.per_class) })
        .collect();
    rows.push(ReportRow { name: "fusion_uniform", f1_macro: report.initial.macro_f1, f1_per_class: ClassMap(&report.initial.per_class) });
    rows.push(ReportRow { name: "fusion_fitted", f1_macro: report.fitted.macro_f1, f1_per_class: ClassMap(&report.fitted.per_class) });
    let json = FusionReportJson {
        mode: weights.mode.as_str(),
        evaluations: report.evals,
        constraint_residual: report.residual,
        no_gain: report.no_gain,
        rows,
        weights: preds.model_names.iter().zip(&weights.w).map(|(n, w)| WeightRow { model: n, weights: ClassMap(w) }).collect(),
    };
    write_json(path.as_ref(), &json)
}

pub fn write_train_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e).map_err(|e| Error::Json { path: path.into(), source: e })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
