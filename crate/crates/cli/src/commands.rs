//! Command implementations and artifact writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ibanet::data::{
    build_multirate, class_stats, generate_synthetic, load_recordings, make_windows, split, write_windows_csv, CsvFormat,
    LabelTable, MultiRateSample, SensorWindow,
};
use ibanet::nc3::generate_etf;
use ibanet::train_eval::{
    grid_search, grid_table, run_cross_validation, run_fold, run_folds, run_study, study_table, CvResult, FoldResult,
    Study, TrainConfig,
};
use serde_json::json;

use crate::config::{DataSource, RawConfig, Settings};
use crate::error::CliError;

/// Gram deviation above which `etf-check` fails.
pub const ETF_TOLERANCE: f64 = 1e-9;

pub struct Dataset {
    pub windows: Vec<SensorWindow>,
    pub samples: Vec<MultiRateSample>,
    pub labels: LabelTable,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

pub fn load_dataset(s: &Settings) -> Result<Dataset, CliError> {
    let (windows, labels) = match &s.source {
        DataSource::Synthetic => {
            let spec = s.synthetic_spec();
            let windows = generate_synthetic(&spec, s.train.seed).map_err(CliError::Data)?;
            (windows, LabelTable::new(spec.class_names))
        }
        DataSource::Csv(path) => {
            let (recs, labels) =
                load_recordings(path, &CsvFormat { sampling_rate_hz: s.sampling_rate_hz }).map_err(|e| match e {
                    ibanet::Error::Io(io) => CliError::Data(ibanet::Error::Parameter(format!("{}: {io}", path.display()))),
                    other => CliError::Data(other),
                })?;
            (make_windows(&recs, s.window_s, s.stride_s).map_err(CliError::Data)?, labels)
        }
    };
    if windows.is_empty() {
        return Err(CliError::Data(ibanet::Error::Contract("no complete windows in the input".into())));
    }
    let samples = windows
        .iter()
        .map(|w| build_multirate(w, &s.factors))
        .collect::<ibanet::Result<Vec<_>>>()
        .map_err(CliError::Data)?;
    Ok(Dataset { windows, samples, labels })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Output { path: path.display().to_string(), source })
}

fn prepare_out(s: &Settings, raw: &RawConfig) -> Result<(), CliError> {
    fs::create_dir_all(&s.out).map_err(|source| CliError::Output { path: s.out.display().to_string(), source })?;
    write(&s.out, "effective_config.txt", &raw.render())
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serialises")
}

fn history_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("fold,epoch,lr,train_loss,train_accuracy,val_accuracy\n");
    for f in folds {
        for r in &f.history {
            let _ = writeln!(out, "{},{},{},{},{},{}", f.fold, r.epoch, r.lr, r.train_loss, r.train_accuracy, r.val_accuracy);
        }
    }
    out
}

fn fold_json(f: &FoldResult) -> serde_json::Value {
    json!({
        "fold": f.fold,
        "test_subject": f.test_subject,
        "best_epoch": f.best_epoch,
        "best_val_accuracy": f.best_val_accuracy,
        "metrics": to_json(&f.metrics),
        "angle_spread": f.angles.spread,
        "warnings": f.warnings,
    })
}

fn write_cv_artifacts(dir: &Path, command: &str, cfg: &TrainConfig, cv: &CvResult, names: &[String]) -> Result<(), CliError> {
    let metrics = json!({
        "command": command,
        "variant": cfg.variant.to_string(),
        "seed": cfg.seed,
        "classes": names,
        "aggregate": to_json(&cv.aggregate),
        "mean_val_accuracy": cv.mean_val_accuracy,
        "angle_spread": cv.mean_angles.spread,
        "folds": cv.folds.iter().map(fold_json).collect::<Vec<_>>(),
    });
    write(dir, "metrics.json", &format!("{}\n", serde_json::to_string_pretty(&metrics).expect("json")))?;
    write(dir, "confusion.csv", &cv.pooled_confusion().to_csv(names))?;
    write(dir, "history.csv", &history_csv(&cv.folds))?;
    write(dir, "angles.csv", &cv.mean_angles.to_csv(names))?;
    let router = cv.pooled_router().map(|r| r.to_csv(names)).unwrap_or_else(|| "class,count\n".into());
    write(dir, "router_rates.csv", &router)
}

fn summary(cv: &CvResult) -> String {
    let a = &cv.aggregate;
    format!(
        "{} folds, accuracy {:.2}%, macro recall {:.2}%, macro F1 {:.2}%, angle spread {:.2} deg",
        cv.folds.len(),
        a.accuracy,
        a.macro_recall,
        a.macro_f1,
        cv.mean_angles.spread
    )
}

pub fn synth(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let d = load_dataset(s)?;
    prepare_out(s, raw)?;
    let mut buf = Vec::new();
    write_windows_csv(&mut buf, &d.windows, &d.labels).map_err(CliError::Data)?;
    let path = s.out.join("dataset.csv");
    fs::write(&path, buf).map_err(|source| CliError::Output { path: path.display().to_string(), source })?;
    write(&s.out, "labels.csv", &d.labels.to_csv())?;
    let stats = class_stats(&d.windows, d.classes()).map_err(CliError::Data)?;
    Ok(format!(
        "synth: {} windows, {} classes, counts {:?}, imbalance ratio {:.1} -> {}",
        d.windows.len(),
        d.classes(),
        stats.counts,
        stats.imbalance_ratio,
        path.display()
    ))
}

pub fn train(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let d = load_dataset(s)?;
    let folds = split(&d.samples, &s.plan).map_err(CliError::Data)?;
    let fold = folds
        .get(s.fold)
        .ok_or_else(|| CliError::Config(format!("run.fold={} but the split has {} folds", s.fold, folds.len())))?;
    prepare_out(s, raw)?;
    let result = run_fold(&s.train, &d.samples, fold, d.classes())?;
    let cv = single_fold(result);
    write_cv_artifacts(&s.out, "train", &s.train, &cv, d.labels.names())?;
    Ok(format!("train: {}, fold {}: {}", s.train.variant, s.fold, summary(&cv)))
}

fn single_fold(result: FoldResult) -> CvResult {
    CvResult {
        aggregate: result.metrics.clone(),
        mean_val_accuracy: result.best_val_accuracy,
        mean_angles: result.angles.clone(),
        folds: vec![result],
    }
}

pub fn cv(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let d = load_dataset(s)?;
    let folds = split(&d.samples, &s.plan).map_err(CliError::Data)?;
    prepare_out(s, raw)?;
    let cv = run_folds(&s.train, &d.samples, d.classes(), &folds, s.jobs)?;
    write_cv_artifacts(&s.out, "cv", &s.train, &cv, d.labels.names())?;
    Ok(format!("cv: {}, {}", s.train.variant, summary(&cv)))
}

pub fn grid(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let d = load_dataset(s)?;
    split(&d.samples, &s.plan).map_err(CliError::Data)?;
    prepare_out(s, raw)?;
    let g = grid_search(&s.train, &d.samples, d.classes(), &s.plan, &s.grid_taus, &s.grid_ks, s.grid_epochs, s.jobs)?;
    write(&s.out, "grid.csv", &grid_table(&g.cells))?;
    let metrics = json!({ "command": "grid", "cells": to_json(&g.cells), "best": to_json(g.best_cell()) });
    write(&s.out, "metrics.json", &format!("{}\n", serde_json::to_string_pretty(&metrics).expect("json")))?;
    let b = g.best_cell();
    Ok(format!(
        "grid: {} cells, best tau={} k={} (val {:.2}%, test {:.2}%)",
        g.cells.len(),
        b.tau,
        b.k,
        b.val_accuracy,
        b.test_accuracy
    ))
}

pub fn ablate(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let study = Study::parse(&s.study)
        .ok_or_else(|| CliError::Value { key: "ablate.study".into(), value: s.study.clone() })?;
    let d = load_dataset(s)?;
    split(&d.samples, &s.plan).map_err(CliError::Data)?;
    prepare_out(s, raw)?;
    let rows = run_study(study, &s.train, &d.samples, d.classes(), &s.plan, s.baseline_rate_hz, s.jobs)?;
    write(&s.out, "ablation.csv", &study_table(&rows))?;
    let metrics = json!({
        "command": "ablate",
        "study": study.name(),
        "rows": rows.iter().map(|r| json!({
            "name": r.name,
            "variant": r.variant,
            "k": r.k,
            "loss": r.loss,
            "imbalance_ratio": r.imbalance_ratio,
            "aggregate": to_json(&r.result.aggregate),
            "angle_spread": r.result.mean_angles.spread,
        })).collect::<Vec<_>>(),
    });
    write(&s.out, "metrics.json", &format!("{}\n", serde_json::to_string_pretty(&metrics).expect("json")))?;
    Ok(format!("ablate: study {}, {} rows -> {}", study.name(), rows.len(), s.out.join("ablation.csv").display()))
}

/// Prints the Gram matrix of freshly generated prototypes.
pub fn etf_check(classes: usize, dim: Option<usize>, seed: u64) -> Result<String, CliError> {
    let d = dim.unwrap_or(classes);
    let etf = generate_etf(classes, d, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let gram = etf.gram();
    let mut out = String::new();
    for i in 0..classes {
        let row: Vec<String> = (0..classes).map(|j| format!("{:.12}", gram.at2(i, j))).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    let dev = etf.max_gram_deviation();
    let _ = write!(out, "etf-check: M={classes} d={d} target off-diagonal {:.12}, max Gram deviation {dev:.3e}", -1.0 / (classes as f64 - 1.0));
    if dev < ETF_TOLERANCE {
        Ok(out)
    } else {
        Err(CliError::Check(format!("{out}\nmax Gram deviation {dev:.3e} exceeds {ETF_TOLERANCE:e}")))
    }
}

/// Classifier angle spread with and without the calibrated head.
pub fn angles(s: &Settings, raw: &RawConfig) -> Result<String, CliError> {
    let d = load_dataset(s)?;
    split(&d.samples, &s.plan).map_err(CliError::Data)?;
    prepare_out(s, raw)?;
    let names = d.labels.names();
    let with = run_cross_validation(&s.train, &d.samples, d.classes(), &s.plan, s.jobs)?;
    let without_cfg = TrainConfig { k: 0.0, ..s.train.clone() };
    let without = run_cross_validation(&without_cfg, &d.samples, d.classes(), &s.plan, s.jobs)?;
    write(&s.out, "angles.csv", &with.mean_angles.to_csv(names))?;
    write(&s.out, "angles_k0.csv", &without.mean_angles.to_csv(names))?;
    let metrics = json!({
        "command": "angles",
        "k": s.train.k,
        "spread": with.mean_angles.spread,
        "spread_k0": without.mean_angles.spread,
        "per_fold_spread": with.folds.iter().map(|f| f.angles.spread).collect::<Vec<_>>(),
        "per_fold_spread_k0": without.folds.iter().map(|f| f.angles.spread).collect::<Vec<_>>(),
    });
    write(&s.out, "metrics.json", &format!("{}\n", serde_json::to_string_pretty(&metrics).expect("json")))?;
    Ok(format!(
        "angles: spread {:.2} deg with k={} vs {:.2} deg with k=0",
        with.mean_angles.spread, s.train.k, without.mean_angles.spread
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn etf_check_passes_and_rejects_bad_dimension() {
        let out = etf_check(5, None, 0).unwrap();
        assert!(out.contains("max Gram deviation"));
        assert_eq!(out.lines().count(), 6);
        assert!(matches!(etf_check(5, Some(3), 0), Err(CliError::Config(_))));
    }

    #[test]
    fn history_rows_carry_fold_ids() {
        assert_eq!(history_csv(&[]), "fold,epoch,lr,train_loss,train_accuracy,val_accuracy\n");
    }
}
