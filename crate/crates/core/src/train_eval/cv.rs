use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{pairwise_angles, AngleReport, ConfusionMatrix, MetricsReport, RouterSummary};
use super::train::{train, EpochRecord, TrainConfig};
use crate::data::{split, Fold, MultiRateSample, SplitPlan};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub router: Option<RouterSummary>,
}

pub fn evaluate(model: &Model, test: &[MultiRateSample], chunk: usize) -> Result<Evaluation> {
    let refs: Vec<&MultiRateSample> = test.iter().collect();
    let inf = model.infer(&refs, chunk)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::from_predictions(&labels, &inf.predictions(), model.config.classes)?;
    let router = if inf.rates.is_empty() {
        None
    } else {
        Some(RouterSummary::from_rates(&model.config.rates_hz, &inf.rates, &labels, model.config.classes)?)
    };
    Ok(Evaluation { metrics: MetricsReport::from_confusion(&confusion)?, confusion, router })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subject: Option<String>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub angles: AngleReport,
    pub router: Option<RouterSummary>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    /// Unweighted mean over folds.
    pub aggregate: MetricsReport,
    pub mean_val_accuracy: f64,
    pub mean_angles: AngleReport,
}

impl CvResult {
    /// Sum of the per-fold confusion matrices.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        let m = self.aggregate.per_class.len();
        let rows: Vec<Vec<u64>> = (0..m)
            .map(|t| (0..m).map(|p| self.folds.iter().map(|f| f.confusion.get(t, p)).sum()).collect())
            .collect();
        ConfusionMatrix::from_rows(&rows).expect("square")
    }

    /// Count-weighted mean of the per-fold router summaries, if the model routes.
    pub fn pooled_router(&self) -> Option<RouterSummary> {
        let summaries: Vec<&RouterSummary> = self.folds.iter().filter_map(|f| f.router.as_ref()).collect();
        let first = summaries.first()?;
        let (m, n) = (first.mean_rates.len(), first.rates_hz.len());
        let mut sums = vec![vec![0.0; n]; m];
        let mut counts = vec![0usize; m];
        for s in &summaries {
            for c in 0..m {
                counts[c] += s.counts[c];
                for (acc, v) in sums[c].iter_mut().zip(&s.mean_rates[c]) {
                    *acc += v * s.counts[c] as f64;
                }
            }
        }
        for (row, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                row.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        Some(RouterSummary { rates_hz: first.rates_hz.clone(), mean_rates: sums, counts })
    }
}

fn pick(data: &[MultiRateSample], idx: &[usize]) -> Vec<MultiRateSample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Trains on one fold and evaluates the best-validation checkpoint on its test part.
pub fn run_fold(config: &TrainConfig, data: &[MultiRateSample], fold: &Fold, classes: usize) -> Result<FoldResult> {
    let cfg = TrainConfig { seed: config.seed.wrapping_add(fold.id as u64), ..config.clone() };
    let (tr, va, te) = (pick(data, &fold.train), pick(data, &fold.val), pick(data, &fold.test));
    let outcome = train(&cfg, &tr, &va, classes)?;
    let eval = evaluate(&outcome.model, &te, cfg.eval_chunk)?;
    let angles = pairwise_angles(outcome.model.head.classifier_weights(&outcome.model.store))?;
    let mut warnings = fold.warnings.clone();
    warnings.extend(outcome.warnings);
    Ok(FoldResult {
        fold: fold.id,
        test_subject: fold.test_subject.clone(),
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        metrics: eval.metrics,
        confusion: eval.confusion,
        angles,
        router: eval.router,
        warnings,
    })
}

/// Runs every fold of `plan`. With `jobs > 1` folds train on a private thread
/// pool; results are always ordered by fold id and do not depend on `jobs`.
pub fn run_cross_validation(
    config: &TrainConfig,
    data: &[MultiRateSample],
    classes: usize,
    plan: &SplitPlan,
    jobs: usize,
) -> Result<CvResult> {
    let folds = split(data, plan)?;
    run_folds(config, data, classes, &folds, jobs)
}

pub fn run_folds(config: &TrainConfig, data: &[MultiRateSample], classes: usize, folds: &[Fold], jobs: usize) -> Result<CvResult> {
    let results: Vec<Result<FoldResult>> = if jobs <= 1 {
        folds.iter().map(|f| run_fold(config, data, f, classes)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Parameter(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| folds.par_iter().map(|f| run_fold(config, data, f, classes)).collect())
    };
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.metrics.clone()).collect();
    let angles: Vec<AngleReport> = folds.iter().map(|f| f.angles.clone()).collect();
    let mean_val_accuracy = folds.iter().map(|f| f.best_val_accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CvResult { aggregate: MetricsReport::mean(&reports)?, mean_angles: AngleReport::mean(&angles)?, mean_val_accuracy, folds })
}
