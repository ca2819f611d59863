use serde::{Deserialize, Serialize};

use super::cv::{run_cross_validation, CvResult};
use super::train::TrainConfig;
use crate::data::{class_stats, rebalance_minority, MultiRateSample, SplitPlan};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::mfc::FusionMode;
use crate::model::ModelVariant;

/// Trains the multi-rate network with `mode` in place of router-weighted fusion.
pub fn fusion_ablation(
    config: &TrainConfig,
    data: &[MultiRateSample],
    classes: usize,
    plan: &SplitPlan,
    mode: FusionMode,
    jobs: usize,
) -> Result<CvResult> {
    let cfg = TrainConfig { variant: ModelVariant::Fusion(mode), ..config.clone() };
    run_cross_validation(&cfg, data, classes, plan, jobs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    /// Baseline, single rate with the calibrated head, full network.
    Modules,
    /// Every fusion combiner.
    Fusion,
    /// Each single rate against the multi-rate network.
    Rates,
    /// Blend coefficient from 0 to 1.
    KSweep,
    /// Baseline and full network with minority classes thinned to 1, 1/2, 1/5.
    Imbalance,
}

impl Study {
    pub const ALL: [Study; 5] = [Study::Modules, Study::Fusion, Study::Rates, Study::KSweep, Study::Imbalance];

    pub fn name(self) -> &'static str {
        match self {
            Study::Modules => "modules",
            Study::Fusion => "fusion",
            Study::Rates => "rates",
            Study::KSweep => "k-sweep",
            Study::Imbalance => "imbalance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: String,
    pub k: f64,
    pub loss: String,
    pub imbalance_ratio: Option<f64>,
    pub result: CvResult,
}

/// Single-rate model trained with plain cross-entropy and no calibrated head.
pub fn baseline_config(config: &TrainConfig, rate_hz: f64) -> TrainConfig {
    TrainConfig {
        variant: ModelVariant::SingleRate { rate_hz },
        k: 0.0,
        loss: LossConfig { kind: LossKind::CrossEntropy, ..config.loss },
        ..config.clone()
    }
}

fn row(name: impl Into<String>, cfg: &TrainConfig, ratio: Option<f64>, result: CvResult) -> AblationRow {
    AblationRow {
        name: name.into(),
        variant: cfg.variant.to_string(),
        k: cfg.k,
        loss: cfg.loss.kind.name().to_string(),
        imbalance_ratio: ratio,
        result,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_study(
    study: Study,
    config: &TrainConfig,
    data: &[MultiRateSample],
    classes: usize,
    plan: &SplitPlan,
    baseline_rate_hz: f64,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let rates = data.first().ok_or_else(|| Error::Contract("empty dataset".into()))?.rates_hz();
    let cv = |cfg: &TrainConfig, d: &[MultiRateSample]| run_cross_validation(cfg, d, classes, plan, jobs);
    let full = TrainConfig { variant: ModelVariant::IbaNet, ..config.clone() };
    let mut rows = Vec::new();
    match study {
        Study::Modules => {
            let base = baseline_config(config, baseline_rate_hz);
            rows.push(row("baseline", &base, None, cv(&base, data)?));
            let no_mfc = TrainConfig { variant: base.variant, ..config.clone() };
            rows.push(row("without_mfc", &no_mfc, None, cv(&no_mfc, data)?));
            rows.push(row("full", &full, None, cv(&full, data)?));
        }
        Study::Fusion => {
            for mode in FusionMode::ALL {
                let cfg = TrainConfig { variant: ModelVariant::Fusion(mode), ..config.clone() };
                rows.push(row(mode.name(), &cfg, None, fusion_ablation(config, data, classes, plan, mode, jobs)?));
            }
        }
        Study::Rates => {
            for &rate_hz in &rates {
                let cfg = TrainConfig { variant: ModelVariant::SingleRate { rate_hz }, ..config.clone() };
                rows.push(row(format!("single_{rate_hz}hz"), &cfg, None, cv(&cfg, data)?));
            }
            rows.push(row("multi_rate", &full, None, cv(&full, data)?));
        }
        Study::KSweep => {
            for k in std::iter::once(0.0).chain(super::grid::default_grid()) {
                let cfg = TrainConfig { k, ..full.clone() };
                rows.push(row(format!("k={k}"), &cfg, None, cv(&cfg, data)?));
            }
        }
        Study::Imbalance => {
            let base = baseline_config(config, baseline_rate_hz);
            for keep in [1.0, 0.5, 0.2] {
                let thinned = rebalance_minority(data, classes, keep, 0.05, config.seed)?;
                let ratio = class_stats(&thinned, classes)?.imbalance_ratio;
                rows.push(row(format!("baseline_keep{keep}"), &base, Some(ratio), cv(&base, &thinned)?));
                rows.push(row(format!("full_keep{keep}"), &full, Some(ratio), cv(&full, &thinned)?));
            }
        }
    }
    Ok(rows)
}

/// One summary line per row as CSV.
pub fn study_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("name,variant,k,loss,imbalance_ratio,accuracy,macro_precision,macro_recall,macro_f1,angle_spread\n");
    for r in rows {
        let a = &r.result.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.variant,
            r.k,
            r.loss,
            r.imbalance_ratio.map(|v| v.to_string()).unwrap_or_default(),
            a.accuracy,
            a.macro_precision,
            a.macro_recall,
            a.macro_f1,
            r.result.mean_angles.spread
        ));
    }
    out
}
