//! Class-balanced focal loss (one-against-rest sigmoid form) and softmax
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_BETA: f64 = 0.9999;
pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CbFocal,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CbFocal => "cb_focal",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cb_focal" => Some(LossKind::CbFocal),
            "cross_entropy" | "ce" => Some(LossKind::CrossEntropy),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::CbFocal, beta: DEFAULT_BETA, gamma: DEFAULT_GAMMA }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Mean batch loss for logits `[B, M]`.
    pub fn compute(&self, tape: &mut Tape, logits: Var, labels: &[usize], weights: &ClassWeights) -> Result<Var> {
        match self.kind {
            LossKind::CbFocal => cb_focal(tape, logits, labels, weights, self.gamma),
            LossKind::CrossEntropy => cross_entropy(tape, logits, labels),
        }
    }
}

/// Inverse effective-number weights `alpha_y = (1 - beta) / (1 - beta^n_y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    beta: f64,
    counts: Vec<usize>,
    alpha: Vec<f64>,
}

impl ClassWeights {
    pub fn new(counts: &[usize], beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Parameter(format!("beta must lie in [0, 1), got {beta}")));
        }
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Parameter(format!("class counts must all be >= 1, got {counts:?}")));
        }
        let alpha = counts
            .iter()
            .map(|&n| if beta == 0.0 { 1.0 } else { (1.0 - beta) / (1.0 - beta.powf(n as f64)) })
            .collect();
        Ok(Self { beta, counts: counts.to_vec(), alpha })
    }

    /// All-ones weights for `classes` classes.
    pub fn uniform(classes: usize) -> Self {
        Self { beta: 0.0, counts: vec![1; classes], alpha: vec![1.0; classes] }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

pub fn class_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    ClassWeights::new(counts, beta)
}

fn check_batch(tape: &Tape, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = tape.value(logits).shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(shape_err("loss", format!("logits {shape:?} for {} labels", labels.len())));
    }
    let m = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Contract(format!("label {bad} out of range for {m} classes")));
    }
    Ok((shape[0], m))
}

/// `-alpha_y * sum_m (1 - p_m)^gamma * log p_m` with `p_m = sigmoid(z^t_m)`
/// and `z^t_m = z_m` for the true class, `-z_m` otherwise; averaged over the
/// batch.
pub fn cb_focal(tape: &mut Tape, logits: Var, labels: &[usize], weights: &ClassWeights, gamma: f64) -> Result<Var> {
    let (b, m) = check_batch(tape, logits, labels)?;
    if weights.alpha.len() != m {
        return Err(shape_err("cb_focal", format!("{} class weights for {m} classes", weights.alpha.len())));
    }
    let mut sign = vec![-1.0; b * m];
    let mut alpha = vec![0.0; b];
    for (i, &y) in labels.iter().enumerate() {
        sign[i * m + y] = 1.0;
        alpha[i] = weights.alpha[y];
    }
    let sign = tape.constant(Tensor::new(vec![b, m], sign)?);
    let alpha = tape.constant(Tensor::new(vec![b, 1], alpha)?);

    let zt = tape.mul(logits, sign)?;
    let p = tape.sigmoid(zt)?;
    let neg = tape.scale(zt, -1.0)?;
    let q = tape.sigmoid(neg)?;
    let focal = tape.pow(q, gamma)?;
    let logp = tape.log(p, PROB_FLOOR)?;
    let term = tape.mul(focal, logp)?;
    let weighted = tape.mul(term, alpha)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / b as f64)
}

/// `-log softmax(z)_y`, averaged over the batch.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, m) = check_batch(tape, logits, labels)?;
    let mut onehot = vec![0.0; b * m];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * m + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![b, m], onehot)?);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::ParamStore;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line per-sample oracle.
    fn focal_oracle(z: &[f64], y: usize, alpha: f64, gamma: f64) -> f64 {
        -alpha
            * z.iter()
                .enumerate()
                .map(|(m, &v)| {
                    let zt = if m == y { v } else { -v };
                    let p = sig(zt).max(1e-12);
                    (1.0 - sig(zt)).powf(gamma) * p.ln()
                })
                .sum::<f64>()
    }

    fn eval_focal(z: &[f64], y: usize, w: &ClassWeights, gamma: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, z.len(), z.to_vec()).unwrap());
        let l = cb_focal(&mut tape, v, &[y], w, gamma).unwrap();
        tape.value(l).item().unwrap()
    }

    fn eval_ce(z: &[f64], y: usize) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, z.len(), z.to_vec()).unwrap());
        let l = cross_entropy(&mut tape, v, &[y]).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn weight_examples() {
        for beta in [0.0, 0.5, 0.9999] {
            assert_abs_diff_eq!(class_weights(&[1], beta).unwrap().alpha()[0], 1.0, epsilon = 1e-12);
        }
        let w = class_weights(&[3, 70, 9000], 0.0).unwrap();
        assert_eq!(w.alpha(), &[1.0, 1.0, 1.0]);
        let w = class_weights(&[10_000], 0.9999).unwrap();
        let oracle = 1e-4 / (1.0 - (10_000.0 * (0.9999f64).ln()).exp());
        assert_abs_diff_eq!(w.alpha()[0], oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(w.alpha()[0], 1.582e-4, epsilon = 1e-7);
        assert!(class_weights(&[0, 3], 0.9).is_err());
        assert!(class_weights(&[3], 1.0).is_err());
    }

    #[test]
    fn sign_rule() {
        // with gamma = 0 each class contributes -log sigmoid(z^t_m) alone, so
        // the loss reveals which sign was applied
        let z = [0.7, -1.3, 2.1];
        let w = ClassWeights::uniform(3);
        let got = eval_focal(&z, 1, &w, 0.0);
        let want = -(sig(-0.7).ln() + sig(-1.3).ln() + sig(-2.1).ln());
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn zero_logits_example() {
        let got = eval_focal(&[0.0, 0.0], 0, &ClassWeights::uniform(2), 0.5);
        assert_abs_diff_eq!(got, 2.0 * 0.5f64.sqrt() * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.98026, epsilon = 1e-5);
    }

    #[test]
    fn matches_oracle_with_weights() {
        let w = class_weights(&[500, 3, 40, 7], 0.999).unwrap();
        let batch = [(vec![0.3, -2.0, 1.1, 0.0], 2), (vec![5.0, 4.0, -3.0, 0.2], 1)];
        let mut tape = Tape::new();
        let flat: Vec<f64> = batch.iter().flat_map(|(z, _)| z.clone()).collect();
        let v = tape.constant(Tensor::matrix(2, 4, flat).unwrap());
        let l = cb_focal(&mut tape, v, &[2, 1], &w, 0.5).unwrap();
        let want = batch.iter().map(|(z, y)| focal_oracle(z, *y, w.alpha()[*y], 0.5)).sum::<f64>() / 2.0;
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn bad_label_is_contract_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            cb_focal(&mut tape, v, &[3], &ClassWeights::uniform(3), 0.5),
            Err(Error::Contract(_))
        ));
        assert!(matches!(cross_entropy(&mut tape, v, &[7]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(eval_ce(&[0.0, 100.0, 0.0], 1) < 1e-40);
        assert_abs_diff_eq!(eval_ce(&[0.4; 6], 3), 6f64.ln(), epsilon = 1e-12);
        let z = [0.2, -1.5, 3.3, 0.9];
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(eval_ce(&z, 0), lse - z[0], epsilon = 1e-12);
    }

    #[test]
    fn translation_behaviour() {
        let z = [0.5, -0.25, 1.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.0).collect();
        assert_abs_diff_eq!(eval_ce(&z, 2), eval_ce(&shifted, 2), epsilon = 1e-12);
        let w = ClassWeights::uniform(3);
        assert!((eval_focal(&z, 2, &w, 0.5) - eval_focal(&shifted, 2, &w, 0.5)).abs() > 1e-3);
    }

    #[test]
    fn small_beta_approaches_unweighted() {
        let counts = [900, 12, 4];
        let z = [1.2, -0.4, 0.3];
        let w = class_weights(&counts, 1e-8).unwrap();
        for y in 0..3 {
            let a = eval_focal(&z, y, &w, 0.5);
            let b = eval_focal(&z, y, &ClassWeights::uniform(3), 0.5);
            assert!((a - b).abs() / b.abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let w = ClassWeights::uniform(3);
        for z in [[1e6, -1e6, 0.0], [-800.0, 800.0, 1e300], [0.0, -1e-300, 5e2]] {
            for y in 0..3 {
                assert!(eval_focal(&z, y, &w, 0.5).is_finite());
                assert!(eval_ce(&z, y).is_finite());
            }
        }
    }

    fn gradcheck_loss(kind: LossKind) {
        let mut store = ParamStore::new();
        let z = store.add("z", Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.4).collect()).unwrap());
        let weights = class_weights(&[20, 3, 9, 1], 0.99).unwrap();
        let cfg = LossConfig { kind, beta: 0.99, gamma: 0.5 };
        let report = check_params(&store, 1e-5, 1e-6, |tape, p| cfg.compute(tape, p.var(z), &[0, 3, 1], &weights)).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn focal_gradcheck() {
        gradcheck_loss(LossKind::CbFocal);
    }

    #[test]
    fn ce_gradcheck() {
        gradcheck_loss(LossKind::CrossEntropy);
    }

    proptest! {
        #[test]
        fn focal_decreases_in_true_logit(z in prop::collection::vec(-6.0f64..6.0, 2..6), y in 0usize..6, dz in 0.01f64..2.0) {
            let y = y % z.len();
            let w = ClassWeights::uniform(z.len());
            let mut up = z.clone();
            up[y] += dz;
            prop_assert!(eval_focal(&up, y, &w, 0.5) < eval_focal(&z, y, &w, 0.5));
        }

        #[test]
        fn gamma_zero_is_sum_of_bce(z in prop::collection::vec(-8.0f64..8.0, 2..7), y in 0usize..7) {
            let y = y % z.len();
            let bce: f64 = z.iter().enumerate().map(|(m, &v)| -sig(if m == y { v } else { -v }).ln()).sum();
            prop_assert!((eval_focal(&z, y, &ClassWeights::uniform(z.len()), 0.0) - bce).abs() < 1e-10);
        }

        #[test]
        fn focal_matches_oracle(z in prop::collection::vec(-10.0f64..10.0, 3), y in 0usize..3, gamma in 0.0f64..3.0) {
            let w = class_weights(&[40, 5, 1], 0.9999).unwrap();
            let got = eval_focal(&z, y, &w, gamma);
            let want = focal_oracle(&z, y, w.alpha()[y], gamma);
            prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }
}
