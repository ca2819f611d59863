//! Classifier calibration with a fixed simplex equiangular tight frame.
//!
//! The head has two branches over the fused feature `e_f`:
//!
//! * an ETF branch: `z_etf = mu * H^T normalize(g(e_f))`, where the columns of
//!   `H` form a simplex ETF that never changes during training;
//! * a learnable fully connected branch `z_fc = W^T e_f + b`.
//!
//! Final logits are `k * z_etf + (1 - k) * z_fc`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed classifier prototypes `[d, M]` with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfPrototypes {
    dim: usize,
    classes: usize,
    columns: Tensor,
}

impl EtfPrototypes {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Normalised prototypes as a `[d, M]` matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.columns
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.columns.at2(r, m)).collect()
    }

    /// `H^T H`, `[M, M]`.
    pub fn gram(&self) -> Tensor {
        let (d, m) = (self.dim, self.classes);
        let c = self.columns.data();
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                g[i * m + j] = (0..d).map(|r| c[r * m + i] * c[r * m + j]).sum();
            }
        }
        Tensor::matrix(m, m, g).expect("square gram")
    }

    /// Largest entrywise deviation of the Gram matrix from the ideal simplex
    /// ETF Gram matrix (1 on the diagonal, `-1/(M-1)` elsewhere).
    pub fn max_gram_deviation(&self) -> f64 {
        let m = self.classes;
        let off = -1.0 / (m as f64 - 1.0);
        let g = self.gram();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let ideal = if i == j { 1.0 } else { off };
                worst = worst.max((g.at2(i, j) - ideal).abs());
            }
        }
        worst
    }
}

/// Thin QR of a column-major `rows x cols` matrix by modified Gram-Schmidt
/// with one re-orthogonalisation pass. `R` has a positive diagonal, which
/// fixes the factorisation uniquely.
fn orthonormal_columns(mut cols: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    for j in 0..cols.len() {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let q = &done[i];
                let proj: f64 = q.iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (v, qv) in rest[0].iter_mut().zip(q) {
                    *v -= proj * qv;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-10) {
            return Err(Error::Contract("rank-deficient random matrix in ETF generation".into()));
        }
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    Ok(cols)
}

/// Builds `M` simplex-ETF prototypes in `d` dimensions.
///
/// For `d >= M`, `U` is the Q factor of a seeded `d x M` Gaussian matrix. For
/// `d = M - 1`, no `d x M` matrix has orthonormal columns, so `U = Q B^T`
/// with `Q` a seeded orthogonal `d x d` matrix and `B` an orthonormal basis of
/// the complement of the all-ones vector; the centring below only sees `U`
/// on that complement, so the result is a simplex ETF either way.
pub fn generate_etf(classes: usize, dim: usize, seed: u64) -> Result<EtfPrototypes> {
    if classes < 2 {
        return Err(Error::Parameter(format!("a simplex ETF needs at least 2 classes, got {classes}")));
    }
    if dim + 1 < classes {
        return Err(Error::Parameter(format!(
            "a simplex ETF of {classes} vectors needs dimension d >= M - 1 = {}, got {dim}",
            classes - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let m = classes;

    // u[col][row]
    let u: Vec<Vec<f64>> = if dim >= m {
        orthonormal_columns((0..m).map(|_| gaussian(dim)).collect())?
    } else {
        let q = orthonormal_columns((0..dim).map(|_| gaussian(dim)).collect())?;
        // Helmert basis of 1^perp: b_j = (1,..,1,-j,0,..) / sqrt(j(j+1)), j = 1..M-1
        let helmert = |j: usize, col: usize| -> f64 {
            let s = ((j * (j + 1)) as f64).sqrt();
            match col.cmp(&j) {
                std::cmp::Ordering::Less => 1.0 / s,
                std::cmp::Ordering::Equal => -(j as f64) / s,
                std::cmp::Ordering::Greater => 0.0,
            }
        };
        (0..m)
            .map(|col| {
                (0..dim)
                    .map(|row| (0..dim).map(|k| q[k][row] * helmert(k + 1, col)).sum())
                    .collect()
            })
            .collect()
    };

    let scale = (m as f64 / (m as f64 - 1.0)).sqrt();
    let mut data = vec![0.0; dim * m];
    for row in 0..dim {
        let mean = u.iter().map(|c| c[row]).sum::<f64>() / m as f64;
        for col in 0..m {
            data[row * m + col] = scale * (u[col][row] - mean);
        }
    }
    for col in 0..m {
        let norm = (0..dim).map(|r| data[r * m + col].powi(2)).sum::<f64>().sqrt();
        for r in 0..dim {
            data[r * m + col] /= norm;
        }
    }
    Ok(EtfPrototypes { dim, classes: m, columns: Tensor::matrix(dim, m, data)? })
}

#[derive(Clone, Debug)]
pub struct Nc3Head {
    /// `g`: fused feature to ETF space.
    pub projector: Linear,
    /// `W`, `b` of the learnable branch.
    pub classifier: Linear,
    /// Learnable scale applied to the ETF cosine logits.
    pub mu: ParamId,
    k: f64,
    etf: EtfPrototypes,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub degenerate_rows: usize,
}

impl Nc3Head {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input: usize,
        etf: EtfPrototypes,
        k: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::Parameter(format!("blend coefficient k must lie in [0, 1], got {k}")));
        }
        let projector = Linear::new(store, rng, "nc3.projector", input, etf.dim());
        let classifier = Linear::new(store, rng, "nc3.classifier", input, etf.classes());
        let mu = store.add("nc3.mu", Tensor::vector(vec![1.0]));
        Ok(Self { projector, classifier, mu, k, etf })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn prototypes(&self) -> &EtfPrototypes {
        &self.etf
    }

    /// `mu * H^T normalize(g(e_f))`.
    pub fn etf_branch(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Result<(Var, usize)> {
        let projected = self.projector.forward(tape, p, fused)?;
        let (unit, degenerate) = tape.l2_normalize(projected)?;
        let h = tape.constant(self.etf.matrix().clone());
        let cos = tape.matmul(unit, h)?;
        Ok((tape.mul(cos, p.var(self.mu))?, degenerate))
    }

    pub fn fc_branch(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Result<Var> {
        self.classifier.forward(tape, p, fused)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Result<HeadOutput> {
        let z_fc = self.fc_branch(tape, p, fused)?;
        if self.k == 0.0 {
            return Ok(HeadOutput { logits: z_fc, degenerate_rows: 0 });
        }
        let (z_etf, degenerate_rows) = self.etf_branch(tape, p, fused)?;
        Ok(HeadOutput { logits: blend(tape, z_etf, z_fc, self.k)?, degenerate_rows })
    }

    /// Classifier weight vectors `w_m` as the columns of a `[C, M]` matrix.
    pub fn classifier_weights<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.classifier.weight)
    }
}

/// `k * z_etf + (1 - k) * z_fc` on the tape.
pub fn blend(tape: &mut Tape, z_etf: Var, z_fc: Var, k: f64) -> Result<Var> {
    if tape.value(z_etf).shape() != tape.value(z_fc).shape() {
        return Err(shape_err(
            "blend",
            format!("{:?} vs {:?}", tape.value(z_etf).shape(), tape.value(z_fc).shape()),
        ));
    }
    let a = tape.scale(z_etf, k)?;
    let b = tape.scale(z_fc, 1.0 - k)?;
    tape.add(a, b)
}

pub fn blend_logits(z_etf: &[f64], z_fc: &[f64], k: f64) -> Vec<f64> {
    z_etf.iter().zip(z_fc).map(|(a, b)| k * a + (1.0 - k) * b).collect()
}

/// Class with the highest one-vs-rest probability `sigmoid(z_m)`; since the
/// sigmoid is monotone this is the arg max of the logits, lowest index on ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn two_classes_are_antipodal() {
        let etf = generate_etf(2, 2, 0).unwrap();
        let (a, b) = (etf.column(0), etf.column(1));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_abs_diff_eq!(dot, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn five_classes_equiangular() {
        let etf = generate_etf(5, 5, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = etf.column(i).iter().zip(etf.column(j)).map(|(x, y)| x * y).sum();
                if i == j {
                    assert_abs_diff_eq!(dot, 1.0, epsilon = 1e-9);
                } else {
                    assert_abs_diff_eq!(dot, -0.25, epsilon = 1e-9);
                    assert_abs_diff_eq!(dot.acos().to_degrees(), 104.4775, epsilon = 1e-4);
                }
            }
        }
    }

    #[test]
    fn gram_identity_over_sizes() {
        for m in 2..=10 {
            for d in [m - 1, m, m + 3] {
                let etf = generate_etf(m, d, 42).unwrap();
                // brute force against (M/(M-1)) I - (1/(M-1)) 11^T, columns already unit norm
                let g = etf.gram();
                for i in 0..m {
                    for j in 0..m {
                        let ideal = if i == j { 1.0 } else { -1.0 / (m as f64 - 1.0) };
                        assert!((g.at2(i, j) - ideal).abs() < 1e-9, "M={m} d={d}");
                    }
                }
            }
        }
    }

    #[test]
    fn etf_is_seeded_and_checks_dimension() {
        assert_eq!(generate_etf(4, 4, 9).unwrap(), generate_etf(4, 4, 9).unwrap());
        assert_ne!(generate_etf(4, 4, 9).unwrap(), generate_etf(4, 4, 10).unwrap());
        let err = generate_etf(5, 3, 0).unwrap_err().to_string();
        assert!(err.contains("d >= M - 1"), "{err}");
        assert!(generate_etf(1, 3, 0).is_err());
    }

    fn head(seed: u64, c: usize, m: usize, k: f64) -> (ParamStore, Nc3Head) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let etf = generate_etf(m, m, seed).unwrap();
        let head = Nc3Head::new(&mut store, &mut rng, c, etf, k).unwrap();
        (store, head)
    }

    #[test]
    fn aligned_feature_gives_gram_row() {
        // make g the identity so normalize(g(e)) = e
        let (mut store, head) = head(0, 4, 4, 1.0);
        let w = store.get_mut(head.projector.weight);
        for i in 0..4 {
            for j in 0..4 {
                w.data_mut()[i * 4 + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tape.constant(Tensor::matrix(1, 4, head.prototypes().column(0)).unwrap());
        let (z, _) = head.etf_branch(&mut tape, &p, e).unwrap();
        let z = tape.value(z).data();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-12);
        for &v in &z[1..] {
            assert_abs_diff_eq!(v, -1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_scale_zero_logits() {
        let (mut store, head) = head(1, 6, 4, 1.0);
        store.get_mut(head.mu).data_mut()[0] = 0.0;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tape.constant(Tensor::matrix(2, 6, (0..12).map(|v| v as f64 * 0.1 - 0.4).collect()).unwrap());
        let (z, _) = head.etf_branch(&mut tape, &p, e).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn etf_branch_matches_scalar_oracle() {
        let (store, head) = head(2, 6, 4, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let ev = tape.constant(Tensor::matrix(1, 6, e.clone()).unwrap());
        let (z, _) = head.etf_branch(&mut tape, &p, ev).unwrap();

        let g = store.get(head.projector.weight);
        let gb = store.get(head.projector.bias).data();
        let proj: Vec<f64> = (0..4).map(|j| gb[j] + (0..6).map(|i| e[i] * g.at2(i, j)).sum::<f64>()).collect();
        let n = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for m in 0..4 {
            let h = head.prototypes().column(m);
            let want: f64 = h.iter().zip(&proj).map(|(a, b)| a * b / n).sum();
            assert_abs_diff_eq!(tape.value(z).data()[m], want, epsilon = 1e-10);
            assert!(want.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn dead_projector_is_guarded() {
        let (mut store, head) = head(3, 4, 3, 0.5);
        store.get_mut(head.projector.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tape.constant(Tensor::full(&[2, 4], 0.5));
        let out = head.forward(&mut tape, &p, e).unwrap();
        assert_eq!(out.degenerate_rows, 2);
        assert!(tape.value(out.logits).is_finite());
    }

    #[test]
    fn fc_branch_cases() {
        let (mut store, head) = head(4, 3, 3, 0.0);
        let mut tape = Tape::new();
        store.get_mut(head.classifier.weight).data_mut().fill(0.0);
        let p = store.bind(&mut tape, false);
        let e = tape.constant(Tensor::matrix(1, 3, vec![0.2, -0.5, 0.9]).unwrap());
        let z = head.fc_branch(&mut tape, &p, e).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0, 0.0]);

        let w = store.get_mut(head.classifier.weight);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = store.bind(&mut tape, false);
        let z = head.fc_branch(&mut tape, &p, e).unwrap();
        assert_eq!(tape.value(z).data(), &[0.2, -0.5, 0.9]);
    }

    #[test]
    fn fc_branch_random_vs_matvec() {
        let (store, head) = head(5, 7, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let ev = tape.constant(Tensor::matrix(1, 7, e.clone()).unwrap());
        let z = head.fc_branch(&mut tape, &p, ev).unwrap();
        let w = head.classifier_weights(&store);
        for m in 0..4 {
            let want: f64 = (0..7).map(|i| w.at2(i, m) * e[i]).sum();
            assert_abs_diff_eq!(tape.value(z).data()[m], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn blend_endpoints() {
        let (store, h0) = head(6, 5, 3, 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tape.constant(Tensor::matrix(1, 5, vec![0.3, -0.1, 0.7, 0.2, -0.9]).unwrap());
        let z = h0.forward(&mut tape, &p, e).unwrap().logits;
        let fc = h0.fc_branch(&mut tape, &p, e).unwrap();
        assert_eq!(tape.value(z), tape.value(fc));

        let (store, h1) = head(6, 5, 3, 1.0);
        let p = store.bind(&mut tape, false);
        let z = h1.forward(&mut tape, &p, e).unwrap().logits;
        let (etf, _) = h1.etf_branch(&mut tape, &p, e).unwrap();
        assert_eq!(tape.value(z), tape.value(etf));

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Nc3Head::new(&mut store, &mut rng, 4, generate_etf(3, 3, 0).unwrap(), 1.5).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(predict(&[0.4, 0.4]), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for _ in 0..1000 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p: Vec<f64> = z.iter().map(|&v| sig(v)).collect();
            let brute = (0..5).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            assert_eq!(predict(&z), brute);
        }
    }

    #[test]
    fn scale_equivariance_without_bias() {
        let (mut store, head) = head(8, 6, 4, 0.5);
        store.get_mut(head.projector.bias).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let base = Tensor::matrix(1, 6, vec![0.4, -1.1, 0.3, 0.8, -0.2, 0.5]).unwrap();
        let e = tape.constant(base.clone());
        let (z1, _) = head.etf_branch(&mut tape, &p, e).unwrap();
        for c in [0.01, 3.0, 250.0] {
            let scaled = Tensor::matrix(1, 6, base.data().iter().map(|v| v * c).collect()).unwrap();
            let e2 = tape.constant(scaled);
            let (z2, _) = head.etf_branch(&mut tape, &p, e2).unwrap();
            assert!(tape.value(z1).max_abs_diff(tape.value(z2)) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn blend_is_linear(a in prop::collection::vec(-64i32..64, 4), b in prop::collection::vec(-64i32..64, 4),
                           a2 in prop::collection::vec(-64i32..64, 4), b2 in prop::collection::vec(-64i32..64, 4),
                           kq in 0u32..=4) {
            // dyadic k and integer logits keep every product exact
            let k = kq as f64 / 4.0;
            let f = |v: &Vec<i32>| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let (a, b, a2, b2) = (f(&a), f(&b), f(&a2), f(&b2));
            let lhs: Vec<f64> = blend_logits(&a, &b, k).iter().zip(blend_logits(&a2, &b2, k)).map(|(x, y)| x + y).collect();
            let sa: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let sb: Vec<f64> = b.iter().zip(&b2).map(|(x, y)| x + y).collect();
            prop_assert_eq!(lhs, blend_logits(&sa, &sb, k));
        }

        #[test]
        fn blend_is_linear_within_rounding(a in prop::collection::vec(-10.0f64..10.0, 5), b in prop::collection::vec(-10.0f64..10.0, 5),
                                           a2 in prop::collection::vec(-10.0f64..10.0, 5), b2 in prop::collection::vec(-10.0f64..10.0, 5),
                                           k in 0.0f64..=1.0) {
            let lhs: Vec<f64> = blend_logits(&a, &b, k).iter().zip(blend_logits(&a2, &b2, k)).map(|(x, y)| x + y).collect();
            let sa: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let sb: Vec<f64> = b.iter().zip(&b2).map(|(x, y)| x + y).collect();
            for (x, y) in lhs.iter().zip(blend_logits(&sa, &sb, k)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn predict_is_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 2..8), c in -100.0f64..100.0) {
            // rounding can merge near-ties, so shift by a representable integer
            let c = c.round();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let distinct = z.iter().all(|a| z.iter().filter(|b| (*b - a).abs() < 1e-9).count() == 1);
            prop_assume!(distinct);
            prop_assert_eq!(predict(&z), predict(&shifted));
        }
    }
}
