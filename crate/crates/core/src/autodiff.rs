//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`]. A node
//! requires a gradient when any of its inputs does; [`Tape::backward`] walks the
//! recorded nodes once, in reverse insertion order, which is a valid reverse
//! topological order because inputs always precede their consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Denominator floor used by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn node_id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Conv2dTime { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax { a: usize, tau: f64 },
    LogSoftmax(usize),
    GlobalAvgPool(usize),
    L2Normalize { a: usize, norms: Vec<f64> },
    Log { a: usize, floor: f64 },
    Pow(usize, f64),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the node did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

/// Maps each flat index of `a_shape` onto the flat index of `b_shape` under
/// right-aligned broadcasting of `b` onto `a`.
fn broadcast_map(op: &'static str, a_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if a_shape == b_shape {
        return Ok(None);
    }
    if b_shape.len() > a_shape.len() {
        return Err(shape_err(op, format!("cannot broadcast {b_shape:?} onto {a_shape:?}")));
    }
    let offset = a_shape.len() - b_shape.len();
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut stride = 1;
    for (i, &extent) in b_shape.iter().enumerate().rev() {
        let target = a_shape[offset + i];
        if extent == target {
            b_strides[offset + i] = stride;
        } else if extent != 1 {
            return Err(shape_err(op, format!("cannot broadcast {b_shape:?} onto {a_shape:?}")));
        }
        stride *= extent;
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    let mut flat_b = 0usize;
    for _ in 0..n {
        map.push(flat_b);
        for axis in (0..a_shape.len()).rev() {
            idx[axis] += 1;
            flat_b += b_strides[axis];
            if idx[axis] < a_shape[axis] {
                break;
            }
            flat_b -= b_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Ok(Some(map))
}

fn last_axis(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&w) if w > 0 => Ok((shape.iter().product::<usize>() / w, w)),
        _ => Err(shape_err(op, format!("needs a nonempty last axis, got {shape:?}"))),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-primitive finiteness check.
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract("variable is not recorded on this tape".into()));
        }
        Ok(v.id)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, id })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self.id, id }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += a_ip * bv;
                }
            }
        }
        let rg = self.rg(&[ia, ib]);
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul(ia, ib), rg)
    }

    /// Convolution whose kernel spans the time axis only.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, K]`, `b: [Cout]` -> `[B, Cout, H, Wout]`
    /// with `Wout = (W + 2 pad - K) / stride + 1`.
    pub fn conv2d_time(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xv, wv, bv) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if xv.rank() != 4 || wv.rank() != 3 || bv.shape() != [wv.shape()[0]] || wv.shape()[1] != xv.shape()[1] {
            return Err(shape_err(
                "conv2d_time",
                format!("input {:?}, kernel {:?}, bias {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d_time stride must be positive".into()));
        }
        let (bsz, cin, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if width == 0 || width + 2 * pad < k {
            return Err(shape_err(
                "conv2d_time",
                format!("time extent {width} with padding {pad} is shorter than kernel {k}"),
            ));
        }
        let wout = (width + 2 * pad - k) / stride + 1;
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let ck = cin * k;
        let mut out = vec![0.0; bsz * cout * h * wout];
        let mut col = vec![0.0; wout * ck];
        for bi in 0..bsz {
            for hi in 0..h {
                im2col(&mut col, xd, (bi, hi), (cin, h, width), (k, stride, pad, wout));
                for co in 0..cout {
                    let wrow = &wd[co * ck..][..ck];
                    let orow = &mut out[((bi * cout + co) * h + hi) * wout..][..wout];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        *ov = bd[co] + dot(wrow, &col[o * ck..][..ck]);
                    }
                }
            }
        }
        let rg = self.rg(&[ix, iw, ib]);
        self.push(
            "conv2d_time",
            Tensor::new(vec![bsz, cout, h, wout], out)?,
            Op::Conv2dTime { x: ix, w: iw, b: ib, stride, pad },
            rg,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let map = broadcast_map(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<f64> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia, ib]);
        self.push(name, Tensor::new(shape, out)?, op(ia, ib), rg)
    }

    /// `a + b`, with `b` broadcast onto `a` (right-aligned, extents equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// `a - b`, broadcasting as in [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product, broadcasting as in [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let out = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia]);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("scale", a, |x| c * x, Op::Scale(ia, c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("gelu", a, gelu, Op::Gelu(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(ia))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("log", a, |x| x.max(floor).ln(), Op::Log { a: ia, floor })
    }

    /// `a^p` for a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("pow", a, |x| x.powf(p), Op::Pow(ia, p))
    }

    /// Softmax of `a / tau` along the last axis.
    pub fn softmax_with_temperature(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {tau}")));
        }
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let (rows, width) = last_axis("softmax_with_temperature", av.shape())?;
        let mut out = av.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * width..(r + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / tau).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia]);
        self.push("softmax_with_temperature", Tensor::new(shape, out)?, Op::Softmax { a: ia, tau }, rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let (rows, width) = last_axis("log_softmax", av.shape())?;
        let mut out = av.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * width..(r + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia]);
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax(ia), rg)
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.rank() < 3 {
            return Err(shape_err("global_avg_pool", format!("expected [B, C, ...], got {:?}", av.shape())));
        }
        let (bsz, c) = (av.shape()[0], av.shape()[1]);
        let span: usize = av.shape()[2..].iter().product();
        if span == 0 {
            return Err(shape_err("global_avg_pool", "empty spatial extent"));
        }
        let out = av.data().chunks(span).map(|ch| ch.iter().sum::<f64>() / span as f64).collect();
        let rg = self.rg(&[ia]);
        self.push("global_avg_pool", Tensor::new(vec![bsz, c], out)?, Op::GlobalAvgPool(ia), rg)
    }

    /// Row-wise L2 normalisation along the last axis.
    ///
    /// Rows whose norm falls below [`NORM_EPS`] are divided by `norm + NORM_EPS`
    /// instead; the second return value counts such rows.
    pub fn l2_normalize(&mut self, a: Var) -> Result<(Var, usize)> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let (rows, width) = last_axis("l2_normalize", av.shape())?;
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        let mut degenerate = 0;
        for r in 0..rows {
            let row = &mut out[r * width..(r + 1) * width];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if n < NORM_EPS {
                degenerate += 1;
                n + NORM_EPS
            } else {
                n
            };
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(n);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia]);
        let v = self.push("l2_normalize", Tensor::new(shape, out)?, Op::L2Normalize { a: ia, norms }, rg)?;
        Ok((v, degenerate))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(&[ia]);
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), rg)
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.is_empty() {
            return Err(shape_err("mean", "empty input"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(&[ia]);
        self.push("mean", Tensor::scalar(s), Op::Mean(ia), rg)
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let lead = {
            let s = self.nodes[ids[0]].value.shape();
            if s.is_empty() {
                return Err(shape_err("concat", "rank-0 input"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", format!("leading extents {:?} vs {:?}", lead, s)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in ids.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(&ids);
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(ids), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::Contract("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&shapes[loss.id], 1.0));

        for i in (0..=loss.id).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let g = g.data();
            self.backprop(i, g, lower, &shapes)?;
        }
        Ok(Gradients { tape: self.id, grads, shapes })
    }

    fn backprop(&self, i: usize, g: &[f64], lower: &mut [Option<Tensor>], shapes: &[Vec<usize>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    let bd = bv.data();
                    accumulate(&mut lower[a], &shapes[a], |ga| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let brow = &bd[p * m..(p + 1) * m];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(b) {
                    let ad = av.data();
                    accumulate(&mut lower[b], &shapes[b], |gb| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let a_rp = ad[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += a_rp * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Conv2dTime { x, w, b, stride, pad } => {
                let (xv, wv) = (&nodes[x].value, &nodes[w].value);
                let (bsz, cin, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let wout = nodes[i].value.shape()[3];
                let (xd, wd) = (xv.data(), wv.data());
                let grow = |bi: usize, co: usize, hi: usize| &g[((bi * cout + co) * h + hi) * wout..][..wout];
                if needs(b) {
                    accumulate(&mut lower[b], &shapes[b], |gb| {
                        for bi in 0..bsz {
                            for (co, gbc) in gb.iter_mut().enumerate() {
                                for hi in 0..h {
                                    *gbc += grow(bi, co, hi).iter().sum::<f64>();
                                }
                            }
                        }
                    });
                }
                let (nw, nx) = (needs(w), needs(x));
                if nw || nx {
                    let ck = cin * k;
                    let mut col = vec![0.0; wout * ck];
                    let mut gcol = vec![0.0; wout * ck];
                    let mut gw_acc = vec![0.0; if nw { cout * ck } else { 0 }];
                    let mut gx_acc = vec![0.0; if nx { xd.len() } else { 0 }];
                    for bi in 0..bsz {
                        for hi in 0..h {
                            if nw {
                                im2col(&mut col, xd, (bi, hi), (cin, h, width), (k, stride, pad, wout));
                                for co in 0..cout {
                                    let gr = grow(bi, co, hi);
                                    let gwrow = &mut gw_acc[co * ck..][..ck];
                                    for (o, &gv) in gr.iter().enumerate() {
                                        axpy(gwrow, &col[o * ck..][..ck], gv);
                                    }
                                }
                            }
                            if nx {
                                gcol.fill(0.0);
                                for co in 0..cout {
                                    let gr = grow(bi, co, hi);
                                    let wrow = &wd[co * ck..][..ck];
                                    for (o, &gv) in gr.iter().enumerate() {
                                        axpy(&mut gcol[o * ck..][..ck], wrow, gv);
                                    }
                                }
                                col2im(&mut gx_acc, &gcol, (bi, hi), (cin, h, width), (k, stride, pad, wout));
                            }
                        }
                    }
                    if nw {
                        accumulate(&mut lower[w], &shapes[w], |gw| axpy(gw, &gw_acc, 1.0));
                    }
                    if nx {
                        accumulate(&mut lower[x], &shapes[x], |gx| axpy(gx, &gx_acc, 1.0));
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    accumulate(&mut lower[a], &shapes[a], |ga| {
                        for (o, &gv) in ga.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                if needs(b) {
                    let map = broadcast_map("add", &shapes[a], &shapes[b])?;
                    accumulate(&mut lower[b], &shapes[b], |gb| match map {
                        None => {
                            for (o, &gv) in gb.iter_mut().zip(g) {
                                *o += sign * gv;
                            }
                        }
                        Some(m) => {
                            for (&j, &gv) in m.iter().zip(g) {
                                gb[j] += sign * gv;
                            }
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                let map = broadcast_map("mul", &shapes[a], &shapes[b])?;
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                let bidx = |t: usize| map.as_ref().map_or(t, |m| m[t]);
                if needs(a) {
                    accumulate(&mut lower[a], &shapes[a], |ga| {
                        for (t, o) in ga.iter_mut().enumerate() {
                            *o += g[t] * bd[bidx(t)];
                        }
                    });
                }
                if needs(b) {
                    accumulate(&mut lower[b], &shapes[b], |gb| {
                        for (t, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                            gb[bidx(t)] += gv * av;
                        }
                    });
                }
            }
            &Op::Scale(a, c) => {
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                });
            }
            &Op::Gelu(a) => {
                let ad = nodes[a].value.data();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            &Op::Relu(a) => {
                let ad = nodes[a].value.data();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            &Op::Softmax { a, tau } => {
                let width = *shapes[a].last().unwrap();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, &gv), &y) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot) / tau;
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let width = *shapes[a].last().unwrap();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &gv), &y) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += gv - y.exp() * gsum;
                        }
                    }
                });
            }
            &Op::GlobalAvgPool(a) => {
                let span: usize = shapes[a][2..].iter().product();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for (chunk, &gv) in ga.chunks_mut(span).zip(g) {
                        let d = gv / span as f64;
                        for o in chunk {
                            *o += d;
                        }
                    }
                });
            }
            Op::L2Normalize { a, norms } => {
                let a = *a;
                let width = *shapes[a].last().unwrap();
                let ad = nodes[a].value.data();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for (r, &n) in norms.iter().enumerate() {
                        let denom = if n < NORM_EPS { n + NORM_EPS } else { n };
                        let xr = &ad[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let xg: f64 = xr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let radial = if n > 0.0 { xg / (n * denom * denom) } else { 0.0 };
                        for ((o, &gv), &xv) in ga[r * width..(r + 1) * width].iter_mut().zip(gr).zip(xr) {
                            *o += gv / denom - xv * radial;
                        }
                    }
                });
            }
            &Op::Log { a, floor } => {
                let ad = nodes[a].value.data();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        if x > floor {
                            *o += gv / x;
                        }
                    }
                });
            }
            &Op::Pow(a, p) => {
                let ad = nodes[a].value.data();
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        if p == 0.0 || (x == 0.0 && p < 1.0) {
                            continue;
                        }
                        *o += gv * p * x.powf(p - 1.0);
                    }
                });
            }
            &Op::Sum(a) => {
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            &Op::Mean(a) => {
                let n = shapes[a].iter().product::<usize>() as f64;
                accumulate(&mut lower[a], &shapes[a], |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::Concat(ids) => {
                let widths: Vec<usize> = ids.iter().map(|&j| *shapes[j].last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&j, &w) in ids.iter().zip(&widths) {
                    if needs(j) {
                        accumulate(&mut lower[j], &shapes[j], |gj| {
                            for r in 0..rows {
                                for c in 0..w {
                                    gj[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

/// Patch matrix for one `(batch, row)`: `col[o][ci * k + kk] = x[o * stride + kk - pad]`
/// with zeros where the tap falls into the padding.
fn im2col(
    col: &mut [f64],
    xd: &[f64],
    (bi, hi): (usize, usize),
    (cin, h, width): (usize, usize, usize),
    (k, stride, pad, wout): (usize, usize, usize, usize),
) {
    let ck = cin * k;
    col.fill(0.0);
    for ci in 0..cin {
        let xrow = &xd[((bi * cin + ci) * h + hi) * width..][..width];
        for kk in 0..k {
            let (lo, hi_) = valid_range(kk, pad, stride, width, wout);
            for o in lo..hi_ {
                col[o * ck + ci * k + kk] = xrow[o * stride + kk - pad];
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input row.
fn col2im(
    gx: &mut [f64],
    gcol: &[f64],
    (bi, hi): (usize, usize),
    (cin, h, width): (usize, usize, usize),
    (k, stride, pad, wout): (usize, usize, usize, usize),
) {
    let ck = cin * k;
    for ci in 0..cin {
        let gxrow = &mut gx[((bi * cin + ci) * h + hi) * width..][..width];
        for kk in 0..k {
            let (lo, hi_) = valid_range(kk, pad, stride, width, wout);
            for o in lo..hi_ {
                gxrow[o * stride + kk - pad] += gcol[o * ck + ci * k + kk];
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Output positions `o` for which input index `o * stride + kk - pad` lies in `[0, width)`.
#[inline]
fn valid_range(kk: usize, pad: usize, stride: usize, width: usize, wout: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // largest o with o*stride + kk - pad <= width - 1
    let limit = width + pad - 1;
    let hi = if limit < kk { 0 } else { ((limit - kk) / stride + 1).min(wout) };
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gelu_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0]));
        let y = t.gelu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let y = t.softmax_with_temperature(x, 0.4).unwrap();
        for &v in t.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.softmax_with_temperature(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(t.softmax_with_temperature(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let i = t.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let (y, degenerate) = t.l2_normalize(x).unwrap();
        assert_eq!(degenerate, 0);
        assert_abs_diff_eq!(t.value(y).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_is_guarded() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3]), true);
        let (y, degenerate) = t.l2_normalize(x).unwrap();
        assert_eq!(degenerate, 1);
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap().wrt(x);
        assert!(g.is_finite());
    }

    #[test]
    fn gap_of_constant_map_is_exact() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 3, 4, 7], 3.5));
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap(), true);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let unused = t.leaf(Tensor::zeros(&[3]), true);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_output_extent_and_short_input() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 36, 200]));
        let w = t.constant(Tensor::zeros(&[8, 1, 5]));
        let b = t.constant(Tensor::zeros(&[8]));
        let y = t.conv2d_time(x, w, b, 2, 2).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 8, 36, 100]);
        let short = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(t.conv2d_time(short, w, b, 2, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 batch, 2 in-channels, H=1, W=6, kernel 3, stride 2, pad 1
        let xd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..6).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 1, 6], xd.clone()).unwrap());
        let w = t.constant(Tensor::new(vec![1, 2, 3], wd.clone()).unwrap());
        let b = t.constant(Tensor::vector(vec![0.25]));
        let y = t.conv2d_time(x, w, b, 2, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 3]);
        for o in 0..3 {
            let mut s = 0.25;
            for ci in 0..2 {
                for kk in 0..3 {
                    let idx = (o * 2 + kk) as isize - 1;
                    if (0..6).contains(&idx) {
                        s += wd[ci * 3 + kk] * xd[ci * 6 + idx as usize];
                    }
                }
            }
            assert_abs_diff_eq!(t.value(y).data()[o], s, epsilon = 1e-14);
        }
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let bias = t.constant(Tensor::vector(vec![1., 2., 3.]));
        let col = t.constant(Tensor::new(vec![2, 1], vec![10., 20.]).unwrap());
        let y = t.add(a, bias).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 3., 1., 2., 3.]);
        let z = t.add(a, col).unwrap();
        assert_eq!(t.value(z).data(), &[10., 10., 10., 20., 20., 20.]);
        let bad = t.constant(Tensor::vector(vec![1., 2.]));
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn valid_range_covers_in_bounds_taps() {
        for width in 1..12 {
            for k in 1..6 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        if width + 2 * pad < k {
                            continue;
                        }
                        let wout = (width + 2 * pad - k) / stride + 1;
                        for kk in 0..k {
                            let (lo, hi) = valid_range(kk, pad, stride, width, wout);
                            for o in 0..wout {
                                let idx = (o * stride + kk) as isize - pad as isize;
                                let inside = idx >= 0 && (idx as usize) < width;
                                assert_eq!(inside, o >= lo && o < hi, "w{width} k{k} p{pad} s{stride} kk{kk} o{o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
