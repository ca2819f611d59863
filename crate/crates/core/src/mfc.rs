//! Multi-rate feature customisation: one CNN encoder per sampling rate, global
//! average pooling, hourglass projection experts and a temperature-softmax
//! router whose rates weight the projected features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{kaiming_uniform, Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Encoder geometry: one `conv2d_time -> ReLU` block per entry of `channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32], kernel: 5, stride: 2, padding: 2 }
    }
}

impl EncoderConfig {
    pub fn output_channels(&self) -> usize {
        *self.channels.last().expect("encoder has at least one block")
    }

    /// Time extent after every block, or a shape error when the input is too
    /// short for some block.
    pub fn output_len(&self, width: usize) -> Result<usize> {
        let mut w = width;
        for (i, _) in self.channels.iter().enumerate() {
            if w == 0 || w + 2 * self.padding < self.kernel {
                return Err(shape_err(
                    "encode",
                    format!("block {i} sees {w} time steps, too short for kernel {} with padding {}", self.kernel, self.padding),
                ));
            }
            w = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        }
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Parameter(format!("invalid encoder geometry {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
}

/// Per-rate CNN feature extractor: `[B, 1, H, W] -> [B, C, H, W']`.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let mut blocks = Vec::with_capacity(config.channels.len());
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = cin * config.kernel;
            let weight = store.add(
                format!("{name}.conv{i}.weight"),
                kaiming_uniform(rng, &[cout, cin, config.kernel], fan_in),
            );
            let bias = store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[cout]));
            blocks.push(ConvBlock { weight, bias });
            cin = cout;
        }
        Ok(Self { config: config.clone(), blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(shape_err("encode", format!("expected [B, 1, H, W], got {shape:?}")));
        }
        self.config.output_len(shape[3])?;
        let mut h = x;
        for b in &self.blocks {
            let c = tape.conv2d_time(h, p.var(b.weight), p.var(b.bias), self.config.stride, self.config.padding)?;
            h = tape.relu(c)?;
        }
        Ok(h)
    }
}

/// Global average pooling over the `H x W'` extent.
pub fn pool(tape: &mut Tape, feature_map: Var) -> Result<Var> {
    tape.global_avg_pool(feature_map)
}

/// Two-layer hourglass MLP `C -> floor(C/2) -> C`, GELU after each layer.
#[derive(Clone, Debug)]
pub struct ProjectionExpert {
    pub narrow: Linear,
    pub widen: Linear,
}

impl ProjectionExpert {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        let bottleneck = width / 2;
        if bottleneck == 0 {
            return Err(Error::Parameter(format!("expert width {width} leaves no bottleneck")));
        }
        Ok(Self {
            narrow: Linear::new(store, rng, &format!("{name}.fc0"), width, bottleneck),
            widen: Linear::new(store, rng, &format!("{name}.fc1"), bottleneck, width),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, e: Var) -> Result<Var> {
        let h = self.narrow.forward(tape, p, e)?;
        let h = tape.gelu(h)?;
        let h = self.widen.forward(tape, p, h)?;
        tape.gelu(h)
    }
}

/// Soft router: `o = MLP(mean(e_1..e_N))`, `r = softmax(o / tau)`.
#[derive(Clone, Debug)]
pub struct Router {
    pub hidden: Linear,
    pub output: Linear,
    tau: f64,
}

impl Router {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, rates: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("router temperature must be positive, got {tau}")));
        }
        let hidden = (width / 2).max(1);
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.fc0"), width, hidden),
            output: Linear::new(store, rng, &format!("{name}.fc1"), hidden, rates),
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rates(&self) -> usize {
        self.output.output
    }

    /// Router logits `o: [B, N]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, embeddings: &[Var]) -> Result<Var> {
        if embeddings.len() != self.rates() {
            return Err(shape_err(
                "route",
                format!("router has {} outputs but got {} embeddings", self.rates(), embeddings.len()),
            ));
        }
        let mut acc = embeddings[0];
        for &e in &embeddings[1..] {
            acc = tape.add(acc, e)?;
        }
        let avg = tape.scale(acc, 1.0 / embeddings.len() as f64)?;
        let h = self.hidden.forward(tape, p, avg)?;
        let h = tape.gelu(h)?;
        self.output.forward(tape, p, h)
    }

    /// Contribution rates `r: [B, N]`, rows summing to one.
    pub fn route(&self, tape: &mut Tape, p: &Bound, embeddings: &[Var]) -> Result<Var> {
        let o = self.logits(tape, p, embeddings)?;
        tape.softmax_with_temperature(o, self.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Router-weighted sum of projected features.
    SoftWeighted,
    Addition,
    Averaging,
    Multiplication,
    Concatenation,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Addition,
        FusionMode::Averaging,
        FusionMode::Multiplication,
        FusionMode::Concatenation,
        FusionMode::SoftWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::SoftWeighted => "soft_weighted",
            FusionMode::Addition => "addition",
            FusionMode::Averaging => "averaging",
            FusionMode::Multiplication => "multiplication",
            FusionMode::Concatenation => "concatenation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Width of the fused feature for `rates` inputs of width `c`.
    pub fn output_width(self, c: usize, rates: usize) -> usize {
        match self {
            FusionMode::Concatenation => c * rates,
            _ => c,
        }
    }
}

/// Column `i` of an `[B, N]` tensor as `[B, 1]`.
fn column(tape: &mut Tape, m: Var, i: usize) -> Result<Var> {
    let n = *tape.value(m).shape().last().unwrap_or(&0);
    let mut sel = vec![0.0; n];
    sel[i] = 1.0;
    let sel = tape.constant(Tensor::matrix(n, 1, sel)?);
    tape.matmul(m, sel)
}

/// Combines per-rate embeddings through their projection experts.
///
/// `rates` is required for [`FusionMode::SoftWeighted`] and ignored otherwise.
pub fn fuse(
    tape: &mut Tape,
    p: &Bound,
    mode: FusionMode,
    embeddings: &[Var],
    experts: &[ProjectionExpert],
    rates: Option<Var>,
) -> Result<Var> {
    if embeddings.is_empty() || embeddings.len() != experts.len() {
        return Err(shape_err(
            "fuse",
            format!("{} embeddings for {} experts", embeddings.len(), experts.len()),
        ));
    }
    let projected = embeddings
        .iter()
        .zip(experts)
        .map(|(&e, x)| x.forward(tape, p, e))
        .collect::<Result<Vec<_>>>()?;
    let n = projected.len();
    match mode {
        FusionMode::SoftWeighted => {
            let r = rates.ok_or_else(|| Error::Contract("soft-weighted fusion needs routing rates".into()))?;
            let rs = tape.value(r).shape().to_vec();
            if rs.len() != 2 || rs[1] != n {
                return Err(shape_err("fuse", format!("rates {rs:?} for {n} experts")));
            }
            let mut acc: Option<Var> = None;
            for (i, &pi) in projected.iter().enumerate() {
                let ri = column(tape, r, i)?;
                let term = tape.mul(pi, ri)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("at least one expert"))
        }
        FusionMode::Addition | FusionMode::Averaging => {
            let mut acc = projected[0];
            for &pi in &projected[1..] {
                acc = tape.add(acc, pi)?;
            }
            if mode == FusionMode::Averaging {
                acc = tape.scale(acc, 1.0 / n as f64)?;
            }
            Ok(acc)
        }
        FusionMode::Multiplication => {
            let mut acc = projected[0];
            for &pi in &projected[1..] {
                acc = tape.mul(acc, pi)?;
            }
            Ok(acc)
        }
        FusionMode::Concatenation => tape.concat(&projected),
    }
}
