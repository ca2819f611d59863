//! Full network assembly: per-rate encoders, fusion and the calibrated head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::MultiRateSample;
use crate::error::{shape_err, Error, Result};
use crate::mfc::{fuse, pool, Encoder, EncoderConfig, FusionMode, ProjectionExpert, Router};
use crate::nc3::{generate_etf, Nc3Head};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Which network is trained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelVariant {
    /// Multi-rate encoders, soft-routed experts, calibrated head.
    IbaNet,
    /// Multi-rate network with the router replaced by another combiner.
    Fusion(FusionMode),
    /// One encoder on a single sampling rate, pooled feature straight into the head.
    SingleRate { rate_hz: f64 },
}

impl ModelVariant {
    pub fn fusion_mode(self) -> Option<FusionMode> {
        match self {
            ModelVariant::IbaNet => Some(FusionMode::SoftWeighted),
            ModelVariant::Fusion(m) => Some(m),
            ModelVariant::SingleRate { .. } => None,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVariant::IbaNet => write!(f, "iba_net"),
            ModelVariant::Fusion(m) => write!(f, "fusion:{}", m.name()),
            ModelVariant::SingleRate { rate_hz } => write!(f, "single_rate:{rate_hz}"),
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("unknown model variant '{s}' (iba_net | fusion:<mode> | single_rate:<hz>)"));
        if s == "iba_net" {
            return Ok(ModelVariant::IbaNet);
        }
        match s.split_once(':') {
            Some(("fusion", m)) => FusionMode::parse(m).map(ModelVariant::Fusion).ok_or_else(bad),
            Some(("single_rate", hz)) => {
                let rate_hz: f64 = hz.parse().map_err(|_| bad())?;
                if !(rate_hz > 0.0) {
                    return Err(bad());
                }
                Ok(ModelVariant::SingleRate { rate_hz })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    /// Rates present in every sample, in the order of `MultiRateSample::windows`.
    pub rates_hz: Vec<f64>,
    pub classes: usize,
    /// ETF dimension; `None` means `d = M`.
    pub etf_dim: Option<usize>,
    pub tau: f64,
    pub k: f64,
    pub seed: u64,
}

impl ModelConfig {
    fn input_indices(&self) -> Result<Vec<usize>> {
        match self.variant {
            ModelVariant::SingleRate { rate_hz } => self
                .rates_hz
                .iter()
                .position(|&r| (r - rate_hz).abs() < 1e-9 * rate_hz.max(1.0))
                .map(|i| vec![i])
                .ok_or_else(|| {
                    Error::Parameter(format!("rate {rate_hz} Hz is not among the configured rates {:?}", self.rates_hz))
                }),
            _ => Ok((0..self.rates_hz.len()).collect()),
        }
    }
}

/// A mini-batch laid out per input rate as `[B, 1, H, W_i]` tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Router contribution rates `[B, N]` when the model routes.
    pub rates: Option<Var>,
    pub degenerate_rows: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    inputs: Vec<usize>,
    encoders: Vec<Encoder>,
    experts: Vec<ProjectionExpert>,
    router: Option<Router>,
    pub head: Nc3Head,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", config.classes)));
        }
        let inputs = config.input_indices()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoders = inputs
            .iter()
            .map(|&i| Encoder::new(&mut store, &mut rng, &format!("encoder{i}"), &config.encoder))
            .collect::<Result<Vec<_>>>()?;
        let c = config.encoder.output_channels();
        let mode = config.variant.fusion_mode();
        let (experts, router, head_width) = match mode {
            None => (Vec::new(), None, c),
            Some(mode) => {
                let experts = inputs
                    .iter()
                    .map(|&i| ProjectionExpert::new(&mut store, &mut rng, &format!("expert{i}"), c))
                    .collect::<Result<Vec<_>>>()?;
                let router = if mode == FusionMode::SoftWeighted {
                    Some(Router::new(&mut store, &mut rng, "router", c, inputs.len(), config.tau)?)
                } else {
                    None
                };
                (experts, router, mode.output_width(c, inputs.len()))
            }
        };
        let etf = generate_etf(config.classes, config.etf_dim.unwrap_or(config.classes), config.seed)?;
        let head = Nc3Head::new(&mut store, &mut rng, head_width, etf, config.k)?;
        Ok(Self { config, store, inputs, encoders, experts, router, head })
    }

    /// Width of the feature entering the classifier head.
    pub fn head_input_width(&self) -> usize {
        self.head.projector.input
    }

    pub fn routes(&self) -> bool {
        self.router.is_some()
    }

    /// Assembles a batch from samples, taking only the rates this model reads.
    pub fn batch(&self, samples: &[&MultiRateSample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mut inputs = Vec::with_capacity(self.inputs.len());
        for &i in &self.inputs {
            let proto = first
                .windows
                .get(i)
                .ok_or_else(|| shape_err("batch", format!("sample has {} rates, model reads index {i}", first.windows.len())))?;
            let (h, w) = (proto.channels, proto.samples);
            let mut data = Vec::with_capacity(samples.len() * h * w);
            for s in samples {
                let win = &s.windows[i];
                if win.channels != h || win.samples != w {
                    return Err(shape_err(
                        "batch",
                        format!("window {}x{} does not match {h}x{w}", win.channels, win.samples),
                    ));
                }
                data.extend_from_slice(&win.values);
            }
            inputs.push(Tensor::new(vec![samples.len(), 1, h, w], data)?);
        }
        Ok(Batch { inputs, labels: samples.iter().map(|s| s.label).collect() })
    }

    /// Fused feature `e_f` for a batch.
    pub fn features(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<(Var, Option<Var>)> {
        let mut embeddings = Vec::with_capacity(self.encoders.len());
        for (enc, x) in self.encoders.iter().zip(&batch.inputs) {
            let x = tape.constant(x.clone());
            let fmap = enc.forward(tape, p, x)?;
            embeddings.push(pool(tape, fmap)?);
        }
        let Some(mode) = self.config.variant.fusion_mode() else {
            return Ok((embeddings[0], None));
        };
        let rates = match &self.router {
            Some(r) => Some(r.route(tape, p, &embeddings)?),
            None => None,
        };
        Ok((fuse(tape, p, mode, &embeddings, &self.experts, rates)?, rates))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<ForwardOutput> {
        let (fused, rates) = self.features(tape, p, batch)?;
        let out = self.head.forward(tape, p, fused)?;
        Ok(ForwardOutput { logits: out.logits, rates, degenerate_rows: out.degenerate_rows })
    }

    /// Inference on samples in chunks of `chunk`: logits `[n, M]` flattened
    /// and, when routing, rates `[n, N]` flattened.
    pub fn infer(&self, samples: &[&MultiRateSample], chunk: usize) -> Result<Inference> {
        let m = self.config.classes;
        let mut out = Inference { classes: m, logits: Vec::new(), rates: Vec::new() };
        for part in samples.chunks(chunk.max(1)) {
            let batch = self.batch(part)?;
            let mut tape = Tape::new().with_finite_check(false);
            let p = self.store.bind(&mut tape, false);
            let f = self.forward(&mut tape, &p, &batch)?;
            out.logits.extend_from_slice(tape.value(f.logits).data());
            if let Some(r) = f.rates {
                out.rates.extend_from_slice(tape.value(r).data());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub classes: usize,
    pub logits: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.chunks(self.classes).map(crate::nc3::predict).collect()
    }
}
