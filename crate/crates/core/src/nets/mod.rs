//! Trainable networks: the context estimator `g`, the embedding learner `f`,
//! the classifier heads used during base training, and their shared
//! parameter container.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
pub mod tape;
pub mod tensor;

use std::sync::atomic::{AtomicU32, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::spectrogram::{SpecShape, Spectrogram};
use crate::transform::{apply_inverse, ContextBounds, ContextParams};

use layers::{ConvBn, LayerBuilder, Linear, ResBlock};
pub use tape::{Gradients, ParamRef, Tape, Var};
pub use tensor::Tensor;

static NEXT_TAG: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub block_count: usize,
    pub base_width: usize,
    /// Feed the normalized frequency coordinate as an extra input channel.
    pub freq_coord: bool,
    /// Feed the normalized time coordinate as an extra input channel; time
    /// scaling about the center is not translation invariant.
    pub time_coord: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            block_count: 3,
            base_width: 16,
            freq_coord: true,
            time_coord: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub freq_coord: bool,
    pub time_coord: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            embed_dim: 64,
            freq_coord: true,
            time_coord: false,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("embedder.widths", "need at least one non-zero width"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("embedder.blocks_per_stage", "must be >= 1"));
        }
        if self.embed_dim < 8 {
            return Err(Error::config("embedder.embed_dim", "must be >= 8"));
        }
        Ok(())
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 || self.base_width == 0 {
            return Err(Error::config(
                "estimator",
                "block_count and base_width must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Architecture descriptor stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Estimator {
        config: EstimatorConfig,
        input: SpecShape,
        bounds: ContextBounds,
    },
    Embedder {
        config: EmbedderConfig,
        input: SpecShape,
    },
    /// `classes x dim` weight matrix plus bias, used as a linear softmax head.
    LinearHead { classes: usize, dim: usize },
    /// `classes x dim` prototype matrix scored by cosine similarity.
    CosineHead { classes: usize, dim: usize },
    /// Calibrated class centers and raw (pre-softplus) variances.
    PrototypeTable { classes: usize, dim: usize },
}

/// Named parameters, their gradient accumulators and non-trainable buffers.
#[derive(Debug, Clone)]
pub struct NetState {
    tag: u32,
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

impl NetState {
    fn empty(arch: Architecture) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            arch,
            names: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// A state holding exactly `params`, in order.
    pub fn with_params(arch: Architecture, params: Vec<(String, Tensor)>) -> Self {
        let mut s = Self::empty(arch);
        for (n, t) in params {
            s.add_param(n, t);
        }
        s
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub(crate) fn add_param(&mut self, name: String, value: Tensor) -> usize {
        self.grads.push(Tensor::zeros(value.shape()));
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    pub(crate) fn add_buffer(&mut self, name: String, value: Tensor) -> usize {
        self.buffer_names.push(name);
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Register parameter `index` on the tape.
    pub fn leaf(&self, tape: &mut Tape, index: usize) -> Var {
        tape.param(
            ParamRef {
                net: self.tag,
                index,
            },
            self.params[index].clone(),
        )
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Add the gradients of this net's leaves on `tape` into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (p, v) in tape.params() {
            if p.net != self.tag {
                continue;
            }
            if let Some(g) = grads.wrt(*v) {
                self.grads[p.index].add_assign(g);
            }
        }
    }

    pub fn zero_grad_of(&mut self, index: usize) {
        self.grads[index].data_mut().fill(0.0);
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Flat copy of every parameter scalar, in registration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Locate flat scalar `k` as `(param index, offset)`.
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if k < p.len() {
                return Some((i, k));
            }
            k -= p.len();
        }
        None
    }

    fn update_running(&mut self, stats: &[BnStats], momentum: f64) {
        for s in stats {
            let (m, v) = (s.mean_buffer, s.var_buffer);
            let n = s.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, b) in self.buffers[m].data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.buffers[v].data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b * unbias;
            }
        }
    }
}

/// Batch statistics produced by one normalization layer in train mode.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    mean_buffer: usize,
    var_buffer: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Forward context shared by layers: the tape, the mode and collected stats.
pub(crate) struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub mode: Mode,
    pub stats: Vec<BnStats>,
}

/// Stack spectrograms into a `[N, C, F, T]` tensor.
pub fn batch_tensor(batch: &[&Spectrogram]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .shape();
    let rows: Vec<&[f64]> = batch
        .iter()
        .map(|s| {
            if s.shape() != first {
                Err(Error::Shape(format!("{:?} vs {first:?}", s.shape())))
            } else {
                Ok(s.values())
            }
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&rows, &[first.channels, first.mel_bins, first.frames])
}

fn check_input(t: &Tensor, want: SpecShape) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1..] != [want.channels, want.mel_bins, want.frames] {
        return Err(Error::Shape(format!(
            "network expects [N, {}, {}, {}], got {s:?}",
            want.channels, want.mel_bins, want.frames
        )));
    }
    Ok(())
}

/// The context estimator: residual conv blocks, global pooling and a linear
/// head squashed into the context bounds.
#[derive(Debug, Clone)]
pub struct EstimatorNet {
    pub state: NetState,
    config: EstimatorConfig,
    input: SpecShape,
    bounds: ContextBounds,
    stem: ConvBn,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl EstimatorNet {
    pub fn new(config: EstimatorConfig, input: SpecShape, bounds: ContextBounds, seed: u64) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let arch = Architecture::Estimator {
            config: config.clone(),
            input,
            bounds,
        };
        let mut state = NetState::empty(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE57]));
        let mut b = LayerBuilder::new(&mut state, &mut rng);
        let cin = input.channels + usize::from(config.freq_coord) + usize::from(config.time_coord);
        let w = config.base_width;
        let stem = b.conv_bn("stem", cin, w, 3, 1);
        let blocks = (0..config.block_count)
            .map(|i| b.res_block(&format!("block{i}"), w, w, if i == 0 { 1 } else { 2 }))
            .collect();
        let head = b.linear_zero("head", w, 4);
        Ok(Self {
            state,
            config,
            input,
            bounds,
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn input_shape(&self) -> SpecShape {
        self.input
    }

    pub fn bounds(&self) -> &ContextBounds {
        &self.bounds
    }

    /// Records the forward pass on `tape`; returns contexts `[N, 4]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let (out, stats) = self.forward_inner(tape, x, mode)?;
        if mode == Mode::Train {
            self.state.update_running(&stats, BN_MOMENTUM);
        }
        Ok(out)
    }

    /// Eval-mode forward that leaves the running statistics untouched.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_inner(tape, x, Mode::Eval)?.0)
    }

    fn forward_inner(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Vec<BnStats>)> {
        check_input(tape.value(x), self.input)?;
        let mut fwd = Fwd {
            tape,
            mode,
            stats: Vec::new(),
        };
        let h = fwd.tape.append_coords(x, self.config.freq_coord, self.config.time_coord)?;
        let mut h = self.stem.forward(&self.state, &mut fwd, h)?;
        h = fwd.tape.relu(h);
        for b in &self.blocks {
            h = b.forward(&self.state, &mut fwd, h)?;
        }
        let pooled = fwd.tape.global_avg_pool(h);
        let raw = self.head.forward(&self.state, fwd.tape, pooled)?;
        let ctx = fwd.tape.squash_context(raw, self.bounds)?;
        if !fwd.tape.value(ctx).all_finite() {
            return Err(Error::NonFinite("context estimator output".into()));
        }
        Ok((ctx, fwd.stats))
    }

    /// Eval-mode context estimates for a batch.
    pub fn estimate(&self, batch: &[&Spectrogram]) -> Result<Vec<ContextParams>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(batch)?);
        let ctx = self.forward_eval(&mut tape, x)?;
        let v = tape.value(ctx);
        Ok((0..v.rows())
            .map(|r| {
                let c = v.row(r);
                ContextParams::new(c[0], c[1], c[2], c[3])
            })
            .collect())
    }
}

/// The embedding learner: a staged residual convnet with global pooling and
/// a linear projection to `embed_dim`.
#[derive(Debug, Clone)]
pub struct EmbedderNet {
    pub state: NetState,
    config: EmbedderConfig,
    input: SpecShape,
    stem: ConvBn,
    blocks: Vec<ResBlock>,
    proj: Linear,
}

impl EmbedderNet {
    pub fn new(config: EmbedderConfig, input: SpecShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::Embedder {
            config: config.clone(),
            input,
        };
        let mut state = NetState::empty(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE3B]));
        let mut b = LayerBuilder::new(&mut state, &mut rng);
        let cin = input.channels + usize::from(config.freq_coord) + usize::from(config.time_coord);
        let stem = b.conv_bn("stem", cin, config.widths[0], 3, 1);
        let mut blocks = Vec::new();
        let mut prev = config.widths[0];
        for (s, &w) in config.widths.iter().enumerate() {
            for k in 0..config.blocks_per_stage {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                blocks.push(b.res_block(&format!("stage{s}.block{k}"), prev, w, stride));
                prev = w;
            }
        }
        let proj = b.linear("proj", prev, config.embed_dim);
        Ok(Self {
            state,
            config,
            input,
            stem,
            blocks,
            proj,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn input_shape(&self) -> SpecShape {
        self.input
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Records the forward pass; returns raw embeddings `[N, d]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let (out, stats) = self.forward_inner(tape, x, mode)?;
        if mode == Mode::Train {
            self.state.update_running(&stats, BN_MOMENTUM);
        }
        Ok(out)
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_inner(tape, x, Mode::Eval)?.0)
    }

    fn forward_inner(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Vec<BnStats>)> {
        check_input(tape.value(x), self.input)?;
        let mut fwd = Fwd {
            tape,
            mode,
            stats: Vec::new(),
        };
        let h = fwd.tape.append_coords(x, self.config.freq_coord, self.config.time_coord)?;
        let mut h = self.stem.forward(&self.state, &mut fwd, h)?;
        h = fwd.tape.relu(h);
        for b in &self.blocks {
            h = b.forward(&self.state, &mut fwd, h)?;
        }
        let pooled = fwd.tape.global_avg_pool(h);
        let z = self.proj.forward(&self.state, fwd.tape, pooled)?;
        if !fwd.tape.value(z).all_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok((z, fwd.stats))
    }

    /// Eval-mode raw embeddings, one row per input.
    pub fn embed(&self, batch: &[&Spectrogram]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(batch)?);
        let z = self.forward_eval(&mut tape, x)?;
        let v = tape.value(z);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }

    /// Zero the final projection, e.g. to check the zero-output case.
    pub fn zero_projection(&mut self) {
        for i in [self.proj.w, self.proj.b] {
            self.state.params[i].data_mut().fill(0.0);
        }
    }
}

/// Classifier parameters used during base training.
#[derive(Debug, Clone)]
pub struct HeadNet {
    pub state: NetState,
    weight: usize,
    bias: Option<usize>,
}

impl HeadNet {
    pub fn linear(classes: usize, dim: usize, seed: u64) -> Self {
        let mut state = NetState::empty(Architecture::LinearHead { classes, dim });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4EAD]));
        let mut b = LayerBuilder::new(&mut state, &mut rng);
        let l = b.linear("head", dim, classes);
        Self {
            state,
            weight: l.w,
            bias: Some(l.b),
        }
    }

    /// Cosine head whose prototype rows start at `init` (`classes x dim`).
    pub fn cosine(init: &[Vec<f64>]) -> Result<Self> {
        let classes = init.len();
        let dim = init.first().map(Vec::len).unwrap_or(0);
        let rows: Vec<&[f64]> = init.iter().map(Vec::as_slice).collect();
        let w = Tensor::stack(&rows, &[dim])?;
        let mut state = NetState::empty(Architecture::CosineHead { classes, dim });
        let weight = state.add_param("prototypes".into(), w);
        Ok(Self {
            state,
            weight,
            bias: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.state.params[self.weight]
    }

    /// Logits `[N, classes]` for embeddings `z [N, d]`.
    pub fn logits(&self, tape: &mut Tape, z: Var, logit_scale: f64) -> Result<Var> {
        let w = self.state.leaf(tape, self.weight);
        match self.bias {
            Some(b) => {
                let b = self.state.leaf(tape, b);
                tape.linear(z, w, b)
            }
            None => {
                let zn = tape.normalize_rows(z)?;
                let wn = tape.normalize_rows(w)?;
                let l = tape.matmul_t(zn, wn)?;
                Ok(if logit_scale == 1.0 {
                    l
                } else {
                    tape.scale(l, logit_scale)
                })
            }
        }
    }
}

/// Canonicalize through an estimator net: `apply_inverse(M, g(M))`.
pub fn canonicalize_with(net: &EstimatorNet, m: &Spectrogram) -> Result<Spectrogram> {
    let c = net.estimate(&[m])?[0];
    apply_inverse(m, &c)
}
