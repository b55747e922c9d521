//! The deterministic model zoo: configuration, construction, and the
//! forward pass for toy SSM and hybrid SSM–attention language models.
//!
//! Models are small on purpose — a few thousand to a few hundred thousand
//! parameters — because the toolkit studies *relative* layer sensitivity, not
//! absolute quality. What matters is that construction is a pure function of
//! `(seed, config)` down to the bit, that the forward pass is causal, and
//! that every quantizable weight is addressable by a stable
//! [`LayerDescriptor`].

pub mod io;

pub use io::{load_model, load_model_from_path, model_digest, save_model, save_model_to_path};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{
    add_bias, causal_conv1d, elementwise_add, elementwise_mul, linear, rmsnorm, selective_scan,
    silu, softplus,
};
use crate::rng::SplitMix64;
use crate::Tensor;

// ── Layer addressing ───────────────────────────────────────────────────────

/// The role a weight tensor plays inside its block.
///
/// Names follow the conventional projection naming of Mamba-style SSM blocks
/// and single-head attention/MLP blocks; `embedding` and `lm_head` sit
/// outside any block but carry a block index anyway (0 and `num_blocks`) so
/// every weight in the model has a uniform address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subtype {
    MambaInProj,
    MambaConv1d,
    MambaXProj,
    MambaDtProj,
    MambaOutProj,
    AttnQkvProj,
    AttnOProj,
    MlpUpProj,
    MlpDownProj,
    Embedding,
    LmHead,
}

impl Subtype {
    /// All subtypes in canonical (declaration) order.
    pub const ALL: [Subtype; 11] = [
        Subtype::MambaInProj,
        Subtype::MambaConv1d,
        Subtype::MambaXProj,
        Subtype::MambaDtProj,
        Subtype::MambaOutProj,
        Subtype::AttnQkvProj,
        Subtype::AttnOProj,
        Subtype::MlpUpProj,
        Subtype::MlpDownProj,
        Subtype::Embedding,
        Subtype::LmHead,
    ];

    /// Stable string form used in CSV/JSON output and configuration files.
    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::MambaInProj => "mamba.in_proj",
            Subtype::MambaConv1d => "mamba.conv1d",
            Subtype::MambaXProj => "mamba.x_proj",
            Subtype::MambaDtProj => "mamba.dt_proj",
            Subtype::MambaOutProj => "mamba.out_proj",
            Subtype::AttnQkvProj => "attn.qkv_proj",
            Subtype::AttnOProj => "attn.o_proj",
            Subtype::MlpUpProj => "mlp.up_proj",
            Subtype::MlpDownProj => "mlp.down_proj",
            Subtype::Embedding => "embedding",
            Subtype::LmHead => "lm_head",
        }
    }

    /// Stable one-byte code used by the binary model format.
    pub(crate) fn code(self) -> u8 {
        Subtype::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Subtype> {
        Subtype::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid("Subtype::from_str", format!("unknown subtype {s:?}")))
    }
}

impl serde::Serialize for Subtype {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Subtype {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Subtype::from_str(&s).map_err(serde::de::Error::custom)
    }
}

/// Address of one weight tensor: block index plus role within the block.
///
/// Ordering is `(block, subtype)`, which fixes the canonical layer order used
/// everywhere (sweeps, CSV rows, plan files, tie-breaking in rankings).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerDescriptor {
    pub block: usize,
    pub subtype: Subtype,
}

impl LayerDescriptor {
    pub fn new(block: usize, subtype: Subtype) -> Self {
        LayerDescriptor { block, subtype }
    }
}

impl fmt::Display for LayerDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.subtype)
    }
}

// ── Configuration ──────────────────────────────────────────────────────────

/// Kind of a transformer-style block in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Mamba-style selective-scan block.
    Ssm,
    /// Single-head causal attention followed by a gated MLP.
    Attn,
}

/// Synthetic outlier-channel injection, applied once at construction time.
///
/// Real checkpoints owe much of their quantization difficulty to a few
/// large-magnitude output channels; scaling the first
/// `ceil(fraction_of_channels * out_channels)` rows of the targeted weight
/// kinds by `magnitude_multiplier` reproduces that structure on demand.
/// The defaults (`fraction 0`, `multiplier 1`) are a no-op.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierSpec {
    /// Fraction of output channels to amplify, in `[0, 1]`.
    pub fraction_of_channels: f64,
    /// Multiplier applied to the amplified channels, `>= 1`.
    pub magnitude_multiplier: f64,
    /// Weight kinds that receive outliers.
    pub target_subtypes: BTreeSet<Subtype>,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            fraction_of_channels: 0.0,
            magnitude_multiplier: 1.0,
            target_subtypes: BTreeSet::new(),
        }
    }
}

impl OutlierSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_of_channels) {
            return Err(Error::invalid(
                "OutlierSpec",
                format!("fraction_of_channels {} outside [0, 1]", self.fraction_of_channels),
            ));
        }
        if !self.magnitude_multiplier.is_finite() || self.magnitude_multiplier < 1.0 {
            return Err(Error::invalid(
                "OutlierSpec",
                format!("magnitude_multiplier {} must be finite and >= 1", self.magnitude_multiplier),
            ));
        }
        Ok(())
    }
}

/// Architecture and initialisation parameters of a toy model.
///
/// Derived dimensions: the SSM inner width is `2 * d_model` and the dt
/// bottleneck rank is `ceil(d_model / 16)` (at least 1), matching the usual
/// Mamba conventions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of blocks; must equal `block_pattern.len()`.
    pub num_blocks: usize,
    /// Kind of each block, outermost first.
    pub block_pattern: Vec<BlockKind>,
    pub d_model: usize,
    /// SSM state dimension per channel.
    pub d_state: usize,
    /// Width of the causal depthwise convolution.
    pub d_conv: usize,
    /// MLP hidden width as a multiple of `d_model` (attention blocks only).
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Master seed; every weight tensor derives its own sub-seed from it.
    pub seed: u64,
    pub outliers: OutlierSpec,
}

impl Default for ModelConfig {
    /// The stock hybrid used by the CLI when no config file is given:
    /// eight alternating SSM/attention blocks at `d_model = 32` over a byte
    /// vocabulary, with outlier channels injected into the SSM input-state
    /// projections so the sensitivity landscape is not flat.
    fn default() -> Self {
        ModelConfig {
            num_blocks: 8,
            block_pattern: vec![
                BlockKind::Ssm,
                BlockKind::Attn,
                BlockKind::Ssm,
                BlockKind::Attn,
                BlockKind::Ssm,
                BlockKind::Attn,
                BlockKind::Ssm,
                BlockKind::Attn,
            ],
            d_model: 32,
            d_state: 8,
            d_conv: 4,
            mlp_ratio: 4,
            vocab_size: 256,
            seed: 42,
            outliers: OutlierSpec {
                fraction_of_channels: 0.25,
                magnitude_multiplier: 8.0,
                target_subtypes: BTreeSet::from([Subtype::MambaXProj]),
            },
        }
    }
}

impl ModelConfig {
    /// SSM inner channel count.
    pub fn d_inner(&self) -> usize {
        2 * self.d_model
    }

    /// Rank of the dt bottleneck projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16).max(1)
    }

    /// Checks every dimension is usable before construction.
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks != self.block_pattern.len() {
            return Err(Error::invalid(
                "ModelConfig",
                format!(
                    "num_blocks {} disagrees with block_pattern length {}",
                    self.num_blocks,
                    self.block_pattern.len()
                ),
            ));
        }
        if self.num_blocks == 0 {
            return Err(Error::invalid("ModelConfig", "need at least one block".to_string()));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid(
                "ModelConfig",
                format!("vocab_size must be at least 2, got {}", self.vocab_size),
            ));
        }
        for (name, v) in
            [("d_model", self.d_model), ("d_state", self.d_state), ("d_conv", self.d_conv)]
        {
            if v == 0 {
                return Err(Error::invalid("ModelConfig", format!("{name} must be positive")));
            }
        }
        if self.block_pattern.contains(&BlockKind::Attn) && self.mlp_ratio == 0 {
            return Err(Error::invalid("ModelConfig", "mlp_ratio must be positive".to_string()));
        }
        self.outliers.validate()
    }
}

// ── Model storage ──────────────────────────────────────────────────────────

/// Per-block parameters that are never quantized (norm gains, the state
/// matrix `A`, the dt bias). Kept apart from the descriptor-addressable map
/// so "the set of quantizable weights" and "the model" cannot drift apart;
/// public read-only so oracle tests and inspection tools can see every
/// parameter the forward pass uses.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockAux {
    Ssm { norm_gain: Tensor, a: Tensor, dt_bias: Tensor },
    Attn { attn_norm_gain: Tensor, mlp_norm_gain: Tensor },
}

/// All auxiliary (never-quantized) parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAux {
    pub blocks: Vec<BlockAux>,
    pub final_norm_gain: Tensor,
}

impl ModelAux {
    pub(crate) fn num_params(&self) -> usize {
        let mut n = self.final_norm_gain.len();
        for b in &self.blocks {
            n += match b {
                BlockAux::Ssm { norm_gain, a, dt_bias } => {
                    norm_gain.len() + a.len() + dt_bias.len()
                }
                BlockAux::Attn { attn_norm_gain, mlp_norm_gain } => {
                    attn_norm_gain.len() + mlp_norm_gain.len()
                }
            };
        }
        n
    }
}

/// A fully materialised toy language model.
///
/// Weight tensors sit behind `Arc`s so that derived models (a model with one
/// layer quantized, say) share storage with their parent; a per-layer sweep
/// over L layers allocates L quantized tensors, not L copies of the model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    weights: BTreeMap<LayerDescriptor, Arc<Tensor>>,
    aux: Arc<ModelAux>,
}

impl Model {
    /// The weight tensor at `desc`, if that address exists in this model.
    pub fn weight(&self, desc: &LayerDescriptor) -> Option<&Tensor> {
        self.weights.get(desc).map(|t| t.as_ref())
    }

    /// All weight addresses in canonical order.
    pub fn descriptors(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.weights.keys()
    }

    /// Parameter count of the descriptor-addressable weights.
    pub fn weight_num_params(&self) -> usize {
        self.weights.values().map(|t| t.len()).sum()
    }

    /// Parameter count of the auxiliary (never-quantized) tensors.
    pub fn aux_num_params(&self) -> usize {
        self.aux.num_params()
    }

    /// Replaces the tensor at `desc`, enforcing shape equality. Used by the
    /// quantizer; not public because arbitrary weight surgery would invalidate
    /// the construction-determinism contract.
    pub(crate) fn replace_weight(&mut self, desc: &LayerDescriptor, tensor: Tensor) -> Result<()> {
        let slot = self.weights.get_mut(desc).ok_or_else(|| Error::InvalidLayer {
            layer: *desc,
            detail: "no such weight in this model".to_string(),
        })?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "Model::replace_weight",
                format!("shape {:?} cannot replace {:?}", tensor.shape(), slot.shape()),
            ));
        }
        *slot = Arc::new(tensor);
        Ok(())
    }

    pub(crate) fn weight_required(&self, desc: &LayerDescriptor) -> Result<&Tensor> {
        self.weight(desc).ok_or_else(|| Error::InvalidLayer {
            layer: *desc,
            detail: "weight missing from model".to_string(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        weights: BTreeMap<LayerDescriptor, Arc<Tensor>>,
        aux: Arc<ModelAux>,
    ) -> Self {
        Model { config, weights, aux }
    }

    /// Read-only view of the auxiliary (never-quantized) parameters.
    pub fn aux(&self) -> &ModelAux {
        &self.aux
    }
}

// ── Construction ───────────────────────────────────────────────────────────

/// Descriptor of the embedding table for a given config.
pub fn embedding_descriptor() -> LayerDescriptor {
    LayerDescriptor::new(0, Subtype::Embedding)
}

/// Descriptor of the LM head for a given config.
pub fn lm_head_descriptor(config: &ModelConfig) -> LayerDescriptor {
    LayerDescriptor::new(config.num_blocks, Subtype::LmHead)
}

/// Builds the model deterministically from its configuration.
///
/// Sub-seed discipline: a master SplitMix64 stream seeded with `config.seed`
/// emits one sub-seed per randomly initialised tensor, in a fixed canonical
/// order (embedding; then per block in stack order — SSM: `in_proj`,
/// `conv1d`, `x_proj`, `dt_proj`, dt bias, `out_proj`; attention: `qkv_proj`,
/// `o_proj`, `up_proj`, `down_proj`; finally `lm_head`). Each tensor is then
/// filled from its own generator, so adding or removing a tensor kind can
/// never silently shift the values of unrelated tensors within one format
/// version.
///
/// Initial values: linear weights are Gaussian with std `1/sqrt(fan_in)`
/// (fan-in = the input width the row dots against; for the embedding table
/// the convention is `d_model`). Norm gains are ones. The state matrix uses
/// the real S4D spectrum `A[ch][s] = -(s + 1)`, negative by construction.
/// The dt bias is set so that `softplus(bias)` is log-uniform in
/// `[1e-3, 1e-1]`, the usual Mamba timestep range.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut master = SplitMix64::new(config.seed);
    let mut weights = BTreeMap::new();
    let d = config.d_model;
    let d_inner = config.d_inner();
    let dt_rank = config.dt_rank();

    let gaussian = |shape: Vec<usize>, fan_in: usize, master: &mut SplitMix64| {
        let mut rng = SplitMix64::new(master.next_u64());
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        rng.fill_normal(&mut data, 1.0 / (fan_in as f64).sqrt());
        Tensor::new(shape, data)
    };

    let embedding = gaussian(vec![config.vocab_size, d], d, &mut master)?;
    weights.insert(embedding_descriptor(), Arc::new(embedding));

    let mut blocks = Vec::with_capacity(config.num_blocks);
    for (b, kind) in config.block_pattern.iter().enumerate() {
        match kind {
            BlockKind::Ssm => {
                let in_proj = gaussian(vec![2 * d_inner, d], d, &mut master)?;
                let conv1d = gaussian(vec![d_inner, config.d_conv], config.d_conv, &mut master)?;
                let x_proj =
                    gaussian(vec![dt_rank + 2 * config.d_state, d_inner], d_inner, &mut master)?;
                let dt_proj = gaussian(vec![d_inner, dt_rank], dt_rank, &mut master)?;
                let dt_bias = init_dt_bias(d_inner, &mut master)?;
                let out_proj = gaussian(vec![d, d_inner], d_inner, &mut master)?;

                for (subtype, t) in [
                    (Subtype::MambaInProj, in_proj),
                    (Subtype::MambaConv1d, conv1d),
                    (Subtype::MambaXProj, x_proj),
                    (Subtype::MambaDtProj, dt_proj),
                    (Subtype::MambaOutProj, out_proj),
                ] {
                    weights.insert(LayerDescriptor::new(b, subtype), Arc::new(t));
                }
                blocks.push(BlockAux::Ssm {
                    norm_gain: ones(d)?,
                    a: s4d_real_a(d_inner, config.d_state)?,
                    dt_bias,
                });
            }
            BlockKind::Attn => {
                let qkv = gaussian(vec![3 * d, d], d, &mut master)?;
                let o = gaussian(vec![d, d], d, &mut master)?;
                let up = gaussian(vec![config.mlp_ratio * d, d], d, &mut master)?;
                let down = gaussian(vec![d, config.mlp_ratio * d], config.mlp_ratio * d, &mut master)?;
                for (subtype, t) in [
                    (Subtype::AttnQkvProj, qkv),
                    (Subtype::AttnOProj, o),
                    (Subtype::MlpUpProj, up),
                    (Subtype::MlpDownProj, down),
                ] {
                    weights.insert(LayerDescriptor::new(b, subtype), Arc::new(t));
                }
                blocks.push(BlockAux::Attn {
                    attn_norm_gain: ones(d)?,
                    mlp_norm_gain: ones(d)?,
                });
            }
        }
    }

    let lm_head = gaussian(vec![config.vocab_size, d], d, &mut master)?;
    weights.insert(lm_head_descriptor(config), Arc::new(lm_head));

    apply_outliers(&mut weights, &config.outliers)?;

    let aux = ModelAux { blocks, final_norm_gain: ones(d)? };
    Ok(Model { config: config.clone(), weights, aux: Arc::new(aux) })
}

fn ones(n: usize) -> Result<Tensor> {
    Tensor::new(vec![n], vec![1.0; n])
}

/// Real S4D spectrum, identical for every channel: `A[ch][s] = -(s + 1)`.
fn s4d_real_a(channels: usize, state: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(channels * state);
    for _ch in 0..channels {
        for s in 0..state {
            data.push(-((s + 1) as f64));
        }
    }
    Tensor::from_rows(channels, state, data)
}

/// Bias vector with `softplus(bias)` log-uniform in `[1e-3, 1e-1]`.
fn init_dt_bias(d_inner: usize, master: &mut SplitMix64) -> Result<Tensor> {
    let mut rng = SplitMix64::new(master.next_u64());
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let data = (0..d_inner)
        .map(|_| {
            let t = (lo + rng.next_f64() * (hi - lo)).exp(); // target timestep
            t.exp_m1().ln() // inverse softplus: softplus(result) == t
        })
        .collect();
    Tensor::new(vec![d_inner], data)
}

/// Scales the leading output channels of every targeted weight in place.
fn apply_outliers(
    weights: &mut BTreeMap<LayerDescriptor, Arc<Tensor>>,
    spec: &OutlierSpec,
) -> Result<()> {
    if spec.target_subtypes.is_empty()
        || spec.fraction_of_channels == 0.0
        || spec.magnitude_multiplier == 1.0
    {
        return Ok(());
    }
    for (desc, tensor) in weights.iter_mut() {
        if !spec.target_subtypes.contains(&desc.subtype) {
            continue;
        }
        let t = Arc::make_mut(tensor);
        let (rows, _) = t.expect_matrix("apply_outliers")?;
        let amplified = ((spec.fraction_of_channels * rows as f64).ceil() as usize).min(rows);
        for r in 0..amplified {
            for v in t.row_mut(r) {
                *v *= spec.magnitude_multiplier;
            }
        }
    }
    Ok(())
}

// ── Quantizable-layer enumeration ──────────────────────────────────────────

/// The layers a sweep or plan may quantize, in canonical order, with the
/// default policy: all block projections plus `lm_head`; the embedding table
/// is never quantizable; the depthwise `conv1d` is excluded (its kernels are
/// tiny and its quantization error is dominated by downstream projections —
/// opt in via [`list_quantizable_layers_with`]).
pub fn list_quantizable_layers(model: &Model) -> Vec<LayerDescriptor> {
    list_quantizable_layers_with(model, false)
}

/// Like [`list_quantizable_layers`], optionally including `mamba.conv1d`.
pub fn list_quantizable_layers_with(model: &Model, include_conv: bool) -> Vec<LayerDescriptor> {
    model
        .descriptors()
        .filter(|d| match d.subtype {
            Subtype::Embedding => false,
            Subtype::MambaConv1d => include_conv,
            _ => true,
        })
        .copied()
        .collect()
}

// ── Forward pass ───────────────────────────────────────────────────────────

/// Runs the model over a token slice, returning logits `[len, vocab_size]`.
///
/// The pass is strictly causal: logits at position `t` are a function of
/// tokens `0..=t` only, and bit-identical to the logits the same prefix
/// produces on its own (every kernel touches positions independently or
/// scans them left to right).
pub fn forward(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward", "empty token slice".to_string()));
    }
    let cfg = &model.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(
            "forward",
            format!("token id {bad} outside vocabulary of size {}", cfg.vocab_size),
        ));
    }

    let embedding = model.weight_required(&embedding_descriptor())?;
    let d = cfg.d_model;
    let mut xdata = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        xdata.extend_from_slice(embedding.row(t as usize));
    }
    let mut x = Tensor::from_rows(tokens.len(), d, xdata)?;

    for (b, kind) in cfg.block_pattern.iter().enumerate() {
        x = match (kind, &model.aux().blocks[b]) {
            (BlockKind::Ssm, BlockAux::Ssm { norm_gain, a, dt_bias }) => {
                ssm_block(model, b, &x, norm_gain, a, dt_bias)?
            }
            (BlockKind::Attn, BlockAux::Attn { attn_norm_gain, mlp_norm_gain }) => {
                attn_block(model, b, &x, attn_norm_gain, mlp_norm_gain)?
            }
            _ => {
                return Err(Error::malformed(
                    "model",
                    format!("block {b} kind disagrees with its auxiliary parameters"),
                ))
            }
        };
    }

    let h = rmsnorm(&x, &model.aux().final_norm_gain)?;
    linear(&h, model.weight_required(&lm_head_descriptor(cfg))?)
}

/// Pre-norm Mamba-style block: project to gate/state paths, causal conv,
/// data-dependent selective scan, SiLU gate, project back, residual add.
fn ssm_block(
    model: &Model,
    b: usize,
    u: &Tensor,
    norm_gain: &Tensor,
    a: &Tensor,
    dt_bias: &Tensor,
) -> Result<Tensor> {
    let cfg = &model.config;
    let d_inner = cfg.d_inner();
    let dt_rank = cfg.dt_rank();
    let w = |s: Subtype| model.weight_required(&LayerDescriptor::new(b, s));

    let xn = rmsnorm(u, norm_gain)?;
    let xz = linear(&xn, w(Subtype::MambaInProj)?)?;
    let xpart = xz.cols_range(0, d_inner)?;
    let z = xz.cols_range(d_inner, 2 * d_inner)?;

    let xc = silu(&causal_conv1d(&xpart, w(Subtype::MambaConv1d)?)?);

    let proj = linear(&xc, w(Subtype::MambaXProj)?)?;
    let dt_low = proj.cols_range(0, dt_rank)?;
    let b_mat = proj.cols_range(dt_rank, dt_rank + cfg.d_state)?;
    let c_mat = proj.cols_range(dt_rank + cfg.d_state, dt_rank + 2 * cfg.d_state)?;

    let dt = softplus(&add_bias(&linear(&dt_low, w(Subtype::MambaDtProj)?)?, dt_bias)?);

    let y = selective_scan(&xc, a, &b_mat, &c_mat, &dt)?;
    let gated = elementwise_mul(&y, &silu(&z))?;
    let out = linear(&gated, w(Subtype::MambaOutProj)?)?;
    elementwise_add(u, &out)
}

/// Pre-norm single-head causal attention followed by a pre-norm SiLU MLP,
/// each with its own residual connection.
fn attn_block(
    model: &Model,
    b: usize,
    u: &Tensor,
    attn_norm_gain: &Tensor,
    mlp_norm_gain: &Tensor,
) -> Result<Tensor> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let w = |s: Subtype| model.weight_required(&LayerDescriptor::new(b, s));

    let xn = rmsnorm(u, attn_norm_gain)?;
    let qkv = linear(&xn, w(Subtype::AttnQkvProj)?)?;
    let q = qkv.cols_range(0, d)?;
    let k = qkv.cols_range(d, 2 * d)?;
    let v = qkv.cols_range(2 * d, 3 * d)?;

    let seq = u.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx = Tensor::zeros(vec![seq, d])?;
    let mut scores = Vec::with_capacity(seq);
    for t in 0..seq {
        // Row t attends over positions 0..=t only; the softmax sees exactly
        // the prefix slice, so appending tokens cannot perturb earlier rows.
        scores.clear();
        let qrow = q.row(t);
        for t2 in 0..=t {
            let krow = k.row(t2);
            let mut dot = 0.0;
            for (a, b) in qrow.iter().zip(krow.iter()) {
                dot += a * b;
            }
            scores.push(dot * scale);
        }
        crate::numerics::softmax_row(&mut scores);
        let crow = ctx.row_mut(t);
        for (t2, &p) in scores.iter().enumerate() {
            for (slot, &vv) in crow.iter_mut().zip(v.row(t2).iter()) {
                *slot += p * vv;
            }
        }
    }

    let u1 = elementwise_add(u, &linear(&ctx, w(Subtype::AttnOProj)?)?)?;

    let mn = rmsnorm(&u1, mlp_norm_gain)?;
    let h = silu(&linear(&mn, w(Subtype::MlpUpProj)?)?);
    let mlp = linear(&h, w(Subtype::MlpDownProj)?)?;
    elementwise_add(&u1, &mlp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            block_pattern: vec![BlockKind::Ssm, BlockKind::Attn],
            d_model: 8,
            d_state: 4,
            d_conv: 3,
            mlp_ratio: 2,
            vocab_size: 17,
            seed: 1234,
            outliers: OutlierSpec::default(),
        }
    }

    #[test]
    fn subtype_strings_round_trip() {
        for s in Subtype::ALL {
            assert_eq!(Subtype::from_str(s.as_str()).unwrap(), s);
            assert_eq!(Subtype::from_code(s.code()).unwrap(), s);
        }
        assert!(Subtype::from_str("mamba.z_proj").is_err());
        assert!(Subtype::from_code(200).is_none());
    }

    #[test]
    fn descriptor_ordering_is_block_major() {
        let a = LayerDescriptor::new(0, Subtype::LmHead);
        let b = LayerDescriptor::new(1, Subtype::MambaInProj);
        assert!(a < b);
        let c = LayerDescriptor::new(1, Subtype::MambaXProj);
        assert!(b < c);
        assert_eq!(format!("{}", c), "block1.mamba.x_proj");
    }

    #[test]
    fn config_validation_catches_inconsistencies() {
        let mut cfg = tiny_config();
        cfg.num_blocks = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.vocab_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.outliers.fraction_of_channels = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.outliers.magnitude_multiplier = 0.5;
        assert!(cfg.validate().is_err());

        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn derived_dims_follow_conventions() {
        let cfg = tiny_config();
        assert_eq!(cfg.d_inner(), 16);
        assert_eq!(cfg.dt_rank(), 1); // ceil(8/16) = 1
        let big = ModelConfig { d_model: 48, ..tiny_config() };
        assert_eq!(big.dt_rank(), 3);
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config();
        let m1 = build_model(&cfg).unwrap();
        let m2 = build_model(&cfg).unwrap();
        for d in m1.descriptors() {
            assert_eq!(m1.weight(d).unwrap(), m2.weight(d).unwrap(), "layer {d}");
        }
        let m3 = build_model(&ModelConfig { seed: 4321, ..cfg }).unwrap();
        let emb = embedding_descriptor();
        assert_ne!(m1.weight(&emb).unwrap(), m3.weight(&emb).unwrap());
    }

    #[test]
    fn all_expected_layers_present_with_expected_shapes() {
        let cfg = tiny_config();
        let m = build_model(&cfg).unwrap();
        let d = cfg.d_model;
        let di = cfg.d_inner();
        let expected: Vec<(LayerDescriptor, Vec<usize>)> = vec![
            (LayerDescriptor::new(0, Subtype::Embedding), vec![17, d]),
            (LayerDescriptor::new(0, Subtype::MambaInProj), vec![2 * di, d]),
            (LayerDescriptor::new(0, Subtype::MambaConv1d), vec![di, 3]),
            (LayerDescriptor::new(0, Subtype::MambaXProj), vec![1 + 2 * 4, di]),
            (LayerDescriptor::new(0, Subtype::MambaDtProj), vec![di, 1]),
            (LayerDescriptor::new(0, Subtype::MambaOutProj), vec![d, di]),
            (LayerDescriptor::new(1, Subtype::AttnQkvProj), vec![3 * d, d]),
            (LayerDescriptor::new(1, Subtype::AttnOProj), vec![d, d]),
            (LayerDescriptor::new(1, Subtype::MlpUpProj), vec![2 * d, d]),
            (LayerDescriptor::new(1, Subtype::MlpDownProj), vec![d, 2 * d]),
            (LayerDescriptor::new(2, Subtype::LmHead), vec![17, d]),
        ];
        assert_eq!(m.descriptors().count(), expected.len());
        for (desc, shape) in expected {
            let w = m.weight(&desc).unwrap_or_else(|| panic!("missing {desc}"));
            assert_eq!(w.shape(), shape.as_slice(), "layer {desc}");
        }
    }

    #[test]
    fn quantizable_list_excludes_embedding_and_gates_conv() {
        let m = build_model(&tiny_config()).unwrap();
        let default_list = list_quantizable_layers(&m);
        assert!(default_list.iter().all(|d| d.subtype != Subtype::Embedding));
        assert!(default_list.iter().all(|d| d.subtype != Subtype::MambaConv1d));
        assert_eq!(default_list.len(), 9); // 4 ssm + 4 attn + lm_head

        let with_conv = list_quantizable_layers_with(&m, true);
        assert_eq!(with_conv.len(), 10);
        assert!(with_conv.contains(&LayerDescriptor::new(0, Subtype::MambaConv1d)));
        // Canonical order is sorted.
        let mut sorted = with_conv.clone();
        sorted.sort();
        assert_eq!(with_conv, sorted);
    }

    #[test]
    fn dt_bias_maps_into_documented_timestep_range() {
        for seed in [1, 77, 901] {
            let cfg = ModelConfig { seed, ..tiny_config() };
            let m = build_model(&cfg).unwrap();
            let BlockAux::Ssm { dt_bias, .. } = &m.aux().blocks[0] else {
                panic!("block 0 should be ssm");
            };
            for &b in dt_bias.data() {
                let t = crate::numerics::softplus(&Tensor::new(vec![1], vec![b]).unwrap());
                let t = t.data()[0];
                assert!((1e-3..=1e-1 + 1e-12).contains(&t), "softplus(bias) = {t}");
            }
        }
    }

    #[test]
    fn outliers_scale_exactly_the_leading_rows() {
        let mut cfg = tiny_config();
        cfg.outliers = OutlierSpec {
            fraction_of_channels: 0.25,
            magnitude_multiplier: 8.0,
            target_subtypes: BTreeSet::from([Subtype::MambaXProj]),
        };
        let plain = build_model(&tiny_config()).unwrap();
        let spiked = build_model(&cfg).unwrap();
        let desc = LayerDescriptor::new(0, Subtype::MambaXProj);
        let wp = plain.weight(&desc).unwrap();
        let ws = spiked.weight(&desc).unwrap();
        let rows = wp.shape()[0];
        let amplified = (0.25f64 * rows as f64).ceil() as usize;
        assert!(amplified > 0);
        for r in 0..rows {
            for (a, b) in wp.row(r).iter().zip(ws.row(r).iter()) {
                if r < amplified {
                    // x8 is a power-of-two scale: exact in binary floating point.
                    assert_eq!(*b, *a * 8.0);
                } else {
                    assert_eq!(*b, *a);
                }
            }
        }
        // Untargeted layers are untouched.
        let other = LayerDescriptor::new(0, Subtype::MambaInProj);
        assert_eq!(plain.weight(&other).unwrap(), spiked.weight(&other).unwrap());
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let cfg = tiny_config();
        let m = build_model(&cfg).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 17) as u32).collect();
        let logits = forward(&m, &tokens).unwrap();
        assert_eq!(logits.shape(), &[12, 17]);
        assert!(logits.all_finite());
    }

    #[test]
    fn forward_is_causal_bit_for_bit() {
        let cfg = tiny_config();
        let m = build_model(&cfg).unwrap();
        let tokens: Vec<u32> = (0..16).map(|i| (i * 7 % 17) as u32).collect();
        let full = forward(&m, &tokens).unwrap();
        for cut in [1usize, 5, 11] {
            let prefix = forward(&m, &tokens[..cut]).unwrap();
            assert_eq!(prefix, full.rows_range(0, cut).unwrap(), "cut {cut}");
        }
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = build_model(&tiny_config()).unwrap();
        assert!(forward(&m, &[]).is_err());
        assert!(forward(&m, &[0, 17]).is_err());
    }

    #[test]
    fn pure_ssm_and_pure_attn_stacks_work() {
        for pattern in [vec![BlockKind::Ssm; 3], vec![BlockKind::Attn; 3]] {
            let cfg = ModelConfig {
                num_blocks: 3,
                block_pattern: pattern.clone(),
                ..tiny_config()
            };
            let m = build_model(&cfg).unwrap();
            let logits = forward(&m, &[1, 2, 3, 4]).unwrap();
            assert_eq!(logits.shape(), &[4, 17]);
            assert!(logits.all_finite(), "pattern {pattern:?}");
        }
    }
}
