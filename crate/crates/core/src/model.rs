//! The hybrid model: a frozen, seed-determined toy transformer backbone with
//! SSM side-car blocks gated into the residual stream and zero-initialized
//! LoRA adapters on chosen attention projections.
//!
//! Freeze discipline is structural. Backbone weights live behind [`Backbone`]
//! and nothing in this crate hands out mutable access to them; the only
//! mutable parameters are the side-car pieces and LoRA factors, addressed
//! through [`ParamId`]. With every gate at 0.0 and every LoRA `B` at zero the
//! full forward pass equals the backbone-only pass with max-abs difference
//! exactly 0.0, and the validation pipeline checks exactly that.
//!
//! Side-car placement: each block reads the residual stream at its layer's
//! input boundary, runs it through `w_in -> per-channel SSM scan -> c_out ->
//! w_out`, and its gated output is added to that layer's output. State resets
//! at sequence start; there is no cross-sequence carry.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hippo::{HippoError, HippoVariant, SsmCore};
use crate::linalg::{seeded_gaussian, LinalgError, Matrix, SeededRng, Vector};
use crate::math;

pub(crate) const RMS_EPS: f64 = 1e-6;
const INIT_SCALE: f64 = 0.02;
// The embedding doubles as the tied output head behind a final RMS norm, so
// its scale bounds the reachable logit range (roughly scale * d_model). At
// 0.02 the head cannot express a confident prediction at desk sizes; 0.5
// leaves ample headroom without destabilizing the residual stream.
const EMBED_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("input length {len} exceeds max_seq_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("token id {id} at position {index} is out of range for vocab {vocab}")]
    TokenOutOfRange {
        index: usize,
        id: usize,
        vocab: usize,
    },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name} expects {expected} values, got {got}")]
    ParameterSize {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Hippo(#[from] HippoError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

// ─── Configuration ───────────────────────────────────────────────────────

/// Projections a LoRA adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LoraTarget {
    QProj,
    KProj,
    VProj,
    OProj,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::QProj,
        LoraTarget::KProj,
        LoraTarget::VProj,
        LoraTarget::OProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::QProj => "q_proj",
            LoraTarget::KProj => "k_proj",
            LoraTarget::VProj => "v_proj",
            LoraTarget::OProj => "o_proj",
        }
    }
}

/// Which parameter groups training may touch. The backbone is never
/// trainable regardless of the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainableMask {
    pub gates: bool,
    pub ssm_projections: bool,
    pub lora: bool,
}

impl TrainableMask {
    pub const NONE: TrainableMask = TrainableMask {
        gates: false,
        ssm_projections: false,
        lora: false,
    };
    pub const GATES: TrainableMask = TrainableMask {
        gates: true,
        ssm_projections: false,
        lora: false,
    };
    pub const GATES_AND_LORA: TrainableMask = TrainableMask {
        gates: true,
        ssm_projections: false,
        lora: true,
    };
    pub const ALL: TrainableMask = TrainableMask {
        gates: true,
        ssm_projections: true,
        lora: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.gates || self.ssm_projections || self.lora)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub sidecar_layers: BTreeSet<usize>,
    pub ssm_channels: usize,
    pub n_states: usize,
    pub dt: f64,
    pub hippo_variant: HippoVariant,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: BTreeSet<LoraTarget>,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: byte-level vocab, four layers, side-cars on
    /// layers 1 and 3, LoRA on the q/v projections with alpha/rank = 2.
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            sidecar_layers: BTreeSet::from([1, 3]),
            ssm_channels: 16,
            n_states: 16,
            dt: 1.0,
            hippo_variant: HippoVariant::UnscaledLegs,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: BTreeSet::from([LoraTarget::QProj, LoraTarget::VProj]),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return fail(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return fail(format!(
                "d_model must be even for sinusoidal positions, got {}",
                self.d_model
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        if let Some(&bad) = self.sidecar_layers.iter().find(|&&l| l >= self.n_layers) {
            return fail(format!(
                "sidecar layer {bad} out of range for {} layers",
                self.n_layers
            ));
        }
        if !self.sidecar_layers.is_empty() && (self.ssm_channels == 0 || self.n_states == 0) {
            return fail("ssm_channels and n_states must be at least 1".into());
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return fail(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !self.lora_targets.is_empty() {
            if self.lora_rank == 0 {
                return fail("lora_rank must be at least 1 when lora_targets is nonempty".into());
            }
            if !self.lora_alpha.is_finite() || self.lora_alpha <= 0.0 {
                return fail(format!(
                    "lora_alpha must be positive, got {}",
                    self.lora_alpha
                ));
            }
        }
        Ok(())
    }
}

// ─── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct BackboneLayer {
    pub(crate) attn_norm: Vector,
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) mlp_norm: Vector,
    pub(crate) w_up: Matrix,
    pub(crate) w_down: Matrix,
}

/// The frozen donor. Fully determined by the config dims and seed; never
/// mutated after construction and never listed among trainable parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub(crate) embed: Matrix,
    pub(crate) layers: Vec<BackboneLayer>,
    pub(crate) final_norm: Vector,
}

#[derive(Debug, Clone)]
pub struct SidecarBlock {
    layer_index: usize,
    w_in: Matrix,  // channels x d_model
    ssm: SsmCore,  // shared A_bar/B_bar across channels
    c_out: Matrix, // channels x n_states, one read-out row per channel
    w_out: Matrix, // d_model x channels
    gate: f64,
}

impl SidecarBlock {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn ssm(&self) -> &SsmCore {
        &self.ssm
    }

    pub(crate) fn w_in_matrix(&self) -> &Matrix {
        &self.w_in
    }

    pub(crate) fn c_out_matrix(&self) -> &Matrix {
        &self.c_out
    }

    pub(crate) fn w_out_matrix(&self) -> &Matrix {
        &self.w_out
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    layer_index: usize,
    target: LoraTarget,
    a: Matrix, // rank x d_in, small gaussian
    b: Matrix, // d_out x rank, zero at init so the delta starts at zero
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn target(&self) -> LoraTarget {
        self.target
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Effective scaling factor `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub(crate) fn a_matrix(&self) -> &Matrix {
        &self.a
    }

    pub(crate) fn b_matrix(&self) -> &Matrix {
        &self.b
    }
}

/// Addresses one mutable (extension) parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Gate(usize),
    SidecarWIn(usize),
    SidecarCOut(usize),
    SidecarWOut(usize),
    LoraA(usize),
    LoraB(usize),
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    config: ModelConfig,
    backbone: Backbone,
    sidecars: Vec<SidecarBlock>,
    adapters: Vec<LoraAdapter>,
    trainable_mask: TrainableMask,
    /// Parameter-group values recorded at construction, kept so an audit can
    /// still see the initialization after training has moved the live values.
    init_records: Vec<(String, Vec<f64>)>,
}

impl HybridModel {
    /// Deterministically initializes the full hybrid from a config.
    ///
    /// Gates are exactly 0.0 and LoRA `B` factors exactly zero, so the model
    /// starts out behaviorally identical to its backbone.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let n_sidecars = config.sidecar_layers.len();
        Self::init_with_gate_values(config, &vec![0.0; n_sidecars])
    }

    /// Like [`HybridModel::init`] but with caller-chosen initial gate values,
    /// which are recorded as the initialization. This exists so contaminated
    /// initializations can be constructed and then caught by `gate_audit`;
    /// production paths should use `init`.
    pub fn init_with_gate_values(
        config: ModelConfig,
        gate_values: &[f64],
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if gate_values.len() != config.sidecar_layers.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} gate values for {} side-cars",
                gate_values.len(),
                config.sidecar_layers.len()
            )));
        }
        let mut rng = SeededRng::new(config.seed);
        let d = config.d_model;
        let f = config.d_ff();

        // Draw order is part of the file contract: embed, then per layer
        // wq/wk/wv/wo/w_up/w_down, then per side-car w_in/c_out/w_out, then
        // per adapter the A factor. Norm gains start at one, no draws.
        let embed = gaussian_matrix(&mut rng, config.vocab_size, d, EMBED_SCALE);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(BackboneLayer {
                attn_norm: ones(d),
                wq: gaussian_matrix(&mut rng, d, d, INIT_SCALE),
                wk: gaussian_matrix(&mut rng, d, d, INIT_SCALE),
                wv: gaussian_matrix(&mut rng, d, d, INIT_SCALE),
                wo: gaussian_matrix(&mut rng, d, d, INIT_SCALE),
                mlp_norm: ones(d),
                w_up: gaussian_matrix(&mut rng, f, d, INIT_SCALE),
                w_down: gaussian_matrix(&mut rng, d, f, INIT_SCALE),
            });
        }
        let backbone = Backbone {
            embed,
            layers,
            final_norm: ones(d),
        };

        let mut sidecars = Vec::with_capacity(config.sidecar_layers.len());
        for (&layer_index, &gate) in config.sidecar_layers.iter().zip(gate_values) {
            let m = config.ssm_channels;
            let n = config.n_states;
            sidecars.push(SidecarBlock {
                layer_index,
                w_in: gaussian_matrix(&mut rng, m, d, INIT_SCALE),
                ssm: SsmCore::new(n, config.hippo_variant, config.dt)?,
                c_out: gaussian_matrix(&mut rng, m, n, INIT_SCALE),
                w_out: gaussian_matrix(&mut rng, d, m, INIT_SCALE),
                gate,
            });
        }

        let mut adapters = Vec::new();
        for layer_index in 0..config.n_layers {
            for target in LoraTarget::ALL {
                if !config.lora_targets.contains(&target) {
                    continue;
                }
                adapters.push(LoraAdapter {
                    layer_index,
                    target,
                    a: gaussian_matrix(&mut rng, config.lora_rank, d, INIT_SCALE),
                    b: Matrix::zeros(d, config.lora_rank),
                    rank: config.lora_rank,
                    alpha: config.lora_alpha,
                });
            }
        }

        let init_records = vec![
            ("gates".into(), gate_values.to_vec()),
            (
                "lora_b".into(),
                adapters
                    .iter()
                    .flat_map(|a| a.b.data().iter().copied())
                    .collect(),
            ),
        ];

        Ok(Self {
            config,
            backbone,
            sidecars,
            adapters,
            trainable_mask: TrainableMask::GATES_AND_LORA,
            init_records,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sidecars(&self) -> &[SidecarBlock] {
        &self.sidecars
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn trainable_mask(&self) -> TrainableMask {
        self.trainable_mask
    }

    pub fn set_trainable_mask(&mut self, mask: TrainableMask) {
        self.trainable_mask = mask;
    }

    pub fn init_records(&self) -> &[(String, Vec<f64>)] {
        &self.init_records
    }

    pub(crate) fn backbone_weights(&self) -> &Backbone {
        &self.backbone
    }

    pub fn set_init_records(&mut self, records: Vec<(String, Vec<f64>)>) {
        self.init_records = records;
    }

    // ── Parameter addressing ────────────────────────────────────────────

    /// Every extension parameter in canonical order: gates, then side-car
    /// projections, then LoRA factors. This ordering is the file contract.
    pub fn extension_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..self.sidecars.len() {
            ids.push(ParamId::Gate(i));
        }
        for i in 0..self.sidecars.len() {
            ids.push(ParamId::SidecarWIn(i));
            ids.push(ParamId::SidecarCOut(i));
            ids.push(ParamId::SidecarWOut(i));
        }
        for i in 0..self.adapters.len() {
            ids.push(ParamId::LoraA(i));
            ids.push(ParamId::LoraB(i));
        }
        ids
    }

    /// Extension parameters admitted by the trainable mask, in canonical
    /// order. Never contains a backbone tensor.
    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        self.extension_param_ids()
            .into_iter()
            .filter(|id| match id {
                ParamId::Gate(_) => self.trainable_mask.gates,
                ParamId::SidecarWIn(_) | ParamId::SidecarCOut(_) | ParamId::SidecarWOut(_) => {
                    self.trainable_mask.ssm_projections
                }
                ParamId::LoraA(_) | ParamId::LoraB(_) => self.trainable_mask.lora,
            })
            .collect()
    }

    pub fn param_name(&self, id: ParamId) -> String {
        match id {
            ParamId::Gate(i) => format!("sidecar{}.gate", self.sidecars[i].layer_index),
            ParamId::SidecarWIn(i) => format!("sidecar{}.w_in", self.sidecars[i].layer_index),
            ParamId::SidecarCOut(i) => format!("sidecar{}.c_out", self.sidecars[i].layer_index),
            ParamId::SidecarWOut(i) => format!("sidecar{}.w_out", self.sidecars[i].layer_index),
            ParamId::LoraA(i) => {
                let a = &self.adapters[i];
                format!("layer{}.{}.lora_a", a.layer_index, a.target.name())
            }
            ParamId::LoraB(i) => {
                let a = &self.adapters[i];
                format!("layer{}.{}.lora_b", a.layer_index, a.target.name())
            }
        }
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::Gate(i) => core::slice::from_ref(&self.sidecars[i].gate),
            ParamId::SidecarWIn(i) => self.sidecars[i].w_in.data(),
            ParamId::SidecarCOut(i) => self.sidecars[i].c_out.data(),
            ParamId::SidecarWOut(i) => self.sidecars[i].w_out.data(),
            ParamId::LoraA(i) => self.adapters[i].a.data(),
            ParamId::LoraB(i) => self.adapters[i].b.data(),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::Gate(i) => core::slice::from_mut(&mut self.sidecars[i].gate),
            ParamId::SidecarWIn(i) => self.sidecars[i].w_in.data_mut(),
            ParamId::SidecarCOut(i) => self.sidecars[i].c_out.data_mut(),
            ParamId::SidecarWOut(i) => self.sidecars[i].w_out.data_mut(),
            ParamId::LoraA(i) => self.adapters[i].a.data_mut(),
            ParamId::LoraB(i) => self.adapters[i].b.data_mut(),
        }
    }

    /// Sets an extension parameter by its canonical name (used by file
    /// loading). The backbone is not addressable this way.
    pub fn set_extension_param(&mut self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let id = self
            .extension_param_ids()
            .into_iter()
            .find(|&id| self.param_name(id) == name)
            .ok_or_else(|| ModelError::UnknownParameter(name.into()))?;
        let slot = self.param_mut(id);
        if slot.len() != values.len() {
            let expected = slot.len();
            return Err(ModelError::ParameterSize {
                name: name.into(),
                expected,
                got: values.len(),
            });
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    /// Named, flattened copies of the mask-admitted parameters, in the
    /// stable canonical ordering.
    pub fn trainable_parameters(&self) -> Vec<(String, Vec<f64>)> {
        self.trainable_param_ids()
            .into_iter()
            .map(|id| (self.param_name(id), self.param(id).to_vec()))
            .collect()
    }

    /// All extension parameters (mask ignored), named, borrowed.
    pub fn extension_parameters(&self) -> Vec<(String, &[f64])> {
        self.extension_param_ids()
            .into_iter()
            .map(|id| (self.param_name(id), self.param(id)))
            .collect()
    }

    /// The frozen backbone tensors, named.
    pub fn backbone_parameters(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("embed".into(), self.backbone.embed.data()));
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), layer.attn_norm.data()));
            out.push((format!("layer{l}.wq"), layer.wq.data()));
            out.push((format!("layer{l}.wk"), layer.wk.data()));
            out.push((format!("layer{l}.wv"), layer.wv.data()));
            out.push((format!("layer{l}.wo"), layer.wo.data()));
            out.push((format!("layer{l}.mlp_norm"), layer.mlp_norm.data()));
            out.push((format!("layer{l}.w_up"), layer.w_up.data()));
            out.push((format!("layer{l}.w_down"), layer.w_down.data()));
        }
        out.push(("final_norm".into(), self.backbone.final_norm.data()));
        out
    }

    /// True when every parameter, backbone and extension, is bit-identical.
    pub fn bit_identical(&self, other: &Self) -> bool {
        let pairs = |a: Vec<(String, &[f64])>, b: Vec<(String, &[f64])>| {
            a.len() == b.len()
                && a.iter().zip(&b).all(|((na, va), (nb, vb))| {
                    na == nb
                        && va.len() == vb.len()
                        && va
                            .iter()
                            .zip(vb.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
        };
        pairs(self.extension_parameters(), other.extension_parameters())
            && pairs(self.backbone_parameters(), other.backbone_parameters())
    }

    /// Adds seeded gaussian noise to every mask-admitted parameter. Gradient
    /// checks call this to move off the zero-initialized point, where most
    /// gradients vanish identically and a check would prove nothing.
    pub fn perturb_trainable(&mut self, seed: u64, scale: f64) {
        let mut rng = SeededRng::new(seed);
        for id in self.trainable_param_ids() {
            let slot = self.param_mut(id);
            let noise = seeded_gaussian(&mut rng, slot.len(), scale);
            for (v, n) in slot.iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }

    // ── Forward ─────────────────────────────────────────────────────────

    /// Full hybrid forward pass; returns per-position logits
    /// (`seq_len x vocab_size`).
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix, ModelError> {
        Ok(self.run_forward(tokens, true)?.logits)
    }

    /// Backbone-only forward pass: side-cars and adapters are skipped
    /// entirely, not just zeroed. The zero-gate identity check compares this
    /// against [`HybridModel::forward`].
    pub fn forward_backbone(&self, tokens: &[usize]) -> Result<Matrix, ModelError> {
        Ok(self.run_forward(tokens, false)?.logits)
    }

    pub(crate) fn run_forward(
        &self,
        tokens: &[usize],
        with_extensions: bool,
    ) -> Result<ForwardCache, ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let len = tokens.len();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let ff = cfg.d_ff();
        let inv_sqrt_dh = 1.0 / math::sqrt(dh as f64);

        // Token embedding plus fixed sinusoidal position offsets.
        let mut x = vec![0.0; len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = self.backbone.embed.row(tok);
            let out = &mut x[t * d..(t + 1) * d];
            out.copy_from_slice(row);
            for i in 0..d / 2 {
                let rate = math::powf(10000.0, -((2 * i) as f64) / d as f64);
                out[2 * i] += math::sin(t as f64 * rate);
                out[2 * i + 1] += math::cos(t as f64 * rate);
            }
        }
        let mut layer_caches = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            let h_in = x;

            // Pre-norm attention.
            let mut normed_attn = vec![0.0; len * d];
            let mut inv_rms_attn = vec![0.0; len];
            for t in 0..len {
                inv_rms_attn[t] = rmsnorm(
                    &h_in[t * d..(t + 1) * d],
                    layer.attn_norm.data(),
                    &mut normed_attn[t * d..(t + 1) * d],
                );
            }

            let proj = |w: &Matrix, target: LoraTarget| -> (Vec<f64>, Option<AdapterCache>) {
                let mut out = vec![0.0; len * d];
                for t in 0..len {
                    matvec(
                        &mut out[t * d..(t + 1) * d],
                        w,
                        &normed_attn[t * d..(t + 1) * d],
                    );
                }
                let cache = if with_extensions {
                    self.apply_lora(l, target, &normed_attn, &mut out, len)
                } else {
                    None
                };
                (out, cache)
            };
            let (q, lora_q) = proj(&layer.wq, LoraTarget::QProj);
            let (k, lora_k) = proj(&layer.wk, LoraTarget::KProj);
            let (v, lora_v) = proj(&layer.wv, LoraTarget::VProj);

            // Causal attention, one max-subtracted softmax row per
            // (head, position).
            let mut att = vec![0.0; heads * len * len];
            let mut headcat = vec![0.0; len * d];
            for h in 0..heads {
                for t in 0..len {
                    let qrow = &q[t * d + h * dh..t * d + (h + 1) * dh];
                    let base = h * len * len + t * len;
                    let arow = &mut att[base..base + t + 1];
                    let mut max_score = f64::NEG_INFINITY;
                    for (s, slot) in arow.iter_mut().enumerate() {
                        let krow = &k[s * d + h * dh..s * d + (h + 1) * dh];
                        let mut dot = 0.0;
                        for (qv, kv) in qrow.iter().zip(krow) {
                            dot += qv * kv;
                        }
                        *slot = dot * inv_sqrt_dh;
                        max_score = math::max(max_score, *slot);
                    }
                    let mut total = 0.0;
                    for slot in arow.iter_mut() {
                        *slot = math::exp(*slot - max_score);
                        total += *slot;
                    }
                    for slot in arow.iter_mut() {
                        *slot /= total;
                    }
                    let out = &mut headcat[t * d + h * dh..t * d + (h + 1) * dh];
                    for (s, &w) in arow.iter().enumerate() {
                        let vrow = &v[s * d + h * dh..s * d + (h + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }

            let mut attn_out = vec![0.0; len * d];
            for t in 0..len {
                matvec(
                    &mut attn_out[t * d..(t + 1) * d],
                    &layer.wo,
                    &headcat[t * d..(t + 1) * d],
                );
            }
            let lora_o = if with_extensions {
                self.apply_lora(l, LoraTarget::OProj, &headcat, &mut attn_out, len)
            } else {
                None
            };

            let mut h_mid = h_in.clone();
            for (hv, av) in h_mid.iter_mut().zip(&attn_out) {
                *hv += av;
            }

            // Pre-norm MLP.
            let mut normed_mlp = vec![0.0; len * d];
            let mut inv_rms_mlp = vec![0.0; len];
            let mut up = vec![0.0; len * ff];
            let mut act = vec![0.0; len * ff];
            let mut mlp_out = vec![0.0; len * d];
            for t in 0..len {
                inv_rms_mlp[t] = rmsnorm(
                    &h_mid[t * d..(t + 1) * d],
                    layer.mlp_norm.data(),
                    &mut normed_mlp[t * d..(t + 1) * d],
                );
                matvec(
                    &mut up[t * ff..(t + 1) * ff],
                    &layer.w_up,
                    &normed_mlp[t * d..(t + 1) * d],
                );
                for i in 0..ff {
                    act[t * ff + i] = silu(up[t * ff + i]);
                }
                matvec(
                    &mut mlp_out[t * d..(t + 1) * d],
                    &layer.w_down,
                    &act[t * ff..(t + 1) * ff],
                );
            }
            let mut h_post = h_mid.clone();
            for (hv, mv) in h_post.iter_mut().zip(&mlp_out) {
                *hv += mv;
            }

            // Side-car: taps the residual stream at the layer input, output
            // gated into the layer output.
            let sidecar_idx = self.sidecars.iter().position(|b| b.layer_index == l);
            let sidecar_cache = match sidecar_idx {
                Some(b) if with_extensions => Some(self.run_sidecar(b, &h_in, len)),
                _ => None,
            };
            let mut h_out = h_post.clone();
            if let (Some(b), Some(cache)) = (sidecar_idx, &sidecar_cache) {
                let gate = self.sidecars[b].gate;
                for (hv, sv) in h_out.iter_mut().zip(&cache.h_ssm) {
                    *hv += gate * sv;
                }
            }

            layer_caches.push(LayerCache {
                h_in,
                normed_attn,
                inv_rms_attn,
                q,
                k,
                v,
                lora_q,
                lora_k,
                lora_v,
                lora_o,
                att,
                headcat,
                h_mid,
                inv_rms_mlp,
                up,
                sidecar: sidecar_cache,
                sidecar_idx,
            });
            x = h_out;
        }

        let mut final_normed = vec![0.0; len * d];
        let mut inv_rms_final = vec![0.0; len];
        for t in 0..len {
            inv_rms_final[t] = rmsnorm(
                &x[t * d..(t + 1) * d],
                self.backbone.final_norm.data(),
                &mut final_normed[t * d..(t + 1) * d],
            );
        }

        // Output head tied to the embedding.
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; len * vocab];
        for t in 0..len {
            let hrow = &final_normed[t * d..(t + 1) * d];
            let lrow = &mut logits[t * vocab..(t + 1) * vocab];
            for (vtok, slot) in lrow.iter_mut().enumerate() {
                let erow = self.backbone.embed.row(vtok);
                let mut dot = 0.0;
                for (ev, hv) in erow.iter().zip(hrow) {
                    dot += ev * hv;
                }
                *slot = dot;
            }
        }

        Ok(ForwardCache {
            pre_final: x,
            layers: layer_caches,
            inv_rms_final,
            logits: Matrix::from_vec_unchecked(len, vocab, logits),
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::InputTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for (index, &id) in tokens.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    index,
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Adds the LoRA delta `(alpha/r) * B (A x)` for the adapter on
    /// `(layer, target)` if one exists; returns the cached low-rank hidden.
    fn apply_lora(
        &self,
        layer: usize,
        target: LoraTarget,
        input: &[f64],
        out: &mut [f64],
        len: usize,
    ) -> Option<AdapterCache> {
        let idx = self
            .adapters
            .iter()
            .position(|a| a.layer_index == layer && a.target == target)?;
        let adapter = &self.adapters[idx];
        let d = self.config.d_model;
        let r = adapter.rank;
        let scaling = adapter.scaling();
        let mut hidden = vec![0.0; len * r];
        for t in 0..len {
            let hrow = &mut hidden[t * r..(t + 1) * r];
            matvec(hrow, &adapter.a, &input[t * d..(t + 1) * d]);
            let orow = &mut out[t * d..(t + 1) * d];
            for (row, o_i) in orow.iter_mut().enumerate() {
                let brow = adapter.b.row(row);
                let mut dot = 0.0;
                for (bv, hv) in brow.iter().zip(hrow.iter()) {
                    dot += bv * hv;
                }
                *o_i += scaling * dot;
            }
        }
        Some(AdapterCache {
            adapter_idx: idx,
            hidden,
        })
    }

    fn run_sidecar(&self, idx: usize, h_in: &[f64], len: usize) -> SidecarCache {
        let block = &self.sidecars[idx];
        let d = self.config.d_model;
        let m = self.config.ssm_channels;
        let n = self.config.n_states;
        let a_bar = block.ssm.a_discrete().data();
        let b_bar = block.ssm.b_discrete().data();

        let mut u = vec![0.0; len * m];
        for t in 0..len {
            matvec(
                &mut u[t * m..(t + 1) * m],
                &block.w_in,
                &h_in[t * d..(t + 1) * d],
            );
        }

        // Per-channel scalar-input recurrence with the shared discrete pair;
        // states[(c, t)] is the channel-c state after consuming position t.
        let mut states = vec![0.0; m * len * n];
        let mut y = vec![0.0; len * m];
        let mut state = vec![0.0; n];
        let mut next = vec![0.0; n];
        for c in 0..m {
            state.iter_mut().for_each(|s| *s = 0.0);
            let c_row = block.c_out.row(c);
            for t in 0..len {
                let input = u[t * m + c];
                for i in 0..n {
                    let mut acc = b_bar[i] * input;
                    let arow = &a_bar[i * n..(i + 1) * n];
                    for (av, sv) in arow.iter().zip(state.iter()) {
                        acc += av * sv;
                    }
                    next[i] = acc;
                }
                core::mem::swap(&mut state, &mut next);
                states[(c * len + t) * n..(c * len + t + 1) * n].copy_from_slice(&state);
                let mut read = 0.0;
                for (cv, sv) in c_row.iter().zip(state.iter()) {
                    read += cv * sv;
                }
                y[t * m + c] = read;
            }
        }

        let mut h_ssm = vec![0.0; len * d];
        for t in 0..len {
            matvec(
                &mut h_ssm[t * d..(t + 1) * d],
                &block.w_out,
                &y[t * m..(t + 1) * m],
            );
        }
        SidecarCache { states, y, h_ssm }
    }
}

/// Elementwise `h_t + alpha * h_ssm`; the gated residual blend.
pub fn apply_gate_blend(h_t: &Vector, h_ssm: &Vector, alpha: f64) -> Result<Vector, ModelError> {
    if h_t.len() != h_ssm.len() {
        return Err(ModelError::LengthMismatch {
            left: h_t.len(),
            right: h_ssm.len(),
        });
    }
    let blended = h_t
        .data()
        .iter()
        .zip(h_ssm.data())
        .map(|(t, s)| t + alpha * s)
        .collect();
    Ok(Vector::new(blended)?)
}

// ─── Forward cache (consumed by the reverse pass) ────────────────────────

pub(crate) struct AdapterCache {
    pub adapter_idx: usize,
    pub hidden: Vec<f64>, // len x rank
}

pub(crate) struct SidecarCache {
    pub states: Vec<f64>, // channels x len x n_states
    pub y: Vec<f64>,      // len x channels
    pub h_ssm: Vec<f64>,  // len x d_model
}

pub(crate) struct LayerCache {
    pub h_in: Vec<f64>,
    pub normed_attn: Vec<f64>,
    pub inv_rms_attn: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub lora_q: Option<AdapterCache>,
    pub lora_k: Option<AdapterCache>,
    pub lora_v: Option<AdapterCache>,
    pub lora_o: Option<AdapterCache>,
    pub att: Vec<f64>, // heads x len x len, rows past the diagonal are zero
    pub headcat: Vec<f64>,
    pub h_mid: Vec<f64>,
    pub inv_rms_mlp: Vec<f64>,
    pub up: Vec<f64>,
    pub sidecar: Option<SidecarCache>,
    pub sidecar_idx: Option<usize>,
}

pub(crate) struct ForwardCache {
    pub pre_final: Vec<f64>,
    pub layers: Vec<LayerCache>,
    pub inv_rms_final: Vec<f64>,
    pub logits: Matrix,
}

// ─── Shared numeric helpers ──────────────────────────────────────────────

/// `out = W x` for a single position; `W` is `(out_dim x in_dim)` row-major.
pub(crate) fn matvec(out: &mut [f64], w: &Matrix, x: &[f64]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), out.len());
    for (row, o) in out.iter_mut().enumerate() {
        let wrow = w.row(row);
        let mut acc = 0.0;
        for (wv, xv) in wrow.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// RMS norm with gain; writes the normed row and returns `1/rms`.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let inv_rms = 1.0 / math::sqrt(mean_sq + RMS_EPS);
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain.iter()) {
        *o = g * xv * inv_rms;
    }
    inv_rms
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v = seeded_gaussian(rng, rows * cols, scale);
    Matrix::from_vec(rows, cols, v.data().to_vec()).expect("finite gaussian init")
}

fn ones(n: usize) -> Vector {
    Vector::new(vec![1.0; n]).expect("finite")
}
