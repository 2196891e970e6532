//! Weight-tied recurrent surrogates of layered teachers.
//!
//! A [`SurrogateModel`] is `k` parameter-tied blocks plus a repetition
//! schedule: block `j` applied `n_j` times covers its contiguous segment of
//! layers, and rolling all blocks from the embedding state reproduces a full
//! depth trajectory. Training combines teacher forcing and autoregressive
//! objectives ([`train`]); [`probe`] holds the perturbation and layer-swap
//! experiments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::seg::Partition;
use crate::traj::{TokenRole, TrajectoryTensor};

mod block;
mod probe;
mod train;

pub use block::{BlockCore, BlockFamily, BlockParams};
pub use probe::{
    apply_layer_swaps, layer_swap_eval, perturb_rollout, LayerStack, PerturbOutcome, SwapMode,
};
pub use train::{
    batch_hybrid_loss, hybrid_loss, rollout_layer_errors, train_stage1, train_stage2, TrainLog,
    TrainLogRow,
};

/// Per-role weights of the reconstruction loss; nonnegative, summing to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub cls: f64,
    pub register: f64,
    pub patch: f64,
}

impl TokenWeights {
    /// First-stage defaults.
    pub const STAGE1: TokenWeights = TokenWeights {
        cls: 0.34,
        register: 0.33,
        patch: 0.33,
    };
    /// Second-stage defaults, up-weighting cls and patch.
    pub const STAGE2: TokenWeights = TokenWeights {
        cls: 0.45,
        register: 0.10,
        patch: 0.45,
    };

    pub fn for_role(&self, role: TokenRole) -> f64 {
        match role {
            TokenRole::Cls => self.cls,
            TokenRole::Register => self.register,
            TokenRole::Patch => self.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cls, self.register, self.patch];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "token weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = vals.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "token weights must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Training stage selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Independent per-block training on ground-truth segment inputs.
    Stage1,
    /// End-to-end autoregressive training of the connected model.
    Stage2,
}

/// Architecture of the surrogate blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: BlockFamily,
    /// Hidden width for the gated-mlp family; ignored for affine.
    #[serde(default)]
    pub hidden: usize,
    /// Learn one scale vector per target layer.
    #[serde(default)]
    pub depth_scale: bool,
}

/// Hyperparameters for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Teacher-forcing weight at step 0.
    pub lambda_init: f64,
    /// Fraction of steps over which lambda anneals linearly to 0; with 0.0
    /// lambda is held constant at `lambda_init` for the whole run.
    pub anneal_fraction: f64,
    pub token_weights: TokenWeights,
    pub learning_rate: f64,
    pub steps: usize,
    pub weight_decay: f64,
    /// Plain gradient descent when 0.
    pub momentum: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Record a log row every this many steps (plus first and last).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl TrainConfig {
    pub fn stage1(seed: u64) -> Self {
        Self {
            lambda_init: 0.5,
            anneal_fraction: 0.25,
            token_weights: TokenWeights::STAGE1,
            learning_rate: 1e-2,
            steps: 5000,
            weight_decay: 1e-4,
            momentum: 0.0,
            seed,
            stage: Stage::Stage1,
            log_every: default_log_every(),
        }
    }

    pub fn stage2(seed: u64) -> Self {
        Self {
            lambda_init: 0.0,
            anneal_fraction: 0.0,
            token_weights: TokenWeights::STAGE2,
            learning_rate: 1e-2,
            steps: 5000,
            weight_decay: 1e-4,
            momentum: 0.0,
            seed,
            stage: Stage::Stage2,
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_init) {
            return Err(Error::InvalidArgument(format!(
                "lambda must stay in [0, 1], got initial {}",
                self.lambda_init
            )));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::InvalidArgument(format!(
                "anneal fraction must be in [0, 1], got {}",
                self.anneal_fraction
            )));
        }
        self.token_weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.momentum < 0.0 {
            return Err(Error::InvalidArgument(
                "weight decay and momentum must be nonnegative".into(),
            ));
        }
        if self.stage == Stage::Stage2 && self.lambda_init != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stage2 trains with lambda = 0 only, got {}",
                self.lambda_init
            )));
        }
        Ok(())
    }

    /// Teacher-forcing weight at a step.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.anneal_fraction == 0.0 {
            return self.lambda_init;
        }
        let anneal_steps = (self.steps as f64 * self.anneal_fraction).ceil();
        if anneal_steps <= 0.0 {
            return self.lambda_init;
        }
        let t = step as f64;
        if t >= anneal_steps {
            0.0
        } else {
            self.lambda_init * (1.0 - t / anneal_steps)
        }
    }
}

/// k parameter-tied blocks plus their repetition schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    pub blocks: Vec<BlockParams>,
    pub schedule: Partition,
    pub dim: usize,
    pub n_tokens: usize,
}

impl SurrogateModel {
    /// Seeded near-identity initialization for the given schedule.
    pub fn init(
        schedule: &Partition,
        arch: &ArchConfig,
        dim: usize,
        n_tokens: usize,
        seed: u64,
    ) -> Self {
        let mut rng = CounterRng::new(seed);
        let blocks = schedule
            .segments()
            .iter()
            .map(|&(b, e)| {
                let scale_len = arch.depth_scale.then_some(e - b + 1);
                BlockParams::init(arch.family, dim, arch.hidden, scale_len, &mut rng)
            })
            .collect();
        Self {
            blocks,
            schedule: schedule.clone(),
            dim,
            n_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.schedule.k() {
            return Err(Error::InvalidData(format!(
                "{} blocks for a {}-segment schedule",
                self.blocks.len(),
                self.schedule.k()
            )));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            b.validate(self.dim)?;
            if let Some(scales) = &b.depth_scale {
                let seg_len = self.schedule.schedule()[j];
                if scales.len() != seg_len {
                    return Err(Error::InvalidData(format!(
                        "block {j} has {} depth scales for a segment of {seg_len}",
                        scales.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Depth `L` covered by the schedule.
    pub fn depth(&self) -> usize {
        self.schedule.n()
    }

    /// `(block index, repetition index)` applied to produce layer `l`
    /// (1-based).
    pub fn block_for_layer(&self, layer: usize) -> (usize, usize) {
        let j = self
            .schedule
            .segment_of_layer(layer)
            .unwrap_or_else(|| panic!("layer {layer} outside schedule"));
        let (b, _) = self.schedule.segments()[j];
        (j, layer - b)
    }

    /// Autoregressive rollout from a layer-0 state: returns predicted states
    /// for layers `1..=L`.
    pub fn rollout(&self, a0: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(a0.len(), self.n_tokens * self.dim, "layer-0 state length");
        let depth = self.depth();
        let mut out = Vec::with_capacity(depth);
        let mut state = a0.to_vec();
        for l in 1..=depth {
            let (j, rep) = self.block_for_layer(l);
            state = self.blocks[j].forward(&state, self.n_tokens, self.dim, rep);
            out.push(state.clone());
        }
        out
    }

    /// Rolls out every sample of a teacher tensor from its layer-0 states,
    /// producing the student trajectory tensor (teacher layer 0 preserved).
    pub fn rollout_tensor(&self, teacher: &TrajectoryTensor) -> Result<TrajectoryTensor> {
        if teacher.dim() != self.dim
            || teacher.n_tokens() != self.n_tokens
            || teacher.depth() != self.depth()
        {
            return Err(Error::InvalidArgument(format!(
                "teacher shape ({} layers, {} tokens, dim {}) does not match model ({}, {}, {})",
                teacher.depth(),
                teacher.n_tokens(),
                teacher.dim(),
                self.depth(),
                self.n_tokens,
                self.dim
            )));
        }
        let mut data = Vec::with_capacity(teacher.data().len());
        for s in 0..teacher.n_samples() {
            let a0 = teacher.state(s, 0);
            data.extend_from_slice(a0);
            for state in self.rollout(a0) {
                data.extend_from_slice(&state);
            }
        }
        TrajectoryTensor::new(
            teacher.n_samples(),
            teacher.n_layers(),
            teacher.n_tokens(),
            teacher.dim(),
            teacher.roles().to_vec(),
            data,
        )
    }

    /// Total trainable parameter count across blocks.
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(block_param_count).sum()
    }

    /// Flattens all block parameters into one vector (block order; within a
    /// block: core weights then depth scales). This is also the checkpoint
    /// payload order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            flatten_block(b, &mut out);
        }
        out
    }

    /// Writes a flat parameter vector back into the blocks.
    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length");
        let mut offset = 0;
        for b in &mut self.blocks {
            let n = block_param_count(b);
            unflatten_block(b, &flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Flat-vector range of one block's parameters.
    pub(crate) fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let mut start = 0;
        for b in &self.blocks[..j] {
            start += block_param_count(b);
        }
        start..start + block_param_count(&self.blocks[j])
    }
}

pub(crate) fn block_param_count(b: &BlockParams) -> usize {
    let core = match &b.core {
        BlockCore::Affine { weight, bias } => weight.rows() * weight.cols() + bias.len(),
        BlockCore::GatedMlp { w1, b1, w2, b2 } => {
            w1.rows() * w1.cols() + b1.len() + w2.rows() * w2.cols() + b2.len()
        }
    };
    let scales = b
        .depth_scale
        .as_ref()
        .map(|s| s.iter().map(|v| v.len()).sum())
        .unwrap_or(0);
    core + scales
}

fn flatten_block(b: &BlockParams, out: &mut Vec<f64>) {
    match &b.core {
        BlockCore::Affine { weight, bias } => {
            out.extend_from_slice(weight.data());
            out.extend_from_slice(bias);
        }
        BlockCore::GatedMlp { w1, b1, w2, b2 } => {
            out.extend_from_slice(w1.data());
            out.extend_from_slice(b1);
            out.extend_from_slice(w2.data());
            out.extend_from_slice(b2);
        }
    }
    if let Some(scales) = &b.depth_scale {
        for s in scales {
            out.extend_from_slice(s);
        }
    }
}

fn unflatten_block(b: &mut BlockParams, flat: &[f64]) {
    let mut pos = 0;
    let take_matrix = |m: &mut crate::linalg::Matrix, pos: &mut usize| {
        let n = m.rows() * m.cols();
        let src = &flat[*pos..*pos + n];
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                m.set(i, j, src[i * m.cols() + j]);
            }
        }
        *pos += n;
    };
    match &mut b.core {
        BlockCore::Affine { weight, bias } => {
            take_matrix(weight, &mut pos);
            let n = bias.len();
            bias.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        BlockCore::GatedMlp { w1, b1, w2, b2 } => {
            take_matrix(w1, &mut pos);
            let n = b1.len();
            b1.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            take_matrix(w2, &mut pos);
            let n = b2.len();
            b2.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }
    if let Some(scales) = &mut b.depth_scale {
        for s in scales {
            let n = s.len();
            s.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }
    debug_assert_eq!(pos, flat.len());
}

// ---------------------------------------------------------------------------
// Checkpoint format: u32 LE header length, JSON header, f64 LE payload
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    family: BlockFamily,
    dim: usize,
    n_tokens: usize,
    hidden: usize,
    depth_scale: bool,
    schedule: Partition,
    seed: u64,
    param_count: usize,
}

const CHECKPOINT_FORMAT: &str = "depthflow-checkpoint-v1";

/// Saves a model checkpoint: JSON header plus little-endian f64 parameters.
pub fn save_checkpoint(model: &SurrogateModel, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let as_str = path.display().to_string();
    model.validate()?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        family: model.blocks[0].family(),
        dim: model.dim,
        n_tokens: model.n_tokens,
        hidden: model.blocks[0].hidden(),
        depth_scale: model.blocks[0].depth_scale.is_some(),
        schedule: model.schedule.clone(),
        seed,
        param_count: model.param_count(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Json {
        context: as_str.clone(),
        source: e,
    })?;
    let file = File::create(path).map_err(|e| Error::io(&as_str, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(&as_str, e))
    };
    emit(&(header_bytes.len() as u32).to_le_bytes())?;
    emit(&header_bytes)?;
    for v in model.flatten_params() {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(&as_str, e))
}

/// Loads a checkpoint saved by [`save_checkpoint`]; returns the model and the
/// training seed recorded in the header.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SurrogateModel, u64)> {
    let path = path.as_ref();
    let as_str = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&as_str, e))?;
    let mut r = BufReader::new(file);

    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| Error::Truncated {
        path: as_str.clone(),
        detail: "header length".into(),
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| Error::Truncated {
        path: as_str.clone(),
        detail: "header".into(),
    })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Json {
            context: as_str.clone(),
            source: e,
        })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidData(format!(
            "unknown checkpoint format {:?} in {as_str}",
            header.format
        )));
    }

    let mut payload = vec![0u8; header.param_count * 8];
    r.read_exact(&mut payload).map_err(|_| Error::Truncated {
        path: as_str.clone(),
        detail: format!("parameter payload of {} values", header.param_count),
    })?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite parameter in checkpoint {as_str}"
        )));
    }

    let arch = ArchConfig {
        family: header.family,
        hidden: header.hidden,
        depth_scale: header.depth_scale,
    };
    let mut model = SurrogateModel::init(
        &header.schedule,
        &arch,
        header.dim,
        header.n_tokens,
        0,
    );
    if model.param_count() != header.param_count {
        return Err(Error::InvalidData(format!(
            "checkpoint declares {} parameters but the architecture has {}",
            header.param_count,
            model.param_count()
        )));
    }
    model.set_params(&flat);
    model.validate()?;
    Ok((model, header.seed))
}
