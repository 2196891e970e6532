//! Activation trajectories: the in-memory tensor, token roles, the ATRJ
//! file format, and a synthetic block-recurrent teacher generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::seg::Partition;
use crate::surrogate::BlockParams;

mod format;

pub use format::{read_trajectory, write_trajectory, write_trajectory_with_dtype, Dtype};

/// Role of a token within every layer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Cls,
    Register,
    Patch,
}

impl TokenRole {
    pub const ALL: [TokenRole; 3] = [TokenRole::Cls, TokenRole::Register, TokenRole::Patch];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenRole::Cls => "cls",
            TokenRole::Register => "register",
            TokenRole::Patch => "patch",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            TokenRole::Cls => 0,
            TokenRole::Register => 1,
            TokenRole::Patch => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(TokenRole::Cls),
            1 => Some(TokenRole::Register),
            2 => Some(TokenRole::Patch),
            _ => None,
        }
    }
}

impl std::fmt::Display for TokenRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set of token roles, used to filter which tokens enter a computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleSet(u8);

impl RoleSet {
    pub const ALL: RoleSet = RoleSet(0b111);

    pub fn of(roles: &[TokenRole]) -> Self {
        let mut bits = 0u8;
        for r in roles {
            bits |= 1 << r.to_byte();
        }
        RoleSet(bits)
    }

    pub fn only(role: TokenRole) -> Self {
        RoleSet(1 << role.to_byte())
    }

    pub fn contains(self, role: TokenRole) -> bool {
        self.0 & (1 << role.to_byte()) != 0
    }
}

/// Per-sample activation states for layers `0..=L`.
///
/// Layer 0 is the pre-block embedding state; layers `1..=L` are the
/// transformer layers. Data is indexed `[sample][layer][token][dim]`,
/// row-major and contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTensor {
    n_samples: usize,
    n_layers: usize,
    n_tokens: usize,
    dim: usize,
    roles: Vec<TokenRole>,
    data: Vec<f64>,
}

impl TrajectoryTensor {
    /// Validates all tensor invariants: at least one sample, at least two
    /// stored layers, exactly one `cls` token, finite data of the right size.
    pub fn new(
        n_samples: usize,
        n_layers: usize,
        n_tokens: usize,
        dim: usize,
        roles: Vec<TokenRole>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidData("trajectory needs n_samples >= 1".into()));
        }
        if n_layers < 2 {
            return Err(Error::InvalidData(format!(
                "trajectory needs n_layers >= 2, got {n_layers}"
            )));
        }
        if n_tokens == 0 || dim == 0 {
            return Err(Error::InvalidData(
                "trajectory needs n_tokens >= 1 and dim >= 1".into(),
            ));
        }
        if roles.len() != n_tokens {
            return Err(Error::InvalidData(format!(
                "role table length {} does not match n_tokens {n_tokens}",
                roles.len()
            )));
        }
        let cls_count = roles.iter().filter(|r| **r == TokenRole::Cls).count();
        if cls_count != 1 {
            return Err(Error::InvalidData(format!(
                "trajectory needs exactly one cls token, got {cls_count}"
            )));
        }
        let expect = n_samples * n_layers * n_tokens * dim;
        if data.len() != expect {
            return Err(Error::InvalidData(format!(
                "trajectory data length {} does not match {expect}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite trajectory value at flat index {idx}"
            )));
        }
        Ok(Self {
            n_samples,
            n_layers,
            n_tokens,
            dim,
            roles,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(sample, layer)` to a full layer state
    /// of length `n_tokens * dim`.
    pub fn from_states(
        n_samples: usize,
        n_layers: usize,
        roles: Vec<TokenRole>,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let n_tokens = roles.len();
        let mut data = Vec::with_capacity(n_samples * n_layers * n_tokens * dim);
        for s in 0..n_samples {
            for l in 0..n_layers {
                let state = f(s, l);
                assert_eq!(state.len(), n_tokens * dim, "state length from closure");
                data.extend_from_slice(&state);
            }
        }
        Self::new(n_samples, n_layers, n_tokens, dim, roles, data)
    }

    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Number of stored layer states (`L + 1`).
    #[inline]
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Number of transformer layers `L`.
    #[inline]
    pub fn depth(&self) -> usize {
        self.n_layers - 1
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Token indices carrying any of the given roles, in token order.
    pub fn tokens_with_roles(&self, set: RoleSet) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| set.contains(**r))
            .map(|(i, _)| i)
            .collect()
    }

    /// Full layer state (all tokens) as a flat `n_tokens * dim` slice.
    #[inline]
    pub fn state(&self, sample: usize, layer: usize) -> &[f64] {
        let stride = self.n_tokens * self.dim;
        let base = (sample * self.n_layers + layer) * stride;
        &self.data[base..base + stride]
    }

    /// Single token state of length `dim`.
    #[inline]
    pub fn token_state(&self, sample: usize, layer: usize, token: usize) -> &[f64] {
        let base = ((sample * self.n_layers + layer) * self.n_tokens + token) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Applies `f` to every stored value, preserving shape. Fails if the
    /// result is non-finite.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.n_samples,
            self.n_layers,
            self.n_tokens,
            self.dim,
            self.roles.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

}

/// Recipe for a synthetic block-recurrent teacher with known ground truth.
///
/// Layer 0 is drawn i.i.d. standard normal per token; layer `l+1` applies the
/// scheduled block to layer `l` and adds Gaussian noise of scale
/// `noise_sigma`. With zero noise the data is exactly block-recurrent by
/// construction: recomposing the blocks reproduces every layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTeacherSpec {
    pub dim: usize,
    pub n_tokens: usize,
    pub roles: Vec<TokenRole>,
    pub blocks: Vec<BlockParams>,
    /// Repetition counts `n_1..n_k`; the depth is their sum.
    pub schedule: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticTeacherSpec {
    pub fn depth(&self) -> usize {
        self.schedule.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.roles.len() != self.n_tokens {
            return Err(Error::InvalidData(format!(
                "spec roles length {} does not match n_tokens {}",
                self.roles.len(),
                self.n_tokens
            )));
        }
        let cls_count = self.roles.iter().filter(|r| **r == TokenRole::Cls).count();
        if cls_count != 1 {
            return Err(Error::InvalidData(format!(
                "spec needs exactly one cls token, got {cls_count}"
            )));
        }
        if self.blocks.is_empty() || self.blocks.len() != self.schedule.len() {
            return Err(Error::InvalidData(format!(
                "spec has {} blocks but {} schedule entries",
                self.blocks.len(),
                self.schedule.len()
            )));
        }
        if self.schedule.contains(&0) {
            return Err(Error::InvalidData("schedule entries must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidData(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        for (j, block) in self.blocks.iter().enumerate() {
            block.validate(self.dim)?;
            if let Some(scales) = &block.depth_scale {
                if scales.len() != self.schedule[j] {
                    return Err(Error::InvalidData(format!(
                        "block {j} has {} depth scales for a segment of {}",
                        scales.len(),
                        self.schedule[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// The ground-truth partition implied by the schedule, over layers
    /// `1..=depth`.
    pub fn ground_truth_partition(&self) -> Partition {
        Partition::from_schedule(&self.schedule)
    }
}

/// Rolls out a synthetic teacher for `n_samples` seeded samples.
///
/// Deterministic: sample `s` uses the stream `seed ^ s`, so any subset of
/// samples reproduces bit-identically regardless of batch size.
pub fn generate_teacher(
    spec: &SyntheticTeacherSpec,
    n_samples: usize,
) -> Result<(TrajectoryTensor, Partition)> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let depth = spec.depth();
    let n_layers = depth + 1;
    let state_len = spec.n_tokens * spec.dim;

    // Per-layer (block, rep) lookup from the schedule.
    let mut layer_block = Vec::with_capacity(depth);
    for (j, &reps) in spec.schedule.iter().enumerate() {
        for rep in 0..reps {
            layer_block.push((j, rep));
        }
    }

    let mut data = Vec::with_capacity(n_samples * n_layers * state_len);
    for s in 0..n_samples {
        let mut rng = CounterRng::for_sample(spec.seed, s);
        let mut state: Vec<f64> = (0..state_len).map(|_| rng.next_normal()).collect();
        data.extend_from_slice(&state);
        for &(j, rep) in &layer_block {
            let mut next = spec.blocks[j].forward(&state, spec.n_tokens, spec.dim, rep);
            if spec.noise_sigma > 0.0 {
                for v in next.iter_mut() {
                    *v += spec.noise_sigma * rng.next_normal();
                }
            }
            data.extend_from_slice(&next);
            state = next;
        }
    }

    let tensor = TrajectoryTensor::new(
        n_samples,
        n_layers,
        spec.n_tokens,
        spec.dim,
        spec.roles.clone(),
        data,
    )?;
    Ok((tensor, spec.ground_truth_partition()))
}
