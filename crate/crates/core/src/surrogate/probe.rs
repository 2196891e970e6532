//! Perturbation and layer-swap probes on per-layer map stacks.
//!
//! A [`LayerStack`] assigns one map to every layer `1..=L`. Expanding a tied
//! surrogate gives per-layer clones of its blocks; synthetic teachers can
//! also be expanded with per-layer jitter ("noisy-tied") so that layers
//! within a phase are similar but not identical.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::seg::Partition;
use crate::traj::TokenRole;

use super::block::BlockParams;
use super::{BlockCore, SurrogateModel};

/// One untied map per layer; each entry remembers the repetition index it
/// was expanded with so depth scaling keeps working after swaps.
#[derive(Clone, Debug)]
pub struct LayerStack {
    maps: Vec<(BlockParams, usize)>,
    pub n_tokens: usize,
    pub dim: usize,
    pub roles: Vec<TokenRole>,
}

impl LayerStack {
    /// Expands tied blocks over their schedule into per-layer maps.
    pub fn from_blocks(
        blocks: &[BlockParams],
        schedule: &Partition,
        n_tokens: usize,
        dim: usize,
        roles: Vec<TokenRole>,
    ) -> Result<Self> {
        if blocks.len() != schedule.k() {
            return Err(Error::InvalidArgument(format!(
                "{} blocks for a {}-segment schedule",
                blocks.len(),
                schedule.k()
            )));
        }
        let mut maps = Vec::with_capacity(schedule.n());
        for (j, &(b, e)) in schedule.segments().iter().enumerate() {
            for layer in b..=e {
                maps.push((blocks[j].clone(), layer - b));
            }
        }
        Ok(Self {
            maps,
            n_tokens,
            dim,
            roles,
        })
    }

    pub fn from_surrogate(model: &SurrogateModel, roles: Vec<TokenRole>) -> Result<Self> {
        Self::from_blocks(
            &model.blocks,
            &model.schedule,
            model.n_tokens,
            model.dim,
            roles,
        )
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    /// Adds seeded Gaussian jitter of the given scale to every map's
    /// parameters, making per-layer maps distinct within each phase.
    pub fn with_param_noise(&self, scale: f64, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed);
        let mut out = self.clone();
        for (params, _) in out.maps.iter_mut() {
            jitter_block(params, scale, &mut rng);
        }
        out
    }

    /// Runs the stack from a layer-0 state; returns states for layers
    /// `1..=L`.
    pub fn rollout(&self, a0: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.maps.len());
        let mut state = a0.to_vec();
        for (params, rep) in &self.maps {
            state = params.forward(&state, self.n_tokens, self.dim, *rep);
            out.push(state.clone());
        }
        out
    }

    /// Rollout starting from the state at `layer` (so maps `layer+1..=L`
    /// are applied). `layer = L` applies nothing.
    fn rollout_from(&self, state_at_layer: &[f64], layer: usize) -> Vec<f64> {
        let mut state = state_at_layer.to_vec();
        for (params, rep) in &self.maps[layer..] {
            state = params.forward(&state, self.n_tokens, self.dim, *rep);
        }
        state
    }
}

fn jitter_block(params: &mut BlockParams, scale: f64, rng: &mut CounterRng) {
    let jitter_vec = |v: &mut Vec<f64>, rng: &mut CounterRng| {
        for x in v.iter_mut() {
            *x += scale * rng.next_normal();
        }
    };
    match &mut params.core {
        BlockCore::Affine { weight, bias } => {
            for i in 0..weight.rows() {
                for j in 0..weight.cols() {
                    let v = weight.get(i, j) + scale * rng.next_normal();
                    weight.set(i, j, v);
                }
            }
            jitter_vec(bias, rng);
        }
        BlockCore::GatedMlp { w1, b1, w2, b2 } => {
            for m in [w1, w2] {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        let v = m.get(i, j) + scale * rng.next_normal();
                        m.set(i, j, v);
                    }
                }
            }
            jitter_vec(b1, rng);
            jitter_vec(b2, rng);
        }
    }
}

/// Result of one perturbation experiment.
#[derive(Clone, Debug)]
pub struct PerturbOutcome {
    /// Per-role terminal cosine deviation `1 - <x̂_L^pert, x̂_L>`, averaged
    /// over the role's tokens.
    pub d_cos: Vec<(TokenRole, f64)>,
    /// `d_cos / |epsilon|` (zero when epsilon is zero).
    pub scaled_sensitivity: Vec<(TokenRole, f64)>,
    pub baseline_final: Vec<f64>,
    pub perturbed_final: Vec<f64>,
}

/// Injects `epsilon * u`, `u ~ N(0, I)` per token, into the state at `layer`
/// (0 = the input state) and rolls the stack forward, measuring the terminal
/// cosine deviation per role.
pub fn perturb_rollout(
    stack: &LayerStack,
    a0: &[f64],
    layer: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PerturbOutcome> {
    let depth = stack.depth();
    if layer > depth {
        return Err(Error::InvalidArgument(format!(
            "perturbation layer {layer} exceeds depth {depth}"
        )));
    }
    if a0.len() != stack.n_tokens * stack.dim {
        return Err(Error::InvalidArgument("layer-0 state length".into()));
    }
    if !epsilon.is_finite() {
        return Err(Error::InvalidArgument("epsilon must be finite".into()));
    }

    // Baseline trajectory up to the injection layer, then to the end.
    let baseline_at_layer = if layer == 0 {
        a0.to_vec()
    } else {
        let mut state = a0.to_vec();
        for (params, rep) in &stack.maps[..layer] {
            state = params.forward(&state, stack.n_tokens, stack.dim, *rep);
        }
        state
    };
    let baseline_final = stack.rollout_from(&baseline_at_layer, layer);

    let mut rng = CounterRng::new(seed);
    let mut perturbed = baseline_at_layer.clone();
    for v in perturbed.iter_mut() {
        *v += epsilon * rng.next_normal();
    }
    let perturbed_final = stack.rollout_from(&perturbed, layer);

    let mut d_cos = Vec::new();
    let mut scaled = Vec::new();
    for role in TokenRole::ALL {
        let tokens: Vec<usize> = stack
            .roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &tok in &tokens {
            let a = &baseline_final[tok * stack.dim..(tok + 1) * stack.dim];
            let b = &perturbed_final[tok * stack.dim..(tok + 1) * stack.dim];
            if a == b {
                continue; // d_cos contribution exactly 0
            }
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero-norm terminal state for token {tok}"
                )));
            }
            let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            acc += 1.0 - cos;
        }
        let mean = acc / tokens.len() as f64;
        d_cos.push((role, mean));
        scaled.push((
            role,
            if epsilon == 0.0 {
                0.0
            } else {
                mean / epsilon.abs()
            },
        ));
    }

    Ok(PerturbOutcome {
        d_cos,
        scaled_sensitivity: scaled,
        baseline_final,
        perturbed_final,
    })
}

/// Swap mode for layer-replacement experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwapMode {
    /// Replace a layer with another layer from the same phase.
    Intra,
    /// Replace a layer with a layer from a different phase.
    Inter,
}

/// Returns a stack with each `(position, source)` pair replaced: the map at
/// 1-based layer `position` becomes a clone of the map at `source`.
pub fn apply_layer_swaps(stack: &LayerStack, swaps: &[(usize, usize)]) -> LayerStack {
    let mut out = stack.clone();
    for &(position, source) in swaps {
        assert!(
            (1..=stack.depth()).contains(&position) && (1..=stack.depth()).contains(&source),
            "swap layers must be within 1..=L"
        );
        out.maps[position - 1] = stack.maps[source - 1].clone();
    }
    out
}

/// Mean final-layer relative error after replacing `swaps` randomly chosen
/// layers per the mode, evaluated over the given layer-0 states.
///
/// Intra-block swaps draw the replacement from the same partition segment
/// (a segment of length one can only swap a layer with itself, which leaves
/// the stack unchanged); inter-block swaps draw from the other segments.
pub fn layer_swap_eval(
    stack: &LayerStack,
    partition: &Partition,
    swaps: usize,
    mode: SwapMode,
    a0_samples: &[Vec<f64>],
    seed: u64,
) -> Result<f64> {
    let depth = stack.depth();
    partition.validate_cover(depth)?;
    if swaps == 0 || swaps > depth {
        return Err(Error::InvalidArgument(format!(
            "swaps must be in 1..=depth, got {swaps}"
        )));
    }
    if a0_samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    if mode == SwapMode::Inter && partition.k() < 2 {
        return Err(Error::InvalidArgument(
            "inter-block swaps need at least two segments".into(),
        ));
    }

    let mut rng = CounterRng::new(seed);
    let positions: Vec<usize> = rng
        .sample_distinct_sorted(depth, swaps)
        .into_iter()
        .map(|p| p + 1)
        .collect();
    let mut swap_list = Vec::with_capacity(swaps);
    for &p in &positions {
        let seg = partition.segment_of_layer(p).expect("covered layer");
        let candidates: Vec<usize> = (1..=depth)
            .filter(|&q| {
                let same = partition.segment_of_layer(q) == Some(seg);
                match mode {
                    SwapMode::Intra => same && q != p,
                    SwapMode::Inter => !same,
                }
            })
            .collect();
        let source = if candidates.is_empty() {
            p // single-layer phase: self-swap, a no-op
        } else {
            candidates[rng.next_below(candidates.len() as u64) as usize]
        };
        swap_list.push((p, source));
    }
    let swapped = apply_layer_swaps(stack, &swap_list);

    let mut acc = 0.0;
    for a0 in a0_samples {
        let base = stack.rollout(a0);
        let modified = swapped.rollout(a0);
        let gt = base.last().unwrap();
        let got = modified.last().unwrap();
        let num: f64 = gt
            .iter()
            .zip(got)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += if den > 0.0 { num / den } else { num };
    }
    Ok(acc / a0_samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::BlockFamily;

    fn two_phase_stack(jitter: f64, seed: u64) -> LayerStack {
        let mut rng = CounterRng::new(seed);
        let blocks = vec![
            BlockParams::random_teacher(BlockFamily::Affine, 3, 0, 0.5, &mut rng),
            BlockParams::random_teacher(BlockFamily::Affine, 3, 0, 0.5, &mut rng),
        ];
        let stack = LayerStack::from_blocks(
            &blocks,
            &Partition::from_schedule(&[3, 3]),
            2,
            3,
            vec![TokenRole::Cls, TokenRole::Patch],
        )
        .unwrap();
        if jitter > 0.0 {
            stack.with_param_noise(jitter, seed ^ 0xABCD)
        } else {
            stack
        }
    }

    fn sample_states(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for s in 0..n {
            let mut rng = CounterRng::for_sample(seed, s);
            out.push((0..6).map(|_| rng.next_normal()).collect());
        }
        out
    }

    #[test]
    fn zero_epsilon_gives_zero_dcos() {
        let stack = two_phase_stack(0.0, 1);
        let a0 = sample_states(1, 2).remove(0);
        let out = perturb_rollout(&stack, &a0, 2, 0.0, 7).unwrap();
        for (_, v) in out.d_cos {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn terminal_injection_skips_dynamics() {
        let stack = two_phase_stack(0.0, 3);
        let a0 = sample_states(1, 4).remove(0);
        let depth = stack.depth();
        let out = perturb_rollout(&stack, &a0, depth, 0.05, 11).unwrap();

        // Direct check: the final states differ exactly by the injected
        // noise, so d_cos must match the direct cosine deviation.
        let baseline = stack.rollout(&a0);
        let final_state = baseline.last().unwrap();
        let mut rng = CounterRng::new(11);
        let perturbed: Vec<f64> = final_state
            .iter()
            .map(|v| v + 0.05 * rng.next_normal())
            .collect();
        for (role, got) in &out.d_cos {
            let tokens: Vec<usize> = stack
                .roles
                .iter()
                .enumerate()
                .filter(|(_, r)| *r == role)
                .map(|(i, _)| i)
                .collect();
            let mut acc = 0.0;
            for tok in tokens.iter() {
                let a = &final_state[tok * 3..(tok + 1) * 3];
                let b = &perturbed[tok * 3..(tok + 1) * 3];
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                acc += 1.0 - cos;
            }
            let want = acc / tokens.len() as f64;
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn self_swap_has_zero_error() {
        let stack = two_phase_stack(0.05, 5);
        let swapped = apply_layer_swaps(&stack, &[(2, 2), (5, 5)]);
        let a0 = sample_states(3, 6);
        for s in &a0 {
            assert_eq!(stack.rollout(s), swapped.rollout(s));
        }
    }

    #[test]
    fn tied_phases_make_intra_swaps_free() {
        // Within-phase layers share one map, so intra swaps are exact no-ops
        // while inter swaps change the function.
        let stack = two_phase_stack(0.0, 9);
        let partition = Partition::from_schedule(&[3, 3]);
        let samples = sample_states(4, 10);
        let intra = layer_swap_eval(&stack, &partition, 2, SwapMode::Intra, &samples, 21)
            .unwrap();
        let inter = layer_swap_eval(&stack, &partition, 2, SwapMode::Inter, &samples, 21)
            .unwrap();
        assert_eq!(intra, 0.0);
        assert!(inter > 0.0, "inter-swap error {inter}");
    }

    #[test]
    fn noisy_tied_intra_beats_inter() {
        let mut intra_wins = 0;
        for trial in 0..10u64 {
            let stack = two_phase_stack(0.02, 100 + trial);
            let partition = Partition::from_schedule(&[3, 3]);
            let samples = sample_states(6, 200 + trial);
            let intra =
                layer_swap_eval(&stack, &partition, 2, SwapMode::Intra, &samples, trial)
                    .unwrap();
            let inter =
                layer_swap_eval(&stack, &partition, 2, SwapMode::Inter, &samples, trial)
                    .unwrap();
            if intra < inter {
                intra_wins += 1;
            }
        }
        assert!(intra_wins >= 9, "intra < inter in only {intra_wins}/10 trials");
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let stack = two_phase_stack(0.0, 13);
        let a0 = sample_states(1, 14).remove(0);
        let a = perturb_rollout(&stack, &a0, 1, 0.1, 5).unwrap();
        let b = perturb_rollout(&stack, &a0, 1, 0.1, 5).unwrap();
        assert_eq!(a.perturbed_final, b.perturbed_final);
    }
}
