//! Differentiable depth-step blocks.
//!
//! Two families, both cheap enough for exact analytic gradients:
//!
//! - `affine`: `y = W x + b`
//! - `gated_mlp`: `y = x + W2 tanh(W1 x + b1) + b2` (residual)
//!
//! With depth scaling enabled, a block additionally owns one learned scale
//! vector per target layer of its segment, and the output becomes
//! `y = x + s .* u(x)` where `u` is the block's residual update
//! (`W x + b - x` for affine, the MLP branch for gated).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::CounterRng;

/// Parameters of the core map, without depth scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BlockCore {
    Affine {
        weight: Matrix,
        bias: Vec<f64>,
    },
    GatedMlp {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
    },
}

/// Block family tag, used in configs and checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    Affine,
    GatedMlp,
}

/// One parameter-tied block plus its optional per-target-layer scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    #[serde(flatten)]
    pub core: BlockCore,
    /// `depth_scale[rep]` multiplies the residual update when this block is
    /// applied to produce the `rep`-th layer of its segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<Vec<Vec<f64>>>,
}

/// Intermediates captured during a forward pass, consumed by backprop.
#[derive(Clone, Debug)]
pub(crate) struct BlockTape {
    pub input: Vec<f64>,
    /// tanh activations, gated family only.
    pub act: Option<Vec<f64>>,
    /// Residual update `u(x)`, stored when depth scaling is enabled.
    pub update: Option<Vec<f64>>,
}

impl BlockParams {
    pub fn family(&self) -> BlockFamily {
        match self.core {
            BlockCore::Affine { .. } => BlockFamily::Affine,
            BlockCore::GatedMlp { .. } => BlockFamily::GatedMlp,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.core {
            BlockCore::Affine { weight, .. } => weight.rows(),
            BlockCore::GatedMlp { w2, .. } => w2.rows(),
        }
    }

    pub fn hidden(&self) -> usize {
        match &self.core {
            BlockCore::Affine { .. } => 0,
            BlockCore::GatedMlp { w1, .. } => w1.rows(),
        }
    }

    /// Identity-map block of the given family.
    pub fn identity(family: BlockFamily, dim: usize, hidden: usize) -> Self {
        let core = match family {
            BlockFamily::Affine => BlockCore::Affine {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
            },
            BlockFamily::GatedMlp => BlockCore::GatedMlp {
                w1: Matrix::zeros(hidden, dim),
                b1: vec![0.0; hidden],
                w2: Matrix::zeros(dim, hidden),
                b2: vec![0.0; dim],
            },
        };
        Self {
            core,
            depth_scale: None,
        }
    }

    /// Near-identity seeded initialization; the starting point for training.
    pub fn init(
        family: BlockFamily,
        dim: usize,
        hidden: usize,
        depth_scale_len: Option<usize>,
        rng: &mut CounterRng,
    ) -> Self {
        let core = match family {
            BlockFamily::Affine => {
                let jitter = 0.02 / (dim as f64).sqrt();
                let mut weight = Matrix::from_fn(dim, dim, |_, _| jitter * rng.next_normal());
                for i in 0..dim {
                    weight.set(i, i, weight.get(i, i) + 1.0);
                }
                BlockCore::Affine {
                    weight,
                    bias: vec![0.0; dim],
                }
            }
            BlockFamily::GatedMlp => {
                let s1 = 1.0 / (dim as f64).sqrt();
                let s2 = 0.01 / (hidden as f64).sqrt();
                BlockCore::GatedMlp {
                    w1: Matrix::from_fn(hidden, dim, |_, _| s1 * rng.next_normal()),
                    b1: vec![0.0; hidden],
                    w2: Matrix::from_fn(dim, hidden, |_, _| s2 * rng.next_normal()),
                    b2: vec![0.0; dim],
                }
            }
        };
        Self {
            core,
            depth_scale: depth_scale_len.map(|len| vec![vec![1.0; dim]; len]),
        }
    }

    /// Seeded random block with a roughly contractive spectrum, for
    /// synthetic teachers.
    pub fn random_teacher(
        family: BlockFamily,
        dim: usize,
        hidden: usize,
        strength: f64,
        rng: &mut CounterRng,
    ) -> Self {
        let core = match family {
            BlockFamily::Affine => {
                let jitter = strength / (dim as f64).sqrt();
                let mut weight = Matrix::from_fn(dim, dim, |_, _| jitter * rng.next_normal());
                for i in 0..dim {
                    weight.set(i, i, weight.get(i, i) + 1.0 - 0.5 * strength);
                }
                BlockCore::Affine {
                    weight,
                    bias: (0..dim).map(|_| 0.1 * strength * rng.next_normal()).collect(),
                }
            }
            BlockFamily::GatedMlp => {
                let s1 = 1.0 / (dim as f64).sqrt();
                let s2 = strength / (hidden as f64).sqrt();
                BlockCore::GatedMlp {
                    w1: Matrix::from_fn(hidden, dim, |_, _| s1 * rng.next_normal()),
                    b1: (0..hidden).map(|_| 0.1 * rng.next_normal()).collect(),
                    w2: Matrix::from_fn(dim, hidden, |_, _| s2 * rng.next_normal()),
                    b2: (0..dim).map(|_| 0.05 * strength * rng.next_normal()).collect(),
                }
            }
        };
        Self {
            core,
            depth_scale: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let check_vec = |v: &[f64], len: usize, what: &str| -> Result<()> {
            if v.len() != len {
                return Err(Error::InvalidData(format!(
                    "{what} length {} does not match {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite entry in {what}")));
            }
            Ok(())
        };
        match &self.core {
            BlockCore::Affine { weight, bias } => {
                if weight.rows() != dim || weight.cols() != dim {
                    return Err(Error::InvalidData(format!(
                        "affine weight is {}x{}, expected {dim}x{dim}",
                        weight.rows(),
                        weight.cols()
                    )));
                }
                check_vec(bias, dim, "affine bias")?;
            }
            BlockCore::GatedMlp { w1, b1, w2, b2 } => {
                let hidden = w1.rows();
                if hidden == 0 {
                    return Err(Error::InvalidData("gated-mlp hidden width is 0".into()));
                }
                if w1.cols() != dim || w2.rows() != dim || w2.cols() != hidden {
                    return Err(Error::InvalidData(format!(
                        "gated-mlp shapes w1 {}x{}, w2 {}x{} inconsistent with dim {dim}",
                        w1.rows(),
                        w1.cols(),
                        w2.rows(),
                        w2.cols()
                    )));
                }
                check_vec(b1, hidden, "gated-mlp b1")?;
                check_vec(b2, dim, "gated-mlp b2")?;
            }
        }
        if let Some(scales) = &self.depth_scale {
            for (i, s) in scales.iter().enumerate() {
                check_vec(s, dim, &format!("depth scale {i}"))?;
            }
        }
        Ok(())
    }

    /// Applies the block to `n_tokens` stacked token states of width `dim`.
    ///
    /// `rep` selects this application's depth-scale vector (its position
    /// within the block's segment); ignored when depth scaling is off.
    pub fn forward(&self, x: &[f64], n_tokens: usize, dim: usize, rep: usize) -> Vec<f64> {
        self.forward_impl(x, n_tokens, dim, rep, false).0
    }

    pub(crate) fn forward_with_tape(
        &self,
        x: &[f64],
        n_tokens: usize,
        dim: usize,
        rep: usize,
    ) -> (Vec<f64>, BlockTape) {
        let (y, tape) = self.forward_impl(x, n_tokens, dim, rep, true);
        (y, tape.expect("tape requested"))
    }

    #[allow(clippy::needless_range_loop)]
    fn forward_impl(
        &self,
        x: &[f64],
        n_tokens: usize,
        dim: usize,
        rep: usize,
        want_tape: bool,
    ) -> (Vec<f64>, Option<BlockTape>) {
        assert_eq!(x.len(), n_tokens * dim, "state length");
        let scale = self
            .depth_scale
            .as_ref()
            .map(|s| s[rep].as_slice());

        let mut y = vec![0.0; x.len()];
        let mut act_tape = None;
        let mut update_tape = None;

        match &self.core {
            BlockCore::Affine { weight, bias } => {
                for t in 0..n_tokens {
                    let xt = &x[t * dim..(t + 1) * dim];
                    let yt = &mut y[t * dim..(t + 1) * dim];
                    for i in 0..dim {
                        let mut acc = bias[i];
                        let row = weight.row(i);
                        for (w, xv) in row.iter().zip(xt) {
                            acc += w * xv;
                        }
                        yt[i] = acc;
                    }
                }
                if let Some(s) = scale {
                    // y currently holds W x + b; rewrite as x + s .* (W x + b - x).
                    let mut update = vec![0.0; x.len()];
                    for t in 0..n_tokens {
                        for i in 0..dim {
                            let idx = t * dim + i;
                            let u = y[idx] - x[idx];
                            update[idx] = u;
                            y[idx] = x[idx] + s[i] * u;
                        }
                    }
                    update_tape = Some(update);
                }
            }
            BlockCore::GatedMlp { w1, b1, w2, b2 } => {
                let hidden = w1.rows();
                let mut acts = vec![0.0; n_tokens * hidden];
                for t in 0..n_tokens {
                    let xt = &x[t * dim..(t + 1) * dim];
                    let at = &mut acts[t * hidden..(t + 1) * hidden];
                    for h in 0..hidden {
                        let mut acc = b1[h];
                        let row = w1.row(h);
                        for (w, xv) in row.iter().zip(xt) {
                            acc += w * xv;
                        }
                        at[h] = acc.tanh();
                    }
                    let yt = &mut y[t * dim..(t + 1) * dim];
                    for i in 0..dim {
                        let mut u = b2[i];
                        let row = w2.row(i);
                        for (w, av) in row.iter().zip(at.iter()) {
                            u += w * av;
                        }
                        yt[i] = u;
                    }
                }
                // y currently holds the MLP branch u(x).
                if scale.is_some() || want_tape {
                    update_tape = Some(y.clone());
                }
                match scale {
                    Some(s) => {
                        for t in 0..n_tokens {
                            for i in 0..dim {
                                let idx = t * dim + i;
                                y[idx] = x[idx] + s[i] * y[idx];
                            }
                        }
                    }
                    None => {
                        for (yi, xi) in y.iter_mut().zip(x) {
                            *yi += xi;
                        }
                    }
                }
                act_tape = Some(acts);
            }
        }

        let tape = want_tape.then(|| BlockTape {
            input: x.to_vec(),
            act: act_tape,
            update: update_tape,
        });
        (y, tape)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_is_identity() {
        let b = BlockParams::identity(BlockFamily::Affine, 3, 0);
        let x = vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0];
        assert_eq!(b.forward(&x, 2, 3, 0), x);
    }

    #[test]
    fn affine_halving() {
        let b = BlockParams {
            core: BlockCore::Affine {
                weight: Matrix::identity(2).scaled(0.5),
                bias: vec![0.0, 0.0],
            },
            depth_scale: None,
        };
        assert_eq!(b.forward(&[2.0, 2.0], 1, 2, 0), vec![1.0, 1.0]);
    }

    #[test]
    fn gated_mlp_matches_direct_formula() {
        let mut rng = CounterRng::new(31);
        let dim = 4;
        let hidden = 6;
        let b = BlockParams::random_teacher(BlockFamily::GatedMlp, dim, hidden, 0.7, &mut rng);
        let x: Vec<f64> = (0..2 * dim).map(|_| rng.next_normal()).collect();
        let y = b.forward(&x, 2, dim, 0);

        // Second, direct evaluation of x + W2 tanh(W1 x + b1) + b2.
        let BlockCore::GatedMlp { w1, b1, w2, b2 } = &b.core else {
            unreachable!()
        };
        for t in 0..2 {
            let xt = &x[t * dim..(t + 1) * dim];
            for i in 0..dim {
                let mut u = b2[i];
                for h in 0..hidden {
                    let mut pre = b1[h];
                    for j in 0..dim {
                        pre += w1.get(h, j) * xt[j];
                    }
                    u += w2.get(i, h) * pre.tanh();
                }
                let want = xt[i] + u;
                assert!((y[t * dim + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_scale_gates_the_update() {
        let mut b = BlockParams {
            core: BlockCore::Affine {
                weight: Matrix::identity(2).scaled(0.5),
                bias: vec![1.0, 0.0],
            },
            depth_scale: Some(vec![vec![0.0, 1.0]]),
        };
        // Update is (0, -1); s = (0, 1) passes only the second coordinate.
        let y = b.forward(&[2.0, 2.0], 1, 2, 0);
        assert_eq!(y, vec![2.0, 1.0]);

        // All-ones scale reproduces the unscaled map on this input.
        b.depth_scale = Some(vec![vec![1.0, 1.0]]);
        let y = b.forward(&[2.0, 2.0], 1, 2, 0);
        assert_eq!(y, vec![2.0, 1.0]);
    }

    #[test]
    fn validate_catches_shape_mismatch() {
        let b = BlockParams::identity(BlockFamily::Affine, 3, 0);
        assert!(b.validate(3).is_ok());
        assert!(b.validate(4).is_err());
    }
}
