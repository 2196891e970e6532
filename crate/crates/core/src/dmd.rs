//! Exact Dynamic Mode Decomposition of depth trajectories.
//!
//! Given a state sequence `x_0..x_L`, stack `X1 = [x_0..x_{L-1}]` and
//! `X2 = [x_1..x_L]` as columns and fit the best rank-r linear depth-step
//! map `X2 ≈ A X1` through the truncated SVD of `X1`:
//!
//! ```text
//! A~  = Ur^T X2 Vr Σr^-1          (reduced operator, r x r)
//! A~ W = W Λ                       (eigendecomposition)
//! Φ   = X2 Vr Σr^-1 W              (exact modes, d x r)
//! b   = Φ^+ x_0                    (amplitudes)
//! x_t ≈ Φ Λ^t b
//! ```
//!
//! No affine offset is fitted. In the analysis pipeline the states are
//! group-averaged and L2-normalized first, so eigenvalue moduli measure
//! contraction on the unit sphere and arguments measure per-layer rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eig_general, svd, Complex, ComplexMatrix, Matrix};
use crate::traj::{RoleSet, TokenRole, TrajectoryTensor};

/// Default truncation rank for depth-trajectory fits.
pub const DEFAULT_RANK: usize = 10;

/// Rank-r linear depth-step model.
#[derive(Clone, Debug)]
pub struct DmdModel {
    pub rank: usize,
    /// Sorted by descending modulus; conjugate pairs adjacent, positive
    /// imaginary part first.
    pub eigenvalues: Vec<Complex>,
    /// Exact DMD modes, `dim x rank`.
    pub modes: ComplexMatrix,
    /// Modal amplitudes for the initial state.
    pub amplitudes: Vec<Complex>,
    /// Reduced operator, `rank x rank`.
    pub reduced_op: Matrix,
    /// Full singular spectrum of `X1`, nonincreasing.
    pub singular_values: Vec<f64>,
}

/// Serialization shape for [`DmdModel`]: complex values as `[re, im]` pairs,
/// modes row-major.
#[derive(Serialize, Deserialize)]
pub struct DmdModelJson {
    pub rank: usize,
    pub eigenvalues: Vec<Complex>,
    pub amplitudes: Vec<Complex>,
    pub reduced_op: Matrix,
    pub singular_values: Vec<f64>,
    pub modes: Vec<Vec<Complex>>,
}

impl DmdModel {
    pub fn to_json_value(&self) -> DmdModelJson {
        let d = self.modes.rows();
        let modes = (0..d)
            .map(|i| (0..self.rank).map(|j| self.modes.get(i, j)).collect())
            .collect();
        DmdModelJson {
            rank: self.rank,
            eigenvalues: self.eigenvalues.clone(),
            amplitudes: self.amplitudes.clone(),
            reduced_op: self.reduced_op.clone(),
            singular_values: self.singular_values.clone(),
            modes,
        }
    }
}

/// Group state sequences: per sample, the role-averaged and L2-normalized
/// state at every layer.
///
/// `out[sample][layer]` is a unit vector of length `dim`.
pub fn group_average(t: &TrajectoryTensor, role: TokenRole) -> Result<Vec<Vec<Vec<f64>>>> {
    let tokens = t.tokens_with_roles(RoleSet::only(role));
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectory has no {role} tokens"
        )));
    }
    let dim = t.dim();
    let mut out = Vec::with_capacity(t.n_samples());
    for s in 0..t.n_samples() {
        let mut per_layer = Vec::with_capacity(t.n_layers());
        for l in 0..t.n_layers() {
            let mut mean = vec![0.0; dim];
            for &tok in &tokens {
                for (m, v) in mean.iter_mut().zip(t.token_state(s, l, tok)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= tokens.len() as f64;
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero-norm group average at sample {s}, layer {l}, role {role}"
                )));
            }
            for m in mean.iter_mut() {
                *m /= norm;
            }
            per_layer.push(mean);
        }
        out.push(per_layer);
    }
    Ok(out)
}

/// Fits exact DMD to one state sequence `x_0..x_L`.
pub fn fit_dmd(states: &[Vec<f64>], rank: usize) -> Result<DmdModel> {
    if states.len() < 2 {
        return Err(Error::InvalidArgument(
            "dmd needs at least two states".into(),
        ));
    }
    let steps = states.len() - 1;
    let pairs: Vec<(&[f64], &[f64])> = (0..steps)
        .map(|i| (states[i].as_slice(), states[i + 1].as_slice()))
        .collect();
    fit_dmd_pairs(&pairs, rank, &states[0])
}

/// Fits exact DMD to snapshot pairs pooled from any number of sequences.
///
/// `x0` anchors the modal amplitudes.
pub fn fit_dmd_pairs(
    pairs: &[(&[f64], &[f64])],
    rank: usize,
    x0: &[f64],
) -> Result<DmdModel> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dmd needs at least one pair".into()));
    }
    let dim = pairs[0].0.len();
    if rank == 0 || rank > pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "dmd rank must satisfy 1 <= r <= {} snapshot pairs, got {rank}",
            pairs.len()
        )));
    }

    let cols = pairs.len();
    let x1 = Matrix::from_fn(dim, cols, |i, j| pairs[j].0[i]);
    let x2 = Matrix::from_fn(dim, cols, |i, j| pairs[j].1[i]);

    let decomp = svd(&x1)?;
    let numerical_rank = decomp.numerical_rank();
    if rank > numerical_rank {
        return Err(Error::Numerical(format!(
            "requested dmd rank {rank} exceeds numerical rank {numerical_rank} of X1"
        )));
    }

    // B = X2 Vr Σr^-1 (d x r), shared by the reduced operator and the modes.
    let mut b_mat = Matrix::zeros(dim, rank);
    for r in 0..rank {
        let inv_sigma = 1.0 / decomp.sigma[r];
        for i in 0..dim {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += x2.get(i, j) * decomp.v.get(j, r);
            }
            b_mat.set(i, r, acc * inv_sigma);
        }
    }
    // A~ = Ur^T B (r x r).
    let reduced_op = Matrix::from_fn(rank, rank, |i, j| {
        (0..dim).map(|k| decomp.u.get(k, i) * b_mat.get(k, j)).sum()
    });

    let eigen = eig_general(&reduced_op)?;

    // Sort by descending modulus, conjugate pairs kept adjacent with the
    // positive-imaginary member first.
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| {
        let (za, zb) = (eigen.values[a], eigen.values[b]);
        zb.abs()
            .partial_cmp(&za.abs())
            .unwrap()
            .then(zb.re.partial_cmp(&za.re).unwrap())
            .then(zb.im.partial_cmp(&za.im).unwrap())
    });
    let eigenvalues: Vec<Complex> = order.iter().map(|&i| eigen.values[i]).collect();
    let mut w = ComplexMatrix::zeros(rank, rank);
    for (new, &old) in order.iter().enumerate() {
        for i in 0..rank {
            w.set(i, new, eigen.vectors.get(i, old));
        }
    }

    // Exact modes Φ = B W.
    let modes = b_mat.matmul_complex(&w);

    // Amplitudes b = Φ^+ x0 via the normal equations (modes have full column
    // rank for any usable fit).
    let gram = modes.hermitian().matmul(&modes);
    let x0c: Vec<Complex> = x0.iter().map(|&v| Complex::from_real(v)).collect();
    let rhs = {
        let mh = modes.hermitian();
        mh.mul_vec(&x0c)
    };
    let amplitudes = gram.solve(&rhs).map_err(|_| {
        Error::Numerical("dmd modes are rank-deficient; cannot compute amplitudes".into())
    })?;

    Ok(DmdModel {
        rank,
        eigenvalues,
        modes,
        amplitudes,
        reduced_op,
        singular_values: decomp.sigma,
    })
}

/// `t`-step prediction `Φ Λ^t b`. For trajectories fitted on real data the
/// imaginary parts cancel to rounding level.
pub fn predict(m: &DmdModel, t: usize) -> Vec<Complex> {
    let mut coeffs = m.amplitudes.clone();
    for (c, &lambda) in coeffs.iter_mut().zip(&m.eigenvalues) {
        let mut pow = Complex::ONE;
        for _ in 0..t {
            pow = pow * lambda;
        }
        *c = *c * pow;
    }
    m.modes.mul_vec(&coeffs)
}

/// Real part of a prediction, with the largest imaginary residue reported.
pub fn predict_real(m: &DmdModel, t: usize) -> (Vec<f64>, f64) {
    let z = predict(m, t);
    let max_im = z.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    (z.iter().map(|v| v.re).collect(), max_im)
}

/// One-step residual `|X2 - A_r X1|_F` of the rank-r fit on a sequence.
pub fn one_step_residual(states: &[Vec<f64>], rank: usize) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::InvalidArgument(
            "residual needs at least two states".into(),
        ));
    }
    let dim = states[0].len();
    let cols = states.len() - 1;
    let x1 = Matrix::from_fn(dim, cols, |i, j| states[j][i]);
    let x2 = Matrix::from_fn(dim, cols, |i, j| states[j + 1][i]);
    let decomp = svd(&x1)?;
    if rank > decomp.numerical_rank() {
        return Err(Error::Numerical(format!(
            "rank {rank} exceeds numerical rank {}",
            decomp.numerical_rank()
        )));
    }
    // A_r X1 = X2 Vr Vr^T: each column of X2 projected onto the top-r right
    // singular subspace. Precompute C = X2 Vr once.
    let c_mat = Matrix::from_fn(dim, rank, |i, r| {
        (0..cols).map(|c| x2.get(i, c) * decomp.v.get(c, r)).sum()
    });
    let mut resid_sq = 0.0;
    for j in 0..cols {
        for i in 0..dim {
            let mut proj = 0.0;
            for r in 0..rank {
                proj += c_mat.get(i, r) * decomp.v.get(j, r);
            }
            let diff = x2.get(i, j) - proj;
            resid_sq += diff * diff;
        }
    }
    Ok(resid_sq.sqrt())
}

/// Pools eigenvalues across per-sample fits (or a single pooled fit) for one
/// role, the input to the eigenvalue-cloud plot.
pub fn eigencloud(
    t: &TrajectoryTensor,
    role: TokenRole,
    rank: usize,
    pooled: bool,
) -> Result<Vec<Complex>> {
    let sequences = group_average(t, role)?;
    if pooled {
        let mut pairs = Vec::new();
        for seq in &sequences {
            for i in 0..seq.len() - 1 {
                pairs.push((seq[i].as_slice(), seq[i + 1].as_slice()));
            }
        }
        let model = fit_dmd_pairs(&pairs, rank, &sequences[0][0])?;
        Ok(model.eigenvalues)
    } else {
        let mut all = Vec::with_capacity(sequences.len() * rank);
        for seq in &sequences {
            let model = fit_dmd(seq, rank)?;
            all.extend(model.eigenvalues);
        }
        Ok(all)
    }
}
