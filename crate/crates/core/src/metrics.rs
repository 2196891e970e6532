//! Per-layer dynamical metrics on normalized depth trajectories.
//!
//! States are studied on the unit sphere: directional convergence `gamma`
//! (cosine to the terminal state), angular speed (arccos of consecutive
//! cosines), stable/effective rank of the stacked update matrix, patch
//! coherence, and the teacher-student alignment R².
//!
//! Aggregation order everywhere: per-sample per-token values are averaged
//! within a role per sample first, then across samples.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::traj::{RoleSet, TokenRole, TrajectoryTensor};

/// Tolerance for inner products straying past +-1 before arccos; beyond this
/// the data is treated as corrupt.
const ACOS_SLACK: f64 = 1e-9;

/// Per-role series of per-layer values, roles in fixed cls/register/patch
/// order (present roles only).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoleSeries {
    pub role: TokenRole,
    pub values: Vec<f64>,
}

/// Cosine of two equal-length vectors. Bitwise-identical inputs short-circuit
/// to exactly 1.
fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a == b {
        return Some(1.0);
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

fn clamped_acos(v: f64) -> Result<f64> {
    if v.abs() > 1.0 + ACOS_SLACK {
        return Err(Error::InvalidData(format!(
            "inner product {v} exceeds [-1, 1] beyond tolerance"
        )));
    }
    Ok(v.clamp(-1.0, 1.0).acos())
}

/// Divides every token state by its Euclidean norm.
pub fn normalize_states(t: &TrajectoryTensor) -> Result<TrajectoryTensor> {
    let mut data = Vec::with_capacity(t.data().len());
    for s in 0..t.n_samples() {
        for l in 0..t.n_layers() {
            for tok in 0..t.n_tokens() {
                let x = t.token_state(s, l, tok);
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNormState {
                        sample: s,
                        layer: l,
                        token: tok,
                    });
                }
                data.extend(x.iter().map(|v| v / norm));
            }
        }
    }
    TrajectoryTensor::new(
        t.n_samples(),
        t.n_layers(),
        t.n_tokens(),
        t.dim(),
        t.roles().to_vec(),
        data,
    )
}

/// Roles present in the tensor, in cls/register/patch order.
pub fn present_roles(t: &TrajectoryTensor) -> Vec<TokenRole> {
    TokenRole::ALL
        .iter()
        .copied()
        .filter(|r| t.roles().contains(r))
        .collect()
}

/// Per-role mean of a per-token quantity, aggregated per sample first.
fn aggregate_by_role(
    t: &TrajectoryTensor,
    mut value: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<Vec<(TokenRole, f64)>> {
    let mut out = Vec::new();
    for role in present_roles(t) {
        let tokens = t.tokens_with_roles(RoleSet::only(role));
        let mut sample_mean_sum = 0.0;
        for s in 0..t.n_samples() {
            let mut acc = 0.0;
            for &tok in &tokens {
                acc += value(s, tok)?;
            }
            sample_mean_sum += acc / tokens.len() as f64;
        }
        out.push((role, sample_mean_sum / t.n_samples() as f64));
    }
    Ok(out)
}

/// Directional convergence `gamma_l`: cosine between each token's state at
/// layer `l` and its final state. The final layer is exactly 1.
pub fn directional_convergence(t: &TrajectoryTensor) -> Result<Vec<RoleSeries>> {
    let last = t.n_layers() - 1;
    let roles = present_roles(t);
    let mut series: Vec<RoleSeries> = roles
        .iter()
        .map(|&role| RoleSeries {
            role,
            values: Vec::with_capacity(t.n_layers()),
        })
        .collect();
    for l in 0..t.n_layers() {
        let by_role = aggregate_by_role(t, |s, tok| {
            cosine(t.token_state(s, l, tok), t.token_state(s, last, tok)).ok_or(
                Error::ZeroNormState {
                    sample: s,
                    layer: l,
                    token: tok,
                },
            )
        })?;
        for (i, (_, v)) in by_role.into_iter().enumerate() {
            series[i].values.push(v);
        }
    }
    Ok(series)
}

/// Angular speed `s_l = arccos <x_{l+1}, x_l>` per layer `l < L`, in radians.
pub fn angular_speed(t: &TrajectoryTensor) -> Result<Vec<RoleSeries>> {
    let roles = present_roles(t);
    let mut series: Vec<RoleSeries> = roles
        .iter()
        .map(|&role| RoleSeries {
            role,
            values: Vec::with_capacity(t.depth()),
        })
        .collect();
    for l in 0..t.depth() {
        let by_role = aggregate_by_role(t, |s, tok| {
            let c = cosine(t.token_state(s, l, tok), t.token_state(s, l + 1, tok)).ok_or(
                Error::ZeroNormState {
                    sample: s,
                    layer: l,
                    token: tok,
                },
            )?;
            clamped_acos(c)
        })?;
        for (i, (_, v)) in by_role.into_iter().enumerate() {
            series[i].values.push(v);
        }
    }
    Ok(series)
}

/// Stacks normalized-update rows `x̂_{l+1} - x̂_l` for every selected token
/// across all samples.
fn update_matrix(t: &TrajectoryTensor, layer: usize, roles: RoleSet) -> Result<Matrix> {
    if layer + 1 >= t.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "update at layer {layer} needs layer {} to exist",
            layer + 1
        )));
    }
    let tokens = t.tokens_with_roles(roles);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "role set selects no tokens".into(),
        ));
    }
    let mut rows = Vec::with_capacity(t.n_samples() * tokens.len());
    for s in 0..t.n_samples() {
        for &tok in &tokens {
            let a = t.token_state(s, layer, tok);
            let b = t.token_state(s, layer + 1, tok);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNormState {
                    sample: s,
                    layer: if na == 0.0 { layer } else { layer + 1 },
                    token: tok,
                });
            }
            rows.push(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| y / nb - x / na)
                    .collect::<Vec<f64>>(),
            );
        }
    }
    Matrix::from_rows(&rows)
}

/// Stable and entropy-based effective rank of a stacked update matrix.
pub fn rank_of_update_matrix(u: &Matrix) -> Result<(f64, f64)> {
    let fro_sq: f64 = u.data().iter().map(|v| v * v).sum();
    if fro_sq == 0.0 {
        return Err(Error::Degenerate(
            "update matrix is zero; rank undefined".into(),
        ));
    }
    let decomp = svd(u)?;
    let smax = decomp.sigma[0];
    let stable = fro_sq / (smax * smax);

    let total: f64 = decomp.sigma.iter().sum();
    let mut entropy = 0.0;
    for &s in &decomp.sigma {
        if s > 0.0 {
            let p = s / total;
            entropy -= p * p.ln();
        }
    }
    Ok((stable, entropy.exp()))
}

/// Ranks of the update matrix at `layer` for the selected roles.
pub fn update_rank(t: &TrajectoryTensor, layer: usize, roles: RoleSet) -> Result<(f64, f64)> {
    rank_of_update_matrix(&update_matrix(t, layer, roles)?)
}

/// Patch coherence `kappa_l`: mean cosine between individual patch-token
/// updates and their mean update direction, per sample, then averaged over
/// samples.
pub fn coherence(t: &TrajectoryTensor, layer: usize) -> Result<f64> {
    if layer + 1 >= t.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "coherence at layer {layer} needs layer {} to exist",
            layer + 1
        )));
    }
    let patches = t.tokens_with_roles(RoleSet::only(TokenRole::Patch));
    if patches.is_empty() {
        return Err(Error::InvalidArgument(
            "coherence requires patch tokens".into(),
        ));
    }
    let dim = t.dim();
    let mut acc = 0.0;
    for s in 0..t.n_samples() {
        let mut deltas = Vec::with_capacity(patches.len());
        for &tok in &patches {
            let a = t.token_state(s, layer, tok);
            let b = t.token_state(s, layer + 1, tok);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNormState {
                    sample: s,
                    layer: if na == 0.0 { layer } else { layer + 1 },
                    token: tok,
                });
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y / nb - x / na).collect();
            if d.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!(
                    "zero patch update at sample {s}, layer {layer}, token {tok}"
                )));
            }
            deltas.push(d);
        }
        let mut mean = vec![0.0; dim];
        for d in &deltas {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= deltas.len() as f64;
        }
        if mean.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!(
                "mean patch update direction degenerate at sample {s}, layer {layer}"
            )));
        }
        let mut kappa = 0.0;
        for d in &deltas {
            kappa += cosine(d, &mean).expect("norms checked above");
        }
        acc += kappa / deltas.len() as f64;
    }
    Ok(acc / t.n_samples() as f64)
}

/// Teacher-student alignment R² at one layer.
///
/// Each selected student token vector is regressed onto the matching teacher
/// vector by 1-D ordinary least squares with bias (a pure rescale and shift);
/// the returned value is the mean R² over tokens and samples, clipped below
/// at zero.
pub fn alignment_r2(
    student: &TrajectoryTensor,
    teacher: &TrajectoryTensor,
    roles: RoleSet,
    layer: usize,
) -> Result<f64> {
    if student.n_samples() != teacher.n_samples()
        || student.n_layers() != teacher.n_layers()
        || student.n_tokens() != teacher.n_tokens()
        || student.dim() != teacher.dim()
        || student.roles() != teacher.roles()
    {
        return Err(Error::InvalidArgument(
            "student and teacher shapes differ".into(),
        ));
    }
    if layer >= student.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range"
        )));
    }
    let tokens = student.tokens_with_roles(roles);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("role set selects no tokens".into()));
    }
    let mut sample_mean_sum = 0.0;
    for s in 0..student.n_samples() {
        let mut acc = 0.0;
        for &tok in &tokens {
            let sv = student.token_state(s, layer, tok);
            let tv = teacher.token_state(s, layer, tok);
            acc += r2_rescale_shift(sv, tv);
        }
        sample_mean_sum += acc / tokens.len() as f64;
    }
    Ok(sample_mean_sum / student.n_samples() as f64)
}

/// R² of the best 1-D affine fit from `x` to `y`, in `[0, 1]`.
fn r2_rescale_shift(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut ss_tot = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        cov += (xi - mean_x) * (yi - mean_y);
        var_x += (xi - mean_x) * (xi - mean_x);
        ss_tot += (yi - mean_y) * (yi - mean_y);
    }
    let slope = if var_x > 0.0 { cov / var_x } else { 0.0 };
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let r = yi - (slope * xi + intercept);
        ss_res += r * r;
    }
    if ss_tot == 0.0 {
        // Constant teacher vector: perfect iff the fit is exact.
        let scale: f64 = y.iter().map(|v| v * v).sum::<f64>() + 1.0;
        return if ss_res <= 1e-12 * scale { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

/// One row of the dynamics report: metrics for a (layer, role) cell.
///
/// `angular_speed` and the ranks are defined for `layer < L` only;
/// `coherence` additionally only for the patch role. Cells whose value is
/// undefined on the data (zero updates) are `None`.
#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub layer: usize,
    pub role: TokenRole,
    pub mean_norm: f64,
    pub gamma: f64,
    pub angular_speed: Option<f64>,
    pub stable_rank: Option<f64>,
    pub effective_rank: Option<f64>,
    pub coherence: Option<f64>,
}

/// Full per-layer, per-role metric table.
#[derive(Clone, Debug, Serialize)]
pub struct DynamicsReport {
    pub rows: Vec<ReportRow>,
}

impl DynamicsReport {
    /// CSV with a header row; empty cells for undefined metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,role,mean_norm,gamma,angular_speed,stable_rank,effective_rank,coherence\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.layer,
                r.role,
                r.mean_norm,
                r.gamma,
                fmt(r.angular_speed),
                fmt(r.stable_rank),
                fmt(r.effective_rank),
                fmt(r.coherence),
            ));
        }
        out
    }
}

/// Computes the full metric suite for a trajectory.
pub fn build_report(t: &TrajectoryTensor) -> Result<DynamicsReport> {
    let gammas = directional_convergence(t)?;
    let speeds = angular_speed(t)?;
    let roles = present_roles(t);
    let mut rows = Vec::new();
    for l in 0..t.n_layers() {
        for (ri, &role) in roles.iter().enumerate() {
            let mean_norm = aggregate_by_role(t, |s, tok| {
                Ok(t.token_state(s, l, tok)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt())
            })?
            .into_iter()
            .find(|(r, _)| *r == role)
            .map(|(_, v)| v)
            .unwrap();
            let is_interior = l + 1 < t.n_layers();
            let (stable, effective) = if is_interior {
                match update_rank(t, l, RoleSet::only(role)) {
                    Ok((s, e)) => (Some(s), Some(e)),
                    Err(Error::Degenerate(_)) => (None, None),
                    Err(e) => return Err(e),
                }
            } else {
                (None, None)
            };
            let coh = if is_interior && role == TokenRole::Patch {
                match coherence(t, l) {
                    Ok(v) => Some(v),
                    Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            rows.push(ReportRow {
                layer: l,
                role,
                mean_norm,
                gamma: gammas[ri].values[l],
                angular_speed: is_interior.then(|| speeds[ri].values[l]),
                stable_rank: stable,
                effective_rank: effective,
                coherence: coh,
            });
        }
    }
    Ok(DynamicsReport { rows })
}
