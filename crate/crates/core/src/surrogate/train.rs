//! Hybrid teacher-forcing/autoregressive training.
//!
//! The per-layer loop follows the hybrid objective exactly: at every target
//! layer the block is applied twice, once to the ground-truth previous layer
//! (teacher forcing) and once to its own carried prediction (autoregressive),
//! and the two token-weighted squared-Frobenius errors are mixed by `lambda`.
//! Gradients are computed analytically by reverse accumulation through the
//! full autoregressive chain; `Omega` is L2 weight decay.
//!
//! Stage 1 trains each block independently on its segment, with the segment's
//! ground-truth start layer as input. Stage 2 connects the blocks and trains
//! end-to-end with `lambda = 0`.

use crate::error::{Error, Result};
use crate::traj::{TokenRole, TrajectoryTensor};

use super::block::{BlockCore, BlockParams, BlockTape};
use super::{ArchConfig, Stage, SurrogateModel, TokenWeights, TrainConfig};

/// Token-weighted squared Frobenius distance between two layer states.
fn weighted_sq_dist(
    pred: &[f64],
    target: &[f64],
    roles: &[TokenRole],
    weights: &TokenWeights,
    dim: usize,
) -> f64 {
    let mut acc = 0.0;
    for (t, role) in roles.iter().enumerate() {
        let w = weights.for_role(*role);
        if w == 0.0 {
            continue;
        }
        let mut sq = 0.0;
        for i in t * dim..(t + 1) * dim {
            let d = pred[i] - target[i];
            sq += d * d;
        }
        acc += w * sq;
    }
    acc
}

/// Accumulates `factor * d dist / d pred` into `grad`.
fn dist_grad_into(
    pred: &[f64],
    target: &[f64],
    roles: &[TokenRole],
    weights: &TokenWeights,
    dim: usize,
    factor: f64,
    grad: &mut [f64],
) {
    for (t, role) in roles.iter().enumerate() {
        let w = weights.for_role(*role);
        if w == 0.0 {
            continue;
        }
        let c = 2.0 * w * factor;
        for i in t * dim..(t + 1) * dim {
            grad[i] += c * (pred[i] - target[i]);
        }
    }
}

/// Reverse pass through one block application.
///
/// `grad_params` is the block's flat gradient slice (layout matching the
/// parameter flattening); input gradients are written to `grad_in` when
/// requested.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn backward_block(
    block: &BlockParams,
    tape: &BlockTape,
    rep: usize,
    n_tokens: usize,
    dim: usize,
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_params: &mut [f64],
) {
    let x = &tape.input;
    let scale = block.depth_scale.as_ref().map(|s| s[rep].as_slice());
    if let Some(g) = grad_in.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }

    match &block.core {
        BlockCore::Affine { weight, .. } => {
            let w_count = dim * dim;
            let core_count = w_count + dim;
            for t in 0..n_tokens {
                let xt = &x[t * dim..(t + 1) * dim];
                let gy = &grad_out[t * dim..(t + 1) * dim];
                // g_u fused: with scale, g_u = g_y .* s and the scale grad
                // picks up g_y .* u.
                for i in 0..dim {
                    let gu = match scale {
                        Some(s) => {
                            let u = tape.update.as_ref().expect("affine scale tape")
                                [t * dim + i];
                            grad_params[core_count + rep * dim + i] += gy[i] * u;
                            gy[i] * s[i]
                        }
                        None => gy[i],
                    };
                    if gu != 0.0 {
                        for j in 0..dim {
                            grad_params[i * dim + j] += gu * xt[j];
                        }
                        grad_params[w_count + i] += gu;
                    }
                    if let Some(g) = grad_in.as_deref_mut() {
                        let row = weight.row(i);
                        for j in 0..dim {
                            g[t * dim + j] += gu * row[j];
                        }
                        if let Some(s) = scale {
                            // y = x + s.*(Wx + b - x)
                            g[t * dim + i] += gy[i] * (1.0 - s[i]);
                        }
                    }
                }
            }
        }
        BlockCore::GatedMlp { w1, w2, .. } => {
            let hidden = w1.rows();
            let w1_count = hidden * dim;
            let b1_off = w1_count;
            let w2_off = b1_off + hidden;
            let b2_off = w2_off + dim * hidden;
            let core_count = b2_off + dim;
            let acts = tape.act.as_ref().expect("gated tape activations");
            for t in 0..n_tokens {
                let xt = &x[t * dim..(t + 1) * dim];
                let at = &acts[t * hidden..(t + 1) * hidden];
                let gy = &grad_out[t * dim..(t + 1) * dim];

                // g_u = g_y (.* s), plus the scale gradient when enabled.
                let mut gu = vec![0.0; dim];
                for i in 0..dim {
                    gu[i] = match scale {
                        Some(s) => {
                            let u = tape.update.as_ref().expect("gated update tape")
                                [t * dim + i];
                            grad_params[core_count + rep * dim + i] += gy[i] * u;
                            gy[i] * s[i]
                        }
                        None => gy[i],
                    };
                    if gu[i] != 0.0 {
                        for h in 0..hidden {
                            grad_params[w2_off + i * hidden + h] += gu[i] * at[h];
                        }
                        grad_params[b2_off + i] += gu[i];
                    }
                }
                // g_h = (W2^T g_u) .* (1 - a^2)
                let mut gh = vec![0.0; hidden];
                for h in 0..hidden {
                    let mut ga = 0.0;
                    for i in 0..dim {
                        ga += w2.get(i, h) * gu[i];
                    }
                    gh[h] = ga * (1.0 - at[h] * at[h]);
                    if gh[h] != 0.0 {
                        // w1 occupies the front of the flat layout.
                        for j in 0..dim {
                            grad_params[h * dim + j] += gh[h] * xt[j];
                        }
                        grad_params[b1_off + h] += gh[h];
                    }
                }
                if let Some(g) = grad_in.as_deref_mut() {
                    for j in 0..dim {
                        let mut acc = gy[j]; // residual path
                        for h in 0..hidden {
                            acc += w1.get(h, j) * gh[h];
                        }
                        g[t * dim + j] += acc;
                    }
                }
            }
        }
    }
}


/// Loss and gradient over target layers `lo..=hi` of one sample. Returns the
/// teacher-forcing and autoregressive sums; gradients (already mixed by
/// `lambda`) accumulate into `grad`.
#[allow(clippy::too_many_arguments)]
fn sample_range_loss_grad(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    sample: usize,
    lo: usize,
    hi: usize,
    lambda: f64,
    weights: &TokenWeights,
    grad: Option<&mut [f64]>,
) -> (f64, f64) {
    let dim = model.dim;
    let n_tokens = model.n_tokens;
    let roles = teacher.roles();
    let state_len = n_tokens * dim;

    struct LayerRecord {
        block: usize,
        rep: usize,
        out_tf: Vec<f64>,
        tape_tf: BlockTape,
        out_ar: Vec<f64>,
        tape_ar: BlockTape,
    }

    let mut records: Vec<LayerRecord> = Vec::with_capacity(hi - lo + 1);
    let mut tf_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut a_ar = teacher.state(sample, lo - 1).to_vec();
    for l in lo..=hi {
        let (j, rep) = model.block_for_layer(l);
        let block = &model.blocks[j];
        let gt_prev = teacher.state(sample, l - 1);
        let gt_next = teacher.state(sample, l);
        let (out_tf, tape_tf) = block.forward_with_tape(gt_prev, n_tokens, dim, rep);
        let (out_ar, tape_ar) = block.forward_with_tape(&a_ar, n_tokens, dim, rep);
        tf_sum += weighted_sq_dist(&out_tf, gt_next, roles, weights, dim);
        ar_sum += weighted_sq_dist(&out_ar, gt_next, roles, weights, dim);
        a_ar = out_ar.clone();
        records.push(LayerRecord {
            block: j,
            rep,
            out_tf,
            tape_tf,
            out_ar,
            tape_ar,
        });
    }

    let Some(grad) = grad else {
        return (tf_sum, ar_sum);
    };

    // Reverse sweep. The AR adjoint is carried backwards through the chain;
    // the TF branches are independent per layer.
    let mut carry = vec![0.0; state_len];
    for (idx, rec) in records.iter().enumerate().rev() {
        let l = lo + idx;
        let gt_next = teacher.state(sample, l);
        let range = model.block_range(rec.block);

        if lambda < 1.0 {
            let mut g_out = std::mem::replace(&mut carry, vec![0.0; state_len]);
            dist_grad_into(
                &rec.out_ar,
                gt_next,
                roles,
                weights,
                dim,
                1.0 - lambda,
                &mut g_out,
            );
            backward_block(
                &model.blocks[rec.block],
                &rec.tape_ar,
                rec.rep,
                n_tokens,
                dim,
                &g_out,
                Some(&mut carry),
                &mut grad[range.clone()],
            );
        }

        if lambda > 0.0 {
            let mut g_out = vec![0.0; state_len];
            dist_grad_into(
                &rec.out_tf,
                gt_next,
                roles,
                weights,
                dim,
                lambda,
                &mut g_out,
            );
            backward_block(
                &model.blocks[rec.block],
                &rec.tape_tf,
                rec.rep,
                n_tokens,
                dim,
                &g_out,
                None,
                &mut grad[range],
            );
        }
    }

    (tf_sum, ar_sum)
}

fn check_shapes(model: &SurrogateModel, teacher: &TrajectoryTensor) -> Result<()> {
    if teacher.dim() != model.dim
        || teacher.n_tokens() != model.n_tokens
        || teacher.depth() != model.depth()
    {
        return Err(Error::InvalidArgument(format!(
            "teacher ({} layers, {} tokens, dim {}) does not match model ({}, {}, {})",
            teacher.depth(),
            teacher.n_tokens(),
            teacher.dim(),
            model.depth(),
            model.n_tokens,
            model.dim
        )));
    }
    Ok(())
}

/// Hybrid loss and analytic parameter gradient for one teacher sample over
/// the full depth, including the L2 weight-decay term.
pub fn hybrid_loss(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    sample: usize,
    lambda: f64,
    weights: &TokenWeights,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(model, teacher)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    weights.validate()?;
    if sample >= teacher.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "sample {sample} out of range"
        )));
    }
    let mut grad = vec![0.0; model.param_count()];
    let (tf, ar) = sample_range_loss_grad(
        model,
        teacher,
        sample,
        1,
        model.depth(),
        lambda,
        weights,
        Some(&mut grad),
    );
    let mut loss = lambda * tf + (1.0 - lambda) * ar;
    if weight_decay > 0.0 {
        let theta = model.flatten_params();
        loss += weight_decay * theta.iter().map(|v| v * v).sum::<f64>();
        for (g, p) in grad.iter_mut().zip(&theta) {
            *g += 2.0 * weight_decay * p;
        }
    }
    Ok((loss, grad))
}

/// Mean hybrid loss and gradient over all samples, plus weight decay.
pub fn batch_hybrid_loss(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    lambda: f64,
    weights: &TokenWeights,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(model, teacher)?;
    let mut grad = vec![0.0; model.param_count()];
    let mut tf = 0.0;
    let mut ar = 0.0;
    for s in 0..teacher.n_samples() {
        let (t, a) = sample_range_loss_grad(
            model,
            teacher,
            s,
            1,
            model.depth(),
            lambda,
            weights,
            Some(&mut grad),
        );
        tf += t;
        ar += a;
    }
    let n = teacher.n_samples() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let mut loss = (lambda * tf + (1.0 - lambda) * ar) / n;
    if weight_decay > 0.0 {
        let theta = model.flatten_params();
        loss += weight_decay * theta.iter().map(|v| v * v).sum::<f64>();
        for (g, p) in grad.iter_mut().zip(&theta) {
            *g += 2.0 * weight_decay * p;
        }
    }
    Ok((loss, grad))
}

/// Relative autoregressive rollout error per layer `1..=L`, averaged over
/// samples: `|pred_l - gt_l|_F / |gt_l|_F`.
pub fn rollout_layer_errors(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
) -> Result<Vec<f64>> {
    check_shapes(model, teacher)?;
    let depth = model.depth();
    let mut acc = vec![0.0; depth];
    for s in 0..teacher.n_samples() {
        let pred = model.rollout(teacher.state(s, 0));
        for l in 1..=depth {
            let gt = teacher.state(s, l);
            let p = &pred[l - 1];
            let num: f64 = p
                .iter()
                .zip(gt)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc[l - 1] += if den > 0.0 { num / den } else { num };
        }
    }
    let n = teacher.n_samples() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// One logged training step.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainLogRow {
    pub stage: Stage,
    /// Block being trained (stage 1) or `None` for end-to-end training.
    pub block: Option<usize>,
    pub step: usize,
    pub lambda: f64,
    pub tf_loss: f64,
    pub ar_loss: f64,
    /// Relative rollout error per layer `1..=L`; cells outside the trained
    /// segment are empty during stage 1.
    pub layer_errors: Vec<Option<f64>>,
}

/// Log of a training run, plus the monitored before/after final-layer
/// rollout error on the training data.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub initial_final_layer_error: f64,
    pub final_final_layer_error: f64,
}

impl TrainLog {
    /// CSV with one row per logged step.
    pub fn to_csv(&self, depth: usize) -> String {
        let mut out = String::from("stage,block,step,lambda,tf_loss,ar_loss");
        for l in 1..=depth {
            out.push_str(&format!(",err_layer_{l}"));
        }
        out.push('\n');
        for r in &self.rows {
            let stage = match r.stage {
                Stage::Stage1 => "stage1",
                Stage::Stage2 => "stage2",
            };
            let block = r.block.map(|b| b.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{stage},{block},{},{},{},{}",
                r.step, r.lambda, r.tf_loss, r.ar_loss
            ));
            for e in &r.layer_errors {
                match e {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Gradient-descent state over a parameter subrange.
struct Descent {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
}

impl Descent {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            velocity: vec![0.0; n],
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((v, p), g) in self.velocity.iter_mut().zip(params).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Per-block training on ground-truth segment inputs (stage 1).
///
/// Each block is trained independently: its autoregressive chain starts from
/// the teacher's activation at the segment's start layer, and only that
/// block's parameters (and weight decay) enter its loss. Deterministic for a
/// fixed config and seed.
pub fn train_stage1(
    teacher: &TrajectoryTensor,
    schedule: &crate::seg::Partition,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage1 {
        return Err(Error::InvalidArgument(
            "train_stage1 requires a stage1 config".into(),
        ));
    }
    schedule.validate_cover(teacher.depth())?;
    let mut model = SurrogateModel::init(
        schedule,
        arch,
        teacher.dim(),
        teacher.n_tokens(),
        cfg.seed,
    );
    check_shapes(&model, teacher)?;

    let depth = model.depth();
    let n = teacher.n_samples() as f64;
    let mut rows = Vec::new();
    let initial_err = rollout_layer_errors(&model, teacher)?;

    for j in 0..model.blocks.len() {
        let (seg_start, seg_end) = model.schedule.segments()[j];
        let range = model.block_range(j);
        let mut descent = Descent::new(range.len(), cfg);

        for step in 0..cfg.steps {
            let lambda = cfg.lambda_at(step);
            let mut grad = vec![0.0; model.param_count()];
            let mut tf = 0.0;
            let mut ar = 0.0;
            for s in 0..teacher.n_samples() {
                let (t, a) = sample_range_loss_grad(
                    &model, teacher, s, seg_start, seg_end, lambda, &cfg.token_weights,
                    Some(&mut grad),
                );
                tf += t;
                ar += a;
            }
            if !(tf.is_finite() && ar.is_finite()) {
                return Err(Error::Numerical(format!(
                    "stage1 diverged at block {j}, step {step}"
                )));
            }
            let block_grad = &mut grad[range.clone()];
            for g in block_grad.iter_mut() {
                *g /= n;
            }
            let theta = model.flatten_params();
            if cfg.weight_decay > 0.0 {
                for (g, p) in block_grad.iter_mut().zip(&theta[range.clone()]) {
                    *g += 2.0 * cfg.weight_decay * p;
                }
            }

            if should_log(step, cfg) {
                rows.push(segment_log_row(
                    &model, teacher, j, seg_start, seg_end, step, lambda, tf / n, ar / n, depth,
                ));
            }

            let mut flat = theta;
            descent.step(&mut flat[range.clone()], &grad[range.clone()]);
            model.set_params(&flat);
        }
        if cfg.steps > 0 {
            let lambda = cfg.lambda_at(cfg.steps - 1);
            let (tf, ar) = segment_losses(&model, teacher, seg_start, seg_end, lambda, cfg);
            rows.push(segment_log_row(
                &model,
                teacher,
                j,
                seg_start,
                seg_end,
                cfg.steps,
                lambda,
                tf,
                ar,
                depth,
            ));
        }
    }

    let final_err = rollout_layer_errors(&model, teacher)?;
    let log = TrainLog {
        rows,
        initial_final_layer_error: *initial_err.last().unwrap(),
        final_final_layer_error: *final_err.last().unwrap(),
    };
    Ok((model, log))
}

fn segment_losses(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    lo: usize,
    hi: usize,
    lambda: f64,
    cfg: &TrainConfig,
) -> (f64, f64) {
    let mut tf = 0.0;
    let mut ar = 0.0;
    for s in 0..teacher.n_samples() {
        let (t, a) = sample_range_loss_grad(
            model, teacher, s, lo, hi, lambda, &cfg.token_weights, None,
        );
        tf += t;
        ar += a;
    }
    let n = teacher.n_samples() as f64;
    (tf / n, ar / n)
}

#[allow(clippy::too_many_arguments)]
fn segment_log_row(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    block: usize,
    lo: usize,
    hi: usize,
    step: usize,
    lambda: f64,
    tf_loss: f64,
    ar_loss: f64,
    depth: usize,
) -> TrainLogRow {
    // Segment rollout errors: AR within the segment from its ground-truth
    // start layer.
    let mut errs = vec![None; depth];
    let n_tokens = model.n_tokens;
    let dim = model.dim;
    let mut acc = vec![0.0; hi - lo + 1];
    for s in 0..teacher.n_samples() {
        let mut state = teacher.state(s, lo - 1).to_vec();
        for l in lo..=hi {
            let (j, rep) = model.block_for_layer(l);
            state = model.blocks[j].forward(&state, n_tokens, dim, rep);
            let gt = teacher.state(s, l);
            let num: f64 = state
                .iter()
                .zip(gt)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc[l - lo] += if den > 0.0 { num / den } else { num };
        }
    }
    for (i, a) in acc.iter().enumerate() {
        errs[lo - 1 + i] = Some(a / teacher.n_samples() as f64);
    }
    TrainLogRow {
        stage: Stage::Stage1,
        block: Some(block),
        step,
        lambda,
        tf_loss,
        ar_loss,
        layer_errors: errs,
    }
}

fn should_log(step: usize, cfg: &TrainConfig) -> bool {
    step == 0 || (cfg.log_every > 0 && step.is_multiple_of(cfg.log_every))
}

/// End-to-end autoregressive fine-tuning (stage 2, `lambda = 0`).
///
/// Gradients flow through the full depth rollout across block boundaries.
/// The before/after final-layer error is recorded in the log; improvement is
/// monitored, not asserted.
pub fn train_stage2(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    cfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage2 {
        return Err(Error::InvalidArgument(
            "train_stage2 requires a stage2 config".into(),
        ));
    }
    let mut model = model.clone();
    model.validate()?;
    check_shapes(&model, teacher)?;

    let mut rows = Vec::new();
    let initial_err = rollout_layer_errors(&model, teacher)?;
    let mut descent = Descent::new(model.param_count(), cfg);

    for step in 0..cfg.steps {
        let (loss, grad) = batch_hybrid_loss(
            &model,
            teacher,
            0.0,
            &cfg.token_weights,
            cfg.weight_decay,
        )?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "stage2 diverged at step {step}"
            )));
        }
        if should_log(step, cfg) {
            rows.push(full_log_row(&model, teacher, step, cfg)?);
        }
        let mut flat = model.flatten_params();
        descent.step(&mut flat, &grad);
        model.set_params(&flat);
    }
    if cfg.steps > 0 {
        rows.push(full_log_row(&model, teacher, cfg.steps, cfg)?);
    }

    let final_err = rollout_layer_errors(&model, teacher)?;
    let log = TrainLog {
        rows,
        initial_final_layer_error: *initial_err.last().unwrap(),
        final_final_layer_error: *final_err.last().unwrap(),
    };
    Ok((model, log))
}

fn full_log_row(
    model: &SurrogateModel,
    teacher: &TrajectoryTensor,
    step: usize,
    cfg: &TrainConfig,
) -> Result<TrainLogRow> {
    let (tf, ar) = segment_losses(model, teacher, 1, model.depth(), 0.0, cfg);
    let errs = rollout_layer_errors(model, teacher)?;
    Ok(TrainLogRow {
        stage: Stage::Stage2,
        block: None,
        step,
        lambda: 0.0,
        tf_loss: tf,
        ar_loss: ar,
        layer_errors: errs.into_iter().map(Some).collect(),
    })
}
