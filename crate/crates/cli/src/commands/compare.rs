//! `depthflow compare`: per-layer teacher-student cosine and alignment R².

use std::path::PathBuf;

use clap::Args;
use depthflow_core::metrics::{alignment_r2, present_roles};
use depthflow_core::surrogate::load_checkpoint;
use depthflow_core::traj::{RoleSet, TrajectoryTensor};

use crate::manifest::ManifestBuilder;

use super::{load_trajectory, write_text, CliError};

#[derive(Args)]
pub struct CompareArgs {
    /// Student checkpoint.
    #[arg(long = "student")]
    pub student: PathBuf,
    /// Teacher ATRJ trajectory.
    #[arg(long = "teacher")]
    pub teacher: PathBuf,
    /// Output CSV path.
    #[arg(long = "out")]
    pub out: PathBuf,
}

/// Mean per-token cosine between matched student/teacher states, aggregated
/// within role per sample and then over samples.
fn layer_role_cosine(
    student: &TrajectoryTensor,
    teacher: &TrajectoryTensor,
    role: depthflow_core::traj::TokenRole,
    layer: usize,
) -> Result<f64, CliError> {
    let tokens = teacher.tokens_with_roles(RoleSet::only(role));
    let mut acc = 0.0;
    for s in 0..teacher.n_samples() {
        let mut tok_acc = 0.0;
        for &tok in &tokens {
            let a = student.token_state(s, layer, tok);
            let b = teacher.token_state(s, layer, tok);
            if a == b {
                tok_acc += 1.0;
                continue;
            }
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(CliError::Numerical(format!(
                    "zero-norm state at sample {s}, layer {layer}"
                )));
            }
            tok_acc += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        }
        acc += tok_acc / tokens.len() as f64;
    }
    Ok(acc / teacher.n_samples() as f64)
}

pub fn run(args: CompareArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.student);
    manifest.input(&args.teacher);

    let teacher = load_trajectory(&args.teacher)?;
    let (model, _) = load_checkpoint(&args.student)?;
    let student = model.rollout_tensor(&teacher)?;

    let roles = present_roles(&teacher);
    let mut csv = String::from("layer,role,cosine,r2\n");
    for layer in 0..teacher.n_layers() {
        for role in &roles {
            let cos = layer_role_cosine(&student, &teacher, *role, layer)?;
            let r2 = alignment_r2(&student, &teacher, RoleSet::only(*role), layer)?;
            csv.push_str(&format!("{layer},{role},{cos},{r2}\n"));
        }
    }
    write_text(&args.out, &csv)?;
    manifest.output(&args.out);
    manifest.write(&args.out)
}
