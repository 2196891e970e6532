//! `depthflow dynamics`: the per-layer metric suite, perturbation probes,
//! and raw PCA trajectory coordinates.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::linalg::{svd, Matrix};
use depthflow_core::metrics::{build_report, present_roles};
use depthflow_core::surrogate::{load_checkpoint, perturb_rollout, LayerStack};
use depthflow_core::traj::TrajectoryTensor;

use crate::manifest::ManifestBuilder;

use super::{load_trajectory, write_json_pretty, write_text, CliError};

#[derive(Args)]
pub struct DynamicsArgs {
    /// Input ATRJ trajectory (teacher activations).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Analyze a trained surrogate's rollout from the teacher's layer-0
    /// states instead of the teacher trajectory itself.
    #[arg(long = "checkpoint")]
    pub checkpoint: Option<PathBuf>,
    /// Output report CSV.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long = "json")]
    pub json: Option<PathBuf>,
    /// Perturbation sweep CSV (requires --checkpoint for the block stack).
    #[arg(long = "perturb")]
    pub perturb: Option<PathBuf>,
    /// Perturbation magnitude.
    #[arg(long = "epsilon", default_value = "0.001")]
    pub epsilon: f64,
    /// Seed for perturbation directions.
    #[arg(long = "seed", default_value = "0")]
    pub seed: u64,
    /// Raw top-3 PCA coordinates of group-averaged normalized states.
    #[arg(long = "pca")]
    pub pca: Option<PathBuf>,
}

pub fn run(args: DynamicsArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.input);
    manifest.seed("perturbation", args.seed);

    let teacher = load_trajectory(&args.input)?;
    let model = match &args.checkpoint {
        Some(path) => {
            manifest.input(path);
            Some(load_checkpoint(path)?.0)
        }
        None => None,
    };
    let analyzed: TrajectoryTensor = match &model {
        Some(m) => m.rollout_tensor(&teacher)?,
        None => teacher.clone(),
    };

    let report = build_report(&analyzed)?;
    write_text(&args.out, &report.to_csv())?;
    manifest.output(&args.out);
    if let Some(json_path) = &args.json {
        write_json_pretty(json_path, &report)?;
        manifest.output(json_path);
    }

    if let Some(perturb_path) = &args.perturb {
        let Some(model) = &model else {
            return Err(CliError::Usage(
                "--perturb needs --checkpoint: perturbations roll through a block stack".into(),
            ));
        };
        let stack = LayerStack::from_surrogate(model, analyzed.roles().to_vec())?;
        let mut csv = String::from("layer,role,epsilon,d_cos,scaled_sensitivity\n");
        for layer in 1..=stack.depth() {
            // Average the per-role outcomes over samples; each sample gets
            // its own perturbation stream.
            let roles = present_roles(&analyzed);
            let mut acc: Vec<(f64, f64)> = vec![(0.0, 0.0); roles.len()];
            for s in 0..analyzed.n_samples() {
                let outcome = perturb_rollout(
                    &stack,
                    analyzed.state(s, 0),
                    layer,
                    args.epsilon,
                    args.seed ^ ((layer as u64) << 32) ^ s as u64,
                )?;
                for (i, role) in roles.iter().enumerate() {
                    if let Some((_, d)) = outcome.d_cos.iter().find(|(r, _)| r == role) {
                        acc[i].0 += d;
                    }
                    if let Some((_, v)) =
                        outcome.scaled_sensitivity.iter().find(|(r, _)| r == role)
                    {
                        acc[i].1 += v;
                    }
                }
            }
            let n = analyzed.n_samples() as f64;
            for (i, role) in roles.iter().enumerate() {
                csv.push_str(&format!(
                    "{layer},{role},{},{},{}\n",
                    args.epsilon,
                    acc[i].0 / n,
                    acc[i].1 / n
                ));
            }
        }
        write_text(perturb_path, &csv)?;
        manifest.output(perturb_path);
    }

    if let Some(pca_path) = &args.pca {
        write_text(pca_path, &pca_csv(&analyzed)?)?;
        manifest.output(pca_path);
    }

    manifest.write(&args.out)
}

/// Projects group-averaged, normalized states onto their top three principal
/// components (pooled over samples, layers, and roles).
fn pca_csv(t: &TrajectoryTensor) -> Result<String, CliError> {
    let roles = present_roles(t);
    let mut sequences = Vec::new();
    for role in &roles {
        let seqs = depthflow_core::dmd::group_average(t, *role)?;
        sequences.push(seqs);
    }
    let dim = t.dim();
    let mut rows = Vec::new();
    for seqs in &sequences {
        for seq in seqs {
            for state in seq {
                rows.push(state.clone());
            }
        }
    }
    let stacked = Matrix::from_rows(&rows).map_err(CliError::from)?;
    // Center, then top right-singular vectors are the principal axes.
    let mut centered = stacked.clone();
    for j in 0..dim {
        let mean: f64 = (0..centered.rows()).map(|i| centered.get(i, j)).sum::<f64>()
            / centered.rows() as f64;
        for i in 0..centered.rows() {
            centered.set(i, j, centered.get(i, j) - mean);
        }
    }
    let decomp = svd(&centered).map_err(CliError::from)?;
    let n_pc = 3.min(dim);

    let mut csv = String::from("role,sample,layer,pc1,pc2,pc3\n");
    for (ri, role) in roles.iter().enumerate() {
        for (s, seq) in sequences[ri].iter().enumerate() {
            for (l, state) in seq.iter().enumerate() {
                let mut coords = [0.0f64; 3];
                for (pc, coord) in coords.iter_mut().enumerate().take(n_pc) {
                    *coord = (0..dim).map(|j| state[j] * decomp.v.get(j, pc)).sum();
                }
                csv.push_str(&format!(
                    "{role},{s},{l},{},{},{}\n",
                    coords[0], coords[1], coords[2]
                ));
            }
        }
    }
    Ok(csv)
}
