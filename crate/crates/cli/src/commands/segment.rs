//! `depthflow segment`: max-cut phase discovery plus baseline score
//! distributions.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::seg::{
    build_prefix, maxcut_segment_with, random_partitions, similarity_matrix, SegmentObjective,
};
use serde::Serialize;

use crate::manifest::ManifestBuilder;

use super::{load_trajectory, write_json_pretty, CliError, RoleArg};

#[derive(Args)]
pub struct SegmentArgs {
    /// Input ATRJ trajectory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output partition JSON path.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Number of phases.
    #[arg(long = "k")]
    pub k: usize,
    /// Minimum phase length.
    #[arg(long = "min-len", default_value = "1")]
    pub min_len: usize,
    /// Random baseline partitions per mode; baseline scores go to
    /// `<out>.baselines.json`.
    #[arg(long = "baselines", default_value = "10")]
    pub baselines: usize,
    /// Seed for baseline sampling.
    #[arg(long = "seed", default_value = "0")]
    pub seed: u64,
    /// Token filter for the similarity matrix.
    #[arg(long = "role", value_enum, default_value = "all")]
    pub role: RoleArg,
    /// Segment objective.
    #[arg(long = "objective", value_enum, default_value = "weighted-mean")]
    pub objective: ObjectiveArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ObjectiveArg {
    WeightedMean,
    OffdiagMean,
}

impl ObjectiveArg {
    fn to_core(self) -> SegmentObjective {
        match self {
            ObjectiveArg::WeightedMean => SegmentObjective::WeightedMean,
            ObjectiveArg::OffdiagMean => SegmentObjective::OffDiagonalMean,
        }
    }
}

#[derive(Serialize)]
struct BaselineReport {
    maxcut_score: f64,
    contiguous_scores: Vec<f64>,
    shuffled_scores: Vec<f64>,
    contiguous_mean: f64,
    contiguous_std: f64,
    shuffled_mean: f64,
    shuffled_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

pub fn run(args: SegmentArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.input);
    manifest.seed("baselines", args.seed);

    let tensor = load_trajectory(&args.input)?;
    let filter = args.role.to_single().map(|_| args.role.to_set());
    let sim = similarity_matrix(&tensor, filter)?;
    let objective = args.objective.to_core();
    let best = maxcut_segment_with(&sim, args.k, args.min_len, objective)?;

    write_json_pretty(&args.out, &best)?;
    manifest.output(&args.out);

    let prefix = build_prefix(&sim);
    let score_all = |parts: &[depthflow_core::seg::Partition]| -> Vec<f64> {
        parts
            .iter()
            .map(|p| p.rescored(&prefix, objective).score())
            .collect()
    };
    let contiguous = random_partitions(
        sim.n(),
        args.k,
        true,
        args.baselines,
        args.seed,
        Some(&best),
    )?;
    let shuffled = random_partitions(
        sim.n(),
        args.k,
        false,
        args.baselines,
        args.seed ^ 0x5555_5555_5555_5555,
        Some(&best),
    )?;
    let contiguous_scores = score_all(&contiguous);
    let shuffled_scores = score_all(&shuffled);
    let (cm, cs) = mean_std(&contiguous_scores);
    let (sm, ss) = mean_std(&shuffled_scores);
    let report = BaselineReport {
        maxcut_score: best.score(),
        contiguous_scores,
        shuffled_scores,
        contiguous_mean: cm,
        contiguous_std: cs,
        shuffled_mean: sm,
        shuffled_std: ss,
    };
    let baselines_path = {
        let mut s = args.out.as_os_str().to_os_string();
        s.push(".baselines.json");
        PathBuf::from(s)
    };
    write_json_pretty(&baselines_path, &report)?;
    manifest.output(&baselines_path);

    manifest.write(&args.out)
}
