//! `depthflow dmd`: exact DMD fit plus the eigenvalue-cloud plot.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::dmd::{eigencloud, fit_dmd, group_average, DmdModelJson, DEFAULT_RANK};
use depthflow_core::linalg::Complex;
use depthflow_core::surrogate::load_checkpoint;
use depthflow_core::traj::TokenRole;
use serde::Serialize;

use crate::manifest::ManifestBuilder;
use crate::svg;

use super::{load_trajectory, write_json_pretty, write_text, CliError, RoleArg};

#[derive(Args)]
pub struct DmdArgs {
    /// Input ATRJ trajectory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Analyze a surrogate rollout instead of the stored trajectory.
    #[arg(long = "checkpoint")]
    pub checkpoint: Option<PathBuf>,
    /// Output JSON path.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Truncation rank.
    #[arg(long = "rank", default_value_t = DEFAULT_RANK)]
    pub rank: usize,
    /// Token group to average.
    #[arg(long = "role", value_enum, default_value = "cls")]
    pub role: RoleArg,
    /// Pool snapshot pairs across samples into one fit instead of fitting
    /// per sample and pooling eigenvalues.
    #[arg(long = "pooled", default_value_t = false)]
    pub pooled: bool,
    /// Eigenvalue-cloud SVG path.
    #[arg(long = "svg")]
    pub svg: Option<PathBuf>,
}

#[derive(Serialize)]
struct DmdReport {
    role: String,
    rank: usize,
    pooled: bool,
    /// Pooled eigenvalues across fits (the cloud).
    eigencloud: Vec<Complex>,
    /// Representative model: the pooled fit, or the first sample's fit.
    model: DmdModelJson,
}

pub fn run(args: DmdArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.input);

    let teacher = load_trajectory(&args.input)?;
    let analyzed = match &args.checkpoint {
        Some(path) => {
            manifest.input(path);
            let (model, _) = load_checkpoint(path)?;
            model.rollout_tensor(&teacher)?
        }
        None => teacher,
    };
    let role: TokenRole = args.role.to_single().ok_or_else(|| {
        CliError::Usage("dmd requires a single role (cls, register, or patch)".into())
    })?;

    let cloud = eigencloud(&analyzed, role, args.rank, args.pooled)?;
    let sequences = group_average(&analyzed, role)?;
    let representative = if args.pooled {
        let mut pairs = Vec::new();
        for seq in &sequences {
            for i in 0..seq.len() - 1 {
                pairs.push((seq[i].as_slice(), seq[i + 1].as_slice()));
            }
        }
        depthflow_core::dmd::fit_dmd_pairs(&pairs, args.rank, &sequences[0][0])?
    } else {
        fit_dmd(&sequences[0], args.rank)?
    };

    let report = DmdReport {
        role: role.to_string(),
        rank: args.rank,
        pooled: args.pooled,
        eigencloud: cloud.clone(),
        model: representative.to_json_value(),
    };
    write_json_pretty(&args.out, &report)?;
    manifest.output(&args.out);

    if let Some(svg_path) = &args.svg {
        write_text(svg_path, &svg::eigencloud(&cloud))?;
        manifest.output(svg_path);
    }
    manifest.write(&args.out)
}
