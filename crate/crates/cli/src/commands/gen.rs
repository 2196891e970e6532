//! `depthflow gen`: synthetic teacher generation.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::traj::{generate_teacher, write_trajectory, SyntheticTeacherSpec};

use crate::manifest::ManifestBuilder;

use super::{read_json, write_json_pretty, CliError};

#[derive(Args)]
pub struct GenArgs {
    /// Teacher spec JSON (dim, roles, blocks, schedule, noise, seed).
    #[arg(long = "spec")]
    pub spec: PathBuf,
    /// Output ATRJ path; the ground-truth partition goes to
    /// `<out>.partition.json`.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Number of samples to generate.
    #[arg(long = "samples")]
    pub samples: usize,
    /// Overrides the seed recorded in the spec file.
    #[arg(long = "seed")]
    pub seed: Option<u64>,
}

pub fn run(args: GenArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.spec);

    let mut spec: SyntheticTeacherSpec = read_json(&args.spec, "teacher spec")?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    manifest.seed("teacher", spec.seed);
    manifest.config(
        serde_json::to_value(&spec)
            .map_err(|e| CliError::Data(format!("spec snapshot: {e}")))?,
    );

    let (tensor, partition) = generate_teacher(&spec, args.samples)?;
    write_trajectory(&tensor, &args.out)?;
    manifest.output(&args.out);

    let partition_path = {
        let mut s = args.out.as_os_str().to_os_string();
        s.push(".partition.json");
        PathBuf::from(s)
    };
    write_json_pretty(&partition_path, &partition)?;
    manifest.output(&partition_path);

    manifest.write(&args.out)
}
