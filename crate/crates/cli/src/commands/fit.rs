//! `depthflow fit`: two-stage surrogate training.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::seg::Partition;
use depthflow_core::surrogate::{
    save_checkpoint, train_stage1, train_stage2, ArchConfig, TrainConfig, TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;

use super::{load_trajectory, read_json, write_text, CliError};

/// Config file for `fit`: architecture plus one config per stage. Stage 2 is
/// optional; omit it for teacher-forcing-era experiments.
#[derive(Serialize, Deserialize)]
pub struct FitConfig {
    pub arch: ArchConfig,
    pub stage1: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<TrainConfig>,
}

#[derive(Args)]
pub struct FitArgs {
    /// Teacher ATRJ trajectory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Partition JSON fixing the schedule.
    #[arg(long = "partition")]
    pub partition: PathBuf,
    /// FitConfig JSON.
    #[arg(long = "config")]
    pub config: PathBuf,
    /// Output checkpoint path; the training log goes to `<out>.log.csv`.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Overrides both stages' training seeds.
    #[arg(long = "seed")]
    pub seed: Option<u64>,
}

pub fn run(args: FitArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.input);
    manifest.input(&args.partition);
    manifest.input(&args.config);

    let teacher = load_trajectory(&args.input)?;
    let partition: Partition = read_json(&args.partition, "partition")?;
    let mut config: FitConfig = read_json(&args.config, "fit config")?;
    if let Some(seed) = args.seed {
        config.stage1.seed = seed;
        if let Some(s2) = config.stage2.as_mut() {
            s2.seed = seed ^ 0x9E37_79B9;
        }
    }
    manifest.seed("stage1", config.stage1.seed);
    if let Some(s2) = &config.stage2 {
        manifest.seed("stage2", s2.seed);
    }
    manifest.config(
        serde_json::to_value(&config)
            .map_err(|e| CliError::Data(format!("config snapshot: {e}")))?,
    );

    let depth = teacher.depth();
    let (model, log1) = train_stage1(&teacher, &partition, &config.arch, &config.stage1)?;
    let (model, log2): (_, Option<TrainLog>) = match &config.stage2 {
        Some(cfg2) => {
            let (m, log) = train_stage2(&model, &teacher, cfg2)?;
            (m, Some(log))
        }
        None => (model, None),
    };

    save_checkpoint(&model, config.stage1.seed, &args.out)?;
    manifest.output(&args.out);

    let mut log_csv = log1.to_csv(depth);
    if let Some(log2) = &log2 {
        // Append stage-2 rows, skipping the duplicated header.
        let body = log2.to_csv(depth);
        if let Some(idx) = body.find('\n') {
            log_csv.push_str(&body[idx + 1..]);
        }
        if log2.final_final_layer_error > log2.initial_final_layer_error + 1e-6 {
            eprintln!(
                "warning: stage2 final-layer error {:.3e} regressed past stage1's {:.3e}",
                log2.final_final_layer_error, log2.initial_final_layer_error
            );
        }
    }
    let log_path = {
        let mut s = args.out.as_os_str().to_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    };
    write_text(&log_path, &log_csv)?;
    manifest.output(&log_path);

    manifest.write(&args.out)
}
