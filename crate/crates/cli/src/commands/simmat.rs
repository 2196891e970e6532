//! `depthflow simmat`: layer-layer cosine similarity matrix.

use std::path::PathBuf;

use clap::Args;
use depthflow_core::seg::{similarity_matrix, SimilarityMatrix};

use crate::manifest::ManifestBuilder;
use crate::svg;

use super::{load_trajectory, write_text, CliError, RoleArg};

#[derive(Args)]
pub struct SimmatArgs {
    /// Input ATRJ trajectory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output CSV path.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Token filter for the cosine averages.
    #[arg(long = "role", value_enum, default_value = "all")]
    pub role: RoleArg,
    /// Optional heatmap SVG path.
    #[arg(long = "svg")]
    pub svg: Option<PathBuf>,
}

pub fn similarity_csv(s: &SimilarityMatrix) -> String {
    let n = s.n();
    let mut out = String::from("layer");
    for j in 1..=n {
        out.push_str(&format!(",sim_{j}"));
    }
    out.push('\n');
    for i in 1..=n {
        out.push_str(&i.to_string());
        for j in 1..=n {
            out.push_str(&format!(",{}", s.get(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn run(args: SimmatArgs, argv: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    manifest.input(&args.input);

    let tensor = load_trajectory(&args.input)?;
    let filter = args.role.to_single().map(|_| args.role.to_set());
    let sim = similarity_matrix(&tensor, filter)?;

    write_text(&args.out, &similarity_csv(&sim))?;
    manifest.output(&args.out);

    if let Some(svg_path) = &args.svg {
        write_text(svg_path, &svg::similarity_heatmap(&sim))?;
        manifest.output(svg_path);
    }
    manifest.write(&args.out)
}
