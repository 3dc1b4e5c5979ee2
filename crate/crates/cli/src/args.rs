use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tct", version, about = "Task consistency training on partially labeled volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ellipsoid phantom dataset.
    GenData(GenDataArgs),
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint on fully labeled volumes.
    Eval(EvalArgs),
    /// Segment one volume.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Merge training logs of several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub num_classes: usize,
    /// Volume size as Z,Y,X.
    #[arg(long, value_parser = parse_triple)]
    pub size: [usize; 3],
    /// Training sub-datasets, e.g. "d1:1,2x20;d2:5x4".
    #[arg(long)]
    pub datasets: String,
    /// Fully labeled held-out volumes added as a `test` sub-dataset.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with any subset of the config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; the resolved config must match it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save and exit after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// One flag per config key; set flags win over the config file.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Z,Y,X.
    #[arg(long, value_parser = parse_triple)]
    pub patch_size: Option<[usize; 3]>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// tal | tct.
    #[arg(long)]
    pub method: Option<String>,
    /// none | fixed | batch_mean | task_mean | task_median | confidence.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub fixed_threshold: Option<f64>,
    #[arg(long)]
    pub binarize_level: Option<f64>,
    /// fixed | uwl | uauwl.
    #[arg(long)]
    pub weighting: Option<String>,
    #[arg(long)]
    pub w_max: Option<f64>,
    #[arg(long)]
    pub ramp_epochs: Option<f64>,
    #[arg(long)]
    pub exclude_self_from_background: Option<bool>,
    #[arg(long)]
    pub foreground_prob: Option<f64>,
    /// Checkpoint whose network parameters initialise training.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Score the ground truth itself instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    pub oracle: bool,
    /// train | test; defaults to test when the manifest has test volumes.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = tct_core::verify::DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory whose subdirectories each hold a training log.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected Z,Y,X, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a size"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_need_three_integers() {
        assert_eq!(parse_triple("64, 32,16"), Ok([64, 32, 16]));
        assert!(parse_triple("64,32").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["tct", "gradcheck", "--tolerance", "1"]).is_err());
        assert!(Cli::try_parse_from(["tct", "gradcheck", "--tol", "1e-3"]).is_ok());
    }

    #[test]
    fn eval_needs_a_checkpoint_or_the_oracle() {
        assert!(Cli::try_parse_from(["tct", "eval", "--data", "d", "--report", "r.csv"]).is_err());
        assert!(Cli::try_parse_from(["tct", "eval", "--data", "d", "--report", "r.csv", "--oracle"]).is_ok());
    }
}
