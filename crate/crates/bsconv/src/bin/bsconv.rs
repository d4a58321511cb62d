//! Command-line front end. Flag parsing only; the drivers live in
//! `bsconv::cli`. Exit codes: 0 success, 1 numeric failure, 2 usage/format
//! error (clap's own parse failures also exit 2).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use bsconv::cli::{
    install_threads, run_analyze, run_bench, run_complexity, run_train, run_verify, GlobalOpts,
    TrainCliArgs,
};
use bsconv::tensor::Dtype;

#[derive(Parser)]
#[command(
    name = "bsconv",
    version,
    about = "Blueprint separable convolutions: equivalence checks, kernel PCA, complexity tables, toy training, benchmarks"
)]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Scalar width for training and fixtures (f32 or f64).
    #[arg(long, global = true, default_value = "f32")]
    dtype: String,

    /// Directory for CSV / weight outputs (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Cap on internal parallelism (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Randomized factored-vs-materialized equivalence suites.
    Verify {
        /// Number of random configurations per family.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Size bounds as 'maxM,maxN,maxK,maxSpatial'.
        #[arg(long)]
        sizes: Option<String>,
        /// Max allowed relative error (f32 families; f64 uses 1e-10).
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Per-filter PC1 explained-variance histogram of a weight entry.
    Analyze {
        /// BSWT weight file.
        weights: PathBuf,
        /// Entry name (a 4-axis kernel stack, e.g. 'layer0.kernels').
        #[arg(long)]
        entry: String,
        /// Histogram bins over [0, 1].
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Mean-center slices before the PCA (true|false).
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        centered: bool,
    },
    /// Parameter/MAC table of a JSON model description plus conv variants.
    Complexity {
        /// Model description (JSON: {"input": [C,Y,X], "layers": [...]}).
        model: PathBuf,
        /// Report FLOPs (2x MACs) instead of MACs.
        #[arg(long)]
        flops: bool,
    },
    /// Train a toy classifier and write metrics CSV + final weights.
    Train {
        #[arg(long, default_value = "toy")]
        dataset: String,
        /// Mixing block: standard|dsc|bsconv-u|bsconv-s.
        #[arg(long, default_value = "bsconv-u")]
        block: String,
        /// Orthonormality loss weight.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Subspace ratio for bsconv-s.
        #[arg(long, default_value_t = 1.0 / 6.0)]
        p: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        /// Channel count of the toy model.
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        /// Learning-rate schedule: step|linear.
        #[arg(long, default_value = "step")]
        schedule: String,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Median wall time per layer kind against predicted MAC ratios.
    Bench {
        /// Semicolon list of MxNxKxS configurations.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dtype = match cli.dtype.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => {
            eprintln!("error: unknown dtype '{other}' (expected f32 or f64)");
            return ExitCode::from(2);
        }
    };
    install_threads(cli.threads);
    let opts = GlobalOpts {
        seed: cli.seed,
        dtype,
        out_dir: cli.out_dir.clone(),
        threads: cli.threads,
    };

    let result = match cli.cmd {
        Cmd::Verify {
            trials,
            sizes,
            tolerance,
        } => run_verify(&opts, trials, sizes.as_deref(), tolerance),
        Cmd::Analyze {
            weights,
            entry,
            bins,
            centered,
        } => run_analyze(&opts, &weights, &entry, bins, centered),
        Cmd::Complexity { model, flops } => run_complexity(&opts, &model, flops),
        Cmd::Train {
            dataset,
            block,
            alpha,
            p,
            epochs,
            classes,
            per_class,
            image_size,
            width,
            lr,
            momentum,
            weight_decay,
            schedule,
            batch_size,
        } => {
            let args = TrainCliArgs {
                dataset,
                block,
                alpha,
                p,
                epochs,
                classes,
                per_class,
                image_size,
                width,
                lr,
                momentum,
                weight_decay,
                schedule,
                batch_size,
            };
            run_train(&opts, &args)
        }
        Cmd::Bench { sizes, repeats } => run_bench(&opts, sizes.as_deref(), repeats),
    };

    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
