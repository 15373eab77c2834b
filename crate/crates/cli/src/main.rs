//! `mziris` command-line pipeline: fixtures, quality screening, pair
//! construction, training, evaluation and reporting.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mziris::pairing::PairKind;
use mziris::preprocess::InputVariant;

/// Monozygotic twin iris verification pipeline.
#[derive(Debug, Parser)]
#[command(name = "mziris", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic captures and a manifest.
    Fixtures {
        #[command(subcommand)]
        kind: FixtureKind,
    },
    /// Score every capture of a manifest and write the screened manifest.
    Quality {
        manifest: PathBuf,
        /// Output directory.
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        /// Minimum overall score kept.
        #[arg(long, default_value_t = mziris::quality::DEFAULT_THRESHOLD)]
        threshold: u8,
        /// Resample captures that are not 640x480 instead of failing.
        #[arg(long)]
        allow_resize: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Build a labelled pair file from a manifest.
    BuildPairs {
        manifest: PathBuf,
        /// `synthetic` (training, same-person L/R) or `natural` (test, twins).
        #[arg(long, default_value = "synthetic")]
        kind: PairKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pair file to write.
        #[arg(long)]
        out: PathBuf,
        /// Cap on synthetic positives per subject.
        #[arg(long)]
        max_positives_per_subject: Option<usize>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the Siamese encoder for every seeded run of a config.
    Train {
        /// Experiment TOML.
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.variant`.
        #[arg(long)]
        variant: Option<InputVariant>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `train.n_runs`.
        #[arg(long)]
        runs: Option<usize>,
        /// Parent directory; the experiment goes to `<out>/<variant>`.
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score a pair file with a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        /// Decision threshold; MZ when the distance is below it.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Equal-width bins of the pupil-ratio analysis.
        #[arg(long, default_value_t = mziris::eval::DEFAULT_DILATION_BINS)]
        bins: usize,
        #[arg(long)]
        allow_resize: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Plots and a summary table for one or more trained experiments.
    Report {
        /// Experiment directories written by `train`.
        #[arg(required = true)]
        experiments: Vec<PathBuf>,
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = mziris::eval::DEFAULT_DILATION_BINS)]
        bins: usize,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Debug, Subcommand)]
enum FixtureKind {
    /// Subjects with several sessions per eye, optionally grouped in twin sets.
    Population {
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        sessions: usize,
        #[arg(long, default_value_t = 2)]
        twin_sets: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        overwrite: bool,
    },
    /// Three captures scoring 50, 49 and failing geometry.
    QualityGate {
        #[arg(long, env = "MZIRIS_OUT")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fixtures {
            kind:
                FixtureKind::Population {
                    out,
                    subjects,
                    sessions,
                    twin_sets,
                    seed,
                    overwrite,
                },
        } => commands::fixtures_population(
            &out,
            mziris::fixtures::PopulationSpec {
                subjects,
                sessions_per_eye: sessions,
                twin_sets,
                seed,
            },
            overwrite,
        ),
        Command::Fixtures {
            kind: FixtureKind::QualityGate { out, overwrite },
        } => commands::fixtures_quality_gate(&out, overwrite),
        Command::Quality {
            manifest,
            out,
            threshold,
            allow_resize,
            overwrite,
        } => commands::quality(&manifest, &out, threshold, allow_resize, overwrite),
        Command::BuildPairs {
            manifest,
            kind,
            seed,
            out,
            max_positives_per_subject,
            overwrite,
        } => commands::build_pairs(&manifest, kind, seed, &out, max_positives_per_subject, overwrite),
        Command::Train {
            config,
            variant,
            epochs,
            runs,
            out,
            overwrite,
        } => commands::train(
            &config,
            commands::TrainOverrides { variant, epochs, runs },
            &out,
            overwrite,
        ),
        Command::Evaluate {
            checkpoint,
            pairs,
            out,
            tau,
            bins,
            allow_resize,
            overwrite,
        } => commands::evaluate(&checkpoint, &pairs, &out, tau, bins, allow_resize, overwrite),
        Command::Report {
            experiments,
            out,
            bins,
            overwrite,
        } => commands::report(&experiments, &out, bins, overwrite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
