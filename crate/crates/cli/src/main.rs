//! Command-line entry point: data generation, the three training stages,
//! evaluation, inference, and the built-in verification suites.
//!
//! Exit codes: 0 success, 1 failed verification suite, 2 config error,
//! 3 pipeline/training error (divergence, missing prerequisite checkpoint),
//! 64 usage error, 66 missing input file.

use std::fs;
use std::io::ErrorKind as IoErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use gzsl_core::data::{load_frame, write_frame};
use gzsl_core::error::{GzslError, Result};
use gzsl_core::pipeline::{
    self, derive_seed, run_eval, run_stage1, run_stage2, run_stage3, DataSource, RunConfig,
};
use gzsl_core::verify;

#[derive(Parser)]
#[command(
    name = "gzsl-moe",
    version,
    about = "Generalized zero-shot point-cloud segmentation with mixture-of-experts layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Backbone,
    Generator,
    Classifier,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Grad,
    Moe,
    Metrics,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labeled frames to a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training stage (or all three), writing checkpoints and
    /// loss-history CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints on labeled frames; writes <report>.txt,
    /// <report>.csv and <report>.confusion.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// A frame file or a directory of .pf/.pcd frames.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict per-point labels for one frame, one label per line.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Run a built-in verification suite.
    Check {
        #[arg(long, value_enum)]
        suite: Suite,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(err: &GzslError) -> u8 {
    match err {
        GzslError::Config(_) => 2,
        GzslError::Io(io) if io.kind() == IoErrorKind::NotFound => 66,
        GzslError::Parse { .. } => 2,
        _ => 3,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::from_file(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData {
            config,
            out,
            frames,
            seed,
        } => gen_data(&load_config(&config, seed)?, &out, frames),
        Command::Train {
            config,
            stage,
            out,
            seed,
        } => train(&load_config(&config, seed)?, stage, &out),
        Command::Eval {
            config,
            ckpt,
            data,
            report,
            seed,
        } => eval(&load_config(&config, seed)?, &ckpt, &data, &report),
        Command::Infer {
            ckpt,
            input,
            output,
        } => infer(&ckpt, &input, &output),
        Command::Check { suite } => check(suite),
    }
}

fn gen_data(config: &RunConfig, out: &Path, frames: usize) -> Result<u8> {
    let scene = match &config.data {
        DataSource::Scene(scene) => scene,
        DataSource::Files { .. } => {
            return Err(GzslError::Config(
                "gen-data needs a scene data source in the config".into(),
            ))
        }
    };
    fs::create_dir_all(out)?;
    for i in 0..frames {
        let seed = derive_seed(config.seed, &format!("train-frame-{i}"));
        let frame = gzsl_core::data::generate_scene(&scene.spec_with_seed(seed))?;
        let path = out.join(format!("frame_{i:04}.pf"));
        write_frame(&frame, &path)?;
        println!("wrote {} ({} points)", path.display(), frame.len());
    }
    Ok(0)
}

fn train(config: &RunConfig, stage: Stage, out: &Path) -> Result<u8> {
    let summarize = |name: &str, history: &[f64]| {
        match (history.first(), history.last()) {
            (Some(first), Some(last)) => println!(
                "stage {name}: {} epochs, loss {first:.6} -> {last:.6}",
                history.len()
            ),
            _ => println!("stage {name}: 0 epochs"),
        }
    };
    match stage {
        Stage::Backbone => summarize("backbone", &run_stage1(config, out)?),
        Stage::Generator => summarize("generator", &run_stage2(config, out)?),
        Stage::Classifier => summarize("classifier", &run_stage3(config, out)?),
        Stage::All => {
            summarize("backbone", &run_stage1(config, out)?);
            summarize("generator", &run_stage2(config, out)?);
            summarize("classifier", &run_stage3(config, out)?);
        }
    }
    Ok(0)
}

fn collect_frames(data: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(data)?;
    if meta.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(data)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("pf") || e.eq_ignore_ascii_case("pcd"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(GzslError::arg(format!(
            "no .pf or .pcd frames under {}",
            data.display()
        )));
    }
    Ok(paths)
}

fn eval(config: &RunConfig, ckpt: &Path, data: &Path, report: &Path) -> Result<u8> {
    let mut frames = Vec::new();
    for path in collect_frames(data)? {
        frames.push(load_frame(&path)?);
    }
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let (metrics, _) = run_eval(config, ckpt, &frames, Some(report))?;
    println!(
        "evaluated {} frames: overall accuracy {:.4}",
        frames.len(),
        metrics.overall_accuracy
    );
    if let (Some(seen), Some(unseen), Some(hm)) = (
        metrics.accuracy_seen,
        metrics.accuracy_unseen,
        metrics.hm_accuracy,
    ) {
        println!("seen {seen:.4}, unseen {unseen:.4}, HM {hm:.4}");
    }
    println!("report written to {}.txt/.csv/.confusion.csv", report.display());
    Ok(0)
}

fn infer(ckpt: &Path, input: &Path, output: &Path) -> Result<u8> {
    let frame = load_frame(input)?;
    let backbone = pipeline::load_backbone(ckpt)?;
    let classifier = pipeline::load_classifier(ckpt)?;
    let predictions = gzsl_core::classifier::infer_frame(&backbone, &classifier, &frame)?;
    let mut out = String::with_capacity(predictions.len() * 2);
    for label in &predictions {
        out.push_str(&label.to_string());
        out.push('\n');
    }
    fs::write(output, out)?;
    println!("wrote {} labels to {}", predictions.len(), output.display());
    Ok(0)
}

fn check(suite: Suite) -> Result<u8> {
    let name = match suite {
        Suite::Grad => "grad",
        Suite::Moe => "moe",
        Suite::Metrics => "metrics",
    };
    let report = verify::run_suite(name)?;
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { 1 })
}
