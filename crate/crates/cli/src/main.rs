use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ensembleseg::data::{load_dataset, preprocess_sample, synth_generate, write_dataset, SyntheticSpec};
use ensembleseg::fusion::fuse_ensemble;
use ensembleseg::io::{read_pmap, write_bytes, write_json, write_pmap};
use ensembleseg::metrics::{evaluate, MetricsReport};
use ensembleseg::model::{BackboneConfig, ModelCheckpoint};
use ensembleseg::pipeline::{
    run_fully_supervised, run_self_training_baseline, run_semi_supervised, ExperimentConfig, RunOptions,
};
use ensembleseg::schedule::plan_levels;
use ensembleseg::Error;

const SEED_ENV: &str = "ENSEMBLESEG_SEED";

#[derive(Parser)]
#[command(name = "ensembleseg", version, about = "Semi-supervised segmentation with ensemble pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the sub-model count and subset size of every level.
    Plan {
        #[arg(long)]
        s1: usize,
        #[arg(long)]
        n0: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run an experiment described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "semi")]
        mode: Mode,
        /// Continue an interrupted run in the config's run_dir.
        #[arg(long)]
        resume: bool,
        /// Write into this directory instead of the config's run_dir.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop once this level is complete (semi mode only).
        #[arg(long)]
        stop_after_level: Option<usize>,
    },
    /// Score a checkpoint on a directory with images/ and masks/.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; a CSV row is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Fuse per-model probability maps: <maps>/<model>/<image id>.pmap.
    Fuse {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        foreground_class: usize,
    },
    /// Write a synthetic blob dataset (images/ and masks/).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network depth the images must suit (size divisible by 2^(depth-1)).
        #[arg(long, default_value_t = BackboneConfig::default().depth)]
        depth: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Semi,
    Fs,
    SelfTrain,
}

/// Exit 2 for bad input, 1 for failures while doing the work.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::default().default_filter_or(level.unwrap_or("info"));
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}

/// Reads an experiment config; `log_level` is accepted alongside its fields.
fn load_config(path: &Path) -> Result<(ExperimentConfig, Option<String>), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)?;
    let log_level = match value.as_object_mut().and_then(|o| o.remove("log_level")) {
        None => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(_) => return Err(usage(anyhow!("log_level must be a string"))),
    };
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display())).map_err(usage)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed.parse().with_context(|| format!("{SEED_ENV}={seed} is not an unsigned integer")).map_err(usage)?;
    }
    cfg.validate()?;
    Ok((cfg, log_level))
}

fn cmd_plan(s1: usize, n0: usize, json: bool) -> Result<(), Failure> {
    let plan = plan_levels(s1, n0)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&plan).map_err(runtime)?);
    } else {
        println!("{:>5} {:>10} {:>10}", "level", "submodels", "subset");
        for l in &plan.levels {
            println!("{:>5} {:>10} {:>10}", l.level_index, l.submodel_count, l.subset_size);
        }
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    mode: Mode,
    resume: bool,
    run_dir: Option<PathBuf>,
    stop_after_level: Option<usize>,
) -> Result<(), Failure> {
    let (mut cfg, log_level) = load_config(config)?;
    init_logging(log_level.as_deref());
    if let Some(dir) = run_dir {
        cfg.run_dir = dir;
    }
    if !matches!(mode, Mode::Semi) && (resume || stop_after_level.is_some()) {
        return Err(usage(anyhow!("--resume and --stop-after-level apply to semi mode only")));
    }
    let outcome = match mode {
        Mode::Semi => run_semi_supervised(&cfg, RunOptions { stop_after_level, resume })?,
        Mode::Fs => run_fully_supervised(&cfg)?,
        Mode::SelfTrain => run_self_training_baseline(&cfg)?,
    };
    match &outcome.report {
        Some(report) => print!("{}", report.to_csv()),
        None => println!(
            "stopped after level {}; resume with --resume",
            outcome.manifest.levels.len().saturating_sub(1)
        ),
    }
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, data: &Path, out: &Path, threshold: f64) -> Result<(), Failure> {
    init_logging(None);
    let ckpt = ModelCheckpoint::load(checkpoint).map_err(runtime)?;
    let model = ckpt.to_model().map_err(runtime)?;
    let size = ckpt.config.input_size;
    let samples: Vec<_> = load_dataset(&data.join("images"), Some(&data.join("masks")))
        .map_err(runtime)?
        .iter()
        .map(|s| preprocess_sample(s, size))
        .collect();
    let per_image = evaluate(&model, &samples, threshold, 1).map_err(runtime)?;
    let report = MetricsReport::from_per_image(ckpt.id(), per_image, 0.0);
    write_json(out, &report).map_err(runtime)?;
    write_bytes(&out.with_extension("csv"), report.to_csv().as_bytes()).map_err(runtime)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_fuse(maps: &Path, out: &Path, threshold: f64, foreground_class: usize) -> Result<(), Failure> {
    init_logging(None);
    let mut models: Vec<PathBuf> = fs::read_dir(maps)
        .with_context(|| format!("reading {}", maps.display()))
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    models.sort();
    if models.is_empty() {
        return Err(runtime(anyhow!("{} has no per-model subdirectories", maps.display())));
    }
    let mut images: Vec<String> = fs::read_dir(&models[0])
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pmap"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    images.sort();
    let mut weights = BTreeMap::new();
    for id in &images {
        let probs = models
            .iter()
            .map(|m| read_pmap(&m.join(format!("{id}.pmap"))))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("image {id}"))
            .map_err(runtime)?;
        let fused = fuse_ensemble(&probs, foreground_class, threshold, 0)
            .with_context(|| format!("image {id}"))
            .map_err(runtime)?;
        write_pmap(&out.join(format!("{id}.pmap")), &fused.map).map_err(runtime)?;
        weights.insert(id.clone(), fused.weights_used);
    }
    write_json(&out.join("weights.json"), &weights).map_err(runtime)?;
    println!("fused {} image(s) from {} model(s)", images.len(), models.len());
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path, depth: usize) -> Result<(), Failure> {
    init_logging(None);
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display())).map_err(usage)?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).with_context(|| format!("invalid spec {}", spec.display())).map_err(usage)?;
    if depth == 0 {
        return Err(usage(anyhow!("depth must be at least 1")));
    }
    spec.validate(1 << (depth - 1))?;
    let samples = synth_generate(&spec).map_err(runtime)?;
    write_dataset(out, &samples).map_err(runtime)?;
    println!("wrote {} image/mask pairs to {}", samples.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { s1, n0, json } => cmd_plan(s1, n0, json),
        Command::Train {
            config,
            mode,
            resume,
            run_dir,
            stop_after_level,
        } => cmd_train(&config, mode, resume, run_dir, stop_after_level),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            threshold,
        } => cmd_evaluate(&checkpoint, &data, &out, threshold),
        Command::Fuse {
            maps,
            out,
            threshold,
            foreground_class,
        } => cmd_fuse(&maps, &out, threshold, foreground_class),
        Command::Synth { spec, out, depth } => cmd_synth(&spec, &out, depth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
