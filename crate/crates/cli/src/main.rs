//! `demaformer` command line: data generation, training, evaluation,
//! Langevin traces and gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use demaformer::config::RunConfig;
use demaformer::data::{gen_synthetic, load_manifest, save_manifest, save_predictions, split_train_test, GroundingSample};
use demaformer::ebm::{energy_trace, EnergyFn};
use demaformer::metrics::evaluate;
use demaformer::model::DemaFormer;
use demaformer::numerics::{NamedTensor, Tape};
use demaformer::training::{fit, gradient_suite, predict_all};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "demaformer", version, about = "Temporal grounding with damped EMA attention and an energy-based prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        n: usize,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a manifest; writes params.json, train.csv and metrics.json into `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a manifest; writes predictions.jsonl and metrics.json into `--out`.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run Langevin chains from one sample's representations and write the mean energy per step.
    Sample {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value = "energy_trace.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient checks on the tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure classes with distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

/// On-disk trained model: the run configuration plus named tensors.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    config: RunConfig,
    params: BTreeMap<String, NamedTensor>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(anyhow!(e))),
    }
}

fn load_model(path: &Path) -> Result<(RunConfig, DemaFormer), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ParamsFile =
        serde_json::from_str(&text).map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?;
    file.config.validate().map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?;
    let mut model = DemaFormer::new(file.config.model.clone(), file.config.architecture(), file.config.seed);
    model.params.load_named(&file.params).with_context(|| format!("loading parameters from {}", path.display()))?;
    Ok((file.config, model))
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Vec<GroundingSample>> {
    let samples = load_manifest(path)?;
    let m = &cfg.model;
    for s in &samples {
        if (s.video.cols(), s.text.cols(), s.audio.cols()) != (m.d_v, m.d_q, m.d_a) {
            bail!(
                "sample `{}` has feature sizes (d_v, d_q, d_a) = ({}, {}, {}), model expects ({}, {}, {})",
                s.id,
                s.video.cols(),
                s.text.cols(),
                s.audio.cols(),
                m.d_v,
                m.d_q,
                m.d_a
            );
        }
    }
    Ok(samples)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out, n, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let samples = gen_synthetic(&cfg.synth, n).map_err(|e| Failure::Config(anyhow!(e)))?;
            save_manifest(&samples, &out)?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let samples = load_data(&data, &cfg)?;
            let (train, test) = split_train_test(&samples, cfg.train_frac, cfg.seed);
            let mut model = DemaFormer::new(cfg.model.clone(), cfg.architecture(), cfg.seed);
            let report = fit(&mut model, &train, &test, &cfg.objective(), &cfg.train, cfg.seed).map_err(|e| anyhow!(e))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let params = ParamsFile { config: cfg.clone(), params: model.params.to_named() };
            write(&out.join("params.json"), &serde_json::to_string(&params).map_err(|e| anyhow!(e))?)?;
            write(&out.join("train.csv"), &report.to_csv())?;
            let held_out = if test.is_empty() { &train } else { &test };
            let metrics = evaluate(&predict_all(&model, held_out), &cfg.eval);
            write(&out.join("metrics.json"), &serde_json::to_string_pretty(&metrics.to_json()).map_err(|e| anyhow!(e))?)?;
            if report.skipped_steps > 0 {
                eprintln!("skipped {} optimizer steps with non-finite gradients", report.skipped_steps);
            }
            eprintln!("trained on {} samples, held out {}", train.len(), test.len());
        }
        Command::Eval { params, data, out } => {
            let (cfg, model) = load_model(&params)?;
            let samples = load_data(&data, &cfg)?;
            let evals = predict_all(&model, &samples);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let spans: Vec<_> = evals.iter().map(|e| e.ranked.clone()).collect();
            save_predictions(&samples, &spans, &out.join("predictions.jsonl"))?;
            let metrics = evaluate(&evals, &cfg.eval);
            if metrics.skipped_without_gt > 0 {
                eprintln!("mAP skipped {} samples without groundtruth", metrics.skipped_without_gt);
            }
            write(&out.join("metrics.json"), &serde_json::to_string_pretty(&metrics.to_json()).map_err(|e| anyhow!(e))?)?;
        }
        Command::Sample { params, data, index, steps, out, seed } => {
            let (cfg, model) = load_model(&params)?;
            let samples = load_data(&data, &cfg)?;
            let sample = samples
                .get(index)
                .ok_or_else(|| anyhow!("index {index} out of range for {} samples", samples.len()))?;
            let tape = Tape::new();
            let p = model.params.bind_frozen(&tape);
            let outputs = model.forward(&tape, &p, sample);
            let energy = EnergyFn::snapshot(cfg.energy_kind, &outputs, &model.heads.salience, &p);
            let start = cfg.energy_kind.chain_rows(&outputs).value();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
            let trace = energy_trace(&start, &energy, steps, cfg.ebm.gamma, &mut rng).map_err(|e| anyhow!(e))?;
            let mut csv = String::from("step,mean_energy\n");
            for (i, e) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{e:e}\n"));
            }
            write(&out, &csv)?;
        }
        Command::Gradcheck { config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let reports = gradient_suite(cfg.architecture(), &cfg.objective(), seed.unwrap_or(cfg.seed))
                .map_err(|e| anyhow!(e))?;
            let mut worst: f64 = 0.0;
            for (name, rep) in &reports {
                println!("{name}: max rel err {:.3e} over {} entries", rep.max_rel_err, rep.entries_checked);
                worst = worst.max(rep.max_rel_err);
            }
            println!("max rel err {worst:.3e}");
            if !(worst < GRADCHECK_TOL) {
                return Err(Failure::Runtime(anyhow!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOL:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
