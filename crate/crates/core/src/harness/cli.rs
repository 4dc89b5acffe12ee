//! `cfglab` command line.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric
//! failure, 4 I/O failure.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{MetricKind, RunConfig};
use super::experiments::Lab;
use super::report::{fmt_f64, read_samples_csv, write_samples_csv, RunReport, SampleBlock, SampleMeta};
use super::svg::emit_scatter_svg;
use crate::denoiser::{Checkpoint, ConditionToken};
use crate::evaldata::{energy_distance_with, sliced_wasserstein, SampleSet};
use crate::numerics::RandomStream;
use crate::sampling::generate_rows;
use crate::training::{train_classifier, train_denoiser};
use crate::{LabError, Result};

#[derive(Debug, Parser)]
#[command(name = "cfglab", version, about = "Guided diffusion experiments on 2-D Gaussian mixtures")]
struct Cli {
    /// Run configuration (TOML, dotted keys). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Experiment seed (overrides run.seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overrides out_dir and CFGLAB_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (overrides run.workers).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one denoiser (train.loss_mode) and write model.json.
    Train,
    /// Draw samples from a checkpoint into a CSV.
    Sample {
        /// Checkpoint to sample from [default: <out>/model.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output CSV [default: <out>/samples.csv].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metric between two sample CSVs, or between one CSV and the oracle.
    Eval {
        samples: PathBuf,
        /// Second sample CSV; when omitted each (class, w) block is compared
        /// with the tilted oracle.
        reference: Option<PathBuf>,
    },
    /// Standard vs updated loss across the configured guidance scales.
    Toy,
    /// Updated-loss models across eval.w_train × eval.w_sample.
    Ablate,
    /// DDIM step-count sweep for both loss modes.
    SweepSteps,
    /// Render sample CSVs as an SVG scatter plot.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output SVG [default: <out>/<first input stem>.svg].
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.run.workers = w;
    }
    config.validate()?;
    let out = match &cli.out {
        Some(dir) => dir.clone(),
        None => config.resolved_out_dir(),
    };
    Ok((config, out))
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

fn summarize(report: &RunReport, path: &Path) {
    say(format!(
        "{} cells written to {} (config {})",
        report.cells.len(),
        path.display(),
        report.config_digest
    ));
}

fn run(cli: Cli) -> Result<()> {
    let (config, out) = load_config(&cli)?;
    match &cli.command {
        Command::Train => train(&config, &out),
        Command::Sample { checkpoint, output } => {
            let ck = checkpoint.clone().unwrap_or_else(|| out.join("model.json"));
            let output = output.clone().unwrap_or_else(|| out.join("samples.csv"));
            sample(&config, &ck, &output)
        }
        Command::Eval { samples, reference } => eval(config, &out, samples, reference.as_deref()),
        Command::Toy => {
            let lab = Lab::with_out_dir(config, &out)?;
            let report = lab.run_toy_comparison()?;
            summarize(&report, &out.join("toy_report.csv"));
            Ok(())
        }
        Command::Ablate => {
            let (wt, ws) = (config.eval.w_train.clone(), config.eval.w_sample.clone());
            let lab = Lab::with_out_dir(config, &out)?;
            let report = lab.run_ablation_grid(&wt, &ws)?;
            summarize(&report, &out.join("ablation_report.csv"));
            Ok(())
        }
        Command::SweepSteps => {
            let steps = config.eval.steps.clone();
            let lab = Lab::with_out_dir(config, &out)?;
            let report = lab.run_steps_sweep(&steps)?;
            summarize(&report, &out.join("steps_report.csv"));
            Ok(())
        }
        Command::Plot { inputs, output } => plot(&out, inputs, output.as_deref()),
    }
}

fn train(config: &RunConfig, out: &Path) -> Result<()> {
    let train = config.train_config(config.train.loss_mode, config.train.w_train, config.run.seed)?;
    let trained = train_denoiser(&config.denoiser_config()?, &train, &config.schedule()?, &config.mixture()?)?;
    let digest = config.digest();
    let path = out.join("model.json");
    Checkpoint::from_denoiser(&trained.model, Some(train), &digest).save(&path)?;
    let mut text = format!("# config_digest={digest}\nstep,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
    }
    std::fs::write(out.join("losses.csv"), text)?;
    let tail = &trained.losses[trained.losses.len().saturating_sub(100)..];
    let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    say(format!("wrote {} (final 100-step mean loss {mean:.5})", path.display()));
    Ok(())
}

fn sample(config: &RunConfig, checkpoint: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_denoiser()?;
    let schedule = config.schedule()?;
    let condition = config.condition();
    let sampler = config.sampler_config(config.sampler.w, condition, config.run.seed)?;
    let classifier = match sampler.guidance {
        crate::guidance::GuidanceRule::ClassifierGrad { .. } => {
            let mut train = config.train_config(config.train.loss_mode, config.train.w_train, config.run.seed)?;
            train.steps = config.train.classifier_steps;
            Some(train_classifier(&model.config(), &train, &schedule, &config.mixture()?)?.model)
        }
        _ => None,
    };
    let ids: Vec<u64> = (0..sampler.n_samples as u64).collect();
    let (z, _) = generate_rows(&model, classifier.as_ref(), &sampler, &schedule, &ids, config.run.workers)?;
    let block = SampleBlock {
        points: z,
        meta: SampleMeta {
            class: condition,
            w: sampler.guidance.scale(),
            sampler: sampler.kind,
            steps: sampler.n_steps,
            seed: config.run.seed,
        },
    };
    write_samples_csv(output, &config.digest(), &[block])?;
    say(format!("wrote {} samples to {}", sampler.n_samples, output.display()));
    Ok(())
}

fn all_points(blocks: &[SampleBlock], provenance: &str) -> Result<SampleSet> {
    let mats: Vec<_> = blocks.iter().map(|b| b.points.clone()).collect();
    if mats.is_empty() {
        return Err(LabError::Usage("sample file has no rows".into()));
    }
    Ok(SampleSet::unlabeled(crate::numerics::Matrix::vstack(&mats)?, provenance))
}

fn eval(config: RunConfig, out: &Path, samples: &Path, reference: Option<&Path>) -> Result<()> {
    let (digest, blocks) = read_samples_csv(samples)?;
    let metric = config.eval.metric;
    if let Some(reference) = reference {
        let (digest_b, blocks_b) = read_samples_csv(reference)?;
        let a = all_points(&blocks, &digest)?;
        let b = all_points(&blocks_b, &digest_b)?;
        let value = match metric {
            MetricKind::Energy => energy_distance_with(&a, &b, config.run.workers)?,
            MetricKind::Sliced => {
                let mut stream = RandomStream::new(config.oracle_seed(config.run.seed));
                sliced_wasserstein(&a, &b, config.eval.n_proj, &mut stream)?
            }
        };
        say(format!("metric={} value={}", metric.as_str(), fmt_f64(value)));
        return Ok(());
    }
    let seed = config.run.seed;
    let lab = Lab::with_out_dir(config, out)?;
    for b in &blocks {
        let ConditionToken::Class(class) = b.meta.class else {
            return Err(LabError::Usage("oracle comparison needs class-conditional samples".into()));
        };
        if class >= lab.mixture().num_classes() {
            return Err(LabError::Index(format!("class {class} not in the configured mixture")));
        }
        let oracle = lab.oracle(class, b.meta.w, seed)?;
        let set = b.to_sample_set(&digest);
        let value = match metric {
            MetricKind::Energy => energy_distance_with(&set, &oracle.sample, lab.config().run.workers)?,
            MetricKind::Sliced => {
                let mut stream = RandomStream::new(lab.config().oracle_seed(seed)).derive(3);
                sliced_wasserstein(&set, &oracle.sample, lab.config().eval.n_proj, &mut stream)?
            }
        };
        say(format!(
            "class={class} w={} metric={} value={} noise_floor={} ratio={:.3}",
            b.meta.w,
            metric.as_str(),
            fmt_f64(value),
            fmt_f64(oracle.noise_floor),
            value / oracle.noise_floor
        ));
    }
    Ok(())
}

fn plot(out: &Path, inputs: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let mut sets = Vec::new();
    for path in inputs {
        let (digest, blocks) = read_samples_csv(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for b in blocks {
            let class = match b.meta.class {
                ConditionToken::Class(k) => format!("class {k}"),
                ConditionToken::Null => "unconditional".to_string(),
            };
            let label = if inputs.len() > 1 {
                format!("{stem}: {class}, w={}", b.meta.w)
            } else {
                format!("{class}, w={}", b.meta.w)
            };
            sets.push((b.to_sample_set(&digest), label));
        }
    }
    let target = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = inputs[0].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
            out.join(format!("{stem}.svg"))
        }
    };
    emit_scatter_svg(&sets, &target)?;
    say(format!("wrote {}", target.display()));
    Ok(())
}
