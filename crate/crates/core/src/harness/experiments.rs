//! Experiment drivers: toy comparison, ablation grid and DDIM step sweep.
//!
//! A [`Lab`] owns the caches shared between experiments: trained models
//! (in memory and as checkpoints under `out_dir/checkpoints`, keyed by a
//! digest of everything that determines training), oracle draws with their
//! noise floors, and evaluated cells. Every cache key fully determines the
//! cached value, so reuse never changes results.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use super::config::{sha256_json, MetricKind, RunConfig};
use super::report::{fmt_f64, write_samples_csv, Cell, ReportWriter, RunReport, SampleBlock, SampleMeta};
use super::svg::emit_scatter_svg;
use crate::denoiser::{Checkpoint, ConditionToken, Denoiser, DenoiserConfig, NoiseClassifier};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::evaldata::{energy_distance_with, sliced_wasserstein, tilted_target_sample, MixtureSpec, SampleSet};
use crate::guidance::GuidanceRule;
use crate::numerics::{Matrix, RandomStream};
use crate::sampling::{generate_rows, SamplerKind};
use crate::training::{train_classifier, train_denoiser, LossMode, TrainConfig};
use crate::{LabError, Result};

/// Oracle draw for one (class, w, seed) plus the metric between it and an
/// independent second draw.
#[derive(Debug)]
pub struct Oracle {
    pub sample: SampleSet,
    pub noise_floor: f64,
}

/// Position of one cell in an experiment grid.
#[derive(Debug, Clone, Copy)]
struct Coord {
    mode: LossMode,
    w_train: f64,
    w: f64,
    class: usize,
    kind: SamplerKind,
    n_steps: usize,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CellKey {
    model: [u8; 32],
    class: usize,
    w_bits: u64,
    kind: SamplerKind,
    n_steps: usize,
    seed: u64,
}

#[derive(Debug, Clone)]
struct Evaluation {
    value: f64,
    noise_floor: f64,
    samples: Arc<Matrix>,
}

#[derive(Serialize)]
struct TrainingKey<'a> {
    schedule: &'a ScheduleConfig,
    model: &'a DenoiserConfig,
    mixture: &'a MixtureSpec,
    train: &'a TrainConfig,
}

/// A trained denoiser and the digest of its training inputs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub digest: String,
    pub model: Arc<Denoiser>,
}

pub struct Lab {
    config: RunConfig,
    digest: String,
    out_dir: PathBuf,
    schedule: NoiseSchedule,
    mixture: MixtureSpec,
    models: Mutex<HashMap<String, Arc<Denoiser>>>,
    classifiers: Mutex<HashMap<u64, Arc<NoiseClassifier>>>,
    oracles: Mutex<HashMap<(usize, u64, u64), Arc<Oracle>>>,
    cells: Mutex<HashMap<CellKey, Evaluation>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn hex_to_key(digest: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&digest[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    out
}

/// File-name friendly rendering of a guidance scale.
fn w_tag(w: f64) -> String {
    format!("{w}").replace('-', "m")
}

impl Lab {
    /// Lab writing to the configured output directory (or its environment
    /// override).
    pub fn new(config: RunConfig) -> Result<Self> {
        let out = config.resolved_out_dir();
        Self::with_out_dir(config, out)
    }

    pub fn with_out_dir(config: RunConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            digest: config.digest(),
            schedule: config.schedule()?,
            mixture: config.mixture()?,
            config,
            out_dir: out_dir.into(),
            models: Mutex::new(HashMap::new()),
            classifiers: Mutex::new(HashMap::new()),
            oracles: Mutex::new(HashMap::new()),
            cells: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn mixture(&self) -> &MixtureSpec {
        &self.mixture
    }

    fn workers(&self) -> usize {
        self.config.run.workers
    }

    fn training_digest(&self, train: &TrainConfig) -> Result<String> {
        Ok(sha256_json(&TrainingKey {
            schedule: &self.config.schedule,
            model: &self.config.denoiser_config()?,
            mixture: &self.mixture,
            train,
        }))
    }

    /// Train (or fetch from cache) the model for one loss mode and seed.
    pub fn model(&self, mode: LossMode, w_train: f64, seed: u64) -> Result<TrainedModel> {
        let train = self.config.train_config(mode, w_train, seed)?;
        let digest = self.training_digest(&train)?;
        if let Some(m) = lock(&self.models).get(&digest) {
            return Ok(TrainedModel {
                digest,
                model: Arc::clone(m),
            });
        }
        let path = self.out_dir.join("checkpoints").join(format!("{digest}.json"));
        let cached = Checkpoint::load(&path)
            .ok()
            .filter(|c| c.config_digest == digest)
            .and_then(|c| c.to_denoiser().ok());
        let model = match cached {
            Some(m) => m,
            None => {
                let trained = train_denoiser(&self.config.denoiser_config()?, &train, &self.schedule, &self.mixture)?;
                Checkpoint::from_denoiser(&trained.model, Some(train.clone()), &digest).save(&path)?;
                trained.model
            }
        };
        let model = Arc::new(model);
        lock(&self.models).insert(digest.clone(), Arc::clone(&model));
        Ok(TrainedModel { digest, model })
    }

    fn classifier(&self, seed: u64) -> Result<Option<Arc<NoiseClassifier>>> {
        if !matches!(self.config.sampler.rule(1.0), GuidanceRule::ClassifierGrad { .. }) {
            return Ok(None);
        }
        if let Some(c) = lock(&self.classifiers).get(&seed) {
            return Ok(Some(Arc::clone(c)));
        }
        let mut train = self.config.train_config(LossMode::Standard, 0.0, seed)?;
        train.steps = self.config.train.classifier_steps;
        let trained = train_classifier(&self.config.denoiser_config()?, &train, &self.schedule, &self.mixture)?;
        let c = Arc::new(trained.model);
        lock(&self.classifiers).insert(seed, Arc::clone(&c));
        Ok(Some(c))
    }

    fn metric(&self, a: &SampleSet, b: &SampleSet, stream: RandomStream) -> Result<f64> {
        let mut stream = stream;
        match self.config.eval.metric {
            MetricKind::Energy => energy_distance_with(a, b, self.workers()),
            MetricKind::Sliced => sliced_wasserstein(a, b, self.config.eval.n_proj, &mut stream),
        }
    }

    /// Oracle sample for `(class, w)` under experiment seed `seed`, with its
    /// noise floor: the metric between independent oracle draws, averaged
    /// over `eval.floor_pairs` pairs (the first pair includes the sample).
    pub fn oracle(&self, class: usize, w: f64, seed: u64) -> Result<Arc<Oracle>> {
        let key = (class, w.to_bits(), seed);
        if let Some(o) = lock(&self.oracles).get(&key) {
            return Ok(Arc::clone(o));
        }
        let root = RandomStream::new(self.config.oracle_seed(seed)).derive(class as u64);
        let n = self.config.eval.n_samples;
        let draw = |i: u64| tilted_target_sample(&self.mixture, class, w, n, &mut root.derive(i));
        let mut sample = draw(0)?;
        sample.provenance = self.digest.clone();
        let pairs = self.config.eval.floor_pairs as u64;
        let mut total = self.metric(&sample, &draw(1)?, root.derive(2).derive(0))?;
        for r in 1..pairs {
            total += self.metric(&draw(2 + 2 * r)?, &draw(3 + 2 * r)?, root.derive(2).derive(r))?;
        }
        let noise_floor = total / pairs as f64;
        let o = Arc::new(Oracle { sample, noise_floor });
        lock(&self.oracles).insert(key, Arc::clone(&o));
        Ok(o)
    }

    fn evaluate(&self, model: &TrainedModel, at: &Coord) -> Result<Evaluation> {
        let key = CellKey {
            model: hex_to_key(&model.digest),
            class: at.class,
            w_bits: at.w.to_bits(),
            kind: at.kind,
            n_steps: at.n_steps,
            seed: at.seed,
        };
        if let Some(e) = lock(&self.cells).get(&key) {
            return Ok(e.clone());
        }
        let mut sampler = self.config.sampler_config(at.w, ConditionToken::Class(at.class), at.seed)?;
        sampler.kind = at.kind;
        sampler.n_steps = at.n_steps;
        let classifier = self.classifier(at.seed)?;
        let ids: Vec<u64> = (0..sampler.n_samples as u64).collect();
        let (z, _) = generate_rows(&model.model, classifier.as_deref(), &sampler, &self.schedule, &ids, self.workers())?;
        let oracle = self.oracle(at.class, at.w, at.seed)?;
        let set = SampleSet::unlabeled(z, self.digest.clone());
        let stream = RandomStream::new(self.config.oracle_seed(at.seed))
            .derive(1 << 20)
            .derive(at.class as u64);
        let value = self.metric(&set, &oracle.sample, stream)?;
        let e = Evaluation {
            value,
            noise_floor: oracle.noise_floor,
            samples: Arc::new(set.points),
        };
        lock(&self.cells).insert(key, e.clone());
        Ok(e)
    }

    fn cell(&self, experiment: &str, at: &Coord, e: &Evaluation) -> Cell {
        Cell {
            experiment: experiment.to_string(),
            loss_mode: at.mode,
            w_train: at.w_train,
            w_sample: at.w,
            class: at.class,
            sampler: at.kind,
            n_steps: at.n_steps,
            seed: at.seed,
            metric: self.config.eval.metric.as_str().to_string(),
            value: e.value,
            noise_floor: e.noise_floor,
            reference: None,
        }
    }

    fn plot_block(&self, points: &Matrix, at: &Coord) -> SampleBlock {
        let k = self.config.eval.plot_points.min(points.rows());
        let idx: Vec<usize> = (0..k).collect();
        SampleBlock {
            points: points.select_rows(&idx),
            meta: SampleMeta {
                class: ConditionToken::Class(at.class),
                w: at.w,
                sampler: at.kind,
                steps: at.n_steps,
                seed: at.seed,
            },
        }
    }

    /// CSV plus SVG panel with one point cloud per class.
    fn write_panel(&self, stem: &str, blocks: &[SampleBlock]) -> Result<()> {
        write_samples_csv(&self.out_dir.join(format!("{stem}.csv")), &self.digest, blocks)?;
        let sets: Vec<(SampleSet, String)> = blocks
            .iter()
            .map(|b| {
                let label = match b.meta.class {
                    ConditionToken::Class(k) => format!("class {k}"),
                    ConditionToken::Null => "unconditional".to_string(),
                };
                (b.to_sample_set(&self.digest), label)
            })
            .collect();
        emit_scatter_svg(&sets, &self.out_dir.join(format!("{stem}.svg")))
    }

    fn oracle_panel(&self, stem: &str, w: f64, seed: u64) -> Result<()> {
        let mut blocks = Vec::new();
        for class in 0..self.mixture.num_classes() {
            let o = self.oracle(class, w, seed)?;
            let at = Coord {
                mode: LossMode::Standard,
                w_train: 0.0,
                w,
                class,
                kind: self.config.sampler.kind,
                n_steps: 0,
                seed,
            };
            blocks.push(self.plot_block(&o.sample.points, &at));
        }
        self.write_panel(stem, &blocks)
    }

    /// Standard vs updated loss at every configured `w`, all classes and
    /// seeds. Writes `toy_report.csv` and, for the first seed, sample
    /// panels per (mode, w) alongside oracle panels.
    pub fn run_toy_comparison(&self) -> Result<RunReport> {
        let cfg = &self.config;
        let mut writer = ReportWriter::create(&self.out_dir.join("toy_report.csv"), &self.digest)?;
        let (kind, n_steps) = (cfg.sampler.kind, cfg.sampler.n_steps);
        let seeds = cfg.seeds();
        for (si, &seed) in seeds.iter().enumerate() {
            for mode in [LossMode::Standard, LossMode::Updated] {
                let model = self.model(mode, cfg.train.w_train, seed)?;
                for &w in &cfg.eval.w_sample {
                    let mut blocks = Vec::new();
                    for class in 0..self.mixture.num_classes() {
                        let at = Coord {
                            mode,
                            w_train: cfg.train.w_train,
                            w,
                            class,
                            kind,
                            n_steps,
                            seed,
                        };
                        let e = self.evaluate(&model, &at)?;
                        writer.append(self.cell("toy", &at, &e))?;
                        if si == 0 {
                            blocks.push(self.plot_block(&e.samples, &at));
                        }
                    }
                    if si == 0 {
                        self.write_panel(&format!("toy_{mode}_w{}", w_tag(w)), &blocks)?;
                    }
                }
            }
            if si == 0 {
                for &w in &cfg.eval.w_sample {
                    self.oracle_panel(&format!("toy_oracle_w{}", w_tag(w)), w, seed)?;
                }
            }
        }
        writer.finish()
    }

    /// Updated-loss models for every `w_train`, each evaluated at every
    /// `w_sample` against the oracle tilted at `w_sample`. Writes
    /// `ablation_report.csv` and `ablation_matrix.csv` (class-averaged
    /// metric, one row per seed and `w_train`).
    pub fn run_ablation_grid(&self, w_train: &[f64], w_sample: &[f64]) -> Result<RunReport> {
        if w_train.is_empty() || w_sample.is_empty() {
            return Err(LabError::Config("ablation needs non-empty w_train and w_sample lists".into()));
        }
        for &w in w_train.iter().chain(w_sample) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LabError::Config(format!("guidance scales must be >= 0, got {w}")));
            }
        }
        let cfg = &self.config;
        let (kind, n_steps) = (cfg.sampler.kind, cfg.sampler.n_steps);
        let k = self.mixture.num_classes();
        let mut writer = ReportWriter::create(&self.out_dir.join("ablation_report.csv"), &self.digest)?;
        let mut rows: Vec<(u64, f64, Vec<f64>)> = Vec::new();
        for (si, &seed) in cfg.seeds().iter().enumerate() {
            for &wt in w_train {
                let model = self.model(LossMode::Updated, wt, seed)?;
                let mut row = Vec::with_capacity(w_sample.len());
                for &ws in w_sample {
                    let mut sum = 0.0;
                    let mut blocks = Vec::new();
                    for class in 0..k {
                        let at = Coord {
                            mode: LossMode::Updated,
                            w_train: wt,
                            w: ws,
                            class,
                            kind,
                            n_steps,
                            seed,
                        };
                        let e = self.evaluate(&model, &at)?;
                        sum += e.value;
                        writer.append(self.cell("ablation", &at, &e))?;
                        if si == 0 {
                            blocks.push(self.plot_block(&e.samples, &at));
                        }
                    }
                    if si == 0 {
                        self.write_panel(&format!("ablation_wt{}_ws{}", w_tag(wt), w_tag(ws)), &blocks)?;
                    }
                    row.push(sum / k as f64);
                }
                rows.push((seed, wt, row));
            }
        }
        self.write_matrix(&self.out_dir.join("ablation_matrix.csv"), w_sample, &rows)?;
        writer.finish()
    }

    fn write_matrix(&self, path: &Path, w_sample: &[f64], rows: &[(u64, f64, Vec<f64>)]) -> Result<()> {
        let mut text = format!("# config_digest={}\nseed,w_train", self.digest);
        for w in w_sample {
            text.push_str(&format!(",w_sample={w}"));
        }
        text.push('\n');
        for (seed, wt, vals) in rows {
            text.push_str(&format!("{seed},{}", fmt_f64(*wt)));
            for v in vals {
                text.push(',');
                text.push_str(&fmt_f64(*v));
            }
            text.push('\n');
        }
        let tmp = path.with_extension("csv.partial");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Both trained models under DDIM at each step count with guidance
    /// fixed at `eval.sweep_w`. Each cell carries the same model's value at
    /// the full step count as its reference. Writes `steps_report.csv`.
    pub fn run_steps_sweep(&self, steps: &[usize]) -> Result<RunReport> {
        let cfg = &self.config;
        let t_max = self.schedule.len();
        if steps.is_empty() {
            return Err(LabError::Config("step sweep needs at least one step count".into()));
        }
        if let Some(&bad) = steps.iter().find(|&&n| n == 0 || n > t_max) {
            return Err(LabError::Config(format!("step counts must lie in 1..={t_max}, got {bad}")));
        }
        let w = cfg.eval.sweep_w;
        let kind = SamplerKind::Ddim;
        let mut writer = ReportWriter::create(&self.out_dir.join("steps_report.csv"), &self.digest)?;
        for &seed in &cfg.seeds() {
            for mode in [LossMode::Standard, LossMode::Updated] {
                let model = self.model(mode, cfg.train.w_train, seed)?;
                for class in 0..self.mixture.num_classes() {
                    let mut at = Coord {
                        mode,
                        w_train: cfg.train.w_train,
                        w,
                        class,
                        kind,
                        n_steps: t_max,
                        seed,
                    };
                    let reference = self.evaluate(&model, &at)?.value;
                    for &n in steps {
                        at.n_steps = n;
                        let e = self.evaluate(&model, &at)?;
                        let mut c = self.cell("steps", &at, &e);
                        c.reference = Some(reference);
                        writer.append(c)?;
                    }
                }
            }
        }
        writer.finish()
    }
}

pub fn run_toy_comparison(config: &RunConfig) -> Result<RunReport> {
    Lab::new(config.clone())?.run_toy_comparison()
}

pub fn run_ablation_grid(config: &RunConfig, w_train: &[f64], w_sample: &[f64]) -> Result<RunReport> {
    Lab::new(config.clone())?.run_ablation_grid(w_train, w_sample)
}

pub fn run_steps_sweep(config: &RunConfig, steps: &[usize]) -> Result<RunReport> {
    Lab::new(config.clone())?.run_steps_sweep(steps)
}
