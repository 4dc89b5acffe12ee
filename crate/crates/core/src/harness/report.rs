//! CSV persistence for experiment reports and generated samples.
//!
//! Both formats open with a `# config_digest=<hex>` comment line followed
//! by a header row. Floats are written with 17 significant digits so they
//! read back bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::denoiser::ConditionToken;
use crate::evaldata::SampleSet;
use crate::numerics::Matrix;
use crate::sampling::SamplerKind;
use crate::training::LossMode;
use crate::{LabError, Result};

pub const REPORT_HEADER: [&str; 14] = [
    "experiment",
    "loss_mode",
    "w_train",
    "w_sample",
    "class",
    "sampler",
    "n_steps",
    "seed",
    "metric",
    "value",
    "noise_floor",
    "ratio_to_floor",
    "reference",
    "ratio_to_reference",
];

pub const SAMPLES_HEADER: [&str; 7] = ["x", "y", "class", "w", "sampler", "steps", "seed"];

const DIGEST_PREFIX: &str = "# config_digest=";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| LabError::Parse(format!("bad {what} value {s:?}")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| LabError::Parse(format!("bad {what} value {s:?}")))
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub experiment: String,
    pub loss_mode: LossMode,
    pub w_train: f64,
    pub w_sample: f64,
    pub class: usize,
    pub sampler: SamplerKind,
    pub n_steps: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub noise_floor: f64,
    /// Same model's value at the full step count (step sweeps only).
    pub reference: Option<f64>,
}

impl Cell {
    pub fn ratio_to_floor(&self) -> f64 {
        self.value / self.noise_floor
    }

    pub fn ratio_to_reference(&self) -> Option<f64> {
        self.reference.map(|r| self.value / r)
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        vec![
            self.experiment.clone(),
            self.loss_mode.to_string(),
            fmt_f64(self.w_train),
            fmt_f64(self.w_sample),
            self.class.to_string(),
            self.sampler.as_str().to_string(),
            self.n_steps.to_string(),
            self.seed.to_string(),
            self.metric.clone(),
            fmt_f64(self.value),
            fmt_f64(self.noise_floor),
            fmt_f64(self.ratio_to_floor()),
            opt(self.reference),
            opt(self.ratio_to_reference()),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != REPORT_HEADER.len() {
            return Err(LabError::Parse(format!("report row has {} fields", r.len())));
        }
        let loss_mode = match &r[1] {
            "standard" => LossMode::Standard,
            "updated" => LossMode::Updated,
            other => return Err(LabError::Parse(format!("unknown loss mode {other:?}"))),
        };
        let reference = if r[12].is_empty() {
            None
        } else {
            Some(parse_f64(&r[12], "reference")?)
        };
        Ok(Cell {
            experiment: r[0].to_string(),
            loss_mode,
            w_train: parse_f64(&r[2], "w_train")?,
            w_sample: parse_f64(&r[3], "w_sample")?,
            class: parse_u64(&r[4], "class")? as usize,
            sampler: parse_sampler(&r[5])?,
            n_steps: parse_u64(&r[6], "n_steps")? as usize,
            seed: parse_u64(&r[7], "seed")?,
            metric: r[8].to_string(),
            value: parse_f64(&r[9], "value")?,
            noise_floor: parse_f64(&r[10], "noise_floor")?,
            reference,
        })
    }
}

fn parse_sampler(s: &str) -> Result<SamplerKind> {
    match s {
        "ddim" => Ok(SamplerKind::Ddim),
        "ddpm" => Ok(SamplerKind::Ddpm),
        other => Err(LabError::Parse(format!("unknown sampler {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub config_digest: String,
    pub cells: Vec<Cell>,
}

impl RunReport {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            cells: Vec::new(),
        }
    }

    pub fn select<'a>(&'a self, pred: impl Fn(&Cell) -> bool + 'a) -> impl Iterator<Item = &'a Cell> + 'a {
        self.cells.iter().filter(move |c| pred(c))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (digest, body) = read_with_digest(path)?;
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().ne(REPORT_HEADER) {
            return Err(LabError::Parse(format!("unexpected report header in {}", path.display())));
        }
        let mut cells = Vec::new();
        for r in rdr.records() {
            cells.push(Cell::from_record(&r?)?);
        }
        Ok(Self {
            config_digest: digest,
            cells,
        })
    }
}

/// Appends cells to a report CSV, flushing after every row so an
/// interrupted run leaves only whole rows behind.
pub struct ReportWriter {
    writer: csv::Writer<File>,
    report: RunReport,
    path: PathBuf,
}

impl ReportWriter {
    pub fn create(path: &Path, config_digest: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = File::create(path)?;
        writeln!(file, "{DIGEST_PREFIX}{config_digest}")?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(REPORT_HEADER)?;
        writer.flush()?;
        Ok(Self {
            writer,
            report: RunReport::new(config_digest),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, cell: Cell) -> Result<()> {
        if !(cell.value.is_finite() && cell.noise_floor.is_finite()) {
            return Err(LabError::Numeric(format!(
                "non-finite metric in {} cell (seed {}, w {})",
                cell.experiment, cell.seed, cell.w_sample
            )));
        }
        self.writer.write_record(cell.record())?;
        self.writer.flush()?;
        self.report.cells.push(cell);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn finish(mut self) -> Result<RunReport> {
        self.writer.flush()?;
        Ok(self.report)
    }
}

fn read_with_digest(path: &Path) -> Result<(String, String)> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| LabError::Parse(format!("{} is empty", path.display())))?;
    let digest = first
        .strip_prefix(DIGEST_PREFIX)
        .ok_or_else(|| LabError::Parse(format!("{} lacks a config digest line", path.display())))?
        .to_string();
    let mut body = String::new();
    for line in lines {
        body.push_str(&line?);
        body.push('\n');
    }
    Ok((digest, body))
}

/// Metadata shared by a block of generated samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub class: ConditionToken,
    pub w: f64,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub points: Matrix,
    pub meta: SampleMeta,
}

fn class_field(c: ConditionToken) -> String {
    match c {
        ConditionToken::Class(k) => k.to_string(),
        ConditionToken::Null => "null".to_string(),
    }
}

/// Write sample blocks to a CSV; the file appears atomically.
pub fn write_samples_csv(path: &Path, config_digest: &str, blocks: &[SampleBlock]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("csv.partial");
    {
        let mut file = std::io::BufWriter::new(File::create(&tmp)?);
        writeln!(file, "{DIGEST_PREFIX}{config_digest}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(SAMPLES_HEADER)?;
        for b in blocks {
            if b.points.cols() != 2 {
                return Err(LabError::Shape("samples must have two columns".into()));
            }
            let class = class_field(b.meta.class);
            let wv = fmt_f64(b.meta.w);
            let (sampler, steps, seed) = (b.meta.sampler.as_str(), b.meta.steps.to_string(), b.meta.seed.to_string());
            for i in 0..b.points.rows() {
                let p = b.points.row(i);
                w.write_record([
                    fmt_f64(p[0]).as_str(),
                    fmt_f64(p[1]).as_str(),
                    &class,
                    &wv,
                    sampler,
                    &steps,
                    &seed,
                ])?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a samples CSV back into blocks of consecutive rows with equal
/// metadata.
pub fn read_samples_csv(path: &Path) -> Result<(String, Vec<SampleBlock>)> {
    let (digest, body) = read_with_digest(path)?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    if rdr.headers()?.iter().ne(SAMPLES_HEADER) {
        return Err(LabError::Parse(format!("unexpected samples header in {}", path.display())));
    }
    let mut blocks: Vec<(Vec<f64>, SampleMeta)> = Vec::new();
    for r in rdr.records() {
        let r = r?;
        if r.len() != SAMPLES_HEADER.len() {
            return Err(LabError::Parse(format!("samples row has {} fields", r.len())));
        }
        let class = match &r[2] {
            "null" => ConditionToken::Null,
            k => ConditionToken::Class(parse_u64(k, "class")? as usize),
        };
        let meta = SampleMeta {
            class,
            w: parse_f64(&r[3], "w")?,
            sampler: parse_sampler(&r[4])?,
            steps: parse_u64(&r[5], "steps")? as usize,
            seed: parse_u64(&r[6], "seed")?,
        };
        let (x, y) = (parse_f64(&r[0], "x")?, parse_f64(&r[1], "y")?);
        match blocks.last_mut() {
            Some((data, m)) if *m == meta => data.extend([x, y]),
            _ => blocks.push((vec![x, y], meta)),
        }
    }
    let blocks = blocks
        .into_iter()
        .map(|(data, meta)| {
            Ok(SampleBlock {
                points: Matrix::from_vec(data.len() / 2, 2, data)?,
                meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((digest, blocks))
}

impl SampleBlock {
    pub fn to_sample_set(&self, provenance: &str) -> SampleSet {
        let mut s = SampleSet::unlabeled(self.points.clone(), provenance);
        if let ConditionToken::Class(k) = self.meta.class {
            s.labels = Some(vec![k; self.points.rows()]);
        }
        s
    }
}
