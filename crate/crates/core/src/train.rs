//! Training, evaluation and ablation on the synthetic dataset.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, ContrastiveConfig, ALPHA_SWEEP, DEFAULT_ALPHA};
use crate::model::{ModelConfig, TransFg};
use crate::optim::{CosineSchedule, Sgd};
use crate::patch::PatchConfig;
use crate::psm::{RolloutConfig, SelectionResult};
use crate::synth::{generate, localization_hit, random_hit_probability, Dataset, SplitDataset, SynthConfig};
use crate::tape::Tape;
use crate::tensor::{load_tfgt, save_tfgt, Tensor};

pub const METRICS_HEADER: &str = "step,lr,loss_cross,loss_con,train_acc";

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Everything needed to reproduce a run. Keys in the text form are the
/// kebab-case field names.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    /// When off, patches tile without overlap (stride = patch).
    pub overlap: bool,
    pub psm: bool,
    pub identity_mix: bool,
    pub contrastive: bool,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Seeds parameter init and batch order.
    pub seed: u64,
    pub data_seed: u64,
    pub superclasses: usize,
    pub subclasses: usize,
    pub glyph_size: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub noise_std: f64,
    /// Load the dataset from here instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            num_classes: synth.num_classes(),
            image_size: synth.image_size,
            channels: synth.channels,
            patch: 4,
            stride: 3,
            overlap: true,
            psm: true,
            identity_mix: false,
            contrastive: true,
            alpha: DEFAULT_ALPHA,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            steps: 300,
            seed: 0,
            data_seed: synth.seed,
            superclasses: synth.num_superclasses,
            subclasses: synth.subclasses_per_superclass,
            glyph_size: synth.glyph_size,
            samples_per_class: synth.samples_per_class,
            test_samples_per_class: synth.test_samples_per_class,
            noise_std: synth.noise_std,
            data_dir: None,
            out_dir: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 28] = [
    "layers",
    "heads",
    "dim",
    "mlp-ratio",
    "num-classes",
    "image-size",
    "channels",
    "patch",
    "stride",
    "overlap",
    "psm",
    "identity-mix",
    "contrastive",
    "alpha",
    "learning-rate",
    "momentum",
    "batch-size",
    "steps",
    "seed",
    "data-seed",
    "superclasses",
    "subclasses",
    "glyph-size",
    "samples-per-class",
    "test-samples-per-class",
    "noise-std",
    "data-dir",
    "out-dir",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        v => Err(Error::Config(format!("bad value {v:?} for {key}: expected on/off"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        match key.as_str() {
            "layers" => self.layers = parse(&key, value)?,
            "heads" => self.heads = parse(&key, value)?,
            "dim" => self.dim = parse(&key, value)?,
            "mlp-ratio" => self.mlp_ratio = parse(&key, value)?,
            "num-classes" => self.num_classes = parse(&key, value)?,
            "image-size" => self.image_size = parse(&key, value)?,
            "channels" => self.channels = parse(&key, value)?,
            "patch" => self.patch = parse(&key, value)?,
            "stride" => self.stride = parse(&key, value)?,
            "overlap" => self.overlap = parse_bool(&key, value)?,
            "psm" => self.psm = parse_bool(&key, value)?,
            "identity-mix" => self.identity_mix = parse_bool(&key, value)?,
            "contrastive" => self.contrastive = parse_bool(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "learning-rate" => self.learning_rate = parse(&key, value)?,
            "momentum" => self.momentum = parse(&key, value)?,
            "batch-size" => self.batch_size = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "data-seed" => self.data_seed = parse(&key, value)?,
            "superclasses" => self.superclasses = parse(&key, value)?,
            "subclasses" => self.subclasses = parse(&key, value)?,
            "glyph-size" => self.glyph_size = parse(&key, value)?,
            "samples-per-class" => self.samples_per_class = parse(&key, value)?,
            "test-samples-per-class" => self.test_samples_per_class = parse(&key, value)?,
            "noise-std" => self.noise_std = parse(&key, value)?,
            "data-dir" => self.data_dir = opt_path(value),
            "out-dir" => self.out_dir = opt_path(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        match key {
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "dim" => self.dim.to_string(),
            "mlp-ratio" => self.mlp_ratio.to_string(),
            "num-classes" => self.num_classes.to_string(),
            "image-size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            "patch" => self.patch.to_string(),
            "stride" => self.stride.to_string(),
            "overlap" => on(self.overlap),
            "psm" => on(self.psm),
            "identity-mix" => on(self.identity_mix),
            "contrastive" => on(self.contrastive),
            "alpha" => self.alpha.to_string(),
            "learning-rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "data-seed" => self.data_seed.to_string(),
            "superclasses" => self.superclasses.to_string(),
            "subclasses" => self.subclasses.to_string(),
            "glyph-size" => self.glyph_size.to_string(),
            "samples-per-class" => self.samples_per_class.to_string(),
            "test-samples-per-class" => self.test_samples_per_class.to_string(),
            "noise-std" => self.noise_std.to_string(),
            "data-dir" => path(&self.data_dir),
            "out-dir" => path(&self.out_dir),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Canonical `key = value` text, one line per key in `CONFIG_KEYS` order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().fold(String::new(), |mut s, k| {
            writeln!(s, "{k} = {}", self.value_of(k)).unwrap();
            s
        })
    }

    /// SHA-256 (hex, first 16 digits) of the canonical text without the
    /// output directory.
    pub fn hash(&self) -> String {
        let text = Self {
            out_dir: None,
            ..self.clone()
        }
        .to_text();
        Sha256::digest(text.as_bytes())[..8]
            .iter()
            .fold(String::new(), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }

    pub fn effective_stride(&self) -> usize {
        if self.overlap {
            self.stride
        } else {
            self.patch
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            patch: PatchConfig::new(
                self.image_size,
                self.image_size,
                self.channels,
                self.patch,
                self.effective_stride(),
            )?,
            encoder: EncoderConfig {
                layers: self.layers,
                heads: self.heads,
                dim: self.dim,
                mlp_ratio: self.mlp_ratio,
            },
            num_classes: self.num_classes,
            psm: self.psm,
            rollout: RolloutConfig {
                identity_mix: self.identity_mix,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            channels: self.channels,
            num_superclasses: self.superclasses,
            subclasses_per_superclass: self.subclasses,
            glyph_size: self.glyph_size,
            samples_per_class: self.samples_per_class,
            test_samples_per_class: self.test_samples_per_class,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        let positive = [
            ("mlp-ratio", self.mlp_ratio),
            ("batch-size", self.batch_size),
            ("steps", self.steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.contrastive {
            ContrastiveConfig::new(self.alpha)?;
            if self.batch_size < 2 {
                return Err(Error::Config(
                    "batch-size must be at least 2 with the contrastive loss".into(),
                ));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning-rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.data_dir.is_none() {
            let synth = self.synth_config();
            synth.validate()?;
            if synth.num_classes() != self.num_classes {
                return Err(Error::Config(format!(
                    "num-classes {} != superclasses × subclasses = {}",
                    self.num_classes,
                    synth.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// The dataset this config trains on.
    pub fn dataset(&self) -> Result<SplitDataset> {
        let data = match &self.data_dir {
            Some(dir) => SplitDataset::import(dir)?,
            None => generate(&self.synth_config())?,
        };
        let model = self.model_config()?;
        let want = [model.patch.height, model.patch.width, model.patch.channels];
        for split in [&data.train, &data.test] {
            if split.images.shape()[1..] != want {
                return Err(Error::shape("dataset", split.images.shape(), &want));
            }
            if split.num_classes != self.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, config expects {}",
                    split.num_classes, self.num_classes
                )));
            }
        }
        Ok(data)
    }
}

/// One row of the metrics trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_cross: f64,
    pub loss_con: f64,
    /// Accuracy on the step's batch.
    pub train_acc: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss_cross, self.loss_con, self.train_acc
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TransFg<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Batch order: a fresh seeded permutation per epoch, partial tail dropped.
struct Batches {
    rng: Xoshiro256PlusPlus,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(len: usize, size: usize, seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed_ba7c_4e5d_0001),
            order: (0..len).collect(),
            pos: len,
            size: size.min(len),
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.size;
        &self.order[self.pos - self.size..self.pos]
    }
}

/// Train on an already-loaded dataset; writes nothing.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = TransFg::<f32>::new(cfg.model_config()?, cfg.seed)?;
    let mut opt = Sgd::<f32>::new(model.params(), cfg.momentum)?;
    let schedule = CosineSchedule {
        base: cfg.learning_rate,
        steps: cfg.steps,
    };
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (images, labels) = data.batch(batches.next())?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &images)?;
        let cross = tape.cross_entropy(pass.logits, &labels)?;
        let (total, con) = if cfg.contrastive {
            let con = contrastive_loss(&mut tape, pass.cls, &labels, cfg.alpha)?;
            (tape.add(cross, con)?, Some(con))
        } else {
            (cross, None)
        };
        let preds = TransFg::predictions(&tape, pass.logits);
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let loss_cross = tape.scalar_value(cross)?.into();
        let loss_con = con.map(|c| tape.scalar_value(c)).transpose()?.map_or(0.0, f64::from);
        if !f64::is_finite(loss_cross) || !loss_con.is_finite() {
            return Err(Error::Degenerate(format!("loss diverged at step {step}")));
        }
        let grads = tape.backward(total)?;
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate_grads(&grads, &bound)?;
        let lr = schedule.lr(step);
        opt.step(params, lr)?;
        metrics.push(StepMetrics {
            step,
            lr,
            loss_cross,
            loss_con,
            train_acc: correct as f64 / labels.len() as f64,
        });
    }
    Ok(TrainOutcome { model, metrics })
}

/// Train per `cfg`; with an output directory, write `metrics.csv`,
/// `config.txt` and a checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let outcome = train_on(cfg, &data.train)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        fs::write(&path, metrics_csv(&outcome.metrics)).map_err(|e| Error::io(&path, e))?;
        save_checkpoint(dir, cfg, &outcome.model)?;
    }
    Ok(outcome)
}

/// Write `config.txt`, `params.tfgt` (every parameter, store order) and
/// `manifest.txt` (`name shape record` per parameter).
pub fn save_checkpoint(dir: &Path, cfg: &TrainConfig, model: &TransFg<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    let tensors: Vec<&Tensor<f32>> = model.params().iter().map(|(_, t)| t).collect();
    save_tfgt(&dir.join("params.tfgt"), &tensors)?;
    let mut manifest = String::from("# name shape record\n");
    for (i, (name, t)) in model.params().iter().enumerate() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "{name} {} {i}", shape.join("x")).unwrap();
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, TransFg<f32>)> {
    let cfg = TrainConfig::load(&dir.join("config.txt"))?;
    let mut model = TransFg::<f32>::new(cfg.model_config()?, cfg.seed)?;
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().next().unwrap_or_default().to_string())
        .collect();
    let tensors = load_tfgt::<f32>(&dir.join("params.tfgt"))?;
    if names.len() != tensors.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("manifest lists {} tensors, file holds {}", names.len(), tensors.len()),
        });
    }
    model
        .params_mut()
        .load_values(names.into_iter().zip(tensors).collect())?;
    Ok((cfg, model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Fraction of samples where a selected patch overlaps the glyph.
    pub localization_hit_rate: f64,
    /// Same fraction for uniformly random token indices.
    pub random_baseline: f64,
    pub predictions: Vec<usize>,
    pub selections: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "accuracy = {}", self.accuracy).unwrap();
        writeln!(s, "localization_hit_rate = {}", self.localization_hit_rate).unwrap();
        writeln!(s, "random_baseline = {}", self.random_baseline).unwrap();
        for (c, a) in self.per_class.iter().enumerate() {
            writeln!(s, "class_{c}_accuracy = {a}").unwrap();
        }
        s
    }
}

/// Accuracy, per-class accuracy and localization on `data`. Without part
/// selection the localization uses the same rollout the selector would.
pub fn evaluate(model: &TransFg<f32>, data: &Dataset) -> Result<EvalReport> {
    let cfg = model.config();
    if data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut selections = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &images)?;
        predictions.extend(TransFg::predictions(&tape, pass.logits));
        if cfg.psm {
            selections.extend(pass.selected);
        } else {
            for b in 0..chunk.len() {
                selections.push(model.selection(&tape, &pass, b)?.indices);
            }
        }
    }
    let mut hits = vec![0usize; cfg.num_classes];
    let mut counts = vec![0usize; cfg.num_classes];
    for (&p, &l) in predictions.iter().zip(&data.labels) {
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let located = selections
        .iter()
        .zip(&data.glyphs)
        .filter(|(s, g)| localization_hit(s, g, &cfg.patch))
        .count();
    let glyph = data.glyphs.first().map_or(1, |g| g.size);
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / n,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        localization_hit_rate: located as f64 / n,
        random_baseline: random_hit_probability(cfg.patch.height, glyph, &cfg.patch, cfg.encoder.heads),
        predictions,
        selections,
    })
}

/// Full rollout and selection for the given samples of `data`.
pub fn inspect(model: &TransFg<f32>, data: &Dataset, indices: &[usize]) -> Result<Vec<SelectionResult<f32>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &images)?;
        for b in 0..chunk.len() {
            out.push(model.selection(&tape, &pass, b)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: String,
    pub cell: usize,
    pub overlap: bool,
    pub psm: bool,
    pub contrastive: bool,
    pub alpha: f64,
    pub config_hash: String,
    pub final_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub localization: f64,
}

pub const ABLATION_HEADER: &str =
    "group,cell,overlap,psm,contrastive,alpha,config_hash,final_loss,train_acc,test_acc,localization";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.group,
            self.cell,
            on(self.overlap),
            on(self.psm),
            on(self.contrastive),
            self.alpha,
            self.config_hash,
            self.final_loss,
            self.train_acc,
            self.test_acc,
            self.localization
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "ablation row",
            detail,
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields, got {}: {line:?}", f.len())));
        }
        let flag = |s: &str| parse_bool("flag", s).map_err(|e| bad(e.to_string()));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        Ok(Self {
            group: f[0].to_string(),
            cell: f[1].parse().map_err(|e| bad(format!("{e}")))?,
            overlap: flag(f[2])?,
            psm: flag(f[3])?,
            contrastive: flag(f[4])?,
            alpha: num(f[5])?,
            config_hash: f[6].to_string(),
            final_loss: num(f[7])?,
            train_acc: num(f[8])?,
            test_acc: num(f[9])?,
            localization: num(f[10])?,
        })
    }
}

/// Parse an ablation table written by [`ablate`].
pub fn parse_ablation_table(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == ABLATION_HEADER => {}
        other => {
            return Err(Error::Format {
                what: "ablation table",
                detail: format!("bad header {other:?}"),
            })
        }
    }
    lines.filter(|l| !l.trim().is_empty()).map(AblationRow::parse).collect()
}

/// The twelve cells: overlap × psm × contrastive, then the margin sweep
/// with every component on.
pub fn ablation_cells(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut cells = Vec::with_capacity(12);
    for overlap in [false, true] {
        for psm in [false, true] {
            for contrastive in [false, true] {
                cells.push((
                    "grid",
                    TrainConfig {
                        overlap,
                        psm,
                        contrastive,
                        out_dir: None,
                        ..base.clone()
                    },
                ));
            }
        }
    }
    for alpha in ALPHA_SWEEP {
        cells.push((
            "alpha_sweep",
            TrainConfig {
                overlap: true,
                psm: true,
                contrastive: true,
                alpha,
                out_dir: None,
                ..base.clone()
            },
        ));
    }
    cells
}

/// Run every ablation cell on one dataset. With an output directory the
/// table goes to `ablation.csv`, each row flushed as its cell finishes.
pub fn ablate(base: &TrainConfig, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = base.dataset()?;
    let mut table = match &base.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("ablation.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{ABLATION_HEADER}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(12);
    for (cell, (group, cfg)) in ablation_cells(base).into_iter().enumerate() {
        let outcome = train_on(&cfg, &data.train)?;
        let train_report = evaluate(&outcome.model, &data.train)?;
        let test_report = evaluate(&outcome.model, &data.test)?;
        let last = outcome.metrics.last().expect("at least one step");
        let row = AblationRow {
            group: group.to_string(),
            cell,
            overlap: cfg.overlap,
            psm: cfg.psm,
            contrastive: cfg.contrastive,
            alpha: cfg.alpha,
            config_hash: cfg.hash(),
            final_loss: last.loss_cross + last.loss_con,
            train_acc: train_report.accuracy,
            test_acc: test_report.accuracy,
            localization: test_report.localization_hit_rate,
        };
        if let Some((path, w)) = &mut table {
            writeln!(w, "{}", row.csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TrainConfig {
        TrainConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            num_classes: 4,
            image_size: 8,
            patch: 4,
            stride: 2,
            batch_size: 4,
            steps: 3,
            superclasses: 2,
            subclasses: 2,
            glyph_size: 2,
            samples_per_class: 3,
            test_samples_per_class: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn text_roundtrip_and_hash() {
        let cfg = TrainConfig {
            out_dir: Some("runs/x".into()),
            alpha: 0.2,
            psm: false,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        let moved = TrainConfig {
            out_dir: None,
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn config_errors() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.set("bogus", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("layers", "x"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("layers 3"), Err(Error::Config(_))));
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.stride = 5));
        assert!(bad(|c| c.steps = 0));
        assert!(bad(|c| c.num_classes = 10));
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.alpha = 1.5));
        let mut ok = TrainConfig {
            batch_size: 1,
            contrastive: false,
            ..TrainConfig::default()
        };
        assert!(ok.validate().is_ok());
        ok.apply_text("# comment\nsteps = 7  # trailing\n\nmlp_ratio=2\n")
            .unwrap();
        assert_eq!((ok.steps, ok.mlp_ratio), (7, 2));
    }

    #[test]
    fn no_overlap_means_stride_equals_patch() {
        let cfg = TrainConfig {
            overlap: false,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.model_config().unwrap().patch.stride, cfg.patch);
        assert_eq!(TrainConfig::default().model_config().unwrap().patch.grid().count, 100);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let data = cfg.dataset().unwrap();
        let out = train_on(&cfg, &data.train).unwrap();
        let init = TransFg::<f32>::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
        for ((_, a), (_, b)) in out.model.params().iter().zip(init.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(out.metrics.len(), 3);
        assert!(out.metrics.iter().all(|m| m.lr == 0.0));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batches::new(10, 4, 1);
        let mut seen: Vec<usize> = b.next().to_vec();
        seen.extend(b.next());
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(b.next().len(), 4);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        let out = train(&cfg).unwrap();
        let (cfg2, model) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for ((_, a), (_, b)) in out.model.params().iter().zip(model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn evaluate_is_repeatable() {
        let cfg = tiny();
        let data = cfg.dataset().unwrap();
        let model = TransFg::<f32>::new(cfg.model_config().unwrap(), 0).unwrap();
        let a = evaluate(&model, &data.test).unwrap();
        let b = evaluate(&model, &data.test).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_class.len(), 4);
        assert!((0.0..=1.0).contains(&a.random_baseline));
    }

    #[test]
    fn ablation_layout() {
        let cells = ablation_cells(&TrainConfig::default());
        assert_eq!(cells.len(), 12);
        assert_eq!(cells.iter().filter(|(g, _)| *g == "grid").count(), 8);
        let alphas: Vec<f64> = cells[8..].iter().map(|(_, c)| c.alpha).collect();
        assert_eq!(alphas, ALPHA_SWEEP);
        let mut hashes: Vec<String> = cells.iter().map(|(_, c)| c.hash()).collect();
        hashes.sort();
        hashes.dedup();
        // the α=0.4 sweep cell repeats the all-on grid cell
        assert_eq!(hashes.len(), 11);
    }

    #[test]
    fn ablation_row_roundtrip() {
        let row = AblationRow {
            group: "grid".into(),
            cell: 3,
            overlap: false,
            psm: true,
            contrastive: true,
            alpha: 0.4,
            config_hash: "00ff".into(),
            final_loss: 1.25,
            train_acc: 0.5,
            test_acc: 0.25,
            localization: 0.75,
        };
        let table = format!("{ABLATION_HEADER}\n{}\n", row.csv_row());
        assert_eq!(parse_ablation_table(&table).unwrap(), vec![row]);
        assert!(parse_ablation_table("nope\n").is_err());
    }
}
