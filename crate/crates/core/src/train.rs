//! Optimization, checkpointing, evaluation, prediction and the attention
//! benchmark.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lcau_tensor::{no_grad, GradStore, Param, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, attention_cost, AttentionScope, WindowLayout};
use crate::data::{self, batch_tensors, Sample, SplitDataset, SplitSpec, SynthConfig};
use crate::decoder::{LcauNet, ModelConfig};
use crate::error::{ModelError, Result};
use crate::supervision::{binarize, confusion, total_loss, LossConfig, MetricReport, MetricRow, Metrics};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Minimum improvement of the monitored value that resets patience.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 5, threshold: 1e-4, min_lr: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    /// Synthetic train / val / test sizes.
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            path: None,
            synth_train: 200,
            synth_val: 40,
            synth_test: 40,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip when set.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
    pub scheduler: PlateauConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset: width 24, batch 8, 20 epochs, lr 1e-3.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            max_steps: None,
            grad_clip: None,
            seed: 0,
            loss: LossConfig::default(),
            scheduler: PlateauConfig::default(),
            model: ModelConfig::new(24),
            data: DataConfig::default(),
        }
    }

    /// Full-size preset: width 96 with Swin-T head counts, batch 24,
    /// 80 epochs, lr 0.01.
    pub fn paper() -> Self {
        let mut model = ModelConfig::new(96);
        model.body.heads = [3, 6, 12, 24];
        model.fusion_heads = [3, 6, 12, 24];
        Self { lr: 0.01, batch_size: 24, epochs: 80, model, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("lr", self.lr), ("adam_eps", self.adam_eps), ("scheduler.factor", self.scheduler.factor)];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Config(format!("{k} = {v} must be positive")));
            }
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::Config("weight_decay must be >= 0 and betas in [0, 1)".into()));
        }
        if self.scheduler.factor >= 1.0 {
            return Err(ModelError::Config("scheduler.factor must be below 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch_size and epochs must be positive".into()));
        }
        let w = self.loss.weights;
        if w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.gamma < 0.0 {
            return Err(ModelError::Config("loss weights must be nonnegative".into()));
        }
        self.loss.edge.validate()?;
        self.model.validate()?;
        self.data.split.validate()?;
        if self.data.kind == DataKind::Directory && self.data.path.is_none() {
            return Err(ModelError::Config("data.kind = \"directory\" needs data.path".into()));
        }
        Ok(())
    }
}

/// Reads a TOML config (missing keys take desk defaults) and applies
/// `key.path=value` overrides, values parsed as TOML.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ModelError::Config(format!("{}: {e}", p.display())))?;
            text.parse().map_err(|e: toml::de::Error| ModelError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ModelError::Config(format!("override `{o}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ModelError::Config(format!("empty key in `{o}`")))?;
        let mut cur = &mut table;
        for p in parts {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ModelError::Config(format!("`{p}` in `{key}` is not a table")))?;
        }
        cur.insert(last.to_string(), value);
    }
    let cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ModelError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f32>>,
    #[serde(skip)]
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Param<f32>], cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor().elem_count()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor().elem_count()]).collect(),
        }
    }

    pub fn apply(&mut self, params: &[Param<f32>], grads: &GradStore<f32>, clip_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.get_id(p.id()) else { continue };
            let decay = if p.dims().len() >= 2 { self.lr * self.weight_decay } else { 0.0 };
            let mut w = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                let gj = g[j] * clip_scale as f32;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                let upd = self.lr * mh / (vh.sqrt() + self.eps) + decay * w[j] as f64;
                w[j] = (w[j] as f64 - upd) as f32;
            }
            p.set(w)?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule for a metric that should increase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self { cfg, best: f64::NEG_INFINITY, bad_epochs: 0 }
    }

    /// Returns the learning rate to use after observing `value`.
    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if value > self.best + self.cfg.threshold {
            self.best = value;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.cfg.patience {
            self.bad_epochs = 0;
            return (lr * self.cfg.factor).max(self.cfg.min_lr);
        }
        lr
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub bce: f64,
    pub dice_loss: f64,
    pub edge: f64,
    /// Mean per-image Dice of the thresholded predictions.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_dice_loss: f64,
    pub train_edge: f64,
    pub train_dice: f64,
    pub val: Metrics,
}

fn per_image_metrics(prob: &[f32], masks: &[f32], n_images: usize) -> Result<Vec<Metrics>> {
    let per = prob.len() / n_images.max(1);
    (0..n_images)
        .map(|i| {
            let p: Vec<f64> = prob[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
            let g: Vec<f64> = masks[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
            Ok(Metrics::from_counts(&confusion(&binarize(&p), &g)?))
        })
        .collect()
}

/// Model plus optimizer state.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: LcauNet<f32>,
    pub opt: AdamW,
    pub plateau: Plateau,
    pub epoch: usize,
    pub best_val_dice: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = LcauNet::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(&model.store.params(), &cfg);
        Ok(Self { plateau: Plateau::new(cfg.scheduler), model, opt, epoch: 0, best_val_dice: f64::NEG_INFINITY, cfg })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        let (img, mask, edge) = batch_tensors::<f32>(batch)?;
        let ids = || batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>();
        let out = self.model.forward(&img)?;
        let finite = |t: &Tensor<f32>| t.data().iter().all(|v| v.is_finite());
        if !finite(&out.logits) || !out.edge_maps.iter().all(finite) {
            return Err(ModelError::Data(format!("non-finite model output on batch {:?}", ids())));
        }
        let report = total_loss(&out.logits, &out.edge_maps, &mask, &edge, &self.cfg.loss)?;
        let loss = report.total_value();
        if !loss.is_finite() {
            return Err(ModelError::Data(format!(
                "non-finite loss {loss} (bce {}, dice {}, edge {}) on batch {:?}",
                report.bce,
                report.dice,
                report.edge,
                ids()
            )));
        }
        let grads = report.total.backward()?;
        let params = self.model.store.params();
        let scale = match self.cfg.grad_clip {
            Some(c) => {
                let norm: f64 = params
                    .iter()
                    .filter_map(|p| grads.get_id(p.id()))
                    .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
                    .sum::<f64>()
                    .sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.opt.apply(&params, &grads, scale)?;
        let prob: Vec<f32> = out.logits.sigmoid().to_vec();
        let dice = Metrics::mean(&per_image_metrics(&prob, mask.data(), batch.len())?).dice;
        Ok(StepStats { loss, bce: report.bce, dice_loss: report.dice, edge: report.edge, dice })
    }

    pub fn predict_probs(&self, batch: &[&Sample]) -> Result<Vec<f32>> {
        let (img, _, _) = batch_tensors::<f32>(batch)?;
        no_grad(|| Ok(self.model.forward(&img)?.logits.sigmoid().to_vec()))
    }

    /// Per-image metrics of the thresholded predictions.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricReport> {
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.cfg.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let prob = self.predict_probs(&refs)?;
            let masks: Vec<f32> = chunk.iter().flat_map(|s| s.mask.iter().copied()).collect();
            for (s, m) in chunk.iter().zip(per_image_metrics(&prob, &masks, chunk.len())?) {
                rows.push(MetricRow::new(s.id.clone(), m));
            }
        }
        Ok(MetricReport::new(rows))
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (0x9E37_79B9 * (epoch as u64 + 1))));
        order
    }

    /// Trains one epoch and validates; returns the epoch's log entry.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample], total_steps: &mut usize) -> Result<EpochLog> {
        let epoch = self.epoch;
        let order = self.epoch_order(train.len(), epoch);
        let mut acc = StepStats::default();
        let mut steps = 0;
        for idx in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps.is_some_and(|m| *total_steps >= m) {
                break;
            }
            let owned: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if self.cfg.data.augment {
                        data::augment(&train[i], self.cfg.seed ^ ((epoch as u64) << 32) ^ i as u64)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let batch: Vec<&Sample> = owned.iter().collect();
            let s = self.step(&batch)?;
            acc.loss += s.loss;
            acc.bce += s.bce;
            acc.dice_loss += s.dice_loss;
            acc.edge += s.edge;
            acc.dice += s.dice;
            steps += 1;
            *total_steps += 1;
        }
        let k = steps.max(1) as f64;
        let val_metrics = if val.is_empty() { Metrics::default() } else { self.evaluate(val)?.aggregate.metrics() };
        let lr_used = self.opt.lr;
        if !val.is_empty() {
            self.opt.lr = self.plateau.observe(val_metrics.dice, self.opt.lr);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            steps,
            lr: lr_used,
            train_loss: acc.loss / k,
            train_bce: acc.bce / k,
            train_dice_loss: acc.dice_loss / k,
            train_edge: acc.edge / k,
            train_dice: acc.dice / k,
            val: val_metrics,
        })
    }
}

/// Loads or generates the configured dataset.
pub fn load_dataset(cfg: &TrainConfig) -> Result<SplitDataset> {
    let size = cfg.model.image_size;
    match cfg.data.kind {
        DataKind::Synthetic => {
            let d = &cfg.data;
            data::synth_dataset(cfg.seed, (d.synth_train, d.synth_val, d.synth_test), size, &d.synth)
        }
        DataKind::Directory => {
            let path = cfg.data.path.as_ref().ok_or_else(|| ModelError::Config("data.path is required".into()))?;
            data::load_isic_dir(path, &cfg.data.split, size)
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub best_val_dice: f64,
    pub trainer: Trainer,
}

/// Full training run. With `out_dir`, writes `train_log.jsonl`, `best.ckpt`
/// (by validation Dice) and `last.ckpt`.
pub fn train(cfg: TrainConfig, dataset: &SplitDataset, out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if dataset.train.is_empty() {
        return Err(ModelError::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(std::fs::File::create(d.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut total_steps = 0;
    for _ in 0..trainer.cfg.epochs {
        if trainer.cfg.max_steps.is_some_and(|m| total_steps >= m) {
            break;
        }
        let entry = match trainer.run_epoch(&dataset.train, &dataset.val, &mut total_steps) {
            Ok(e) => e,
            Err(e) => {
                if let Some(d) = out_dir {
                    let _ = std::fs::write(d.join("failure.txt"), format!("epoch {}: {e}\n", trainer.epoch));
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(|e| ModelError::Data(e.to_string()))?;
            writeln!(w)?;
            w.flush()?;
        }
        if entry.val.dice > trainer.best_val_dice {
            trainer.best_val_dice = entry.val.dice;
            if let Some(d) = out_dir {
                save_checkpoint(&trainer, &d.join("best.ckpt"))?;
            }
        }
        on_epoch(&entry);
        history.push(entry);
    }
    if let Some(d) = out_dir {
        save_checkpoint(&trainer, &d.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { best_val_dice: trainer.best_val_dice, history, trainer })
}

const MAGIC: &[u8; 8] = b"LCAUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    epoch: usize,
    best_val_dice: Option<f64>,
    optimizer: AdamW,
    plateau: Plateau,
    tensors: Vec<TensorEntry>,
}

/// Container: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then for every parameter its values, first moments and second moments
/// as little-endian `f32`.
pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let params = t.model.store.params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: t.cfg.clone(),
        epoch: t.epoch,
        best_val_dice: t.best_val_dice.is_finite().then_some(t.best_val_dice),
        optimizer: t.opt.clone(),
        plateau: t.plateau,
        tensors: params.iter().map(|p| TensorEntry { name: p.name().to_string(), dims: p.dims() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Data(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for (i, p) in params.iter().enumerate() {
            for block in [p.to_vec(), t.opt.m[i].clone(), t.opt.v[i].clone()] {
                for v in block {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut trainer = Trainer::new(header.config.clone())?;
    let params = trainer.model.store.params();
    if params.len() != header.tensors.len() {
        return Err(bad("parameter count does not match the stored configuration"));
    }
    let mut floats = bytes[20 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (p, e) in params.iter().zip(&header.tensors) {
        if p.name() != e.name || p.dims() != e.dims {
            return Err(bad(&format!("tensor {} {:?} does not match model tensor {} {:?}", e.name, e.dims, p.name(), p.dims())));
        }
        let n: usize = e.dims.iter().product();
        let mut take = || -> Result<Vec<f32>> {
            let block: Vec<f32> = floats.by_ref().take(n).collect();
            if block.len() != n {
                return Err(bad("truncated tensor data"));
            }
            Ok(block)
        };
        p.set(take()?)?;
        m.push(take()?);
        v.push(take()?);
    }
    if floats.next().is_some() {
        return Err(bad("trailing data"));
    }
    trainer.opt = AdamW { m, v, ..header.optimizer };
    trainer.plateau = header.plateau;
    trainer.epoch = header.epoch;
    trainer.best_val_dice = header.best_val_dice.unwrap_or(f64::NEG_INFINITY);
    Ok(trainer)
}

#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    pub edge_maps: bool,
    pub overlay: bool,
    /// Directory holding `<stem>_segmentation.png` ground truth for overlays.
    pub gt_dir: Option<PathBuf>,
}

fn resize_nearest(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
            out.push(plane[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Writes `<stem>_mask.png` (0/255 at the input resolution) for every
/// readable image; unreadable files are reported and skipped.
pub fn predict(trainer: &Trainer, paths: &[PathBuf], out_dir: &Path, opts: &PredictOptions) -> Result<Vec<(PathBuf, Result<PathBuf>)>> {
    std::fs::create_dir_all(out_dir)?;
    let size = trainer.cfg.model.image_size;
    let mut results = Vec::new();
    for path in paths {
        let r = (|| -> Result<PathBuf> {
            let (orig, oh, ow) = data::read_rgb(path, None)?;
            let (img, h, w) = data::read_rgb(path, Some(size))?;
            let img = data::gray_world_normalize(&img, h, w);
            let t = Tensor::<f32>::from_vec(img, (1, 3, h, w))?;
            let out = no_grad(|| trainer.model.forward(&t))?;
            let prob: Vec<f32> = out.logits.sigmoid().to_vec();
            let mask: Vec<f32> = binarize(&prob.iter().map(|&v| v as f64).collect::<Vec<_>>()).iter().map(|&v| v as f32).collect();
            let full = resize_nearest(&mask, h, w, oh, ow);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let mask_path = out_dir.join(format!("{stem}_mask.png"));
            data::write_gray(&mask_path, &full, oh, ow)?;
            if opts.edge_maps {
                for (s, e) in out.edge_maps.iter().enumerate() {
                    data::write_gray(&out_dir.join(format!("{stem}_edge{s}.png")), e.data(), h, w)?;
                }
            }
            if opts.overlay {
                let gt = match &opts.gt_dir {
                    Some(d) => {
                        let p = d.join(format!("{stem}_segmentation.png"));
                        p.exists().then(|| data::read_mask(&p, None)).transpose()?.map(|(m, _, _)| m)
                    }
                    None => None,
                };
                let overlay = draw_overlay(&orig, oh, ow, &full, gt.as_deref());
                data::write_rgb(&out_dir.join(format!("{stem}_overlay.png")), &overlay, oh, ow * 2)?;
            }
            Ok(mask_path)
        })();
        results.push((path.clone(), r));
    }
    Ok(results)
}

/// Side-by-side image: the input on the left, the input with contours on
/// the right (prediction red, ground truth green).
fn draw_overlay(image: &[f32], h: usize, w: usize, pred: &[f32], gt: Option<&[f32]>) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0f32; 3 * n * 2];
    let pred_edge = data::derive_edge_gt(pred, h, w);
    let gt_edge = gt.filter(|g| g.len() == n).map(|g| data::derive_edge_gt(g, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = image[c * n + y * w + x];
                out[c * 2 * n + y * 2 * w + x] = v;
                let mut o = v;
                if gt_edge.as_ref().is_some_and(|e| e[y * w + x] > 0.5) {
                    o = [0.0, 1.0, 0.0][c];
                }
                if pred_edge[y * w + x] > 0.5 {
                    o = [1.0, 0.0, 0.0][c];
                }
                out[c * 2 * n + y * 2 * w + w + x] = o;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub global_ops: u64,
    pub local_ops: u64,
    pub global_ms: f64,
    pub local_ms: f64,
}

/// Times single-head cross-attention (four projections and the attention
/// core) over `grid x grid` tokens, globally and in `window` windows;
/// reports the minimum over `reps` runs.
pub fn bench_attention(grids: &[usize], c: usize, window: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |dims: (usize, usize)| -> Result<Tensor<f32>> {
        Ok(Tensor::from_vec((0..dims.0 * dims.1).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), dims)?)
    };
    let w: Vec<Tensor<f32>> = (0..4).map(|_| rand_t((c, c)).map(|t| t.scale(1.0 / (c as f64).sqrt()))).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &g in grids {
        let n = g * g;
        let e = rand_t((n, c))?.reshape((1, n, c))?;
        let b = rand_t((n, c))?.reshape((1, n, c))?;
        let run = |layout: &WindowLayout| -> Result<f64> {
            let start = Instant::now();
            no_grad(|| -> Result<()> {
                let q = layout.partition(&e.matmul(&w[0])?)?;
                let k = layout.partition(&b.matmul(&w[1])?)?;
                let v = layout.partition(&b.matmul(&w[2])?)?;
                let o = layout.reverse(&attend(&q, &k, &v, 1, None)?)?.matmul(&w[3])?;
                std::hint::black_box(o);
                Ok(())
            })?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        let global = WindowLayout::new(1, g, g, g, g, 0)?;
        let local = WindowLayout::new(1, g, g, window, window, 0)?;
        let (mut gm, mut lm) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..reps.max(1) {
            gm = gm.min(run(&global)?);
            lm = lm.min(run(&local)?);
        }
        let (gu, cu, wu) = (g as u64, c as u64, window as u64);
        rows.push(BenchRow {
            h: g,
            w: g,
            c,
            window,
            global_ops: attention_cost(gu, gu, cu, wu, wu, AttentionScope::Global),
            local_ops: attention_cost(gu, gu, cu, wu, wu, AttentionScope::Local),
            global_ms: gm,
            local_ms: lm,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ModelError::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| ModelError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_desk_preset() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c, TrainConfig::desk());
        assert_eq!((c.loss.weights.lambda1, c.loss.weights.lambda2, c.loss.weights.gamma), (0.6, 0.4, 0.2));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lr = 0.002\nepochs = 3\n[loss.weights]\ngamma = 0.5\n").unwrap();
        let c = parse_config(Some(&p), &["epochs=7".into(), "model.fusion=\"concat\"".into()]).unwrap();
        assert_eq!((c.lr, c.epochs, c.loss.weights.gamma), (0.002, 7, 0.5));
        assert_eq!(c.model.fusion, crate::decoder::FusionKind::Concat);
        let err = parse_config(None, &["learning_rate=1".into()]).unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("weight_decay"), "{err}");
        assert!(parse_config(None, &["batch_size=0".into()]).is_err());
    }

    #[test]
    fn presets_validate() {
        TrainConfig::paper().validate().unwrap();
        let p = TrainConfig::paper();
        assert_eq!((p.lr, p.weight_decay, p.batch_size, p.epochs), (0.01, 0.01, 24, 80));
        let d = TrainConfig::desk();
        assert_eq!((d.batch_size, d.epochs, d.model.body.embed_dim), (8, 20, 24));
    }

    #[test]
    fn plateau_waits_for_patience() {
        let mut p = Plateau::new(PlateauConfig { patience: 2, ..Default::default() });
        let mut lr = 1.0;
        let seq = [0.5, 0.6, 0.6, 0.6, 0.6, 0.7, 0.7];
        let mut lrs = vec![];
        for v in seq {
            lr = p.observe(v, lr);
            lrs.push(lr);
        }
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((loglog_slope(&x, &y) - 1.7).abs() < 1e-12);
    }
}
