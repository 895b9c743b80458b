//! Camera-model identification training.
//!
//! Each epoch runs `ceil(patches_per_epoch / batch_size)` Adam steps. A
//! step's patches and dropout masks depend only on the seed and the global
//! step index, so a run resumed from a checkpoint follows the same
//! trajectory as an uninterrupted one.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fixed_patches, sample_patches, Corpus, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::network::{
    build_graph, forward, load_checkpoint, save_checkpoint, total_loss, update_running_stats,
    L2Scope, LossConfig, LossValues, ModelParams, RfMode, BN_MOMENTUM,
};
use crate::tensor::{ops, AdamConfig, AdamState, Mode, Tape, Tensor};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const REPORT: &str = "report.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// M, patches per mini-batch.
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs trained at the initial rate before decay starts.
    pub constant_lr_epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Patches per forward call during validation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 10k patches per epoch for 20 epochs, with the
    /// constant-rate phase scaled from 80 of 130 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 50,
            patches_per_epoch: 10_000,
            epochs: 20,
            lr: 1e-4,
            lr_decay: 0.9,
            constant_lr_epochs: 12,
            loss: LossConfig::default(),
            seed: 0,
            val_fraction: 0.002,
            test_fraction: 0.001,
            eval_batch: 50,
        }
    }

    /// The full-scale schedule.
    pub fn full_scale() -> Self {
        TrainConfig {
            patches_per_epoch: 100_000,
            epochs: 130,
            constant_lr_epochs: 80,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.patches_per_epoch == 0 || self.epochs == 0 || self.eval_batch == 0 {
            return bad("patches_per_epoch, epochs and eval_batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if self.constant_lr_epochs > self.epochs {
            return bad(format!(
                "constant_lr_epochs {} exceeds epochs {}",
                self.constant_lr_epochs, self.epochs
            ));
        }
        for (k, v) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{k} must lie in (0, 1), got {v}"));
            }
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decayed = epoch.saturating_sub(self.constant_lr_epochs);
        self.lr * self.lr_decay.powi(decayed as i32)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parameter(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "patches_per_epoch" => self.patches_per_epoch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "constant_lr_epochs" => self.constant_lr_epochs = num(key, value)?,
            "lambda" => self.loss.rf_weight = num(key, value)?,
            "gamma" => self.loss.mi_weight = num(key, value)?,
            "omega" => self.loss.l2_weight = num(key, value)?,
            "mi_bins" => self.loss.mi_bins = num(key, value)?,
            "rf_mode" => {
                self.loss.rf_mode = match value {
                    "channel-summed" => RfMode::ChannelSummed,
                    "per-channel" => RfMode::PerChannel,
                    _ => return Err(Error::Parameter(format!("invalid rf_mode '{value}'"))),
                }
            }
            "l2_scope" => {
                self.loss.l2_scope = match value {
                    "weights" => L2Scope::Weights,
                    "all" => L2Scope::All,
                    _ => return Err(Error::Parameter(format!("invalid l2_scope '{value}'"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            _ => return Err(Error::Parameter(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text on top of the desk defaults. Blank
    /// lines and `#` comments are ignored. Call [`TrainConfig::validate`] once
    /// all overrides are applied.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::desk();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("config line {}: expected key = value", n + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Serialises every field in the format accepted by [`TrainConfig::parse`].
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rf = match self.loss.rf_mode {
            RfMode::ChannelSummed => "channel-summed",
            RfMode::PerChannel => "per-channel",
        };
        let l2 = match self.loss.l2_scope {
            L2Scope::Weights => "weights",
            L2Scope::All => "all",
        };
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "patches_per_epoch = {}", self.patches_per_epoch)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "lr_decay = {:?}", self.lr_decay)?;
        writeln!(f, "constant_lr_epochs = {}", self.constant_lr_epochs)?;
        writeln!(f, "lambda = {:?}", self.loss.rf_weight)?;
        writeln!(f, "gamma = {:?}", self.loss.mi_weight)?;
        writeln!(f, "omega = {:?}", self.loss.l2_weight)?;
        writeln!(f, "mi_bins = {}", self.loss.mi_bins)?;
        writeln!(f, "rf_mode = {rf}")?;
        writeln!(f, "l2_scope = {l2}")?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "val_fraction = {:?}", self.val_fraction)?;
        writeln!(f, "test_fraction = {:?}", self.test_fraction)?;
        write!(f, "eval_batch = {}", self.eval_batch)
    }
}

/// One line of `report.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub r_rf: f64,
    pub r_mi: f64,
    pub w_norm: f64,
    pub total: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word.
    let mut z = a ^ b
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x632b_e59b_d9b4_e5f5);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the patches of one step, derived from the epoch's sampling seed.
pub fn batch_seed(seed: u64, epoch: usize, step_in_epoch: usize) -> u64 {
    mix(mix(seed, 1 + epoch as u64), step_in_epoch as u64)
}

pub fn dropout_seed(seed: u64, global_step: u64) -> u64 {
    mix(seed ^ 0xd0d0_d0d0, global_step)
}

/// Model, optimiser and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::build(classes, config.seed)?;
        Ok(Self::with_params(config, params))
    }

    pub fn with_params(config: TrainConfig, params: ModelParams<f32>) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .trainable()
            .iter()
            .map(|&i| params.tensor(i).shape().to_vec())
            .collect();
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            shapes.iter().map(|s| s.as_slice()),
        );
        Trainer {
            config,
            params,
            adam,
        }
    }

    pub fn from_checkpoint(config: TrainConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let ck = load_checkpoint(path)?;
        let mut t = Self::with_params(config, ck.params);
        if let Some(adam) = ck.adam {
            if adam.m.len() != t.adam.m.len() {
                return Err(Error::format(
                    path,
                    "optimizer state does not match the parameters",
                ));
            }
            t.adam = adam;
        }
        Ok(t)
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    /// Loss terms on a batch without updating anything.
    pub fn evaluate_loss(&self, patches: &Tensor<f32>, labels: &[usize]) -> Result<LossValues> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(self.config.seed, self.global_step()));
        let mut tape = Tape::new();
        let graph = build_graph(
            &mut tape,
            &self.params,
            patches.clone(),
            Mode::Train,
            false,
            &mut rng,
        )?;
        let onehot = ops::one_hot(labels, self.params.classes())?;
        let terms = total_loss(&mut tape, &graph, &self.params, &onehot, &self.config.loss)?;
        Ok(terms.values(&tape))
    }

    /// One Adam step on a batch at learning rate `lr`. Returns the loss
    /// terms before the update. A non-finite loss is an error and leaves the
    /// model untouched.
    pub fn step(&mut self, patches: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<LossValues> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(self.config.seed, self.global_step()));
        let mut tape = Tape::new();
        let graph = build_graph(
            &mut tape,
            &self.params,
            patches.clone(),
            Mode::Train,
            true,
            &mut rng,
        )?;
        let onehot = ops::one_hot(labels, self.params.classes())?;
        let terms = total_loss(&mut tape, &graph, &self.params, &onehot, &self.config.loss)?;
        let values = terms.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {values:?}",
                self.global_step() + 1
            )));
        }
        let mut grads = tape.backward(terms.total)?;
        let trainable = self.params.trainable();
        let grad_tensors: Vec<Tensor<f32>> = trainable
            .iter()
            .map(|&i| {
                let g = grads.take(graph.param_vars[i].expect("trainable"));
                g.unwrap_or_else(|| Tensor::zeros(self.params.tensor(i).shape().to_vec()))
            })
            .collect();
        self.adam.set_lr(lr);
        {
            let mut targets: Vec<&mut Tensor<f32>> = self
                .params
                .params_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| trainable.contains(i))
                .map(|(_, p)| &mut p.tensor)
                .collect();
            let refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
            self.adam.step(&mut targets, &refs)?;
        }
        update_running_stats(&mut self.params, &graph.bn_stats, BN_MOMENTUM);
        Ok(values)
    }

    /// Samples the batch for `global_step` and trains on it.
    pub fn train_step(&mut self, images: &[LabeledImage]) -> Result<LossValues> {
        let spe = self.config.steps_per_epoch() as u64;
        let g = self.global_step();
        let (epoch, within) = ((g / spe) as usize, (g % spe) as usize);
        let batch = sample_patches(
            images,
            self.config.batch_size,
            batch_seed(self.config.seed, epoch, within),
        )?;
        let lr = self.config.lr_at_epoch(epoch + 1);
        self.step(&batch.patches, &batch.labels, lr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, Some(&self.adam))
    }
}

/// Top-1 accuracy of logits `[m, C]` against labels.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "logits {s:?} against {} labels",
            labels.len()
        )));
    }
    let c = s[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Inference-mode logits in chunks of `batch` patches.
pub fn predict(
    params: &ModelParams<f32>,
    patches: &Tensor<f32>,
    batch: usize,
) -> Result<Tensor<f32>> {
    let n = patches.shape()[0];
    let per = patches.len() / n.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(n * params.classes());
    for chunk in patches.data().chunks(per * batch.max(1)) {
        let t = Tensor::new(vec![chunk.len() / per, 72, 72, 3], chunk.to_vec())?;
        out.extend_from_slice(forward(t, params, Mode::Infer, &mut rng)?.logits.data());
    }
    Tensor::new(vec![n, params.classes()], out)
}

/// Patch-level accuracy over the centre and corner patches of each image.
pub fn validate(params: &ModelParams<f32>, images: &[LabeledImage], batch: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let b = fixed_patches(images)?;
    accuracy(&predict(params, &b.patches, batch)?, &b.labels)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads `report.jsonl`.
pub fn read_report(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Options that change where a run starts but not what it computes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `<out>/last.ckpt` and the existing report.
    pub resume: bool,
}

/// Trains on the corpus train split and validates on its val split after
/// every epoch, writing `last.ckpt`, `best.ckpt` and `report.jsonl` to `out`.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    out: &Path,
    opts: &RunOptions,
) -> Result<TrainReport> {
    config.validate()?;
    let m = &corpus.manifest;
    if (m.val_fraction, m.test_fraction) != (config.val_fraction, config.test_fraction) {
        log::warn!(
            "corpus was split with val/test fractions {}/{}; the corpus split is used",
            m.val_fraction,
            m.test_fraction
        );
    }
    let train_set = corpus.load_split(Split::Train)?;
    let val_set = corpus.load_split(Split::Val)?;
    let classes = corpus.classes();
    for c in 0..classes {
        if !train_set.iter().any(|i| i.label == c) {
            return Err(Error::Input(format!(
                "camera model {c} has no training image"
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (last, best, report_path) = (
        out.join(LAST_CHECKPOINT),
        out.join(BEST_CHECKPOINT),
        out.join(REPORT),
    );

    let mut report = TrainReport::default();
    let mut trainer = if opts.resume && last.exists() {
        let t = Trainer::from_checkpoint(config.clone(), &last)?;
        if t.params.classes() != classes {
            return Err(Error::format(
                &last,
                "checkpoint class count differs from the corpus",
            ));
        }
        report.epochs = if report_path.exists() {
            read_report(&report_path)?
        } else {
            Vec::new()
        };
        t
    } else {
        if report_path.exists() {
            fs::remove_file(&report_path).map_err(|e| Error::io(&report_path, e))?;
        }
        Trainer::new(config.clone(), classes)?
    };
    let spe = config.steps_per_epoch() as u64;
    let done = (trainer.global_step() / spe) as usize;
    if trainer.global_step() % spe != 0 {
        return Err(Error::format(
            &last,
            "checkpoint is not at an epoch boundary",
        ));
    }
    report.epochs.truncate(done);
    for r in &report.epochs {
        if r.val_acc > report.best_val_acc || report.best_epoch == 0 {
            report.best_val_acc = r.val_acc;
            report.best_epoch = r.epoch;
        }
    }

    for epoch in done + 1..=config.epochs {
        let started = Instant::now();
        let mut sums = LossValues::default();
        for _ in 0..spe {
            let v = match trainer.train_step(&train_set) {
                Ok(v) => v,
                Err(e) => {
                    log::error!("epoch {epoch}: {e}; keeping {}", last.display());
                    return Err(e);
                }
            };
            sums.cross_entropy += v.cross_entropy;
            sums.rf_penalty += v.rf_penalty;
            sums.mi += v.mi;
            sums.weight_norm += v.weight_norm;
            sums.total += v.total;
        }
        let n = spe as f64;
        let val_acc = validate(&trainer.params, &val_set, config.eval_batch)?;
        let record = EpochRecord {
            epoch,
            l_ce: sums.cross_entropy / n,
            r_rf: sums.rf_penalty / n,
            r_mi: sums.mi / n,
            w_norm: sums.weight_norm / n,
            total: sums.total / n,
            val_acc,
            lr: config.lr_at_epoch(epoch),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: ce {:.4} rf {:.4} mi {:.4} |w| {:.2} total {:.4} val {:.3} lr {:.3e} ({:.0}s)",
            config.epochs,
            record.l_ce,
            record.r_rf,
            record.r_mi,
            record.w_norm,
            record.total,
            record.val_acc,
            record.lr,
            record.seconds
        );
        trainer.save(&last)?;
        if report.best_epoch == 0 || val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = epoch;
            trainer.save(&best)?;
        }
        append_line(
            &report_path,
            &serde_json::to_string(&record).expect("serialisable"),
        )?;
        report.epochs.push(record);
    }
    Ok(report)
}

/// Where [`train`] puts its outputs.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out.join(LAST_CHECKPOINT),
        out.join(BEST_CHECKPOINT),
        out.join(REPORT),
    )
}
