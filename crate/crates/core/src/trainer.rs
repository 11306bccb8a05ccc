//! Head training on mined batches: adaptive moments with decoupled weight
//! decay, an exponential per-epoch learning-rate schedule, and bit-exact
//! checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{head_from_header, load_params, AggregateError, Head, HeadCache, HeadInput};
use crate::losses::{batch_ranked_list_loss, batch_triplet_loss, LossConfig, LossError};
use crate::mining::TrainingBatch;
use crate::model::{FeatureMap, ImageId};

const CHECKPOINT_MAGIC: [u8; 4] = *b"PFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training batches")]
    NoBatches,
    #[error("no input for image {0}")]
    MissingInput(ImageId),
    #[error("loss is not finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Triplet,
    RankedList,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// `lr = initial_lr * exp(-lr_decay_rate * epoch)`.
    pub lr_decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled from the adaptive step.
    pub weight_decay: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    /// Seeds the batch-selection stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-5,
            lr_decay_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
            epochs: 20,
            iterations_per_epoch: 2000,
            loss: LossKind::RankedList,
            loss_cfg: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("lr_decay_rate", self.lr_decay_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::InvalidConfig("moment coefficients must be below 1".into()));
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(TrainError::InvalidConfig("epochs and iterations must be at least 1".into()));
        }
        self.loss_cfg.validate()?;
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.iterations_per_epoch) as u64
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr * (-self.lr_decay_rate * epoch as f64).exp()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub active_terms: usize,
}

/// Per-image head inputs.
pub trait InputSource: Sync {
    fn input(&self, id: ImageId) -> Option<HeadInput<'_>>;
}

impl InputSource for BTreeMap<ImageId, FeatureMap> {
    fn input(&self, id: ImageId) -> Option<HeadInput<'_>> {
        self.get(&id).map(HeadInput::Map)
    }
}

impl InputSource for BTreeMap<ImageId, Vec<f64>> {
    fn input(&self, id: ImageId) -> Option<HeadInput<'_>> {
        self.get(&id).map(|v| HeadInput::Vector(v))
    }
}

impl InputSource for HashMap<ImageId, Vec<f64>> {
    fn input(&self, id: ImageId) -> Option<HeadInput<'_>> {
        self.get(&id).map(|v| HeadInput::Vector(v))
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub head: Head,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    rng_seed: u64,
    rng_word_pos: u128,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(head: Head, seed: u64) -> Self {
        let n = head.param_count();
        Self {
            step: 0,
            head,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            rng_seed: seed,
            rng_word_pos: 0,
            history: Vec::new(),
        }
    }

    pub fn epoch(&self, cfg: &TrainConfig) -> usize {
        (self.step / cfg.iterations_per_epoch as u64) as usize
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Runs one optimization step on a uniformly drawn batch.
    pub fn step<S: InputSource + ?Sized>(
        &mut self,
        batches: &[TrainingBatch],
        inputs: &S,
        cfg: &TrainConfig,
    ) -> Result<MetricRecord, TrainError> {
        if batches.is_empty() {
            return Err(TrainError::NoBatches);
        }
        if self.head.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { step: self.step });
        }
        let mut rng = self.rng();
        let batch = &batches[rng.random_range(0..batches.len())];
        let epoch = self.epoch(cfg);
        let lr = cfg.learning_rate(epoch);

        let (loss, active, grad) = batch_gradient(&self.head, batch, inputs, cfg)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step: self.step });
        }

        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let mut params = self.head.params();
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.first_moment[i] = cfg.beta1 * self.first_moment[i] + (1.0 - cfg.beta1) * g;
            self.second_moment[i] = cfg.beta2 * self.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * *p);
        }
        self.head.set_params(&params);
        self.head.project();

        let record = MetricRecord {
            step: self.step,
            epoch,
            lr,
            loss,
            active_terms: active,
        };
        self.rng_word_pos = rng.get_word_pos();
        self.step += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Steps until `until` (capped at the configured total) is reached.
    pub fn run<S: InputSource + ?Sized>(
        &mut self,
        batches: &[TrainingBatch],
        inputs: &S,
        cfg: &TrainConfig,
        until: u64,
    ) -> Result<(), TrainError> {
        let end = until.min(cfg.total_steps());
        while self.step < end {
            self.step(batches, inputs, cfg)?;
        }
        Ok(())
    }
}

/// Loss, active terms and flat parameter gradient of `head` on one batch.
pub fn batch_gradient<S: InputSource + ?Sized>(
    head: &Head,
    batch: &TrainingBatch,
    inputs: &S,
    cfg: &TrainConfig,
) -> Result<(f64, usize, Vec<f64>), TrainError> {
    let mut ids: Vec<ImageId> = batch.members().collect();
    ids.sort_unstable();
    ids.dedup();
    let forward: Vec<(Vec<f64>, HeadCache)> = ids
        .par_iter()
        .map(|&id| {
            let input = inputs.input(id).ok_or(TrainError::MissingInput(id))?;
            Ok(head.forward(input)?)
        })
        .collect::<Result<_, TrainError>>()?;
    let embeddings: HashMap<ImageId, Vec<f64>> =
        ids.iter().zip(&forward).map(|(&id, (e, _))| (id, e.clone())).collect();
    let report = match cfg.loss {
        LossKind::RankedList => batch_ranked_list_loss(batch, &embeddings, &cfg.loss_cfg)?,
        LossKind::Triplet => batch_triplet_loss(batch, &embeddings, &cfg.loss_cfg)?,
    };
    let per_image: Vec<Vec<f64>> = ids
        .par_iter()
        .zip(&forward)
        .map(|(id, (_, cache))| head.backward(cache, &report.grads[id]))
        .collect();
    let mut grad = vec![0.0; head.param_count()];
    for g in per_image {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((report.value, report.active_terms, grad))
}

/// Trains a fresh state for the configured number of steps.
pub fn train<S: InputSource + ?Sized>(
    head: Head,
    batches: &[TrainingBatch],
    inputs: &S,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let mut state = TrainState::new(head, cfg.seed);
    state.run(batches, inputs, cfg, cfg.total_steps())?;
    Ok(state)
}

/// `step epoch lr loss active_terms` records, one per line.
pub fn write_metrics(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{} {} {:e} {:?} {}", r.step, r.epoch, r.lr, r.loss, r.active_terms);
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Binary checkpoint: magic, version, head header, full-precision parameters
/// and moments, stream position, history, and a trailing FNV-1a checksum.
pub fn checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = state.head.header();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.rng_seed.to_le_bytes());
    out.extend_from_slice(&state.rng_word_pos.to_le_bytes());
    let params = state.head.params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.iter().chain(&state.first_moment).chain(&state.second_moment) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(state.history.len() as u64).to_le_bytes());
    for r in &state.history {
        out.extend_from_slice(&r.step.to_le_bytes());
        out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
        out.extend_from_slice(&r.lr.to_le_bytes());
        out.extend_from_slice(&r.loss.to_le_bytes());
        out.extend_from_slice(&(r.active_terms as u64).to_le_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        let n = usize::try_from(self.u64()?).map_err(|_| TrainError::Checkpoint("length overflow".into()))?;
        if n > self.bytes.len() {
            return Err(TrainError::Checkpoint("length exceeds file size".into()));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Inverse of [`checkpoint`]. The whole file is verified before any state is built.
pub fn restore(bytes: &[u8]) -> Result<TrainState, TrainError> {
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(TrainError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.len()?;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| TrainError::Checkpoint("header is not UTF-8".into()))?;
    let mut head = head_from_header(header)?;
    let step = r.u64()?;
    let rng_seed = r.u64()?;
    let rng_word_pos = u128::from_le_bytes(r.array()?);
    let n = r.len()?;
    if n != head.param_count() {
        return Err(TrainError::Checkpoint(format!(
            "{} parameters stored for a head with {}",
            n,
            head.param_count()
        )));
    }
    let read_vec = |r: &mut Reader| (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>, _>>();
    let params = read_vec(&mut r)?;
    let first_moment = read_vec(&mut r)?;
    let second_moment = read_vec(&mut r)?;
    load_params(&mut head, &params)?;
    let records = r.len()?;
    let mut history = Vec::with_capacity(records);
    for _ in 0..records {
        history.push(MetricRecord {
            step: r.u64()?,
            epoch: r.len()?,
            lr: r.f64()?,
            loss: r.f64()?,
            active_terms: r.len()?,
        });
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok(TrainState {
        step,
        head,
        first_moment,
        second_moment,
        rng_seed,
        rng_word_pos,
        history,
    })
}
