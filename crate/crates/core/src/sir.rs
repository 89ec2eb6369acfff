//! Speech impairment recognition.
//!
//! A log-Mel spectrogram is encoded frame by frame, pooled over time into a
//! single utterance vector, projected to one logit per impairment class and
//! normalised with a softmax:
//!
//! ```text
//! H = encoder(X)          d x T, one column per frame
//! h = pool(H)             mean, or softmax(v^T H)-weighted sum
//! z = W h + b             |C| logits
//! p = softmax(z)          posterior over classes
//! ```
//!
//! The reference encoder is `tanh(A x + c)` applied to each standardised
//! frame. Training minimises mean cross-entropy with plain mini-batch
//! gradient descent and hand-derived gradients.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{resample, AudioClip, AudioError, DspConfig, MelFrontEnd, MelSpectrogram};

pub const NUM_CLASSES: usize = 4;
pub const MIN_DURATION_S: f64 = 0.2;
pub const MAX_DURATION_S: f64 = 60.0;
const MODEL_FORMAT: &str = "speech-refine/sir";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SirError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot pool an empty frame sequence")]
    EmptySequence,
    #[error("clip duration {0:.3} s is outside [0.2, 60] s")]
    DurationOutOfRange(f64),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model was trained with DSP fingerprint {model}, current config is {config}")]
    FingerprintMismatch { model: String, config: String },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

/// The closed class set, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImpairmentClass {
    Dysarthria,
    Stutter,
    Aphasia,
    Healthy,
}

impl ImpairmentClass {
    pub const ALL: [ImpairmentClass; NUM_CLASSES] = [
        ImpairmentClass::Dysarthria,
        ImpairmentClass::Stutter,
        ImpairmentClass::Aphasia,
        ImpairmentClass::Healthy,
    ];

    pub const IMPAIRED: [ImpairmentClass; 3] = [
        ImpairmentClass::Dysarthria,
        ImpairmentClass::Stutter,
        ImpairmentClass::Aphasia,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ImpairmentClass::Dysarthria => "dysarthria",
            ImpairmentClass::Stutter => "stutter",
            ImpairmentClass::Aphasia => "aphasia",
            ImpairmentClass::Healthy => "healthy",
        }
    }

    pub fn is_impaired(self) -> bool {
        self != ImpairmentClass::Healthy
    }
}

impl fmt::Display for ImpairmentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImpairmentClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dysarthria" => Ok(ImpairmentClass::Dysarthria),
            "stutter" | "stuttering" => Ok(ImpairmentClass::Stutter),
            "aphasia" => Ok(ImpairmentClass::Aphasia),
            "healthy" | "health" => Ok(ImpairmentClass::Healthy),
            other => Err(format!(
                "unknown impairment class {other:?}; expected dysarthria, stutter, aphasia or healthy"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Attention,
}

/// Interface for frame-level encoders.
pub trait FrameEncoder {
    fn input_width(&self) -> usize;
    fn output_width(&self) -> usize;
    /// Maps an `input_width x T` matrix to `output_width x T`, column by column.
    fn encode_frames(&self, frames: &Array2<f64>) -> Array2<f64>;
}

/// Per-frame standardisation followed by `tanh(A x + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTanhEncoder {
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineTanhEncoder {
    fn standardize(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut x = frames.clone();
        for (mut row, (m, s)) in x.rows_mut().into_iter().zip(self.input_mean.iter().zip(&self.input_std)) {
            row.mapv_inplace(|v| (v - m) / s);
        }
        x
    }

    fn encode_standardized(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut pre = self.weight.dot(x);
        for mut col in pre.columns_mut() {
            col += &self.bias;
        }
        pre.mapv_into(f64::tanh)
    }
}

impl FrameEncoder for AffineTanhEncoder {
    fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    fn output_width(&self) -> usize {
        self.weight.nrows()
    }

    fn encode_frames(&self, frames: &Array2<f64>) -> Array2<f64> {
        self.encode_standardized(&self.standardize(frames))
    }
}

/// A trained classifier. Immutable once built; training returns a new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirModel {
    format: String,
    version: u32,
    classes: Vec<ImpairmentClass>,
    pool_mode: PoolMode,
    encoder: AffineTanhEncoder,
    attention: Option<Array1<f64>>,
    out_weight: Array2<f64>,
    out_bias: Array1<f64>,
    cfg_fingerprint: String,
}

impl SirModel {
    /// Assembles a model from explicit parameters.
    ///
    /// `attention` must be present exactly when `pool_mode` is attention.
    pub fn from_parts(
        encoder: AffineTanhEncoder,
        pool_mode: PoolMode,
        attention: Option<Array1<f64>>,
        out_weight: Array2<f64>,
        out_bias: Array1<f64>,
        cfg_fingerprint: impl Into<String>,
    ) -> Result<Self, SirError> {
        let model = Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            classes: ImpairmentClass::ALL.to_vec(),
            pool_mode,
            encoder,
            attention,
            out_weight,
            out_bias,
            cfg_fingerprint: cfg_fingerprint.into(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), SirError> {
        let bad = |m: String| Err(SirError::InvalidModel(m));
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return bad(format!("unsupported model format {} v{}", self.format, self.version));
        }
        if self.classes != ImpairmentClass::ALL {
            return bad("class order differs from dysarthria, stutter, aphasia, healthy".into());
        }
        let enc = &self.encoder;
        let (d, n_in) = enc.weight.dim();
        if d == 0 || n_in == 0 {
            return bad("encoder has zero width".into());
        }
        if enc.bias.len() != d || enc.input_mean.len() != n_in || enc.input_std.len() != n_in {
            return bad("encoder parameter shapes disagree".into());
        }
        if enc.input_std.iter().any(|&s| s <= 0.0) {
            return bad("input_std must be positive".into());
        }
        if self.out_weight.dim() != (NUM_CLASSES, d) || self.out_bias.len() != NUM_CLASSES {
            return bad(format!("output layer must be {NUM_CLASSES} x {d}"));
        }
        match (self.pool_mode, &self.attention) {
            (PoolMode::Mean, None) => {}
            (PoolMode::Attention, Some(v)) if v.len() == d => {}
            _ => return bad("attention vector must be present (width d) exactly for attention pooling".into()),
        }
        if self.param_vector().iter().any(|v| !v.is_finite())
            || enc.input_mean.iter().chain(&enc.input_std).any(|v| !v.is_finite())
        {
            return bad("parameters must be finite".into());
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.pool_mode
    }

    pub fn encoder(&self) -> &AffineTanhEncoder {
        &self.encoder
    }

    pub fn attention(&self) -> Option<&Array1<f64>> {
        self.attention.as_ref()
    }

    pub fn out_weight(&self) -> &Array2<f64> {
        &self.out_weight
    }

    pub fn out_bias(&self) -> &Array1<f64> {
        &self.out_bias
    }

    pub fn cfg_fingerprint(&self) -> &str {
        &self.cfg_fingerprint
    }

    pub fn check_fingerprint(&self, cfg: &DspConfig) -> Result<(), SirError> {
        let current = cfg.fingerprint();
        if current != self.cfg_fingerprint {
            return Err(SirError::FingerprintMismatch {
                model: self.cfg_fingerprint.clone(),
                config: current,
            });
        }
        Ok(())
    }

    /// Trainable parameters flattened in a fixed order: encoder weight
    /// (row-major), encoder bias, attention vector (if any), output weight,
    /// output bias.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.encoder.weight.iter());
        out.extend(self.encoder.bias.iter());
        if let Some(v) = &self.attention {
            out.extend(v.iter());
        }
        out.extend(self.out_weight.iter());
        out.extend(self.out_bias.iter());
        out
    }

    pub fn param_count(&self) -> usize {
        let d = self.hidden_width();
        d * self.input_width() + d + self.attention.as_ref().map_or(0, |v| v.len()) + NUM_CLASSES * d + NUM_CLASSES
    }

    /// Copy of this model with trainable parameters replaced.
    pub fn with_params(&self, params: &[f64]) -> Result<Self, SirError> {
        if params.len() != self.param_count() {
            return Err(SirError::DimensionMismatch { expected: self.param_count(), actual: params.len() });
        }
        let mut next = self.clone();
        let mut it = params.iter().copied();
        for w in next.encoder.weight.iter_mut() {
            *w = it.next().unwrap();
        }
        for w in next.encoder.bias.iter_mut() {
            *w = it.next().unwrap();
        }
        if let Some(v) = next.attention.as_mut() {
            for w in v.iter_mut() {
                *w = it.next().unwrap();
            }
        }
        for w in next.out_weight.iter_mut() {
            *w = it.next().unwrap();
        }
        for w in next.out_bias.iter_mut() {
            *w = it.next().unwrap();
        }
        next.validate()?;
        Ok(next)
    }

    pub fn save(&self, path: &Path) -> Result<(), SirError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads a model and rejects it unless it was trained under `cfg`.
    pub fn load(path: &Path, cfg: &DspConfig) -> Result<Self, SirError> {
        let model: SirModel = serde_json::from_slice(&std::fs::read(path)?)?;
        model.validate()?;
        model.check_fingerprint(cfg)?;
        Ok(model)
    }
}

/// Softmax posterior with its logits and argmax label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPosterior {
    pub probs: [f64; NUM_CLASSES],
    pub logits: [f64; NUM_CLASSES],
    pub label: ImpairmentClass,
}

impl ClassPosterior {
    pub fn from_logits(logits: [f64; NUM_CLASSES]) -> Self {
        let probs = softmax(&logits);
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            // Strict comparison keeps the lowest index on ties.
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Self { probs, logits, label: ImpairmentClass::ALL[best] }
    }

    pub fn prob(&self, class: ImpairmentClass) -> f64 {
        self.probs[class.index()]
    }
}

/// Max-subtracted softmax.
pub fn softmax<const N: usize>(z: &[f64; N]) -> [f64; N] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; N];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn softmax_vec(z: &Array1<f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Frame-level hidden states `H` (d x T).
pub fn encode(mel: &MelSpectrogram, model: &SirModel) -> Result<Array2<f64>, SirError> {
    if mel.n_mels() != model.input_width() {
        return Err(SirError::DimensionMismatch { expected: model.input_width(), actual: mel.n_mels() });
    }
    Ok(model.encoder.encode_frames(mel.values()))
}

/// Collapses `H` over time according to the model's pooling mode.
pub fn pool(hidden: &Array2<f64>, model: &SirModel) -> Result<Array1<f64>, SirError> {
    if hidden.nrows() != model.hidden_width() {
        return Err(SirError::DimensionMismatch { expected: model.hidden_width(), actual: hidden.nrows() });
    }
    pool_with(hidden, model.pool_mode, model.attention.as_ref()).map(|(h, _)| h)
}

fn pool_with(
    hidden: &Array2<f64>,
    mode: PoolMode,
    attention: Option<&Array1<f64>>,
) -> Result<(Array1<f64>, Option<Array1<f64>>), SirError> {
    if hidden.ncols() == 0 {
        return Err(SirError::EmptySequence);
    }
    match (mode, attention) {
        (PoolMode::Attention, Some(v)) => {
            let weights = softmax_vec(&hidden.t().dot(v));
            Ok((hidden.dot(&weights), Some(weights)))
        }
        _ => Ok((hidden.mean_axis(Axis(1)).expect("non-empty"), None)),
    }
}

/// Logits `W h + b` and the resulting posterior.
pub fn classify(h: &Array1<f64>, model: &SirModel) -> Result<ClassPosterior, SirError> {
    if h.len() != model.hidden_width() {
        return Err(SirError::DimensionMismatch { expected: model.hidden_width(), actual: h.len() });
    }
    let z = model.out_weight.dot(h) + &model.out_bias;
    let mut logits = [0.0; NUM_CLASSES];
    logits.copy_from_slice(z.as_slice().expect("contiguous"));
    Ok(ClassPosterior::from_logits(logits))
}

pub fn classify_mel(mel: &MelSpectrogram, model: &SirModel) -> Result<ClassPosterior, SirError> {
    let hidden = encode(mel, model)?;
    classify(&pool(&hidden, model)?, model)
}

pub fn check_duration(clip: &AudioClip) -> Result<(), SirError> {
    let d = clip.duration_s();
    if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&d) {
        return Err(SirError::DurationOutOfRange(d));
    }
    Ok(())
}

/// A model bound to its front end, for repeated predictions.
#[derive(Debug, Clone)]
pub struct SirPredictor {
    model: std::sync::Arc<SirModel>,
    front_end: MelFrontEnd,
}

impl SirPredictor {
    pub fn new(model: std::sync::Arc<SirModel>, cfg: &DspConfig) -> Result<Self, SirError> {
        model.check_fingerprint(cfg)?;
        if cfg.n_mels != model.input_width() {
            return Err(SirError::DimensionMismatch { expected: model.input_width(), actual: cfg.n_mels });
        }
        Ok(Self { model, front_end: MelFrontEnd::new(cfg)? })
    }

    pub fn model(&self) -> &SirModel {
        &self.model
    }

    pub fn front_end(&self) -> &MelFrontEnd {
        &self.front_end
    }

    /// Resamples if needed and computes the log-Mel spectrogram.
    pub fn features(&self, clip: &AudioClip) -> Result<MelSpectrogram, SirError> {
        check_duration(clip)?;
        let target = self.front_end.config().target_rate;
        let mel = if clip.sample_rate() == target {
            self.front_end.compute(clip)?
        } else {
            self.front_end.compute(&resample(clip, target)?)?
        };
        Ok(mel)
    }

    pub fn predict(&self, clip: &AudioClip) -> Result<ClassPosterior, SirError> {
        classify_mel(&self.features(clip)?, &self.model)
    }
}

/// log-Mel, encode, pool, classify.
pub fn predict(clip: &AudioClip, model: &SirModel, cfg: &DspConfig) -> Result<ClassPosterior, SirError> {
    SirPredictor::new(std::sync::Arc::new(model.clone()), cfg)?.predict(clip)
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub mel: MelSpectrogram,
    pub label: ImpairmentClass,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub split_seed: u64,
}

impl LabeledDataset {
    pub fn new(items: Vec<LabeledItem>, split_seed: u64) -> Self {
        Self { items, split_seed }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for item in &self.items {
            counts[item.label.index()] += 1;
        }
        counts
    }

    /// Stratified split holding out `round(test_fraction * n_c)` items per
    /// class (at least one, never all), shuffled by `split_seed`.
    pub fn stratified_split(&self, test_fraction: f64) -> (LabeledDataset, LabeledDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in ImpairmentClass::ALL {
            let mut idx: Vec<usize> = (0..self.items.len()).filter(|&i| self.items[i].label == class).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize)
                .max(1)
                .min(idx.len().saturating_sub(1));
            for (k, &i) in idx.iter().enumerate() {
                if k < n_test {
                    test.push(self.items[i].clone());
                } else {
                    train.push(self.items[i].clone());
                }
            }
        }
        (
            LabeledDataset::new(train, self.split_seed),
            LabeledDataset::new(test, self.split_seed),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub d: usize,
    pub pool_mode: PoolMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { d: 64, pool_mode: PoolMode::Mean, lr: 0.05, epochs: 200, batch: 16, seed: 0 }
    }
}

impl TrainHyper {
    fn validate(&self) -> Result<(), SirError> {
        if self.d == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(SirError::InvalidHyper("d, batch and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SirError::InvalidHyper(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SirModel,
    /// Mean cross-entropy over the training set before the first update.
    pub initial_loss: f64,
    /// Mean batch loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean cross-entropy over the training set after the last update.
    pub final_loss: f64,
}

/// Gradients with the same layout as [`SirModel::param_vector`].
#[derive(Debug, Clone)]
struct Gradients {
    enc_weight: Array2<f64>,
    enc_bias: Array1<f64>,
    attention: Option<Array1<f64>>,
    out_weight: Array2<f64>,
    out_bias: Array1<f64>,
}

impl Gradients {
    fn zeros_like(model: &SirModel) -> Self {
        Self {
            enc_weight: Array2::zeros(model.encoder.weight.raw_dim()),
            enc_bias: Array1::zeros(model.encoder.bias.len()),
            attention: model.attention.as_ref().map(|v| Array1::zeros(v.len())),
            out_weight: Array2::zeros(model.out_weight.raw_dim()),
            out_bias: Array1::zeros(NUM_CLASSES),
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.enc_weight.iter());
        out.extend(self.enc_bias.iter());
        if let Some(v) = &self.attention {
            out.extend(v.iter());
        }
        out.extend(self.out_weight.iter());
        out.extend(self.out_bias.iter());
        out
    }

    fn scale(&mut self, k: f64) {
        self.enc_weight *= k;
        self.enc_bias *= k;
        if let Some(v) = self.attention.as_mut() {
            *v *= k;
        }
        self.out_weight *= k;
        self.out_bias *= k;
    }

    fn apply(&self, model: &mut SirModel, lr: f64) {
        model.encoder.weight.scaled_add(-lr, &self.enc_weight);
        model.encoder.bias.scaled_add(-lr, &self.enc_bias);
        if let (Some(v), Some(g)) = (model.attention.as_mut(), self.attention.as_ref()) {
            v.scaled_add(-lr, g);
        }
        model.out_weight.scaled_add(-lr, &self.out_weight);
        model.out_bias.scaled_add(-lr, &self.out_bias);
    }
}

/// Cross-entropy of one standardised example; accumulates its gradient.
fn example_loss_grad(model: &SirModel, x: &Array2<f64>, label: ImpairmentClass, grads: &mut Gradients) -> f64 {
    let enc = &model.encoder;
    let hidden = enc.encode_standardized(x);
    let (h, weights) = pool_with(&hidden, model.pool_mode, model.attention.as_ref()).expect("T >= 1");
    let z = model.out_weight.dot(&h) + &model.out_bias;
    let p = softmax_vec(&z);
    let y = label.index();
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();

    // dL/dz = p - onehot(y)
    let mut dz = p;
    dz[y] -= 1.0;
    for c in 0..NUM_CLASSES {
        grads.out_bias[c] += dz[c];
        for j in 0..h.len() {
            grads.out_weight[[c, j]] += dz[c] * h[j];
        }
    }
    let dh = model.out_weight.t().dot(&dz);

    let t = hidden.ncols();
    let mut d_hidden = Array2::<f64>::zeros(hidden.raw_dim());
    match (&weights, model.attention.as_ref()) {
        (Some(alpha), Some(v)) => {
            // h = H a, a = softmax(H^T v)
            let d_alpha = hidden.t().dot(&dh);
            let centered = alpha.dot(&d_alpha);
            let d_score = alpha * &(d_alpha - centered);
            if let Some(gv) = grads.attention.as_mut() {
                *gv += &hidden.dot(&d_score);
            }
            for k in 0..t {
                for j in 0..hidden.nrows() {
                    d_hidden[[j, k]] = alpha[k] * dh[j] + d_score[k] * v[j];
                }
            }
        }
        _ => {
            let inv_t = 1.0 / t as f64;
            for mut col in d_hidden.columns_mut() {
                col.scaled_add(inv_t, &dh);
            }
        }
    }

    // H = tanh(P): dP = dH * (1 - H^2)
    let d_pre = d_hidden * &hidden.mapv(|v| 1.0 - v * v);
    grads.enc_weight += &d_pre.dot(&x.t());
    grads.enc_bias += &d_pre.sum_axis(Axis(1));
    loss
}

fn batch_loss_grad(model: &SirModel, batch: &[(&Array2<f64>, ImpairmentClass)]) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (x, y) in batch {
        loss += example_loss_grad(model, x, *y, &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    (loss * inv, grads)
}

fn standardized_inputs(model: &SirModel, data: &LabeledDataset) -> Result<Vec<Array2<f64>>, SirError> {
    data.items
        .iter()
        .map(|item| {
            if item.mel.n_mels() != model.input_width() {
                return Err(SirError::DimensionMismatch { expected: model.input_width(), actual: item.mel.n_mels() });
            }
            Ok(model.encoder.standardize(item.mel.values()))
        })
        .collect()
}

/// Mean cross-entropy and its analytic gradient (flattened like
/// [`SirModel::param_vector`]) over every item in `data`.
pub fn loss_and_gradient(model: &SirModel, data: &LabeledDataset) -> Result<(f64, Vec<f64>), SirError> {
    if data.is_empty() {
        return Err(SirError::EmptyDataset);
    }
    let inputs = standardized_inputs(model, data)?;
    let batch: Vec<_> = inputs.iter().zip(&data.items).map(|(x, it)| (x, it.label)).collect();
    let (loss, grads) = batch_loss_grad(model, &batch);
    Ok((loss, grads.flat()))
}

/// Mean cross-entropy over `data`.
pub fn mean_loss(model: &SirModel, data: &LabeledDataset) -> Result<f64, SirError> {
    loss_and_gradient(model, data).map(|(l, _)| l)
}

/// Bins quieter than this across the training set (in nats) are not
/// stretched further, so noise near the log floor stays small.
const MIN_INPUT_STD: f64 = 0.5;

/// Per-bin mean and standard deviation over every frame in the dataset.
fn fit_standardizer(data: &LabeledDataset, n_mels: usize) -> (Array1<f64>, Array1<f64>) {
    let mut sum = Array1::<f64>::zeros(n_mels);
    let mut sum_sq = Array1::<f64>::zeros(n_mels);
    let mut frames = 0usize;
    for item in &data.items {
        let v = item.mel.values();
        sum += &v.sum_axis(Axis(1));
        sum_sq += &v.mapv(|x| x * x).sum_axis(Axis(1));
        frames += v.ncols();
    }
    let n = frames as f64;
    let mean = &sum / n;
    let std = (&sum_sq / n - &mean * &mean).mapv(|var| var.max(0.0).sqrt().max(MIN_INPUT_STD));
    (mean, std)
}

/// Freshly initialised model: encoder standardiser fitted on `data`, all
/// trainable parameters drawn from uniform(-0.05, 0.05).
pub fn initialize(data: &LabeledDataset, hyper: &TrainHyper, cfg_fingerprint: &str) -> Result<SirModel, SirError> {
    hyper.validate()?;
    let n_mels = data.items.first().ok_or(SirError::EmptyDataset)?.mel.n_mels();
    let (input_mean, input_std) = fit_standardizer(data, n_mels);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut draw = |shape: usize| -> Vec<f64> { (0..shape).map(|_| rng.random_range(-0.05..0.05)).collect() };
    let d = hyper.d;
    let weight = Array2::from_shape_vec((d, n_mels), draw(d * n_mels)).expect("shape");
    let bias = Array1::from(draw(d));
    let attention = match hyper.pool_mode {
        PoolMode::Attention => Some(Array1::from(draw(d))),
        PoolMode::Mean => None,
    };
    let out_weight = Array2::from_shape_vec((NUM_CLASSES, d), draw(NUM_CLASSES * d)).expect("shape");
    let out_bias = Array1::from(draw(NUM_CLASSES));
    SirModel::from_parts(
        AffineTanhEncoder { input_mean, input_std, weight, bias },
        hyper.pool_mode,
        attention,
        out_weight,
        out_bias,
        cfg_fingerprint,
    )
}

/// Trains a classifier on every item of `data` (split beforehand).
///
/// Single-threaded and reproducible: the same data, hyperparameters and
/// seed give bitwise-identical parameters.
pub fn train(data: &LabeledDataset, hyper: &TrainHyper, cfg_fingerprint: &str) -> Result<TrainOutcome, SirError> {
    hyper.validate()?;
    let counts = data.class_counts();
    if let Some(c) = ImpairmentClass::ALL.iter().find(|c| counts[c.index()] < 2) {
        return Err(SirError::InsufficientData(format!(
            "class {c} has {} items; at least 2 per class are required",
            counts[c.index()]
        )));
    }
    let n_mels = data.items[0].mel.n_mels();
    if let Some(bad) = data.items.iter().find(|it| it.mel.n_mels() != n_mels) {
        return Err(SirError::DimensionMismatch { expected: n_mels, actual: bad.mel.n_mels() });
    }

    let mut model = initialize(data, hyper, cfg_fingerprint)?;
    let inputs = standardized_inputs(&model, data)?;
    let examples: Vec<(&Array2<f64>, ImpairmentClass)> =
        inputs.iter().zip(&data.items).map(|(x, it)| (x, it.label)).collect();
    let initial_loss = batch_loss_grad(&model, &examples).0;

    // Separate stream from initialisation so changing `d` does not reshuffle batches.
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_0ba7c4);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<_> = chunk.iter().map(|&i| examples[i]).collect();
            let (loss, grads) = batch_loss_grad(&model, &batch);
            if !loss.is_finite() {
                return Err(SirError::Divergence { epoch, loss });
            }
            grads.apply(&mut model, hyper.lr);
            if model.param_vector().iter().any(|v| !v.is_finite()) {
                return Err(SirError::Divergence { epoch, loss: f64::INFINITY });
            }
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        tracing::debug!(epoch, loss = epoch_loss, "sir epoch");
        epoch_losses.push(epoch_loss);
    }
    let final_loss = batch_loss_grad(&model, &examples).0;
    if !final_loss.is_finite() || model.param_vector().iter().any(|v| !v.is_finite()) {
        return Err(SirError::Divergence { epoch: hyper.epochs, loss: final_loss });
    }
    Ok(TrainOutcome { model, initial_loss, epoch_losses, final_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ImpairmentClass,
    pub support: usize,
    /// Recall of this class.
    pub accuracy: f64,
    pub f1: f64,
    /// One-vs-rest ROC AUC; `None` when the class or its complement is absent.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    /// Macro-averaged recall.
    pub accuracy: f64,
    pub f1: f64,
    /// Mean over classes whose AUC is defined.
    pub auc: Option<f64>,
    /// Plain fraction of correct predictions.
    pub micro_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub per_class: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted
/// half. `None` if either side is empty.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the U statistic, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u128, 0u128);
        for &k in &order[i..j] {
            if positive[k] {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Table-style metrics from posteriors and true labels.
pub fn metrics_from_posteriors(
    labels: &[ImpairmentClass],
    posteriors: &[ClassPosterior],
) -> Result<EvalReport, SirError> {
    if labels.is_empty() {
        return Err(SirError::EmptyDataset);
    }
    if labels.len() != posteriors.len() {
        return Err(SirError::DimensionMismatch { expected: labels.len(), actual: posteriors.len() });
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in ImpairmentClass::ALL {
        let tp = labels.iter().zip(posteriors).filter(|(l, p)| **l == class && p.label == class).count();
        let support = labels.iter().filter(|l| **l == class).count();
        let predicted = posteriors.iter().filter(|p| p.label == class).count();
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let scores: Vec<f64> = posteriors.iter().map(|p| p.prob(class)).collect();
        let positive: Vec<bool> = labels.iter().map(|l| *l == class).collect();
        per_class.push(ClassMetrics { class, support, accuracy: recall, f1, auc: roc_auc(&scores, &positive) });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let k = present.len() as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
    let correct = labels.iter().zip(posteriors).filter(|(l, p)| **l == p.label).count();
    let overall = OverallMetrics {
        accuracy: present.iter().map(|m| m.accuracy).sum::<f64>() / k,
        f1: present.iter().map(|m| m.f1).sum::<f64>() / k,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        micro_accuracy: correct as f64 / labels.len() as f64,
    };
    Ok(EvalReport { n_items: labels.len(), per_class, overall })
}

/// Per-class recall, F1 and one-vs-rest AUC plus macro averages.
pub fn evaluate(model: &SirModel, test: &LabeledDataset) -> Result<EvalReport, SirError> {
    if test.is_empty() {
        return Err(SirError::EmptyDataset);
    }
    let posteriors = test
        .items
        .iter()
        .map(|item| classify_mel(&item.mel, model))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<ImpairmentClass> = test.items.iter().map(|i| i.label).collect();
    metrics_from_posteriors(&labels, &posteriors)
}
