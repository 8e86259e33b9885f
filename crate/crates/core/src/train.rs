//! Training loop: sliding-window batching, the penalised MSE objective, Adam,
//! validation-based early stopping and evaluation metrics.
//!
//! A mini-batch is cut into fixed-size shards. Each shard runs on its own
//! tape (possibly on its own thread) and shard gradients are summed in shard
//! order, so results do not depend on the thread count or on whether the
//! `parallel` feature is enabled.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::RoutingMode;
use crate::autodiff::{Tape, Var};
use crate::backbone::{DprNetModel, ModelConfig};
use crate::data::{SeriesFrame, Split, SplitRanges, Standardizer};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::params::{param_rng, ParamStore};
use crate::tensor::Tensor;

/// Storage precision of trained parameters. Arithmetic is always `f64`;
/// `F32` rounds parameters to single precision after every update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn round(self, store: &mut ParamStore) {
        if self == Precision::F32 {
            for t in store.tensors_mut() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

/// Component-removal variants of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Single pointwise perception branch.
    Mscale,
    /// No orthogonality penalty.
    Ortho,
    /// Random instead of zero gain at initialisation.
    Init,
    /// Hard top-1 routing.
    Route,
}

impl Ablation {
    pub fn apply(self, cfg: &mut ModelConfig) {
        if let Some(dpr) = cfg.dpr.as_mut() {
            match self {
                Ablation::Mscale => dpr.multiscale = false,
                Ablation::Ortho => dpr.lambda_orth = 0.0,
                Ablation::Init => dpr.identity_init = false,
                Ablation::Route => dpr.routing = RoutingMode::Hard,
            }
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mscale" => Ok(Ablation::Mscale),
            "ortho" => Ok(Ablation::Ortho),
            "init" => Ok(Ablation::Init),
            "route" => Ok(Ablation::Route),
            _ => Err(Error::config(format!("unknown ablation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm cap; off by default.
    pub grad_clip: Option<f64>,
    /// Windows per gradient shard. Fixed independently of thread count.
    pub shard_size: usize,
    /// Stop once the train-split MSE falls below this value.
    pub target_train_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            precision: Precision::F64,
            grad_clip: None,
            shard_size: 8,
            target_train_mse: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.shard_size == 0 {
            return Err(Error::config("batch_size, patience and shard_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// `MSE(pred, target) + λ · penalty` on the tape.
pub fn total_loss(tape: &mut Tape, pred: Var, target: Var, penalty: Option<Var>, lambda: f64) -> Result<Var> {
    let mse = tape.mse(pred, target)?;
    match penalty {
        Some(p) if lambda != 0.0 => {
            let weighted = tape.mul_scalar(p, lambda)?;
            tape.add(mse, weighted)
        }
        _ => Ok(mse),
    }
}

/// Plain-value version of [`total_loss`].
pub fn total_loss_value(pred: &Tensor, target: &Tensor, penalty: f64, lambda: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("total_loss", pred.shape(), target.shape()));
    }
    let n = pred.numel() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(mse + lambda * penalty)
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update. Fails, naming the parameter, on a non-finite gradient.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        let g = &grads[id.index()];
        if g.len() != store.get(id).numel() {
            return Err(Error::shape("adam_step", store.get(id).shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for parameter {}", store.name(id))));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Validation-loss patience tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's validation loss; returns `(improved, stop)`.
    /// Only a strictly lower loss counts as an improvement.
    pub fn update(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// Windows of one split: inputs `[start+i, start+i+T)` and targets
/// `[start+i+T, start+i+T+H)`, all inside `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSampler {
    pub start: usize,
    pub end: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSampler {
    pub fn len(&self) -> usize {
        (self.end - self.start + 1).saturating_sub(self.lookback + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First row of window `i`.
    pub fn origin(&self, i: usize) -> usize {
        self.start + i
    }
}

/// A standardised series with its split ranges, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    /// Row-major `T × C`, standardised with train statistics.
    pub values: Vec<f64>,
    pub channels: usize,
    pub ranges: SplitRanges,
    pub scaler: Standardizer,
    pub lookback: usize,
    pub horizon: usize,
}

impl PreparedData {
    /// Splits, fits the scaler on the train part and checks that every
    /// split holds at least one window.
    pub fn new(frame: &SeriesFrame, ratios: [f64; 3], lookback: usize, horizon: usize) -> Result<Self> {
        let ranges = SplitRanges::new(frame.len(), ratios)?;
        let c = frame.n_channels();
        let need = lookback + horizon;
        for (name, (a, b)) in [("train", ranges.train), ("val", ranges.val), ("test", ranges.test)] {
            if b - a < need {
                return Err(Error::config(format!(
                    "{name} split has {} rows, needs lookback + horizon = {need}",
                    b - a
                )));
            }
        }
        let train = &frame.values()[ranges.train.0 * c..ranges.train.1 * c];
        let scaler = Standardizer::fit(train, c);
        Self::assemble(frame, ranges, scaler, lookback, horizon)
    }

    /// Like [`PreparedData::new`] but standardises with a stored scaler
    /// instead of refitting it.
    pub fn with_scaler(
        frame: &SeriesFrame,
        ratios: [f64; 3],
        lookback: usize,
        horizon: usize,
        scaler: Standardizer,
    ) -> Result<Self> {
        if scaler.mean.len() != frame.n_channels() {
            return Err(Error::config(format!(
                "scaler covers {} channels, data has {}",
                scaler.mean.len(),
                frame.n_channels()
            )));
        }
        let fitted = Self::new(frame, ratios, lookback, horizon)?;
        Self::assemble(frame, fitted.ranges, scaler, lookback, horizon)
    }

    fn assemble(
        frame: &SeriesFrame,
        ranges: SplitRanges,
        scaler: Standardizer,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let c = frame.n_channels();
        Ok(PreparedData {
            values: scaler.transform(frame.values()),
            channels: c,
            ranges,
            scaler,
            lookback,
            horizon,
        })
    }

    pub fn sampler(&self, split: Split) -> WindowSampler {
        let (start, end) = self.ranges.get(split);
        WindowSampler {
            start,
            end,
            lookback: self.lookback,
            horizon: self.horizon,
        }
    }

    /// Inputs `[B, T, C]` and targets `[B, H, C]` for window origins.
    pub fn batch(&self, origins: &[usize]) -> (Tensor, Tensor) {
        let c = self.channels;
        let (t, h) = (self.lookback, self.horizon);
        let mut x = Vec::with_capacity(origins.len() * t * c);
        let mut y = Vec::with_capacity(origins.len() * h * c);
        for &o in origins {
            x.extend_from_slice(&self.values[o * c..(o + t) * c]);
            y.extend_from_slice(&self.values[(o + t) * c..(o + t + h) * c]);
        }
        let b = origins.len();
        (
            Tensor::new(&[b, t, c], x).expect("window rows"),
            Tensor::new(&[b, h, c], y).expect("window rows"),
        )
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    /// Summed orthogonality penalty of all adapters after the epoch.
    pub orth_penalty: f64,
    /// Train-split MSE, measured only when a target is configured.
    pub train_mse: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_mse,orth_penalty";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_mse, self.orth_penalty)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: DprNetModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Loss and store-aligned gradients of one shard, weighted by `weight`.
fn shard_gradients(
    model: &DprNetModel,
    data: &PreparedData,
    origins: &[usize],
    weight: f64,
    rng: Option<ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (x, y) = data.batch(origins);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let mut rng = rng;
    let out = model.forward(&mut tape, &bound, xv, rng.as_mut())?;
    let lambda = model.config.dpr.as_ref().map_or(0.0, |d| d.lambda_orth);
    let loss = total_loss(&mut tape, out.forecast, yv, out.penalty, lambda)?;
    let scaled = tape.mul_scalar(loss, weight)?;
    tape.backward(scaled)?;
    Ok((tape.value(loss).item(), bound.grads(&tape)))
}

/// Batch loss and gradient, reduced over shards in a fixed order.
pub fn batch_gradients(
    model: &DprNetModel,
    data: &PreparedData,
    origins: &[usize],
    shard_size: usize,
    dropout_key: Option<(u64, usize, usize)>,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let shards: Vec<&[usize]> = origins.chunks(shard_size).collect();
    let n = origins.len() as f64;
    let results = exec.map(shards.len(), |s| {
        let rng = dropout_key
            .filter(|_| model.config.dropout > 0.0)
            .map(|(seed, epoch, step)| param_rng(seed, &format!("dropout/{epoch}/{step}/{s}")));
        shard_gradients(model, data, shards[s], shards[s].len() as f64 / n, rng)
    });
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for (s, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        loss += l * shards[s].len() as f64 / n;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Mean squared and absolute error on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// `(mse, mae)` of paired values.
pub fn metrics(pred: &[f64], target: &[f64]) -> Metrics {
    let n = pred.len() as f64;
    let (se, ae) = pred.iter().zip(target).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Metrics { mse: se / n, mae: ae / n }
}

const EVAL_CHUNK: usize = 64;

/// Metrics over every window of `split`, on the standardised scale.
pub fn evaluate(model: &DprNetModel, data: &PreparedData, split: Split, exec: Execution) -> Result<Metrics> {
    let sampler = data.sampler(split);
    if sampler.is_empty() {
        return Err(Error::config(format!("{split:?} split has no windows")));
    }
    let origins: Vec<usize> = (0..sampler.len()).map(|i| sampler.origin(i)).collect();
    let chunks: Vec<&[usize]> = origins.chunks(EVAL_CHUNK).collect();
    let parts = exec.map(chunks.len(), |i| -> Result<(f64, f64, usize)> {
        let (x, y) = data.batch(chunks[i]);
        let pred = model.predict(&x)?;
        let m = metrics(pred.data(), y.data());
        let n = y.numel();
        Ok((m.mse * n as f64, m.mae * n as f64, n))
    });
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for p in parts {
        let (a, b, c) = p?;
        se += a;
        ae += b;
        n += c;
    }
    let out = Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    };
    if !out.mse.is_finite() {
        return Err(Error::numeric(format!("non-finite {split:?} MSE")));
    }
    Ok(out)
}

/// Trains `model` with early stopping on validation MSE.
pub fn train(model: DprNetModel, data: &PreparedData, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.lookback != model.config.lookback || data.horizon != model.config.horizon {
        return Err(Error::config(format!(
            "data windows {}->{} do not match model {}->{}",
            data.lookback, data.horizon, model.config.lookback, model.config.horizon
        )));
    }
    if data.channels != model.config.channels {
        return Err(Error::config(format!(
            "data has {} channels, model expects {}",
            data.channels, model.config.channels
        )));
    }
    let sampler = data.sampler(Split::Train);
    if sampler.is_empty() {
        return Err(Error::config("train split has no windows"));
    }
    let mut model = model;
    cfg.precision.round(&mut model.store);
    let mut adam = AdamState::new(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..sampler.len()).map(|i| sampler.origin(i)).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) =
                batch_gradients(&model, data, batch, cfg.shard_size, Some((cfg.seed, epoch, step)), exec)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model.store, &grads, &mut adam, cfg.lr)?;
            cfg.precision.round(&mut model.store);
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(&model, data, Split::Val, exec)?;
        let train_mse = match cfg.target_train_mse {
            Some(_) => Some(evaluate(&model, data, Split::Train, exec)?.mse),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_mse: val.mse,
            orth_penalty: model.orth_penalty()?,
            train_mse,
        };
        log::info!("{}", record.csv_line());
        history.push(record);
        let (improved, stop) = stopper.update(epoch, val.mse);
        if improved {
            best = model.clone();
        }
        let reached = matches!((cfg.target_train_mse, train_mse), (Some(t), Some(m)) if m < t);
        if stop || reached {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_val_mse: stopper.best,
    })
}
