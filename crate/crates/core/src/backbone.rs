//! The minimalist forecasting backbone: reversible instance normalisation,
//! channel-independent patch embedding, a stack of residual blocks (static
//! MLP followed by the recalibration adapter) and a flatten-plus-linear head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{DprAdapter, DprConfig};
use crate::autodiff::{patch_count, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Look-back length `T`.
    pub lookback: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_expansion: f64,
    /// Explicit MLP hidden width; overrides `mlp_expansion` when set.
    pub mlp_hidden: Option<usize>,
    pub dropout: f64,
    pub revin_affine: bool,
    /// `None` builds the backbone with the adapters removed.
    pub dpr: Option<DprConfig>,
}

impl ModelConfig {
    /// Defaults for the given problem dimensions.
    pub fn new(lookback: usize, horizon: usize, channels: usize) -> Self {
        let d = 256;
        ModelConfig {
            lookback,
            horizon,
            channels,
            patch_len: 16,
            stride: 8,
            d_model: d,
            n_blocks: 2,
            mlp_expansion: 2.0,
            mlp_hidden: None,
            dropout: 0.1,
            revin_affine: true,
            dpr: Some(DprConfig::new(d)),
        }
    }

    /// Changes the hidden width, keeping the adapter's width and context
    /// dimension in step.
    pub fn with_d_model(mut self, d: usize) -> Self {
        self.d_model = d;
        if let Some(dpr) = self.dpr.as_mut() {
            dpr.hidden = d;
            dpr.context_dim = crate::adapter::default_context_dim(d);
        }
        self
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_hidden
            .unwrap_or_else(|| (self.d_model as f64 * self.mlp_expansion).round() as usize)
    }

    pub fn tokens(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(Error::config("lookback must be at least 2"));
        }
        if self.lookback < self.patch_len {
            return Err(Error::config(format!(
                "lookback {} shorter than patch length {}",
                self.lookback, self.patch_len
            )));
        }
        if self.horizon == 0 || self.channels == 0 || self.d_model == 0 || self.stride == 0 {
            return Err(Error::config("horizon, channels, d_model and stride must be positive"));
        }
        if self.mlp_width() == 0 {
            return Err(Error::config("MLP hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if let Some(dpr) = &self.dpr {
            dpr.validate()?;
            if dpr.hidden != self.d_model {
                return Err(Error::config(format!(
                    "adapter width {} differs from d_model {}",
                    dpr.hidden, self.d_model
                )));
            }
        }
        Ok(())
    }

    /// Same backbone without adapters, MLP widened so the parameter count
    /// matches this configuration as closely as possible.
    pub fn matched_baseline(&self) -> ModelConfig {
        let mut base = self.clone();
        base.dpr = None;
        let Some(dpr) = &self.dpr else {
            return base;
        };
        let d = self.d_model;
        let extra_per_block = dpr.param_count();
        // Each extra hidden unit costs d (in) + 1 (bias) + d (out).
        let per_unit = 2 * d + 1;
        let extra_units = (extra_per_block as f64 / per_unit as f64).round() as usize;
        base.mlp_hidden = Some(self.mlp_width() + extra_units);
        base
    }
}

/// Per-window statistics captured by [`RevIn::normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RevInState {
    pub batch: usize,
    pub channels: usize,
    /// `[B·C]` means, index `b·C + c`.
    pub mean: Vec<f64>,
    /// `[B·C]` population standard deviations.
    pub std: Vec<f64>,
}

impl RevInState {
    fn broadcast(&self, values: &[f64], len: usize) -> Tensor {
        let c = self.channels;
        Tensor::from_fn(&[self.batch, len, c], |i| {
            let b = i / (len * c);
            values[b * c + i % c]
        })
    }
}

/// Parameter handles of the optional RevIN affine.
#[derive(Clone, Debug, PartialEq)]
pub struct RevIn {
    pub gain: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl RevIn {
    pub fn new(store: &mut ParamStore, channels: usize, affine: bool) -> Self {
        if affine {
            RevIn {
                gain: Some(store.add("revin.gain", Tensor::full(&[channels], 1.0))),
                bias: Some(store.add("revin.bias", Tensor::zeros(&[channels]))),
            }
        } else {
            RevIn { gain: None, bias: None }
        }
    }

    /// `(x − μ)/(σ + eps)` per (sample, channel), then the affine.
    pub fn normalize(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, RevInState)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] < 2 {
            return Err(Error::Config(format!(
                "RevIN expects [B, T >= 2, C] input, got {shape:?}"
            )));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let xv = tape.value(x).data();
        let mut mean = vec![0.0; b * c];
        let mut std = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let col = (0..t).map(|ti| xv[(bi * t + ti) * c + ci]);
                let mu = col.clone().sum::<f64>() / t as f64;
                let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
                mean[bi * c + ci] = mu;
                std[bi * c + ci] = var.sqrt();
            }
        }
        let state = RevInState {
            batch: b,
            channels: c,
            mean,
            std,
        };
        let mu = tape.constant(state.broadcast(&state.mean, t));
        let inv: Vec<f64> = state.std.iter().map(|s| 1.0 / (s + REVIN_EPS)).collect();
        let inv = tape.constant(state.broadcast(&inv, t));
        let centered = tape.sub(x, mu)?;
        let mut out = tape.mul(centered, inv)?;
        if let (Some(g), Some(bias)) = (self.gain, self.bias) {
            out = tape.mul_row(out, bound.var(g))?;
            out = tape.add_row(out, bound.var(bias))?;
        }
        Ok((out, state))
    }

    /// Inverse affine, then `y·(σ + eps) + μ`.
    pub fn denormalize(&self, tape: &mut Tape, bound: &Bound, y: Var, state: &RevInState) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        if shape.len() != 3 || shape[0] != state.batch || shape[2] != state.channels {
            return Err(Error::Contract(format!(
                "RevIN state for [{}, _, {}] cannot invert {shape:?}",
                state.batch, state.channels
            )));
        }
        let mut out = y;
        if let (Some(g), Some(bias)) = (self.gain, self.bias) {
            out = tape.sub_row(out, bound.var(bias))?;
            let safe = tape.add_scalar(bound.var(g), REVIN_EPS * REVIN_EPS)?;
            out = tape.div_row(out, safe)?;
        }
        let len = shape[1];
        let scale: Vec<f64> = state.std.iter().map(|s| s + REVIN_EPS).collect();
        let scale = tape.constant(state.broadcast(&scale, len));
        let mu = tape.constant(state.broadcast(&state.mean, len));
        let scaled = tape.mul(out, scale)?;
        tape.add(scaled, mu)
    }
}

/// Plain-value RevIN normalisation (identity affine).
pub fn revin_normalize(x: &Tensor) -> Result<(Tensor, RevInState)> {
    let store = ParamStore::new();
    let revin = RevIn { gain: None, bias: None };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (y, state) = revin.normalize(&mut tape, &bound, xv)?;
    Ok((tape.value(y).clone(), state))
}

/// Plain-value RevIN denormalisation (identity affine).
pub fn revin_denormalize(y: &Tensor, state: &RevInState) -> Result<Tensor> {
    let store = ParamStore::new();
    let revin = RevIn { gain: None, bias: None };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let yv = tape.constant(y.clone());
    let out = revin.denormalize(&mut tape, &bound, yv, state)?;
    Ok(tape.value(out).clone())
}

/// Splits `x[B, T]` into `[B, L, P]` overlapping patches.
pub fn patchify(x: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("patchify", x.shape(), &[]));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.unfold_last(v, patch, stride)?;
    Ok(tape.value(p).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch_len: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let wn = format!("{name}.weight");
        let bn = format!("{name}.bias");
        let weight = store.add(wn.clone(), uniform_fan_in(seed, &wn, &[fan_in, fan_out], fan_in));
        let bias = store.add(bn.clone(), uniform_fan_in(seed, &bn, &[fan_out], fan_in));
        Linear { weight, bias }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(y, bound.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), LAYER_NORM_EPS)
    }
}

/// `Z = H + MLP(LN(H))`, `out = Z + DPR(LN(Z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DprBlock {
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: Option<DprAdapter>,
}

/// Outputs of one block pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub hidden: Var,
    pub penalty: Option<Var>,
    pub routing: Option<Var>,
}

impl DprBlock {
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<BlockOutput> {
        let normed = self.ln1.forward(tape, bound, h)?;
        let hidden = self.fc1.forward(tape, bound, normed)?;
        let mut hidden = tape.gelu(hidden)?;
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                let keep = 1.0 - p;
                let shape = tape.shape(hidden).to_vec();
                let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                let mask = tape.constant(mask);
                hidden = tape.mul(hidden, mask)?;
            }
        }
        let mlp = self.fc2.forward(tape, bound, hidden)?;
        let z = tape.add(h, mlp)?;
        let normed = self.ln2.forward(tape, bound, z)?;
        let (recal, penalty, routing) = match &self.adapter {
            Some(a) => {
                let out = a.forward(tape, bound, normed)?;
                (out.hidden, Some(out.penalty), Some(out.routing.probs))
            }
            None => (normed, None, None),
        };
        let hidden = tape.add(z, recal)?;
        Ok(BlockOutput {
            hidden,
            penalty,
            routing,
        })
    }
}

/// Output of a model pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Forecast `[B, H, C]` in the input's scale.
    pub forecast: Var,
    /// Sum of the adapters' orthogonality penalties.
    pub penalty: Option<Var>,
    /// Per-block routing distributions `[B·C, L, K]`.
    pub routing: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DprNetModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub revin: RevIn,
    pub embed: PatchEmbed,
    pub blocks: Vec<DprBlock>,
    pub head: Linear,
}

impl DprNetModel {
    /// Builds a model; every tensor's initial value depends only on `seed`
    /// and the tensor's name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let revin = RevIn::new(&mut store, config.channels, config.revin_affine);
        let proj = Linear::new(&mut store, "embed", config.patch_len, d, seed);
        let embed = PatchEmbed {
            patch_len: config.patch_len,
            stride: config.stride,
            weight: proj.weight,
            bias: proj.bias,
        };
        let hidden = config.mlp_width();
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = format!("blocks.{i}");
            let ln1 = LayerNormParams::new(&mut store, &format!("{p}.ln1"), d);
            let fc1 = Linear::new(&mut store, &format!("{p}.mlp.fc1"), d, hidden, seed);
            let fc2 = Linear::new(&mut store, &format!("{p}.mlp.fc2"), hidden, d, seed);
            let ln2 = LayerNormParams::new(&mut store, &format!("{p}.ln2"), d);
            let adapter = match &config.dpr {
                Some(cfg) => Some(DprAdapter::new(&mut store, &format!("{p}.dpr"), cfg.clone(), seed)?),
                None => None,
            };
            blocks.push(DprBlock {
                ln1,
                ln2,
                fc1,
                fc2,
                adapter,
            });
        }
        let head = Linear::new(&mut store, "head", config.tokens() * d, config.horizon, seed);
        Ok(DprNetModel {
            config,
            seed,
            store,
            revin,
            embed,
            blocks,
            head,
        })
    }

    /// Copy of this model with the adapters removed and every other tensor
    /// unchanged.
    pub fn without_adapters(&self) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.dpr = None;
        let mut other = DprNetModel::new(cfg, self.seed)?;
        for id in other.store.ids().collect::<Vec<_>>() {
            let name = other.store.name(id).to_string();
            let src = self
                .store
                .find(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            *other.store.get_mut(id) = self.store.get(src).clone();
        }
        Ok(other)
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &DprAdapter> {
        self.blocks.iter().filter_map(|b| b.adapter.as_ref())
    }

    /// Full forward pass on a bound copy of the parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Config(format!("expected [B, T, C] input, got {shape:?}")));
        }
        if shape[1] != cfg.lookback {
            return Err(Error::Config(format!(
                "time axis: expected lookback {}, got {}",
                cfg.lookback, shape[1]
            )));
        }
        if shape[2] != cfg.channels {
            return Err(Error::Config(format!(
                "channel axis: expected {} channels, got {}",
                cfg.channels, shape[2]
            )));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let (normed, state) = self.revin.normalize(tape, bound, x)?;
        let per_channel = tape.permute(normed, &[0, 2, 1])?;
        let series = tape.reshape(per_channel, &[b * c, t])?;
        let patches = tape.unfold_last(series, self.embed.patch_len, self.embed.stride)?;
        let tokens = tape.shape(patches)[1];
        let mut h = tape.matmul(patches, bound.var(self.embed.weight))?;
        h = tape.add_row(h, bound.var(self.embed.bias))?;

        let mut penalty: Option<Var> = None;
        let mut routing = Vec::new();
        for block in &self.blocks {
            let dropout = dropout_rng.as_deref_mut().map(|rng| (cfg.dropout, rng));
            let out = block.forward(tape, bound, h, dropout)?;
            h = out.hidden;
            if let Some(p) = out.penalty {
                penalty = Some(match penalty {
                    Some(acc) => tape.add(acc, p)?,
                    None => p,
                });
            }
            routing.extend(out.routing);
        }

        let flat = tape.reshape(h, &[b * c, tokens * cfg.d_model])?;
        let y = tape.matmul(flat, bound.var(self.head.weight))?;
        let y = tape.add_row(y, bound.var(self.head.bias))?;
        let y = tape.reshape(y, &[b, c, cfg.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let forecast = self.revin.denormalize(tape, bound, y, &state)?;
        Ok(ModelOutput {
            forecast,
            penalty,
            routing,
        })
    }

    /// Evaluation-mode forecast for a `[B, T, C]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, None)?;
        Ok(tape.value(out.forecast).clone())
    }

    /// Evaluation-mode routing distributions of every block, each
    /// `[B·C, L, K]` with row `b·C + c`.
    pub fn routing(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, None)?;
        Ok(out.routing.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Current summed orthogonality penalty of all adapters (0 without any).
    pub fn orth_penalty(&self) -> Result<f64> {
        let mut total = 0.0;
        for a in self.adapters() {
            total += crate::adapter::orth_penalty_value(self.store.get(a.params.basis))?;
        }
        Ok(total)
    }
}
