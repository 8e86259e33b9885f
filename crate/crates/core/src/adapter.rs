//! Token-level recalibration adapter: perceive local context with depthwise
//! convolutions, route each token softly over `K` learned patterns, and
//! modulate the hidden state with a gated Hadamard product.
//!
//! The adapter consumes any hidden tensor of shape `[B, L, d]` and returns a
//! tensor of the same shape together with the orthogonality penalty of its
//! modulation basis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, uniform_fan_in, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Guard used wherever a vector is scaled to unit length.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DprConfig {
    /// Number of response patterns `K`.
    pub patterns: usize,
    /// Hidden width `d` of the host representation.
    pub hidden: usize,
    /// Width `d_c` of the routing query.
    pub context_dim: usize,
    /// Odd perception kernel sizes used when `multiscale` is on.
    pub kernels: Vec<usize>,
    pub lambda_orth: f64,
    pub routing: RoutingMode,
    /// Off collapses perception to a single pointwise (k = 1) branch.
    pub multiscale: bool,
    /// Initial routing temperature.
    pub tau_init: f64,
    /// Initial modulation gain; zero makes the adapter start as identity.
    pub gamma_init: f64,
    /// Off draws the gain from `U(-1, 1)` instead of using `gamma_init`.
    pub identity_init: bool,
}

/// `max(16, floor(d / 4))`
pub fn default_context_dim(hidden: usize) -> usize {
    (hidden / 4).max(16)
}

impl DprConfig {
    pub fn new(hidden: usize) -> Self {
        DprConfig {
            patterns: 8,
            hidden,
            context_dim: default_context_dim(hidden),
            kernels: vec![3, 7],
            lambda_orth: 1e-4,
            routing: RoutingMode::Soft,
            multiscale: true,
            tau_init: 1.0,
            gamma_init: 0.0,
            identity_init: true,
        }
    }

    pub fn with_patterns(mut self, k: usize) -> Self {
        self.patterns = k;
        self
    }

    /// Kernel sizes actually used by the perception stage.
    pub fn active_kernels(&self) -> Vec<usize> {
        if self.multiscale {
            self.kernels.clone()
        } else {
            vec![1]
        }
    }

    /// Input width of the routing projection, `d · n_kernels`.
    pub fn perceived_width(&self) -> usize {
        self.hidden * self.active_kernels().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns == 0 {
            return Err(Error::config("pattern count K must be at least 1"));
        }
        if self.hidden == 0 || self.context_dim == 0 {
            return Err(Error::config("hidden and context widths must be positive"));
        }
        if self.multiscale && self.kernels.is_empty() {
            return Err(Error::config("multi-scale perception needs at least one kernel"));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(format!("perception kernel sizes must be odd, got {k}")));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::config("tau_init must be positive"));
        }
        if !self.gamma_init.is_finite() {
            return Err(Error::config("gamma_init must be finite"));
        }
        if !(self.lambda_orth >= 0.0) {
            return Err(Error::config("lambda_orth must be non-negative"));
        }
        Ok(())
    }

    /// Scalar count of one adapter built from this config.
    pub fn param_count(&self) -> usize {
        let (k, d, dc) = (self.patterns, self.hidden, self.context_dim);
        let conv: usize = self.active_kernels().iter().map(|ks| d * ks).sum();
        k * d + k * dc + self.perceived_width() * dc + dc + 2 + conv
    }
}

/// Handles of one adapter's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct DprParams {
    /// Modulation basis `[K, d]`.
    pub basis: ParamId,
    /// Pattern centroids `[K, d_c]`.
    pub centroids: ParamId,
    /// Routing projection `[d · n_kernels, d_c]`.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Log temperature; the temperature is `exp(log_tau)` so it stays positive.
    pub log_tau: ParamId,
    /// Modulation gain γ.
    pub gamma: ParamId,
    /// One `[d, k]` depthwise kernel per active kernel size.
    pub conv: Vec<ParamId>,
}

impl DprParams {
    /// Registers freshly initialised adapter parameters under `prefix`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &DprConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (k, d, dc) = (cfg.patterns, cfg.hidden, cfg.context_dim);
        let name = |s: &str| format!("{prefix}.{s}");
        let basis = store.add(name("basis"), uniform_fan_in(seed, &name("basis"), &[k, d], d));
        let centroids = store.add(
            name("centroids"),
            uniform_fan_in(seed, &name("centroids"), &[k, dc], dc),
        );
        let width = cfg.perceived_width();
        let proj_w = store.add(
            name("proj_w"),
            uniform_fan_in(seed, &name("proj_w"), &[width, dc], width),
        );
        let proj_b = store.add(name("proj_b"), Tensor::zeros(&[dc]));
        let log_tau = store.add(name("log_tau"), Tensor::scalar(cfg.tau_init.ln()));
        let gamma_value = if cfg.identity_init {
            Tensor::scalar(cfg.gamma_init)
        } else {
            uniform(seed, &name("gamma"), &[1], 1.0)
        };
        let gamma = store.add(name("gamma"), gamma_value);
        let conv = cfg
            .active_kernels()
            .into_iter()
            .map(|ks| {
                let n = name(&format!("conv{ks}"));
                let t = uniform_fan_in(seed, &n, &[d, ks], ks);
                store.add(n, t)
            })
            .collect();
        Ok(DprParams {
            basis,
            centroids,
            proj_w,
            proj_b,
            log_tau,
            gamma,
            conv,
        })
    }
}

/// Output of the routing stage.
#[derive(Clone, Copy, Debug)]
pub struct Routing {
    /// Context query `c = GELU(W₁z + b₁)`, `[B, L, d_c]`.
    pub context: Var,
    /// Routing distribution over patterns, `[B, L, K]`.
    pub probs: Var,
}

/// Result of a full adapter pass.
#[derive(Clone, Copy, Debug)]
pub struct DprOutput {
    pub hidden: Var,
    pub penalty: Var,
    pub routing: Routing,
}

/// One adapter: configuration plus parameter handles.
#[derive(Clone, Debug, PartialEq)]
pub struct DprAdapter {
    pub config: DprConfig,
    pub params: DprParams,
}

impl DprAdapter {
    pub fn new(store: &mut ParamStore, prefix: &str, config: DprConfig, seed: u64) -> Result<Self> {
        let params = DprParams::init(store, prefix, &config, seed)?;
        Ok(DprAdapter { config, params })
    }

    fn check_hidden(&self, tape: &Tape, h: Var) -> Result<()> {
        let s = tape.shape(h);
        if s.len() != 3 || s[2] != self.config.hidden {
            return Err(Error::Config(format!(
                "adapter expects [B, L, {}] input, got {s:?}",
                self.config.hidden
            )));
        }
        Ok(())
    }

    /// Multi-scale depthwise perception: `[B, L, d] -> [B, L, d·n_kernels]`.
    pub fn perceive(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        self.check_hidden(tape, h)?;
        let channel_first = tape.transpose_last2(h)?;
        let mut branches = Vec::with_capacity(self.params.conv.len());
        for &kernel in &self.params.conv {
            let conv = tape.depthwise_conv1d(channel_first, bound.var(kernel))?;
            branches.push(tape.transpose_last2(conv)?);
        }
        if branches.len() == 1 {
            return Ok(branches[0]);
        }
        tape.concat_last(&branches)
    }

    /// Context query `c = GELU(W₁z + b₁)`.
    pub fn context_query(&self, tape: &mut Tape, bound: &Bound, perceived: Var) -> Result<Var> {
        let proj = tape.matmul(perceived, bound.var(self.params.proj_w))?;
        let proj = tape.add_row(proj, bound.var(self.params.proj_b))?;
        tape.gelu(proj)
    }

    /// Pattern assignment from a context query: softmax of temperature-scaled
    /// cosine similarities to the centroids, or its one-hot arg-max in hard
    /// mode.
    pub fn assign(&self, tape: &mut Tape, bound: &Bound, context: Var) -> Result<Var> {
        let c_hat = tape.l2_normalize_lastdim(context, NORM_EPS)?;
        let e_hat = tape.l2_normalize_lastdim(bound.var(self.params.centroids), NORM_EPS)?;
        let e_t = tape.transpose_last2(e_hat)?;
        let cosine = tape.matmul(c_hat, e_t)?;
        let tau = tape.exp(bound.var(self.params.log_tau))?;
        let logits = tape.scale(cosine, tau)?;
        let probs = tape.softmax_lastdim(logits)?;
        match self.config.routing {
            RoutingMode::Soft => Ok(probs),
            RoutingMode::Hard => tape.one_hot_straight_through(probs),
        }
    }

    pub fn route(&self, tape: &mut Tape, bound: &Bound, perceived: Var) -> Result<Routing> {
        let width = tape.shape(perceived).last().copied();
        if width != Some(self.config.perceived_width()) {
            return Err(Error::shape(
                "route",
                tape.shape(perceived),
                &[self.config.perceived_width()],
            ));
        }
        let context = self.context_query(tape, bound, perceived)?;
        let probs = self.assign(tape, bound, context)?;
        Ok(Routing { context, probs })
    }

    /// `h ⊙ (1 + γ·m)` with `m = π · M`.
    pub fn modulate(&self, tape: &mut Tape, bound: &Bound, h: Var, probs: Var) -> Result<Var> {
        let m = tape.matmul(probs, bound.var(self.params.basis))?;
        let gm = tape.scale(m, bound.var(self.params.gamma))?;
        let gain = tape.add_scalar(gm, 1.0)?;
        tape.mul(h, gain)
    }

    pub fn penalty(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        orth_penalty(tape, bound.var(self.params.basis))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<DprOutput> {
        let perceived = self.perceive(tape, bound, h)?;
        let routing = self.route(tape, bound, perceived)?;
        let hidden = self.modulate(tape, bound, h, routing.probs)?;
        let penalty = self.penalty(tape, bound)?;
        Ok(DprOutput {
            hidden,
            penalty,
            routing,
        })
    }
}

/// `(1/K)·‖M̂M̂ᵀ − I‖²_F` where `M̂` has unit-length rows.
pub fn orth_penalty(tape: &mut Tape, basis: Var) -> Result<Var> {
    let shape = tape.shape(basis).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("orth_penalty", &shape, &[]));
    }
    let k = shape[0];
    let unit = tape.l2_normalize_lastdim(basis, NORM_EPS)?;
    let unit_t = tape.transpose_last2(unit)?;
    let gram = tape.matmul(unit, unit_t)?;
    let eye = tape.constant(Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.mul_scalar(total, 1.0 / k as f64)
}

/// Plain-value orthogonality penalty of a `[K, d]` basis.
pub fn orth_penalty_value(basis: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.constant(basis.clone());
    let p = orth_penalty(&mut tape, b)?;
    Ok(tape.value(p).item())
}
