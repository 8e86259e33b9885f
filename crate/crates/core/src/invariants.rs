//! Self-checks of the engine: finite-difference gradients and the structural
//! properties the adapter and backbone are built to satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::{orth_penalty_value, DprAdapter, DprConfig, RoutingMode};
use crate::autodiff::Tape;
use crate::backbone::{revin_denormalize, revin_normalize, DprNetModel, ModelConfig};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::total_loss;

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = Normal::new(0.0, scale).expect("positive scale");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Micro model used for gradient checks: `T=16, P=4, S=2, d=8, d_c=16,
/// K=3`, one block, two channels, dropout off.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(16, 4, 2).with_d_model(8);
    cfg.patch_len = 4;
    cfg.stride = 2;
    cfg.n_blocks = 1;
    cfg.dropout = 0.0;
    let dpr = cfg.dpr.as_mut().expect("adapters on");
    dpr.patterns = 3;
    dpr.context_dim = 16;
    cfg
}

/// A micro model moved away from its identity initialisation so that every
/// parameter receives gradient.
pub fn perturbed_micro_model(seed: u64) -> Result<DprNetModel> {
    let mut model = DprNetModel::new(micro_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    for a in model.blocks.iter().filter_map(|b| b.adapter.as_ref()) {
        *model.store.get_mut(a.params.gamma) = Tensor::scalar(0.5);
    }
    Ok(model)
}

/// Gradient check outcome for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    /// `‖analytic − fd‖₂ / max(‖fd‖₂, 1e-8)`
    pub relative: f64,
    pub fd_norm: f64,
}

/// Loss of the model on `(x, y)` including the weighted penalty.
fn model_loss(model: &DprNetModel, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = model.forward(&mut tape, &bound, xv, None)?;
    let lambda = model.config.dpr.as_ref().map_or(0.0, |d| d.lambda_orth);
    let loss = total_loss(&mut tape, out.forecast, yv, out.penalty, lambda)?;
    Ok(tape.value(loss).item())
}

/// Compares backpropagated parameter gradients with central differences.
pub fn model_gradcheck(model: &DprNetModel, x: &Tensor, y: &Tensor) -> Result<Vec<ParamGradError>> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = model.forward(&mut tape, &bound, xv, None)?;
    let lambda = model.config.dpr.as_ref().map_or(0.0, |d| d.lambda_orth);
    let loss = total_loss(&mut tape, out.forecast, yv, out.penalty, lambda)?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape);

    let mut probe = model.clone();
    let mut report = Vec::new();
    for id in model.store.ids() {
        let n = model.store.get(id).numel();
        let mut fd = vec![0.0; n];
        for j in 0..n {
            let orig = model.store.get(id).data()[j];
            probe.store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = model_loss(&probe, x, y)?;
            probe.store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = model_loss(&probe, x, y)?;
            probe.store.get_mut(id).data_mut()[j] = orig;
            fd[j] = (up - down) / (2.0 * FD_STEP);
        }
        let a = &analytic[id.index()];
        let diff = a.iter().zip(&fd).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        report.push(ParamGradError {
            name: model.store.name(id).to_string(),
            relative: diff / fd_norm.max(1e-8),
            fd_norm,
        });
    }
    Ok(report)
}

/// Random micro-model gradient check; returns the per-parameter errors.
pub fn micro_gradcheck(seed: u64) -> Result<Vec<ParamGradError>> {
    let model = perturbed_micro_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let x = gaussian(&mut rng, &[2, 16, 2], 1.0);
    let y = gaussian(&mut rng, &[2, 4, 2], 1.0);
    model_gradcheck(&model, &x, &y)
}

fn small_adapter(seed: u64, k: usize, d: usize, routing: RoutingMode) -> Result<(ParamStore, DprAdapter)> {
    let mut store = ParamStore::new();
    let mut cfg = DprConfig::new(d).with_patterns(k);
    cfg.routing = routing;
    let a = DprAdapter::new(&mut store, "dpr", cfg, seed)?;
    Ok((store, a))
}

/// Largest simplex violation over `n` random tokens in soft mode, and
/// whether hard mode produced exact one-hot rows.
pub fn routing_simplex(seed: u64, n: usize) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut store, soft) = small_adapter(seed, 5, 16, RoutingMode::Soft)?;
    let mut hard = soft.clone();
    hard.config.routing = RoutingMode::Hard;
    *store.get_mut(soft.params.log_tau) = Tensor::scalar(rng.random_range(-2.0..4.0));
    let dc = soft.config.context_dim;
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    let ctx = gaussian(&mut rng, &[1, n, dc], scale);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let c = tape.constant(ctx);
    let pi = soft.assign(&mut tape, &bound, c)?;
    let k = soft.config.patterns;
    let mut worst: f64 = 0.0;
    for row in tape.value(pi).data().chunks(k) {
        if row.iter().any(|&p| p < 0.0) {
            worst = f64::INFINITY;
        }
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    let hp = hard.assign(&mut tape, &bound, c)?;
    let one_hot = tape
        .value(hp)
        .data()
        .chunks(k)
        .all(|row| row.iter().filter(|&&p| p == 1.0).count() == 1 && row.iter().all(|&p| p == 0.0 || p == 1.0));
    Ok((worst, one_hot))
}

/// Penalty of an orthonormal basis and of two duplicated unit rows.
pub fn orth_oracles() -> Result<(f64, f64)> {
    let (c, s) = (0.6, 0.8);
    let ortho = Tensor::from_rows(&[&[c, s, 0.0], &[-s, c, 0.0], &[0.0, 0.0, 1.0]]);
    let dup = Tensor::from_rows(&[&[c, 0.0, s], &[c, 0.0, s]]);
    Ok((orth_penalty_value(&ortho)?, orth_penalty_value(&dup)?))
}

/// Largest `‖h̃‖ − (1 + |γ|·max_k‖M_k‖_∞)·‖h‖` over `n` random draws.
pub fn lipschitz_margin(seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let (mut store, a) = small_adapter(seed.wrapping_add(i as u64), 4, 8, RoutingMode::Soft)?;
        let gamma = rng.random_range(-3.0..3.0);
        let basis_scale = rng.random_range(0.1..3.0);
        let basis = gaussian(&mut rng, &[4, 8], basis_scale);
        let max_inf = basis
            .data()
            .chunks(8)
            .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0f64, f64::max);
        *store.get_mut(a.params.gamma) = Tensor::scalar(gamma);
        *store.get_mut(a.params.basis) = basis;
        *store.get_mut(a.params.log_tau) = Tensor::scalar(rng.random_range(-1.0..3.0));
        let h_scale = rng.random_range(0.01..10.0);
        let h = gaussian(&mut rng, &[1, 6, 8], h_scale);
        let h_norm = h.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let hv = tape.constant(h);
        let out = a.forward(&mut tape, &bound, hv)?;
        let out_norm = tape.value(out.hidden).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(out_norm - (1.0 + gamma.abs() * max_inf) * h_norm);
    }
    Ok(worst)
}

/// Number of `n` random inputs on which a freshly built model and its
/// adapter-free copy disagree in any bit.
pub fn identity_mismatches(cfg: &ModelConfig, seed: u64, n: usize) -> Result<usize> {
    let model = DprNetModel::new(cfg.clone(), seed)?;
    let bare = model.without_adapters()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    let mut bad = 0;
    for _ in 0..n {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x = gaussian(&mut rng, &[1, cfg.lookback, cfg.channels], scale);
        if model.predict(&x)? != bare.predict(&x)? {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Largest round-trip error of RevIN over `n` windows, a third of them
/// constant plus `1e-9` noise.
pub fn revin_round_trip(seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let t = rng.random_range(2..64);
        let c = rng.random_range(1..4);
        let x = if i % 3 == 0 {
            let level = rng.random_range(-100.0..100.0);
            let noise = gaussian(&mut rng, &[1, t, c], 1e-9);
            Tensor::from_fn(&[1, t, c], |j| level + noise.data()[j])
        } else {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let offset = rng.random_range(-50.0..50.0);
            let g = gaussian(&mut rng, &[1, t, c], scale);
            Tensor::from_fn(&[1, t, c], |j| offset + g.data()[j])
        };
        let (y, state) = revin_normalize(&x)?;
        let back = revin_denormalize(&y, &state)?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    Ok(worst)
}

/// Whether perturbing one input channel changes only that output channel.
pub fn channel_independent(seed: u64) -> Result<bool> {
    let mut cfg = micro_config();
    cfg.channels = 3;
    let mut model = DprNetModel::new(cfg.clone(), seed)?;
    for a in model.blocks.iter().filter_map(|b| b.adapter.as_ref()) {
        *model.store.get_mut(a.params.gamma) = Tensor::scalar(0.7);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, &[2, cfg.lookback, 3], 1.0);
    let base = model.predict(&x)?;
    for c in 0..3 {
        let mut xp = x.clone();
        for (i, v) in xp.data_mut().iter_mut().enumerate() {
            if i % 3 == c {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let out = model.predict(&xp)?;
        for (i, (a, b)) in base.data().iter().zip(out.data()).enumerate() {
            let changed = a != b;
            if (i % 3 == c) != changed {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// One line of the invariant report.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs every check. `gamma_init` overrides the adapters' initial gain in
/// the identity check; anything but zero is expected to fail it.
pub fn run_battery(seed: u64, gamma_init: f64) -> Result<Vec<InvariantResult>> {
    let mut out = Vec::new();
    let grads = micro_gradcheck(seed)?;
    let worst = grads
        .iter()
        .max_by(|a, b| a.relative.total_cmp(&b.relative))
        .expect("micro model has parameters");
    out.push(InvariantResult {
        name: "fd-gradients",
        passed: worst.relative < GRAD_TOLERANCE,
        detail: format!("worst relative error {:.3e} ({})", worst.relative, worst.name),
    });

    let (dev, one_hot) = routing_simplex(seed, 1000)?;
    out.push(InvariantResult {
        name: "routing-simplex",
        passed: dev < 1e-9 && one_hot,
        detail: format!("max |sum - 1| {dev:.3e}, hard one-hot {one_hot}"),
    });

    let (ortho, dup) = orth_oracles()?;
    out.push(InvariantResult {
        name: "orthogonality-penalty",
        passed: ortho.abs() < 1e-12 && (dup - 1.0).abs() < 1e-12,
        detail: format!("orthonormal {ortho:.3e}, duplicated {dup}"),
    });

    let margin = lipschitz_margin(seed, 1000)?;
    out.push(InvariantResult {
        name: "lipschitz-bound",
        passed: margin <= 1e-9,
        detail: format!("largest excess over bound {margin:.3e}"),
    });

    let mut cfg = micro_config();
    cfg.dpr.as_mut().expect("adapters on").gamma_init = gamma_init;
    let bad = identity_mismatches(&cfg, seed, 100)?;
    out.push(InvariantResult {
        name: "identity-at-init",
        passed: bad == 0,
        detail: format!("{bad} of 100 inputs differ from the adapter-free model"),
    });

    let err = revin_round_trip(seed, 1000)?;
    out.push(InvariantResult {
        name: "revin-round-trip",
        passed: err < 1e-6,
        detail: format!("max abs error {err:.3e}"),
    });

    let ci = channel_independent(seed)?;
    out.push(InvariantResult {
        name: "channel-independence",
        passed: ci,
        detail: format!("perturbations stay in their channel: {ci}"),
    });
    Ok(out)
}
