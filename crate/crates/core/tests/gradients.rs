//! Central finite-difference checks of every differentiable tape op and of
//! the adapter's parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpr::adapter::{orth_penalty, orth_penalty_value, DprAdapter, DprConfig, RoutingMode};
use dpr::autodiff::{Tape, Var};
use dpr::params::ParamStore;
use dpr::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// `Σ out ⊙ w` for a fixed pseudo-random `w`, so upstream gradients are not
/// all ones.
fn weighted_sum(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i * 37 % 11) as f64 - 5.0) / 4.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Worst per-tensor relative error `‖analytic − fd‖ / max(‖fd‖, 1e-8)`.
fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_sum(&mut tape, out);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*v);
        let mut probe = inputs.to_vec();
        let mut fd = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + H;
            let (t, _, l) = eval(&probe);
            let up = t.value(l).item();
            probe[i].data_mut()[j] = orig - H;
            let (t, _, l) = eval(&probe);
            let down = t.value(l).item();
            probe[i].data_mut()[j] = orig;
            fd.push((up - down) / (2.0 * H));
        }
        let diff: f64 = analytic.data().iter().zip(&fd).map(|(a, f)| (a - f) * (a - f)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-8));
    }
    worst
}

macro_rules! op_check {
    ($name:ident, [$($shape:expr),+], |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let mut rng = ChaCha8Rng::seed_from_u64(line!() as u64);
            let inputs = vec![$(rand_tensor(&mut rng, &$shape)),+];
            let err = fd_check(&inputs, |$t: &mut Tape, $v: &[Var]| $body.unwrap());
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

op_check!(matmul_grad, [[2, 3, 4], [2, 4, 5]], |t, v| t.matmul(v[0], v[1]));
op_check!(matmul_shared_rhs_grad, [[2, 3, 4], [4, 2]], |t, v| t.matmul(v[0], v[1]));
op_check!(transpose_grad, [[2, 3, 4]], |t, v| t.transpose_last2(v[0]));
op_check!(permute_grad, [[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]));
op_check!(reshape_grad, [[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4]));
op_check!(unfold_grad, [[2, 11]], |t, v| t.unfold_last(v[0], 4, 3));
op_check!(concat_grad, [[2, 3], [2, 2]], |t, v| t.concat_last(&[v[0], v[1]]));
op_check!(add_grad, [[3, 4], [3, 4]], |t, v| t.add(v[0], v[1]));
op_check!(sub_grad, [[3, 4], [3, 4]], |t, v| t.sub(v[0], v[1]));
op_check!(mul_grad, [[3, 4], [3, 4]], |t, v| t.mul(v[0], v[1]));
op_check!(add_row_grad, [[2, 3, 4], [4]], |t, v| t.add_row(v[0], v[1]));
op_check!(sub_row_grad, [[2, 3, 4], [4]], |t, v| t.sub_row(v[0], v[1]));
op_check!(mul_row_grad, [[2, 3, 4], [4]], |t, v| t.mul_row(v[0], v[1]));
op_check!(scale_grad, [[3, 4], [1]], |t, v| t.scale(v[0], v[1]));
op_check!(add_scalar_grad, [[3, 4]], |t, v| t.add_scalar(v[0], 0.7));
op_check!(mul_scalar_grad, [[3, 4]], |t, v| t.mul_scalar(v[0], -1.3));
op_check!(exp_grad, [[3, 4]], |t, v| t.exp(v[0]));
op_check!(gelu_grad, [[3, 4]], |t, v| t.gelu(v[0]));
op_check!(softmax_grad, [[3, 5]], |t, v| t.softmax_lastdim(v[0]));
op_check!(layer_norm_grad, [[3, 6], [6], [6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
op_check!(l2_normalize_grad, [[3, 5]], |t, v| t.l2_normalize_lastdim(v[0], 1e-12));
op_check!(depthwise_conv_grad, [[2, 3, 9], [3, 5]], |t, v| t.depthwise_conv1d(v[0], v[1]));
op_check!(mean_grad, [[3, 4]], |t, v| t.mean(v[0]));
op_check!(mse_grad, [[3, 4], [3, 4]], |t, v| t.mse(v[0], v[1]));

#[test]
fn div_row_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let d = Tensor::from_fn(&[4], |i| 0.8 + 0.3 * i as f64);
    let err = fd_check(&[x, d], |t, v| t.div_row(v[0], v[1]).unwrap());
    assert!(err < TOL, "{err:e}");
}

#[test]
fn composite_graph_grad() {
    // Exercises chained ops the way the adapter and backbone do.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 5, 4]),
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[4, 3]),
    ];
    let err = fd_check(&inputs, |t, v| {
        let ct = t.transpose_last2(v[0]).unwrap();
        let conv = t.depthwise_conv1d(ct, v[3]).unwrap();
        let back = t.transpose_last2(conv).unwrap();
        let z = t.concat_last(&[v[0], back]).unwrap();
        let z = t.reshape(z, &[10, 8]).unwrap();
        let w = t.concat_last(&[v[1], v[1]]).unwrap();
        let w = t.reshape(w, &[8, 3]).unwrap();
        let p = t.matmul(z, w).unwrap();
        let p = t.add_row(p, v[2]).unwrap();
        let g = t.gelu(p).unwrap();
        let n = t.l2_normalize_lastdim(g, 1e-12).unwrap();
        t.softmax_lastdim(n).unwrap()
    });
    assert!(err < TOL, "{err:e}");
}

#[test]
fn backward_twice_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let a = tape.param(rand_tensor(&mut rng, &[3, 4]));
    let b = tape.param(rand_tensor(&mut rng, &[4, 2]));
    let m = tape.matmul(a, b).unwrap();
    let s = tape.softmax_lastdim(m).unwrap();
    let loss = weighted_sum(&mut tape, s);
    tape.backward(loss).unwrap();
    let first = (tape.grad_tensor(a), tape.grad_tensor(b));
    tape.backward(loss).unwrap();
    assert_eq!(first, (tape.grad_tensor(a), tape.grad_tensor(b)));
}

#[test]
fn softmax_simplex_over_large_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let scale = [1.0, 10.0, 1e3][rng.random_range(0..3)];
        let x = Tensor::from_fn(&[1, 7], |_| scale * rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax_lastdim(v).unwrap();
        let row = tape.value(p).data();
        assert!(row.iter().all(|&q| q >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn tiny_adapter(seed: u64) -> (ParamStore, DprAdapter) {
    let mut store = ParamStore::new();
    let mut cfg = DprConfig::new(8).with_patterns(3);
    cfg.context_dim = 16;
    let a = DprAdapter::new(&mut store, "dpr", cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    *store.get_mut(a.params.gamma) = Tensor::scalar(0.6);
    (store, a)
}

#[test]
fn adapter_parameter_gradients_match_fd() {
    let (store, a) = tiny_adapter(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = rand_tensor(&mut rng, &[2, 5, 8]);
    let loss_of = |store: &ParamStore| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let out = a.forward(&mut tape, &bound, hv).unwrap();
        let fit = weighted_sum(&mut tape, out.hidden);
        let pen = tape.mul_scalar(out.penalty, 0.3).unwrap();
        let loss = tape.add(fit, pen).unwrap();
        (tape, bound.vars().to_vec(), loss)
    };
    let (mut tape, vars, loss) = loss_of(&store);
    tape.backward(loss).unwrap();
    let mut probe = store.clone();
    for (id, var) in store.ids().zip(vars) {
        let analytic = tape.grad_tensor(var);
        let n = store.get(id).numel();
        let mut fd = vec![0.0; n];
        for j in 0..n {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + H;
            let (t, _, l) = loss_of(&probe);
            let up = t.value(l).item();
            probe.get_mut(id).data_mut()[j] = orig - H;
            let (t, _, l) = loss_of(&probe);
            let down = t.value(l).item();
            probe.get_mut(id).data_mut()[j] = orig;
            fd[j] = (up - down) / (2.0 * H);
        }
        let diff: f64 = analytic.data().iter().zip(&fd).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        let err = diff / norm.max(1e-8);
        assert!(err < TOL, "{}: {err:e}", store.name(id));
    }
}

#[test]
fn penalty_gradient_and_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let basis = rand_tensor(&mut rng, &[3, 6]);
    let err = fd_check(&[basis], |t, v| orth_penalty(t, v[0]).unwrap());
    assert!(err < TOL, "{err:e}");

    // Exact duplicates are a symmetric stationary point; start just off it.
    let row: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut m = Tensor::from_fn(&[2, 6], |i| row[i % 6] + if i >= 6 { 1e-3 * ((i * 5 % 7) as f64 - 3.0) } else { 0.0 });
    let mut last = orth_penalty_value(&m).unwrap();
    assert!(last > 0.99);
    for _ in 0..400 {
        let mut tape = Tape::new();
        let b = tape.param(m.clone());
        let p = orth_penalty(&mut tape, b).unwrap();
        tape.backward(p).unwrap();
        let g = tape.grad_tensor(b);
        for (v, d) in m.data_mut().iter_mut().zip(g.data()) {
            *v -= 0.05 * d;
        }
        let now = orth_penalty_value(&m).unwrap();
        assert!(now < last, "{now} !< {last}");
        last = now;
    }
    assert!(last < 0.5, "{last}");
}

#[test]
fn hard_routing_matches_soft_when_soft_is_one_hot() {
    let (mut store, soft) = tiny_adapter(2);
    let mut hard = soft.clone();
    hard.config.routing = RoutingMode::Hard;
    // Orthogonal centroids and a huge temperature drive soft routing to
    // exact one-hot rows.
    *store.get_mut(soft.params.centroids) = Tensor::from_fn(&[3, 16], |i| if i % 16 == i / 16 { 1.0 } else { 0.0 });
    *store.get_mut(soft.params.log_tau) = Tensor::scalar(7.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = rand_tensor(&mut rng, &[2, 5, 8]);
    let ctx = Tensor::from_fn(&[2, 5, 16], |i| {
        let (tok, j) = (i / 16, i % 16);
        if j == tok % 3 {
            2.0
        } else {
            0.01 * j as f64
        }
    });
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let c = tape.constant(ctx);
    let ps = soft.assign(&mut tape, &bound, c).unwrap();
    let ph = hard.assign(&mut tape, &bound, c).unwrap();
    assert_eq!(tape.value(ps), tape.value(ph));
    let hv = tape.constant(h);
    let os = soft.modulate(&mut tape, &bound, hv, ps).unwrap();
    let oh = hard.modulate(&mut tape, &bound, hv, ph).unwrap();
    assert_eq!(tape.value(os), tape.value(oh));
}

#[test]
fn routing_ignores_context_scale() {
    let (store, a) = tiny_adapter(3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ctx = rand_tensor(&mut rng, &[2, 5, 16]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let base_c = tape.constant(ctx.clone());
    let base = a.assign(&mut tape, &bound, base_c).unwrap();
    let base = tape.value(base).clone();
    for lambda in [1e-3, 1.0, 1e3] {
        let c = tape.constant(Tensor::new(&[2, 5, 16], ctx.data().iter().map(|v| v * lambda).collect()).unwrap());
        let p = a.assign(&mut tape, &bound, c).unwrap();
        assert!(tape.value(p).max_abs_diff(&base) < 1e-12, "lambda {lambda}");
    }
}
