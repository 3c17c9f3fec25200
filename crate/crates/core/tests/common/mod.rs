#![allow(dead_code)]

pub mod reference;

use cdhn_core::net::{HybridNetConfig, HybridNetwork, ParamGroup};
use cdhn_core::ops::{self, BnMode, RunningStats};
use cdhn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::R;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error between `analytic` and central differences of the
/// f64 reference `f` around `x`, over `coords` random coordinates.
pub fn fd_worst(x: &Tensor, analytic: &Tensor, coords: usize, r: &mut ChaCha8Rng, f: impl Fn(&R) -> f64) -> f64 {
    let base = R::from(x);
    let mut worst = 0f64;
    for _ in 0..coords {
        let i = r.gen_range(0..x.numel());
        let mut plus = base.clone();
        plus.d[i] += FD_STEP;
        let mut minus = base.clone();
        minus.d[i] -= FD_STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i] as f64, numeric));
    }
    worst
}

/// Worst finite-difference error of each single-layer backward on one random instance.
pub fn layer_fd_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    for (name, stride) in [("conv2d", 1usize), ("conv2d_stride2", 2)] {
        let x = random(&[2, 3, 6, 6], &mut r);
        let w = random(&[4, 3, 3, 3], &mut r);
        let probe = random(ops::conv2d(&x, &w, stride, 1).unwrap().shape(), &mut r);
        let g = ops::conv2d_backward(&x, &w, &probe, stride, 1).unwrap();
        let (wr, xr, pr) = (R::from(&w), R::from(&x), R::from(&probe));
        let ex = fd_worst(&x, &g.d_input, 20, &mut r, |x| reference::conv(x, &wr, stride, 1).dot(&pr));
        let ew = fd_worst(&w, &g.d_weights, 20, &mut r, |w| reference::conv(&xr, w, stride, 1).dot(&pr));
        out.push((name, ex.max(ew)));
    }

    {
        let x = random(&[3, 2, 4, 4], &mut r).map(|v| 2.0 * v + 0.5);
        let gamma = random(&[2], &mut r).map(|v| v + 1.5);
        let beta = random(&[2], &mut r);
        let probe = random(x.shape(), &mut r);
        let mut rs = RunningStats::new(2);
        let (_, cache) = ops::batchnorm_forward(&x, &gamma, &beta, &mut rs, BnMode::Train).unwrap();
        let (dx, dg, db) = ops::batchnorm_backward(&cache, &gamma, &probe).unwrap();
        let (xr, gr, br, pr) = (R::from(&x), R::from(&gamma), R::from(&beta), R::from(&probe));
        let e1 = fd_worst(&x, &dx, 20, &mut r, |x| reference::bn_train(x, &gr, &br).dot(&pr));
        let e2 = fd_worst(&gamma, &dg, 2, &mut r, |g| reference::bn_train(&xr, g, &br).dot(&pr));
        let e3 = fd_worst(&beta, &db, 2, &mut r, |b| reference::bn_train(&xr, &gr, b).dot(&pr));
        out.push(("batchnorm", e1.max(e2).max(e3)));
    }

    {
        let x = random(&[2, 3, 5, 5], &mut r);
        let probe = random(&[2, 3], &mut r);
        let dx = ops::avgpool_global_backward(x.shape(), &probe).unwrap();
        let pr = R::from(&probe);
        let e = fd_worst(&x, &dx, 20, &mut r, |x| reference::avgpool(x).dot(&pr));
        out.push(("avgpool_global", e));
    }

    {
        let x = random(&[3, 7], &mut r);
        let w = random(&[4, 7], &mut r);
        let b = random(&[4], &mut r);
        let probe = random(&[3, 4], &mut r);
        let g = ops::fully_connected_backward(&x, &w, &probe).unwrap();
        let (xr, wr, br, pr) = (R::from(&x), R::from(&w), R::from(&b), R::from(&probe));
        let ex = fd_worst(&x, &g.d_input, 20, &mut r, |x| reference::fc(x, &wr, &br).dot(&pr));
        let ew = fd_worst(&w, &g.d_weights, 20, &mut r, |w| reference::fc(&xr, w, &br).dot(&pr));
        let eb = fd_worst(&b, g.d_bias.as_ref().unwrap(), 4, &mut r, |b| reference::fc(&xr, &wr, b).dot(&pr));
        out.push(("fully_connected", ex.max(ew).max(eb)));
    }

    {
        // keep coordinates away from the kink so the h-step never crosses it
        let x = random(&[40], &mut r).map(|v| if v.abs() < 0.01 { v + 0.02 } else { v });
        let probe = random(&[40], &mut r);
        let dx = ops::relu_backward(&x, &probe).unwrap();
        let pr = R::from(&probe);
        let e = fd_worst(&x, &dx, 20, &mut r, |x| reference::relu(x).dot(&pr));
        out.push(("relu", e));
    }

    {
        let logits = random(&[4, 6], &mut r).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
        let (_, _, grad) = ops::softmax_cross_entropy_batch(&logits, &labels).unwrap();
        let e = fd_worst(&logits, &grad, 20, &mut r, |z| reference::ce_mean(z, &labels));
        out.push(("softmax_cross_entropy", e));
    }

    out
}

pub fn tiny_config(edge_bits: u8, exits: Vec<usize>) -> HybridNetConfig {
    HybridNetConfig {
        height: 6,
        width: 6,
        stage_widths: vec![3, 4, 5],
        ..HybridNetConfig::desk(7, 4, edge_bits)
    }
    .with_exits(exits, 0.6, 0.5)
}

/// Run forward + backward with per-exit loss weights and return every gradient.
pub fn weighted_grads(
    net: &HybridNetwork,
    x: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Vec<(String, ParamGroup, Tensor)> {
    let mut n = net.clone();
    n.zero_grad();
    let logits = n.forward_train(x, BnMode::Train).unwrap();
    let ups: Vec<Option<Tensor>> = logits
        .iter()
        .zip(weights)
        .map(|(z, &w)| {
            let (_, _, g) = ops::softmax_cross_entropy_batch(z, labels).unwrap();
            Some(g.scale(w as f32))
        })
        .collect();
    n.backward(&ups).unwrap();
    let mut out = Vec::new();
    n.visit_params(|name, group, p| out.push((name.to_string(), group, p.grad.clone())));
    out
}

/// Finite-difference check of a full-precision network's joint-loss gradient:
/// `coords` coordinates of every parameter tensor.
pub fn network_fd_error(seed: u64, coords: usize) -> f64 {
    let mut r = rng(seed);
    let net = HybridNetwork::build(tiny_config(32, vec![2, 4]), seed).unwrap();
    let x = random(&[3, 1, 6, 6], &mut r);
    let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..10)).collect();
    let lambdas = net.config().lambdas.clone();
    let grads = weighted_grads(&net, &x, &labels, &lambdas);
    let params = reference::NetParams::from_network(&net);
    let xr = R::from(&x);
    let mut worst = 0f64;
    for (name, _, g) in &grads {
        let mut checked = 0;
        let mut attempts = 0;
        while checked < coords && attempts < 20 * coords {
            attempts += 1;
            let i = r.gen_range(0..g.numel());
            let at = |delta: f64| {
                let mut p = params.clone();
                p.tensors.get_mut(name).unwrap().d[i] += delta;
                reference::joint_loss(&net, &p, &xr, &labels, &lambdas)
            };
            // shrink the step until it no longer crosses a ReLU kink
            let clean = [FD_STEP, FD_STEP * 1e-1, FD_STEP * 1e-2].into_iter().find_map(|h| {
                let ((plus, s_plus), (minus, s_minus)) = (at(h), at(-h));
                (s_plus == s_minus).then(|| (plus - minus) / (2.0 * h))
            });
            if let Some(numeric) = clean {
                checked += 1;
                worst = worst.max(rel_err(g.data()[i] as f64, numeric));
            }
        }
        assert!(checked > 0, "{name}: every probe straddled a ReLU kink");
    }
    worst
}
