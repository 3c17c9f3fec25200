//! Plain f64 re-implementations of the network layers, written as direct
//! loops with no sharing with the library kernels.

use std::collections::HashMap;

use cdhn_core::net::HybridNetwork;
use cdhn_core::Tensor;

#[derive(Debug, Clone)]
pub struct R {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl From<&Tensor> for R {
    fn from(t: &Tensor) -> Self {
        R {
            shape: t.shape().to_vec(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

impl R {
    pub fn dot(&self, o: &R) -> f64 {
        assert_eq!(self.shape, o.shape);
        self.d.iter().zip(&o.d).map(|(a, b)| a * b).sum()
    }

    fn add(&self, o: &R) -> R {
        assert_eq!(self.shape, o.shape);
        R {
            shape: self.shape.clone(),
            d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(),
        }
    }
}

/// `x: [B,C,H,W]`, `w: [O,C,k,k]`.
pub fn conv(x: &R, w: &R, stride: usize, pad: usize) -> R {
    let (b, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0f64; b * o * ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.d[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.d[((oc * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    R { shape: vec![b, o, ho, wo], d: out }
}

pub fn bn_train(x: &R, gamma: &R, beta: &R) -> R {
    let (b, c) = (x.shape[0], x.shape[1]);
    let plane: usize = x.shape[2..].iter().product();
    let n = (b * plane) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let idx = |bi: usize, i: usize| (bi * c + ch) * plane + i;
        let mut mean = 0f64;
        for bi in 0..b {
            for i in 0..plane {
                mean += x.d[idx(bi, i)];
            }
        }
        mean /= n;
        let mut var = 0f64;
        for bi in 0..b {
            for i in 0..plane {
                var += (x.d[idx(bi, i)] - mean).powi(2);
            }
        }
        var /= n;
        let s = 1.0 / (var + 1e-5).sqrt();
        for bi in 0..b {
            for i in 0..plane {
                out.d[idx(bi, i)] = gamma.d[ch] * (x.d[idx(bi, i)] - mean) * s + beta.d[ch];
            }
        }
    }
    out
}

pub fn relu(x: &R) -> R {
    R {
        shape: x.shape.clone(),
        d: x.d.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// `[B,C,H,W] -> [B,C]`.
pub fn avgpool(x: &R) -> R {
    let plane: usize = x.shape[2..].iter().product();
    R {
        shape: x.shape[..2].to_vec(),
        d: x.d.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
    }
}

/// `x: [B,D]`, `w: [K,D]`.
pub fn fc(x: &R, w: &R, b: &R) -> R {
    let (bs, d) = (x.shape[0], x.shape[1]);
    let k = w.shape[0];
    let mut out = vec![0f64; bs * k];
    for bi in 0..bs {
        for ki in 0..k {
            let mut s = b.d[ki];
            for j in 0..d {
                s += w.d[ki * d + j] * x.d[bi * d + j];
            }
            out[bi * k + ki] = s;
        }
    }
    R { shape: vec![bs, k], d: out }
}

pub fn ce_mean(logits: &R, labels: &[usize]) -> f64 {
    let k = logits.shape[1];
    let mut total = 0f64;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &logits.d[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Network parameters by name, in f64.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub tensors: HashMap<String, R>,
}

impl NetParams {
    pub fn from_network(net: &HybridNetwork) -> Self {
        let mut me = net.clone();
        let mut tensors = HashMap::new();
        me.visit_params(|name, _, p| {
            tensors.insert(name.to_string(), R::from(&p.value));
        });
        Self { tensors }
    }

    fn get(&self, name: &str) -> &R {
        &self.tensors[name]
    }
}

/// Full-precision network forward in f64 with train-mode batch norm,
/// returning the weighted sum of per-exit mean cross-entropies and the sign
/// pattern of every ReLU input.
pub fn joint_loss(net: &HybridNetwork, p: &NetParams, x: &R, labels: &[usize], lambdas: &[f64]) -> (f64, Vec<bool>) {
    let mut signs = Vec::new();
    let cfg = net.config();
    let mut act = conv(x, p.get("stem.conv.weight"), 1, 1);
    let mut per_exit = Vec::new();
    let head = |act: &R, prefix: &str| {
        let z = fc(
            &avgpool(act),
            p.get(&format!("{prefix}.fc.weight")),
            p.get(&format!("{prefix}.fc.bias")),
        );
        ce_mean(&z, labels)
    };
    for l in 1..=cfg.n_layers {
        if l >= 2 {
            let i = l - 2;
            let blk = &net.blocks[i];
            assert!(!blk.is_quantized());
            let y = bn_train(&act, p.get(&format!("block{i}.bn.gamma")), p.get(&format!("block{i}.bn.beta")));
            signs.extend(y.d.iter().map(|&v| v > 0.0));
            let branch = conv(&relu(&y), p.get(&format!("block{i}.conv.weight")), blk.stride, 1);
            let short = if blk.shortcut.is_some() {
                conv(&act, p.get(&format!("block{i}.shortcut.weight")), blk.stride, 0)
            } else {
                act.clone()
            };
            act = branch.add(&short);
        }
        for (k, &loc) in cfg.exit_locations.iter().enumerate() {
            if loc == l {
                per_exit.push(head(&act, &format!("exit{k}")));
            }
        }
    }
    per_exit.push(head(&act, "final"));
    (per_exit.iter().zip(lambdas).map(|(l, w)| l * w).sum(), signs)
}
