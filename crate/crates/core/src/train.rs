//! Joint and separate optimization of multi-exit hybrid networks with SGD.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{network_digest, ConfigDigest};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{HybridNetwork, ParamGroup};
use crate::ops::{self, BnMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Backbone and final exit first, then each early exit on the frozen backbone.
    Separate,
    /// All exits at once on the weighted sum of their losses.
    Joint,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Separate => "separate",
            Strategy::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Loss weight per exit, final exit last. Must sum to 1.
    pub lambdas: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f32,
    /// Rescale each step's gradients to at most this global L2 norm; 0 disables.
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Joint,
            lambdas: vec![0.6, 0.4],
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the lambdas of `net`'s own config.
    pub fn for_network(net: &HybridNetwork, strategy: Strategy) -> Self {
        Self {
            strategy,
            lambdas: net.config().lambdas.clone(),
            ..Self::default()
        }
    }

    pub fn validate(&self, exits: usize) -> Result<()> {
        if self.lambdas.len() != exits + 1 {
            return Err(Error::Config(format!(
                "{} lambdas for {} exits plus final",
                self.lambdas.len(),
                exits
            )));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("lambdas must be non-negative".into()));
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("lambdas sum to {sum}, expected 1")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch norm needs batch_size >= 2".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr > 0, 0 <= momentum < 1, weight_decay >= 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("milestones must lie in [0, 1] and lr_decay be positive".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn describe_optimizer(&self) -> String {
        format!(
            "sgd lr={} momentum={} weight_decay={} decay={}x at {:?} of {} epochs, batch={}, grad_clip={}",
            self.lr,
            self.momentum,
            self.weight_decay,
            self.lr_decay,
            self.lr_milestones,
            self.epochs,
            self.batch_size,
            self.grad_clip
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitMetrics {
    pub acc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter across phases, starting at 0.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f32,
    /// Per exit, final last.
    pub train: Vec<ExitMetrics>,
    pub test: Option<Vec<ExitMetrics>>,
    pub joint_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub optimizer: String,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_digest: ConfigDigest,
}

impl TrainReport {
    /// `epoch=<i> exit=<k> split=<train|test> acc=<f> loss=<f>` lines; the final
    /// exit has index equal to the number of early exits.
    pub fn metrics_log(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            let splits = [("train", Some(&rec.train)), ("test", rec.test.as_ref())];
            for (split, metrics) in splits {
                for (k, m) in metrics.into_iter().flatten().enumerate() {
                    let _ = writeln!(
                        out,
                        "epoch={} exit={k} split={split} acc={:.6} loss={:.6}",
                        rec.epoch, m.acc, m.loss
                    );
                }
            }
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Result of one forward/backward pass of the weighted multi-exit loss.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStep {
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub joint: f64,
}

pub fn weighted_loss(losses: &[f64], lambdas: &[f64]) -> f64 {
    losses.iter().zip(lambdas).map(|(l, w)| l * w).sum()
}

/// Zero the gradients, then accumulate the gradient of `sum_k lambda_k L_k`
/// on one batch into every parameter. Exits with `lambda_k = 0` are skipped.
pub fn joint_gradients(
    net: &mut HybridNetwork,
    x: &Tensor,
    labels: &[usize],
    lambdas: &[f64],
    bn_mode: BnMode,
) -> Result<JointStep> {
    if lambdas.len() != net.num_exits() + 1 {
        return Err(Error::Config(format!(
            "{} lambdas for {} exits plus final",
            lambdas.len(),
            net.num_exits()
        )));
    }
    net.zero_grad();
    let logits = net.forward_train(x, bn_mode)?;
    let mut losses = Vec::with_capacity(logits.len());
    let mut correct = Vec::with_capacity(logits.len());
    let mut upstream = Vec::with_capacity(logits.len());
    for (k, (z, &lambda)) in logits.iter().zip(lambdas).enumerate() {
        let (loss, _, grad) = ops::softmax_cross_entropy_batch(z, labels)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} at exit {k}")));
        }
        losses.push(loss as f64);
        correct.push(count_correct(z, labels));
        upstream.push((lambda != 0.0).then(|| grad.scale(lambda as f32)));
    }
    net.backward(&upstream)?;
    let joint = weighted_loss(&losses, lambdas);
    Ok(JointStep {
        losses,
        correct,
        joint,
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| Tensor::from_vec(logits.data()[i * k..(i + 1) * k].to_vec()).argmax() == y)
        .count()
}

fn sgd_update(
    value: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f32,
    clip_scale: f32,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = if clip_scale < 1.0 { grad.scale(clip_scale) } else { grad.clone() };
    let g = if cfg.weight_decay > 0.0 {
        g.add(&value.scale(cfg.weight_decay))?
    } else {
        g
    };
    ops::sgd_step(value, &g, lr, cfg.momentum, velocity)
}

/// Factor that brings the joint L2 norm of `grads` down to `max_norm` (1 when already within it or when `max_norm` is 0).
fn clip_scale<'a>(grads: impl Iterator<Item = &'a Tensor>, max_norm: f32) -> f32 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let norm = grads
        .flat_map(|g| g.data())
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt();
    if norm > f64::from(max_norm) {
        (f64::from(max_norm) / norm) as f32
    } else {
        1.0
    }
}

/// SGD step on every parameter whose group passes `select`. When
/// `cfg.grad_clip` is positive, the selected gradients are first scaled so
/// their joint L2 norm does not exceed it.
pub fn apply_sgd(
    net: &mut HybridNetwork,
    lr: f32,
    cfg: &TrainConfig,
    select: impl Fn(ParamGroup) -> bool,
) -> Result<()> {
    let mut grads = Vec::new();
    net.visit_params(|_, group, p| {
        if select(group) {
            grads.push(p.grad.clone());
        }
    });
    let clip = clip_scale(grads.iter(), cfg.grad_clip);
    let mut status = Ok(());
    net.visit_params(|name, group, p| {
        if status.is_err() || !select(group) {
            return;
        }
        if let Err(e) = sgd_update(&mut p.value, &p.grad, &mut p.velocity, lr, clip, cfg) {
            status = Err(match e {
                Error::Training(m) => Error::Training(format!("{name}: {m}")),
                other => other,
            });
        }
    });
    status
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn check_data(net: &HybridNetwork, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.num_classes > net.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network {}",
            data.num_classes,
            net.config().num_classes
        )));
    }
    let want = net.config().input_shape();
    if data.sample_shape() != want {
        return Err(Error::dim(
            "input",
            format!("dataset samples are {:?}, network expects {want:?}", data.sample_shape()),
        ));
    }
    Ok(())
}

/// Backbone plus exits trained together on the weighted loss.
pub fn train_joint(
    net: &mut HybridNetwork,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.strategy != Strategy::Joint {
        return Err(Error::Config("train_joint needs strategy = joint".into()));
    }
    cfg.validate(net.num_exits())?;
    check_data(net, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let rec = backbone_epoch(net, train, test, cfg, &cfg.lambdas, epoch, lr, &mut rng)?;
        epochs.push(rec);
    }
    net.clear_caches();
    Ok(TrainReport {
        strategy: Strategy::Joint,
        optimizer: cfg.describe_optimizer(),
        epochs,
        checkpoint_digest: network_digest(net)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn backbone_epoch(
    net: &mut HybridNetwork,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    lambdas: &[f64],
    epoch: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<EpochRecord> {
    let heads = net.num_exits() + 1;
    let mut loss_sum = vec![0f64; heads];
    let mut correct = vec![0usize; heads];
    let mut joint_sum = 0f64;
    let mut seen = 0usize;
    for (bi, idx) in batches(train.len(), cfg.batch_size, rng).into_iter().enumerate() {
        let (x, labels) = train.batch(&idx)?;
        let step = joint_gradients(net, &x, &labels, lambdas, BnMode::Train)
            .map_err(|e| annotate(e, epoch, bi))?;
        apply_sgd(net, lr, cfg, |g| match g {
            ParamGroup::Exit(k) => lambdas[k] != 0.0,
            _ => true,
        })
        .map_err(|e| annotate(e, epoch, bi))?;
        let b = labels.len();
        for k in 0..heads {
            loss_sum[k] += step.losses[k] * b as f64;
            correct[k] += step.correct[k];
        }
        joint_sum += step.joint * b as f64;
        seen += b;
    }
    net.clear_caches();
    let train_metrics = (0..heads)
        .map(|k| ExitMetrics {
            acc: correct[k] as f64 / seen.max(1) as f64,
            loss: loss_sum[k] / seen.max(1) as f64,
        })
        .collect();
    let test_metrics = test.map(|t| evaluate_metrics(net, t)).transpose()?;
    Ok(EpochRecord {
        epoch,
        phase: 1,
        lr,
        train: train_metrics,
        test: test_metrics,
        joint_loss: joint_sum / seen.max(1) as f64,
    })
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Training(m) => Error::Training(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Eval-mode activations of the listed layers for a batch, in order.
pub fn layer_activations(net: &HybridNetwork, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
    let deepest = layers.iter().copied().max().unwrap_or(0);
    let mut act = x.clone();
    let mut out = vec![None; layers.len()];
    for l in 1..=deepest {
        act = net.forward_layer(l, &act)?;
        for (slot, _) in out.iter_mut().zip(layers).filter(|(_, &want)| want == l) {
            *slot = Some(act.clone());
        }
    }
    out.into_iter()
        .map(|a| a.ok_or(Error::Index { index: 0, len: deepest }))
        .collect()
}

const EVAL_CHUNK: usize = 200;

/// Globally pooled eval-mode features at every early-exit location, `[N, D_k]`.
fn exit_features(net: &HybridNetwork, data: &Dataset) -> Result<Vec<Tensor>> {
    let locs: Vec<usize> = net.exits.iter().map(|e| e.location).collect();
    let mut parts: Vec<Vec<f32>> = vec![Vec::new(); locs.len()];
    let mut dims = vec![0; locs.len()];
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, _) = data.batch(&idx)?;
        for (k, a) in layer_activations(net, &x, &locs)?.iter().enumerate() {
            let pooled = ops::avgpool_global(a)?;
            dims[k] = pooled.shape()[1];
            parts[k].extend_from_slice(pooled.data());
        }
    }
    parts
        .into_iter()
        .zip(dims)
        .map(|(p, d)| Tensor::new(&[data.len(), d], p))
        .collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[idx.len(), d], out)
}

/// Phase 1 trains backbone and final exit on plain cross-entropy. Phase 2
/// freezes every convolution and batch-norm tensor (eval-mode statistics)
/// and fits each early exit's classifier on its own loss, each with its own
/// shuffling stream so the exits are independent of one another.
pub fn train_separate(
    net: &mut HybridNetwork,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.strategy != Strategy::Separate {
        return Err(Error::Config("train_separate needs strategy = separate".into()));
    }
    cfg.validate(net.num_exits())?;
    check_data(net, train)?;
    let exits = net.num_exits();
    let mut final_only = vec![0.0; exits + 1];
    final_only[exits] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        epochs.push(backbone_epoch(net, train, test, cfg, &final_only, epoch, lr, &mut rng)?);
    }
    let phase2 = train_exits_frozen(net, train, cfg)?;
    let final_train = epochs.last().map(|r| r.train[exits]);
    for (e, per_exit) in phase2.into_iter().enumerate() {
        let mut train_metrics = per_exit;
        train_metrics.extend(final_train);
        epochs.push(EpochRecord {
            epoch: cfg.epochs + e,
            phase: 2,
            lr: cfg.lr_at(e),
            train: train_metrics,
            test: None,
            joint_loss: f64::NAN,
        });
    }
    if let (Some(t), Some(last)) = (test, epochs.last_mut()) {
        last.test = Some(evaluate_metrics(net, t)?);
    }
    for rec in epochs.iter_mut().filter(|r| r.phase == 2) {
        let losses: Vec<f64> = rec.train.iter().map(|m| m.loss).collect();
        rec.joint_loss = weighted_loss(&losses, &cfg.lambdas);
    }
    net.clear_caches();
    Ok(TrainReport {
        strategy: Strategy::Separate,
        optimizer: cfg.describe_optimizer(),
        epochs,
        checkpoint_digest: network_digest(net)?,
    })
}

/// Phase 2 of separate optimization. Returns per-epoch metrics of every early exit.
pub fn train_exits_frozen(
    net: &mut HybridNetwork,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<ExitMetrics>>> {
    let features = exit_features(net, train)?;
    let exits = net.num_exits();
    let mut per_epoch = vec![Vec::with_capacity(exits); cfg.epochs];
    for (k, pooled) in features.iter().enumerate() {
        let history = train_exit_head(net, k, pooled, &train.labels, cfg)?;
        for (slot, m) in per_epoch.iter_mut().zip(history) {
            slot.push(m);
        }
    }
    Ok(per_epoch)
}

/// Fit exit `k`'s classifier on precomputed pooled features.
pub fn train_exit_head(
    net: &mut HybridNetwork,
    k: usize,
    pooled: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<ExitMetrics>> {
    if k >= net.num_exits() {
        return Err(Error::Index {
            index: k,
            len: net.num_exits(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e71_7000 ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9));
    let head = &mut net.exits[k].head;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut correct, mut seen) = (0f64, 0usize, 0usize);
        for (bi, idx) in batches(labels.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let x = rows(pooled, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let z = head.forward_pooled(&x)?;
            let (loss, _, grad) = ops::softmax_cross_entropy_batch(&z, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "exit {k}, epoch {epoch}, batch {bi}: non-finite loss {loss}"
                )));
            }
            head.weight.grad.fill(0.0);
            head.bias.grad.fill(0.0);
            head.backward_pooled(&x, &grad)?;
            let clip = clip_scale([&head.weight.grad, &head.bias.grad].into_iter(), cfg.grad_clip);
            for p in [&mut head.weight, &mut head.bias] {
                sgd_update(&mut p.value, &p.grad, &mut p.velocity, lr, clip, cfg)?;
            }
            loss_sum += loss as f64 * y.len() as f64;
            correct += count_correct(&z, &y);
            seen += y.len();
        }
        history.push(ExitMetrics {
            acc: correct as f64 / seen.max(1) as f64,
            loss: loss_sum / seen.max(1) as f64,
        });
    }
    Ok(history)
}

/// Dispatch on `cfg.strategy`.
pub fn train(
    net: &mut HybridNetwork,
    train_set: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    match cfg.strategy {
        Strategy::Joint => train_joint(net, train_set, test, cfg),
        Strategy::Separate => train_separate(net, train_set, test, cfg),
    }
}

/// Eval-mode logits of every exit for the whole set, `[N, K]` each, final last.
pub fn all_exit_logits(net: &HybridNetwork, data: &Dataset) -> Result<Vec<Tensor>> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let heads = net.num_exits() + 1;
    let mut parts: Vec<Vec<f32>> = vec![Vec::new(); heads];
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, _) = data.batch(&idx)?;
        for (k, z) in net.forward_all_exits(&x)?.into_iter().enumerate() {
            parts[k].extend_from_slice(z.data());
        }
    }
    let classes = net.config().num_classes;
    parts
        .into_iter()
        .map(|p| Tensor::new(&[data.len(), classes], p))
        .collect()
}

/// Standalone accuracy and mean cross-entropy of every exit, final last.
pub fn evaluate_metrics(net: &HybridNetwork, data: &Dataset) -> Result<Vec<ExitMetrics>> {
    all_exit_logits(net, data)?
        .iter()
        .map(|z| {
            let (loss, _, _) = ops::softmax_cross_entropy_batch(z, &data.labels)?;
            Ok(ExitMetrics {
                acc: count_correct(z, &data.labels) as f64 / data.len() as f64,
                loss: loss as f64,
            })
        })
        .collect()
}

/// Standalone accuracy of every exit (no gating), final last.
pub fn evaluate(net: &HybridNetwork, data: &Dataset) -> Result<Vec<f64>> {
    Ok(evaluate_metrics(net, data)?.into_iter().map(|m| m.acc).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_of_losses() {
        assert!((weighted_loss(&[1.0, 2.0], &[0.6, 0.4]) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        let lrs: Vec<f32> = (0..8).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[3], 0.1);
        assert!((lrs[4] - 0.01).abs() < 1e-9);
        assert!((lrs[6] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn lambda_validation() {
        let cfg = TrainConfig {
            lambdas: vec![0.7, 0.4],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(1), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate(1).is_ok());
        assert!(TrainConfig::default().validate(2).is_err());
    }
}
