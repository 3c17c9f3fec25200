//! Entropy-gated early exiting.
//!
//! Layers run in order. At each exit location the exit's softmax entropy is
//! compared with its threshold; a strictly smaller entropy answers on the
//! spot and nothing deeper runs. Samples no exit claims reach the final head.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::energy::{self, EnergyOptions, EnergySplit, EnergyTable, Execution, OpSummary};
use crate::error::{Error, Result};
use crate::net::HybridNetwork;
use crate::ops;
use crate::tensor::Tensor;

/// Where an inference ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExitPoint {
    Early(usize),
    Final,
}

impl ExitPoint {
    /// Numeric index with the final head numbered after the early exits.
    pub fn index(self, num_exits: usize) -> usize {
        match self {
            ExitPoint::Early(k) => k,
            ExitPoint::Final => num_exits,
        }
    }

    pub fn from_index(i: usize, num_exits: usize) -> Result<Self> {
        match i.cmp(&num_exits) {
            std::cmp::Ordering::Less => Ok(ExitPoint::Early(i)),
            std::cmp::Ordering::Equal => Ok(ExitPoint::Final),
            std::cmp::Ordering::Greater => Err(Error::Index {
                index: i,
                len: num_exits + 1,
            }),
        }
    }

    pub fn is_early(self) -> bool {
        matches!(self, ExitPoint::Early(_))
    }
}

impl fmt::Display for ExitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPoint::Early(k) => write!(f, "exit{k}"),
            ExitPoint::Final => f.write_str("final"),
        }
    }
}

/// Shannon entropy in nats. `0 log 0` counts as 0.
pub fn entropy(probs: &[f32]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Domain("entropy of an empty distribution".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::Domain(format!("probability {p} is negative or NaN")));
    }
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Domain(format!("probabilities sum to {sum}")));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = p as f64;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub exit: ExitPoint,
    pub entropy: f64,
    pub probs: Tensor,
    pub predicted: usize,
}

impl GateDecision {
    pub fn from_logits(exit: ExitPoint, logits: &Tensor) -> Result<Self> {
        if logits.rank() != 1 {
            return Err(Error::dim("logits", format!("expected [K], got {:?}", logits.shape())));
        }
        let probs = Tensor::from_vec(ops::softmax(logits.data()));
        Ok(Self {
            exit,
            entropy: entropy(probs.data())?,
            predicted: logits.argmax(),
            probs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalResult {
    pub decision: GateDecision,
    /// Backbone layers that ran, counting from layer 1.
    pub layers_executed: usize,
    /// Early exits whose classifier ran.
    pub exits_evaluated: usize,
}

/// Outcome of the edge section of a gated inference.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeOutcome {
    Exited(ConditionalResult),
    /// No exit fired; the layer-`M` activation must go to the cloud.
    Offload {
        activation: Tensor,
        layers_executed: usize,
        exits_evaluated: usize,
        /// Entropy of every evaluated exit, in order.
        entropies: Vec<f64>,
    },
}

fn check_thresholds(net: &HybridNetwork, thresholds: &[f64]) -> Result<()> {
    if thresholds.len() != net.num_exits() {
        return Err(Error::Config(format!(
            "{} thresholds for {} exits",
            thresholds.len(),
            net.num_exits()
        )));
    }
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::Config("threshold is NaN".into()));
    }
    Ok(())
}

/// Gated execution of layers `1..=M` on one sample `[C, H, W]`.
pub fn run_edge_gated(net: &HybridNetwork, x: &Tensor, thresholds: &[f64]) -> Result<EdgeOutcome> {
    check_thresholds(net, thresholds)?;
    if x.rank() != 3 {
        return Err(Error::dim("rank", format!("gated inference takes one [C,H,W] sample, got {:?}", x.shape())));
    }
    let mut act = x.clone();
    let mut exits_evaluated = 0;
    let mut entropies = Vec::new();
    for l in 1..=net.split_point() {
        act = net.forward_layer(l, &act)?;
        for (k, e) in net.exits.iter().enumerate().filter(|(_, e)| e.location == l) {
            let d = GateDecision::from_logits(ExitPoint::Early(k), &e.head.forward(&act)?)?;
            exits_evaluated += 1;
            if d.entropy < thresholds[k] {
                return Ok(EdgeOutcome::Exited(ConditionalResult {
                    decision: d,
                    layers_executed: l,
                    exits_evaluated,
                }));
            }
            entropies.push(d.entropy);
        }
    }
    Ok(EdgeOutcome::Offload {
        activation: act,
        layers_executed: net.split_point(),
        exits_evaluated,
        entropies,
    })
}

/// Full gated inference of one sample, edge and cloud in one process.
pub fn infer_conditional(net: &HybridNetwork, x: &Tensor, thresholds: &[f64]) -> Result<ConditionalResult> {
    match run_edge_gated(net, x, thresholds)? {
        EdgeOutcome::Exited(r) => Ok(r),
        EdgeOutcome::Offload {
            activation,
            exits_evaluated,
            ..
        } => Ok(ConditionalResult {
            decision: GateDecision::from_logits(ExitPoint::Final, &net.forward_cloud(&activation)?)?,
            layers_executed: net.num_layers(),
            exits_evaluated,
        }),
    }
}

/// Entropy and prediction of every exit for one sample, final last, so
/// many threshold settings can be gated without re-running the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitScores {
    pub entropies: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl ExitScores {
    pub fn from_logits(per_exit: &[Tensor]) -> Result<Self> {
        let mut entropies = Vec::with_capacity(per_exit.len());
        let mut predictions = Vec::with_capacity(per_exit.len());
        for z in per_exit {
            let probs = ops::softmax(z.data());
            entropies.push(entropy(&probs)?);
            predictions.push(z.argmax());
        }
        Ok(Self {
            entropies,
            predictions,
        })
    }

    /// The exit the gate picks; early exits are tried in index order.
    pub fn decide(&self, thresholds: &[f64]) -> ExitPoint {
        let early = self.entropies.len() - 1;
        (0..early.min(thresholds.len()))
            .find(|&k| self.entropies[k] < thresholds[k])
            .map_or(ExitPoint::Final, ExitPoint::Early)
    }
}

/// Scores for every row of batched per-exit logits `[N, K]`.
pub fn scores_from_batch(per_exit: &[Tensor]) -> Result<Vec<ExitScores>> {
    let first = per_exit.first().ok_or_else(|| Error::Config("no exits".into()))?;
    let [n, k] = *first.shape() else {
        return Err(Error::dim("logits", format!("expected [N,K], got {:?}", first.shape())));
    };
    (0..n)
        .map(|i| {
            let rows: Vec<Tensor> = per_exit
                .iter()
                .map(|z| Tensor::from_vec(z.data()[i * k..(i + 1) * k].to_vec()))
                .collect();
            ExitScores::from_logits(&rows)
        })
        .collect()
}

/// Everything recorded about one gated inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub sample_id: u64,
    pub exit: ExitPoint,
    pub entropy: f64,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub layers_executed: usize,
    pub exits_evaluated: usize,
    pub ops: OpSummary,
    pub energy: EnergySplit,
    pub bytes_to_cloud: u64,
}

pub const TRACE_COLUMNS: &str = "sample_id,exit_index,entropy,predicted,correct,energy_pJ,bytes_to_cloud";

/// One parsed trace CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sample_id: u64,
    pub exit_index: usize,
    pub entropy: f64,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub energy_pj: f64,
    pub bytes_to_cloud: u64,
}

impl InferenceTrace {
    pub fn csv_row(&self, num_exits: usize) -> String {
        let correct = match self.correct {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        format!(
            "{},{},{:.9},{},{},{:.3},{}",
            self.sample_id,
            self.exit.index(num_exits),
            self.entropy,
            self.predicted,
            correct,
            self.energy.total(),
            self.bytes_to_cloud
        )
    }
}

impl TraceRow {
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("trace row needs 7 fields, got {}: {line:?}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
        }
        Ok(Self {
            sample_id: num(f[0], "sample_id")?,
            exit_index: num(f[1], "exit_index")?,
            entropy: num(f[2], "entropy")?,
            predicted: num(f[3], "predicted")?,
            correct: match f[4] {
                "1" => Some(true),
                "0" => Some(false),
                "" => None,
                other => return Err(Error::Format(format!("bad correct value {other:?}"))),
            },
            energy_pj: num(f[5], "energy_pJ")?,
            bytes_to_cloud: num(f[6], "bytes_to_cloud")?,
        })
    }
}

pub fn write_traces(mut w: impl Write, traces: &[InferenceTrace], num_exits: usize) -> Result<()> {
    writeln!(w, "{TRACE_COLUMNS}")?;
    for t in traces {
        writeln!(w, "{}", t.csv_row(num_exits))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(r: impl BufRead) -> Result<Vec<TraceRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != TRACE_COLUMNS {
        return Err(Error::Format(format!("trace file must start with {TRACE_COLUMNS:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(TraceRow::parse(&line)?);
        }
    }
    Ok(out)
}

/// Turns gate outcomes into traces with energy and traffic filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBuilder {
    num_exits: usize,
    n_layers: usize,
    exit_locations: Vec<usize>,
    energies: Vec<EnergySplit>,
    ops: Vec<OpSummary>,
    offload_bytes: u64,
}

impl TraceBuilder {
    pub fn new(net: &HybridNetwork, table: &EnergyTable, opts: &EnergyOptions) -> Result<Self> {
        let cfg = net.config();
        let energies = energy::exit_point_energies(cfg, table, opts)?;
        let mut ops = Vec::with_capacity(cfg.exit_locations.len() + 1);
        for (k, &loc) in cfg.exit_locations.iter().enumerate() {
            let exec = Execution {
                layers: loc,
                exits: k + 1,
                final_head: false,
            };
            ops.push(energy::count_ops(cfg, exec)?.summary());
        }
        ops.push(energy::count_ops(cfg, Execution::full(cfg))?.summary());
        Ok(Self {
            num_exits: cfg.exit_locations.len(),
            n_layers: cfg.n_layers,
            exit_locations: cfg.exit_locations.clone(),
            energies,
            ops,
            offload_bytes: crate::wire::features_frame_len(&net.split_shape()) as u64,
        })
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    /// Energy of an inference that ended at `exit`.
    pub fn energy(&self, exit: ExitPoint) -> EnergySplit {
        self.energies[exit.index(self.num_exits)]
    }

    /// Wire bytes of one offloaded sample.
    pub fn offload_bytes(&self) -> u64 {
        self.offload_bytes
    }

    /// Trace of an inference that ended at `exit`, with the layer and exit
    /// counts that path implies.
    pub fn trace(
        &self,
        sample_id: u64,
        exit: ExitPoint,
        entropy: f64,
        predicted: usize,
        label: Option<usize>,
        bytes_to_cloud: u64,
    ) -> InferenceTrace {
        let i = exit.index(self.num_exits);
        let (layers_executed, exits_evaluated) = match exit {
            ExitPoint::Early(k) => (self.exit_locations[k], k + 1),
            ExitPoint::Final => (self.n_layers, self.num_exits),
        };
        InferenceTrace {
            sample_id,
            exit,
            entropy,
            predicted,
            correct: label.map(|y| y == predicted),
            layers_executed,
            exits_evaluated,
            ops: self.ops[i].clone(),
            energy: self.energies[i],
            bytes_to_cloud,
        }
    }

    pub fn from_result(&self, sample_id: u64, r: &ConditionalResult, label: Option<usize>) -> InferenceTrace {
        let bytes = if r.decision.exit.is_early() { 0 } else { self.offload_bytes };
        self.trace(sample_id, r.decision.exit, r.decision.entropy, r.decision.predicted, label, bytes)
    }
}

/// Aggregate view of a set of gated inferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    /// Fraction of samples answered by each exit, final last.
    pub exit_fraction: Vec<f64>,
    /// Accuracy among the samples each exit answered (`None` when it answered none).
    pub exit_accuracy: Vec<Option<f64>>,
    pub accuracy: f64,
    /// Fraction answered before the cloud.
    pub edge_fraction: f64,
    pub mean_energy_pj: f64,
    pub mean_edge_pj: f64,
    pub mean_cloud_pj: f64,
    pub mean_bytes: f64,
}

pub fn gate_statistics(traces: &[InferenceTrace], labels: &[usize], num_exits: usize) -> Result<GateSummary> {
    if traces.is_empty() {
        return Err(Error::Config("no traces".into()));
    }
    if traces.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} traces but {} labels",
            traces.len(),
            labels.len()
        )));
    }
    let n = traces.len() as f64;
    let mut count = vec![0usize; num_exits + 1];
    let mut right = vec![0usize; num_exits + 1];
    for (t, &y) in traces.iter().zip(labels) {
        let i = t.exit.index(num_exits);
        if i > num_exits {
            return Err(Error::Index {
                index: i,
                len: num_exits + 1,
            });
        }
        count[i] += 1;
        right[i] += usize::from(t.predicted == y);
    }
    let total_right: usize = right.iter().sum();
    Ok(GateSummary {
        exit_fraction: count.iter().map(|&c| c as f64 / n).collect(),
        exit_accuracy: count
            .iter()
            .zip(&right)
            .map(|(&c, &r)| (c > 0).then(|| r as f64 / c as f64))
            .collect(),
        accuracy: total_right as f64 / n,
        edge_fraction: count[..num_exits].iter().sum::<usize>() as f64 / n,
        mean_energy_pj: traces.iter().map(|t| t.energy.total()).sum::<f64>() / n,
        mean_edge_pj: traces.iter().map(|t| t.energy.edge_pj).sum::<f64>() / n,
        mean_cloud_pj: traces.iter().map(|t| t.energy.cloud_pj).sum::<f64>() / n,
        mean_bytes: traces.iter().map(|t| t.bytes_to_cloud as f64).sum::<f64>() / n,
    })
}

/// Thresholds `0.05 * j` for `j = 0, 1, ...` not exceeding `ln classes`.
pub fn threshold_grid(classes: usize) -> Vec<f64> {
    let top = (classes.max(1) as f64).ln();
    (0..)
        .map(|j| j as f64 / 20.0)
        .take_while(|t| *t <= top + 1e-12)
        .collect()
}
