//! Experiment configuration, design-space sweeps and their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{self, Dataset, SyntheticSpec};
use crate::energy::{self, EnergyOptions, EnergyTable, ReportRow, REPORT_COLUMNS};
use crate::error::{Error, Result};
use crate::gate::{self, ExitPoint, ExitScores, InferenceTrace, TraceBuilder, TraceRow};
use crate::net::{HybridNetConfig, HybridNetwork};
use crate::train::{self, Strategy, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

/// Where the train and test sets come from. Synthetic sets share class
/// templates and draw train and test samples from disjoint random streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub waves: usize,
    pub max_shift: usize,
    pub noise_min: f32,
    pub noise_max: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Use at most this many samples of each IDX split (0 keeps all).
    pub limit: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 10,
            size: 28,
            channels: 1,
            waves: 3,
            max_shift: 2,
            noise_min: 0.2,
            noise_max: 2.0,
            train_per_class: 200,
            test_per_class: 100,
            data_seed: 7,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            limit: 0,
        }
    }
}

impl DatasetSpec {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            channels: self.channels,
            size: self.size,
            waves: self.waves,
            max_shift: self.max_shift,
            noise_min: self.noise_min,
            noise_max: self.noise_max,
            seed: self.data_seed,
        }
    }

    /// `(train, test)`
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.source {
            DataSource::Synthetic => {
                let s = self.synthetic();
                Ok((
                    data::generate_synthetic(&s, self.train_per_class, 0)?,
                    data::generate_synthetic(&s, self.test_per_class, 1)?,
                ))
            }
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("dataset.{what} is required for idx source")))
                };
                let mut tr = data::load_idx(need(&self.train_images, "train_images")?, need(&self.train_labels, "train_labels")?)?;
                let mut te = data::load_idx(need(&self.test_images, "test_images")?, need(&self.test_labels, "test_labels")?)?;
                if self.limit > 0 {
                    tr = tr.take(self.limit)?;
                    te = te.take(self.limit)?;
                }
                let classes = tr.num_classes.max(te.num_classes).max(self.classes);
                tr.num_classes = classes;
                te.num_classes = classes;
                Ok((tr, te))
            }
        }
    }
}

/// Architecture of the network under study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub n_layers: usize,
    pub split_point: usize,
    pub edge_bits: u8,
    pub stage_widths: Vec<usize>,
    /// Number of early exits, spread over the edge layers with the last at the split point.
    pub exits: usize,
    pub early_lambda: f64,
    pub threshold: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            n_layers: 8,
            split_point: 4,
            edge_bits: 1,
            stage_widths: vec![16, 32, 64],
            exits: 1,
            early_lambda: 0.6,
            threshold: 0.5,
        }
    }
}

/// Layers of `count` exits spread evenly over `1..=m`, the last one at `m`.
pub fn exit_layout(m: usize, count: usize) -> Result<Vec<usize>> {
    if count > m {
        return Err(Error::Config(format!("{count} exits do not fit on {m} edge layers")));
    }
    Ok((1..=count).map(|i| (m * i).div_ceil(count)).collect())
}

impl NetworkSpec {
    pub fn config(&self, data: &DatasetSpec, m: usize, bits: u8, exits: usize) -> Result<HybridNetConfig> {
        let cfg = HybridNetConfig {
            n_layers: self.n_layers,
            split_point: m,
            edge_bits: bits,
            cloud_bits: crate::quant::FULL_PRECISION,
            in_channels: data.channels,
            height: data.size,
            width: data.size,
            stage_widths: self.stage_widths.clone(),
            exit_locations: Vec::new(),
            num_classes: data.classes,
            thresholds: Vec::new(),
            lambdas: vec![1.0],
        }
        .with_exits(exit_layout(m, exits)?, if exits == 0 { 0.0 } else { self.early_lambda }, self.threshold);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer settings; the per-exit lambdas come from the network section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f32,
    pub grad_clip: f32,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            strategy: t.strategy,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            grad_clip: t.grad_clip,
        }
    }
}

impl TrainSpec {
    pub fn config(&self, net: &HybridNetConfig, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            lambdas: net.lambdas.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_milestones: self.lr_milestones.clone(),
            lr_decay: self.lr_decay,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

/// Sweep axes. Empty lists fall back to the single value of the network section;
/// empty `thresholds` means the grid `0.05 * j` up to `ln C`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub split_points: Vec<usize>,
    pub edge_bits: Vec<u8>,
    pub exit_counts: Vec<usize>,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySpec {
    #[serde(flatten)]
    pub table: EnergyTable,
    #[serde(flatten)]
    pub options: EnergyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Parallel sweep workers; 0 uses every available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    pub train: TrainSpec,
    pub sweep: SweepSpec,
    pub energy: EnergySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            network: NetworkSpec::default(),
            train: TrainSpec::default(),
            sweep: SweepSpec::default(),
            energy: EnergySpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a `key = value` file with `[section]` headers. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every sweep point must be a valid network on its own.
    pub fn validate(&self) -> Result<()> {
        self.energy.table.validate()?;
        for p in self.points() {
            self.point_config(&p)?;
        }
        if self.thresholds().iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Config("thresholds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let ms = or(&self.sweep.split_points, self.network.split_point);
        let es = or(&self.sweep.exit_counts, self.network.exits);
        let bits = if self.sweep.edge_bits.is_empty() {
            vec![self.network.edge_bits]
        } else {
            self.sweep.edge_bits.clone()
        };
        let mut out = Vec::new();
        for &m in &ms {
            for &b in &bits {
                for &e in &es {
                    out.push(SweepPoint { m, bits: b, exits: e });
                }
            }
        }
        out
    }

    pub fn thresholds(&self) -> Vec<f64> {
        if self.sweep.thresholds.is_empty() {
            gate::threshold_grid(self.dataset.classes)
        } else {
            self.sweep.thresholds.clone()
        }
    }

    pub fn point_config(&self, p: &SweepPoint) -> Result<HybridNetConfig> {
        self.network.config(&self.dataset, p.m, p.bits, p.exits)
    }

    /// The single point described by the network section.
    pub fn base_point(&self) -> SweepPoint {
        SweepPoint {
            m: self.network.split_point,
            bits: self.network.edge_bits,
            exits: self.network.exits,
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: usize,
    pub bits: u8,
    pub exits: usize,
}

impl SweepPoint {
    pub fn name(&self) -> String {
        format!("M{}_p{}_e{}", self.m, self.bits, self.exits)
    }
}

/// Cache key: digest of the dataset spec, network config, training config and seed.
pub fn cache_key(data: &DatasetSpec, net: &HybridNetConfig, train: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(toml::to_string(data).map_err(|e| Error::Config(e.to_string()))?);
    h.update(checkpoint::encode_config(net)?);
    h.update(toml::to_string(train).map_err(|e| Error::Config(e.to_string()))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Trained network for a config, reusing a cached checkpoint whose key matches.
pub fn train_cached(
    cache_dir: &Path,
    data_spec: &DatasetSpec,
    sets: &(Dataset, Dataset),
    net_cfg: &HybridNetConfig,
    train_cfg: &TrainConfig,
) -> Result<(HybridNetwork, Option<TrainReport>)> {
    let key = cache_key(data_spec, net_cfg, train_cfg)?;
    let path = cache_dir.join(format!("{key}.ckpt"));
    if path.exists() {
        if let Ok(net) = checkpoint::load(&path) {
            if net.config() == net_cfg {
                return Ok((net, None));
            }
        }
    }
    let mut net = HybridNetwork::build(net_cfg.clone(), train_cfg.seed)?;
    let report = train::train(&mut net, &sets.0, Some(&sets.1), train_cfg)?;
    std::fs::create_dir_all(cache_dir)?;
    let tmp = path.with_extension("tmp");
    checkpoint::save(&net, &tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok((net, Some(report)))
}

/// Per-sample exit scores of the whole test set.
pub fn score_dataset(net: &HybridNetwork, data: &Dataset) -> Result<Vec<ExitScores>> {
    gate::scores_from_batch(&train::all_exit_logits(net, data)?)
}

/// Traces of gating every scored sample with one threshold on all exits.
pub fn gate_traces(
    builder: &TraceBuilder,
    scores: &[ExitScores],
    labels: &[usize],
    threshold: f64,
) -> Vec<InferenceTrace> {
    let thresholds = vec![threshold; builder.num_exits()];
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &y))| {
            let exit = s.decide(&thresholds);
            let k = exit.index(builder.num_exits());
            let bytes = if exit.is_early() { 0 } else { builder.offload_bytes() };
            builder.trace(i as u64, exit, s.entropies[k], s.predictions[k], Some(y), bytes)
        })
        .collect()
}

/// Report row for one point and threshold from its traces.
pub fn report_row(
    point: &SweepPoint,
    cfg: &HybridNetConfig,
    threshold: f64,
    traces: &[InferenceTrace],
    labels: &[usize],
    table: &EnergyTable,
    opts: &EnergyOptions,
) -> Result<ReportRow> {
    let summary = gate::gate_statistics(traces, labels, cfg.exit_locations.len())?;
    let splits: Vec<_> = traces.iter().map(|t| t.energy).collect();
    let evaluated: Vec<_> = traces.iter().map(|t| t.exits_evaluated).collect();
    let b = energy::breakdown(&splits, cfg, table, opts, &evaluated)?;
    Ok(ReportRow {
        config: point.name(),
        p1: point.bits,
        m: point.m,
        exits: point.exits,
        threshold,
        acc: summary.accuracy,
        edge_pj: b.mean_edge_pj,
        cloud_pj: b.mean_cloud_pj,
        total_pj: b.mean_total_pj,
        reduction_x: b.reduction_x,
        exit_pct: 100.0 * summary.edge_fraction,
        bytes_mean: summary.mean_bytes,
    })
}

/// Rebuild a report row from a stored trace file alone: energies come from
/// each row's exit index through the energy model, and every row's stored
/// energy must agree with that model value.
pub fn recompute_row(
    point: &SweepPoint,
    cfg: &HybridNetConfig,
    threshold: f64,
    rows: &[TraceRow],
    table: &EnergyTable,
    opts: &EnergyOptions,
) -> Result<ReportRow> {
    if rows.is_empty() {
        return Err(Error::Format("empty trace file".into()));
    }
    let per_exit = energy::exit_point_energies(cfg, table, opts)?;
    let exits = cfg.exit_locations.len();
    let n = rows.len() as f64;
    let (mut right, mut early, mut bytes) = (0usize, 0usize, 0f64);
    let mut evaluated = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    for r in rows {
        let exit = ExitPoint::from_index(r.exit_index, exits)?;
        let e = per_exit[r.exit_index];
        if format!("{:.3}", e.total()) != format!("{:.3}", r.energy_pj) {
            return Err(Error::Format(format!(
                "sample {}: stored energy {} disagrees with model {:.3}",
                r.sample_id,
                r.energy_pj,
                e.total()
            )));
        }
        splits.push(e);
        right += usize::from(r.correct == Some(true));
        early += usize::from(exit.is_early());
        bytes += r.bytes_to_cloud as f64;
        evaluated.push(match exit {
            ExitPoint::Early(k) => k + 1,
            ExitPoint::Final => exits,
        });
    }
    let b = energy::breakdown(&splits, cfg, table, opts, &evaluated)?;
    Ok(ReportRow {
        config: point.name(),
        p1: point.bits,
        m: point.m,
        exits: point.exits,
        threshold,
        acc: right as f64 / n,
        edge_pj: b.mean_edge_pj,
        cloud_pj: b.mean_cloud_pj,
        total_pj: b.mean_total_pj,
        reduction_x: b.reduction_x,
        exit_pct: 100.0 * early as f64 / n,
        bytes_mean: bytes / n,
    })
}

/// Indices of rows no other row beats on both accuracy (higher) and
/// energy (lower), with at least one strictly better.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pa.1.total_cmp(&pb.1).then(pb.0.total_cmp(&pa.0))
    });
    let mut keep = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        let (acc, e) = points[i];
        let dominated = match best {
            Some((best_acc, best_e)) => best_acc > acc || (best_acc == acc && best_e < e),
            None => false,
        };
        if !dominated {
            keep.push(i);
        }
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, e));
        }
    }
    keep.sort_unstable();
    keep
}

pub fn trace_file_name(point: &SweepPoint, threshold: f64) -> String {
    format!("{}_t{threshold}.csv", point.name())
}

fn write_report(path: &Path, header: &[String], rows: &[ReportRow]) -> Result<()> {
    let mut text = String::new();
    for h in header {
        let _ = writeln!(text, "{h}");
    }
    let _ = writeln!(text, "{REPORT_COLUMNS}");
    for r in rows {
        let _ = writeln!(text, "{}", r.to_csv());
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a report CSV, skipping `#` comment lines and the column header.
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && l.trim_end() != REPORT_COLUMNS)
        .map(ReportRow::parse_csv)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<ReportRow>,
    pub pareto: Vec<ReportRow>,
    /// `(point, error)` for every point that failed.
    pub failures: Vec<(String, String)>,
    pub out_dir: PathBuf,
}

/// Points whose training is already cached or runs fine, evaluated over the threshold grid.
fn run_point(
    cfg: &ExperimentConfig,
    sets: &(Dataset, Dataset),
    point: &SweepPoint,
    out: &Path,
) -> Result<Vec<ReportRow>> {
    let net_cfg = cfg.point_config(point)?;
    let train_cfg = cfg.train.config(&net_cfg, cfg.train.strategy, cfg.seed);
    let (net, report) = train_cached(&out.join("checkpoints"), &cfg.dataset, sets, &net_cfg, &train_cfg)?;
    if let Some(r) = report {
        std::fs::create_dir_all(out.join("logs"))?;
        std::fs::write(out.join("logs").join(format!("{}.log", point.name())), r.metrics_log())?;
    }
    let (table, opts) = (&cfg.energy.table, &cfg.energy.options);
    let builder = TraceBuilder::new(&net, table, opts)?;
    let test = &sets.1;
    let scores = score_dataset(&net, test)?;
    let trace_dir = out.join("traces");
    std::fs::create_dir_all(&trace_dir)?;
    let mut rows = Vec::new();
    for t in cfg.thresholds() {
        let traces = gate_traces(&builder, &scores, &test.labels, t);
        let file = std::fs::File::create(trace_dir.join(trace_file_name(point, t)))?;
        gate::write_traces(std::io::BufWriter::new(file), &traces, net.num_exits())?;
        rows.push(report_row(point, &net_cfg, t, &traces, &test.labels, table, opts)?);
    }
    Ok(rows)
}

/// Train (or reuse) every sweep point, gate it over the threshold grid, and
/// write `sweep.csv`, `pareto.csv`, per-threshold trace files and training logs.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let sets = cfg.dataset.load()?;
    let points = cfg.points();
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(points.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, Result<Vec<ReportRow>>>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(p) = points.get(i) else { break };
                let r = run_point(cfg, &sets, p, out);
                results.lock().expect("results lock").insert(i, r);
            });
        }
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_inner().expect("results lock") {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) => failures.push((points[i].name(), format!("{}: {e}", e.kind()))),
        }
    }
    let header = energy::report_header(&cfg.energy.table, &cfg.energy.options);
    write_report(&out.join("sweep.csv"), &header, &rows)?;
    let front: Vec<(f64, f64)> = rows.iter().map(|r| (r.acc, r.total_pj)).collect();
    let pareto: Vec<ReportRow> = pareto_front(&front).into_iter().map(|i| rows[i].clone()).collect();
    write_report(&out.join("pareto.csv"), &header, &pareto)?;
    let mut fail_text = String::from("point,error\n");
    for (p, e) in &failures {
        let _ = writeln!(fail_text, "{p},{}", e.replace(',', ";"));
    }
    std::fs::write(out.join("failures.csv"), fail_text)?;
    Ok(SweepReport {
        rows,
        pareto,
        failures,
        out_dir: out.to_path_buf(),
    })
}

/// Recompute every row of `sweep.csv` from its trace file and compare the
/// formatted rows. Returns the number of rows checked.
pub fn verify_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let rows = read_report(&out.join("sweep.csv"))?;
    let points: BTreeMap<String, SweepPoint> = cfg.points().into_iter().map(|p| (p.name(), p)).collect();
    for row in &rows {
        let point = points
            .get(&row.config)
            .ok_or_else(|| Error::Config(format!("row {} is not a point of this config", row.config)))?;
        let net_cfg = cfg.point_config(point)?;
        let path = out.join("traces").join(trace_file_name(point, row.threshold));
        let traces = gate::read_traces(BufReader::new(std::fs::File::open(&path)?))?;
        let again = recompute_row(point, &net_cfg, row.threshold, &traces, &cfg.energy.table, &cfg.energy.options)?;
        if again.to_csv() != row.to_csv() {
            return Err(Error::Format(format!(
                "row disagrees with {}:\n  stored     {}\n  recomputed {}",
                path.display(),
                row.to_csv(),
                again.to_csv()
            )));
        }
    }
    Ok(rows.len())
}

/// Gated outcome of one trained strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub threshold: f64,
    pub exit_pct: f64,
    pub acc: f64,
    pub final_acc: f64,
    pub early_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyComparison {
    pub separate: StrategyResult,
    pub joint: StrategyResult,
}

/// Published reference values at full scale, shown for context only.
pub const REFERENCE_ROWS: [(&str, f64, f64, f64, f64); 2] = [
    ("CIFAR10", 24.1, 52.8, 88.72, 89.16),
    ("CIFAR100", 17.3, 24.6, 61.80, 62.50),
];

impl StrategyComparison {
    /// Joint optimization sends at least as many samples out early.
    pub fn joint_exits_more(&self) -> bool {
        self.joint.exit_pct >= self.separate.exit_pct
    }

    pub fn render(&self, dataset: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# reference values at full scale, not reproduced at desk scale:");
        for (name, es, ej, as_, aj) in REFERENCE_ROWS {
            let _ = writeln!(
                s,
                "# {name}: early exit % separate {es} joint {ej}; accuracy % separate {as_:.2} joint {aj:.2}"
            );
        }
        let _ = writeln!(s, "# threshold {} on every exit, entropy in nats", self.joint.threshold);
        let _ = writeln!(s, "dataset,exit_pct_separate,exit_pct_joint,acc_separate,acc_joint");
        let _ = writeln!(
            s,
            "{dataset},{:.2},{:.2},{:.2},{:.2}",
            self.separate.exit_pct,
            self.joint.exit_pct,
            100.0 * self.separate.acc,
            100.0 * self.joint.acc
        );
        let _ = writeln!(
            s,
            "# trend joint_exit_pct >= separate_exit_pct: {}",
            if self.joint_exits_more() { "PASS" } else { "FLAG" }
        );
        s
    }
}

/// Gate a trained network at `threshold` on the test set.
pub fn strategy_result(net: &HybridNetwork, test: &Dataset, strategy: Strategy, threshold: f64) -> Result<StrategyResult> {
    let scores = score_dataset(net, test)?;
    let exits = net.num_exits();
    let thresholds = vec![threshold; exits];
    let n = test.len() as f64;
    let (mut early, mut right) = (0usize, 0usize);
    let mut per_exit_right = vec![0usize; exits + 1];
    for (s, &y) in scores.iter().zip(&test.labels) {
        let k = s.decide(&thresholds).index(exits);
        early += usize::from(k < exits);
        right += usize::from(s.predictions[k] == y);
        for (j, &p) in s.predictions.iter().enumerate() {
            per_exit_right[j] += usize::from(p == y);
        }
    }
    Ok(StrategyResult {
        strategy,
        threshold,
        exit_pct: 100.0 * early as f64 / n,
        acc: right as f64 / n,
        final_acc: per_exit_right[exits] as f64 / n,
        early_acc: per_exit_right[..exits].iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Train the base architecture with both strategies from the same seed and
/// compare them at the network section's threshold.
pub fn compare_strategies(cfg: &ExperimentConfig, out: &Path) -> Result<StrategyComparison> {
    cfg.validate()?;
    let sets = cfg.dataset.load()?;
    let net_cfg = cfg.point_config(&cfg.base_point())?;
    let threshold = cfg.network.threshold;
    let mut results = Vec::with_capacity(2);
    for strategy in [Strategy::Separate, Strategy::Joint] {
        let train_cfg = cfg.train.config(&net_cfg, strategy, cfg.seed);
        let (net, _) = train_cached(&out.join("checkpoints"), &cfg.dataset, &sets, &net_cfg, &train_cfg)?;
        results.push(strategy_result(&net, &sets.1, strategy, threshold)?);
    }
    let joint = results.pop().expect("two results");
    let separate = results.pop().expect("two results");
    let cmp = StrategyComparison { separate, joint };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("strategies.csv"), cmp.render(&format!("{:?}", cfg.dataset.source).to_lowercase()))?;
    Ok(cmp)
}
