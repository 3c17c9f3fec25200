//! Computational-energy accounting in picojoules.
//!
//! Every executed layer is reduced to multiply-accumulates at its bit-depth,
//! 32-bit additions and memory traffic in bits. Batch norm and the weight
//! scale are folded into the convolution and cost nothing extra. Exit
//! classifiers always run at full precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::HybridNetConfig;
use crate::quant::FULL_PRECISION;

/// Energy per operation, in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyTable {
    pub add32_pj: f64,
    pub mac32_pj: f64,
    pub mac_binary_pj: f64,
    pub mem_per_bit_pj: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            add32_pj: 0.9,
            mac32_pj: 4.6,
            mac_binary_pj: 0.2,
            mem_per_bit_pj: 2.5,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let all = [self.add32_pj, self.mac32_pj, self.mac_binary_pj, self.mem_per_bit_pj];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("energy table entries must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Which terms enter the totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyOptions {
    pub include_memory: bool,
    pub include_exits: bool,
}

impl Default for EnergyOptions {
    fn default() -> Self {
        Self {
            include_memory: true,
            include_exits: true,
        }
    }
}

/// Energy of one MAC at bit-depth `p`, interpolated linearly between the
/// binary and 32-bit anchors.
pub fn mac_energy(p: u8, table: &EnergyTable) -> Result<f64> {
    if !(1..=32).contains(&p) {
        return Err(Error::Config(format!("bit-depth {p} outside 1..=32")));
    }
    Ok(table.mac_binary_pj + (table.mac32_pj - table.mac_binary_pj) * (p as f64 - 1.0) / 31.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Edge,
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    /// Main-path convolution of layer `l`.
    Conv(usize),
    /// Projection shortcut of layer `l`.
    Shortcut(usize),
    /// Residual addition of layer `l`.
    Residual(usize),
    Exit(usize),
    Final,
}

/// Operation count of one executed piece of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpEntry {
    pub part: Part,
    pub site: Site,
    pub macs: u64,
    pub mac_bits: u8,
    pub adds: u64,
    pub weight_bits: u64,
    pub activation_bits: u64,
}

impl OpEntry {
    pub fn mem_bits(&self) -> u64 {
        self.weight_bits + self.activation_bits
    }

    pub fn is_exit(&self) -> bool {
        matches!(self.part, Part::Exit(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub entries: Vec<OpEntry>,
}

/// What a single inference executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    /// Layers `1..=layers` ran.
    pub layers: usize,
    /// Early exits `0..exits` were evaluated.
    pub exits: usize,
    pub final_head: bool,
}

impl Execution {
    pub fn full(cfg: &HybridNetConfig) -> Self {
        Self {
            layers: cfg.n_layers,
            exits: cfg.exit_locations.len(),
            final_head: true,
        }
    }
}

fn conv_macs(c_out: usize, c_in: usize, k: usize, h: usize, w: usize) -> u64 {
    (c_out * c_in * k * k * h * w) as u64
}

fn classifier_entry(part: Part, site: Site, classes: usize, shape: [usize; 3]) -> OpEntry {
    let [c, h, w] = shape;
    let fp = FULL_PRECISION as u64;
    OpEntry {
        part,
        site,
        macs: (classes * c) as u64,
        mac_bits: FULL_PRECISION,
        // pooling sums plus bias additions
        adds: (c * h * w + classes) as u64,
        weight_bits: ((classes * c + classes) as u64) * fp,
        activation_bits: ((c + classes) as u64) * fp,
    }
}

/// Per-layer operation counts of the pieces named in `exec`.
pub fn count_ops(cfg: &HybridNetConfig, exec: Execution) -> Result<OpCounts> {
    cfg.validate()?;
    if exec.layers == 0 || exec.layers > cfg.n_layers || exec.exits > cfg.exit_locations.len() {
        return Err(Error::Config(format!("execution {exec:?} does not fit the network")));
    }
    if let Some(&loc) = cfg.exit_locations[..exec.exits].iter().max() {
        if loc > exec.layers {
            return Err(Error::Config(format!("exit at layer {loc} evaluated but only {} layers ran", exec.layers)));
        }
    }
    if exec.final_head && exec.layers != cfg.n_layers {
        return Err(Error::Config("final head needs every layer".into()));
    }
    let shapes = cfg.layer_shapes();
    let site = |l: usize| if l <= cfg.split_point { Site::Edge } else { Site::Cloud };
    let mut entries = Vec::new();
    for l in 1..=exec.layers {
        let [c_out, h, w] = shapes[l - 1];
        let [c_in, h_in, w_in] = if l == 1 { cfg.input_shape() } else { shapes[l - 2] };
        let p = cfg.layer_bits(l);
        let (inp, out) = ((c_in * h_in * w_in) as u64, (c_out * h * w) as u64);
        entries.push(OpEntry {
            part: Part::Conv(l),
            site: site(l),
            macs: conv_macs(c_out, c_in, 3, h, w),
            mac_bits: p,
            adds: 0,
            weight_bits: (c_out * c_in * 9) as u64 * p as u64,
            activation_bits: (inp + out) * p as u64,
        });
        if l >= 2 {
            if c_in != c_out || h_in != h {
                entries.push(OpEntry {
                    part: Part::Shortcut(l),
                    site: site(l),
                    macs: conv_macs(c_out, c_in, 1, h, w),
                    mac_bits: FULL_PRECISION,
                    adds: 0,
                    weight_bits: (c_out * c_in) as u64 * FULL_PRECISION as u64,
                    activation_bits: 0,
                });
            }
            entries.push(OpEntry {
                part: Part::Residual(l),
                site: site(l),
                macs: 0,
                mac_bits: FULL_PRECISION,
                adds: out,
                weight_bits: 0,
                activation_bits: 0,
            });
        }
        for (k, &loc) in cfg.exit_locations[..exec.exits].iter().enumerate() {
            if loc == l {
                entries.push(classifier_entry(Part::Exit(k), Site::Edge, cfg.num_classes, shapes[l - 1]));
            }
        }
    }
    if exec.final_head {
        entries.push(classifier_entry(
            Part::Final,
            Site::Cloud,
            cfg.num_classes,
            shapes[cfg.n_layers - 1],
        ));
    }
    Ok(OpCounts { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergySplit {
    pub edge_pj: f64,
    pub cloud_pj: f64,
}

impl EnergySplit {
    pub fn total(&self) -> f64 {
        self.edge_pj + self.cloud_pj
    }
}

pub fn entry_energy(e: &OpEntry, table: &EnergyTable, opts: &EnergyOptions) -> Result<f64> {
    if e.is_exit() && !opts.include_exits {
        return Ok(0.0);
    }
    let mut pj = e.macs as f64 * mac_energy(e.mac_bits, table)? + e.adds as f64 * table.add32_pj;
    if opts.include_memory {
        pj += e.mem_bits() as f64 * table.mem_per_bit_pj;
    }
    Ok(pj)
}

pub fn estimate_energy(counts: &OpCounts, table: &EnergyTable, opts: &EnergyOptions) -> Result<EnergySplit> {
    table.validate()?;
    let mut split = EnergySplit::default();
    for e in &counts.entries {
        let pj = entry_energy(e, table, opts)?;
        match e.site {
            Site::Edge => split.edge_pj += pj,
            Site::Cloud => split.cloud_pj += pj,
        }
    }
    Ok(split)
}

/// MAC totals grouped by bit-depth, plus adds and memory bits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OpSummary {
    pub macs_by_bits: Vec<(u8, u64)>,
    pub adds: u64,
    pub mem_bits: u64,
}

impl OpCounts {
    pub fn summary(&self) -> OpSummary {
        let mut s = OpSummary::default();
        for e in &self.entries {
            match s.macs_by_bits.iter_mut().find(|(b, _)| *b == e.mac_bits) {
                Some((_, n)) => *n += e.macs,
                None => s.macs_by_bits.push((e.mac_bits, e.macs)),
            }
            s.adds += e.adds;
            s.mem_bits += e.mem_bits();
        }
        s.macs_by_bits.retain(|(_, n)| *n > 0);
        s.macs_by_bits.sort();
        s
    }
}

/// The same architecture at 32 bits throughout, without early exits.
pub fn baseline_config(cfg: &HybridNetConfig) -> HybridNetConfig {
    HybridNetConfig {
        edge_bits: FULL_PRECISION,
        ..cfg.clone()
    }
    .with_exits(Vec::new(), 0.0, 0.0)
}

/// Energy of a full-precision, always-cloud inference.
pub fn baseline_energy(cfg: &HybridNetConfig, table: &EnergyTable, opts: &EnergyOptions) -> Result<f64> {
    let base = baseline_config(cfg);
    let counts = count_ops(&base, Execution::full(&base))?;
    Ok(estimate_energy(&counts, table, opts)?.total())
}

/// Per-sample energy for each possible way an inference can end: exiting at
/// early exit `k` (index `k`) or running to the final head (last entry).
pub fn exit_point_energies(
    cfg: &HybridNetConfig,
    table: &EnergyTable,
    opts: &EnergyOptions,
) -> Result<Vec<EnergySplit>> {
    let mut out = Vec::with_capacity(cfg.exit_locations.len() + 1);
    for (k, &loc) in cfg.exit_locations.iter().enumerate() {
        let exec = Execution {
            layers: loc,
            exits: k + 1,
            final_head: false,
        };
        out.push(estimate_energy(&count_ops(cfg, exec)?, table, opts)?);
    }
    out.push(estimate_energy(&count_ops(cfg, Execution::full(cfg))?, table, opts)?);
    Ok(out)
}

/// Header lines stating every modelling choice behind the figures.
pub fn report_header(table: &EnergyTable, opts: &EnergyOptions) -> Vec<String> {
    vec![
        format!(
            "# energy table pJ: add32={} mac32={} mac1={} mem_per_bit={}",
            table.add32_pj, table.mac32_pj, table.mac_binary_pj, table.mem_per_bit_pj
        ),
        "# multi-bit MAC energy interpolated linearly between the 1-bit and 32-bit entries".into(),
        format!(
            "# memory included={} (weights + input/output activations at layer precision); exit classifiers included={} at 32 bits",
            opts.include_memory, opts.include_exits
        ),
        "# batch norm folded into convolutions; communication energy excluded; entropy in nats".into(),
    ]
}

/// Mean per-sample energy of a set of inferences against the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub samples: usize,
    pub mean_edge_pj: f64,
    pub mean_cloud_pj: f64,
    pub mean_total_pj: f64,
    pub baseline_pj: f64,
    pub reduction_x: f64,
    /// Mean energy of each exit's classifier per sample, early exits only.
    pub exit_classifier_pj: Vec<f64>,
}

/// Average the per-sample splits and compare with the full-precision baseline.
pub fn breakdown(
    per_sample: &[EnergySplit],
    cfg: &HybridNetConfig,
    table: &EnergyTable,
    opts: &EnergyOptions,
    exits_evaluated: &[usize],
) -> Result<Breakdown> {
    if per_sample.is_empty() {
        return Err(Error::Config("no samples to report".into()));
    }
    if exits_evaluated.len() != per_sample.len() {
        return Err(Error::Config("one exit count per sample required".into()));
    }
    let n = per_sample.len() as f64;
    let mean_edge_pj = per_sample.iter().map(|s| s.edge_pj).sum::<f64>() / n;
    let mean_cloud_pj = per_sample.iter().map(|s| s.cloud_pj).sum::<f64>() / n;
    let mean_total_pj = mean_edge_pj + mean_cloud_pj;
    let baseline_pj = baseline_energy(cfg, table, opts)?;
    let shapes = cfg.layer_shapes();
    let mut exit_classifier_pj = Vec::with_capacity(cfg.exit_locations.len());
    for (k, &loc) in cfg.exit_locations.iter().enumerate() {
        let e = classifier_entry(Part::Exit(k), Site::Edge, cfg.num_classes, shapes[loc - 1]);
        let per = entry_energy(&e, table, opts)?;
        let count = exits_evaluated.iter().filter(|&&m| m > k).count() as f64;
        exit_classifier_pj.push(per * count / n);
    }
    Ok(Breakdown {
        samples: per_sample.len(),
        mean_edge_pj,
        mean_cloud_pj,
        mean_total_pj,
        baseline_pj,
        reduction_x: baseline_pj / mean_total_pj,
        exit_classifier_pj,
    })
}

/// One row of the sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub p1: u8,
    pub m: usize,
    pub exits: usize,
    pub threshold: f64,
    pub acc: f64,
    pub edge_pj: f64,
    pub cloud_pj: f64,
    pub total_pj: f64,
    pub reduction_x: f64,
    pub exit_pct: f64,
    pub bytes_mean: f64,
}

pub const REPORT_COLUMNS: &str = "config,p1,M,exits,threshold,acc,edge_pJ,cloud_pJ,total_pJ,reduction_x,exit_pct,bytes_mean";

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.3},{:.3},{:.3},{:.6},{:.4},{:.3}",
            self.config,
            self.p1,
            self.m,
            self.exits,
            self.threshold,
            self.acc,
            self.edge_pj,
            self.cloud_pj,
            self.total_pj,
            self.reduction_x,
            self.exit_pct,
            self.bytes_mean
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("report row needs 12 fields, got {}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
        }
        Ok(Self {
            config: f[0].to_string(),
            p1: num(f[1], "p1")?,
            m: num(f[2], "M")?,
            exits: num(f[3], "exits")?,
            threshold: num(f[4], "threshold")?,
            acc: num(f[5], "acc")?,
            edge_pj: num(f[6], "edge_pJ")?,
            cloud_pj: num(f[7], "cloud_pJ")?,
            total_pj: num(f[8], "total_pJ")?,
            reduction_x: num(f[9], "reduction_x")?,
            exit_pct: num(f[10], "exit_pct")?,
            bytes_mean: num(f[11], "bytes_mean")?,
        })
    }
}
