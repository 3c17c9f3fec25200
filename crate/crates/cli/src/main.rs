use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdhn_core::checkpoint;
use cdhn_core::data::{self, Dataset};
use cdhn_core::energy;
use cdhn_core::explore::{self, ExperimentConfig};
use cdhn_core::gate::{self, TraceBuilder};
use cdhn_core::runtime::{self, EdgeOptions, SampleOutcome, ServerOptions};
use cdhn_core::train;
use cdhn_core::wire::DEFAULT_MAX_FRAME;
use cdhn_core::{Error, HybridNetwork, Result, Strategy};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cdhn", version, about = "Hybrid-precision early-exit networks split between edge and cloud")]
struct Cli {
    /// Experiment config (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Joint,
    Separate,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Joint => Strategy::Joint,
            StrategyArg::Separate => Strategy::Separate,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured network and save `model.ckpt` plus `train.log`.
    Train {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Gate the test set through a checkpoint and write per-sample traces.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Entropy threshold applied at every exit (default: the config's).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate every sweep point; write sweep.csv and pareto.csv.
    Sweep,
    /// Train with separate and joint optimization and compare exit rates.
    CompareStrategies,
    /// Serve the cloud half of a checkpoint over TCP until killed.
    ServeCloud {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_MAX_FRAME)]
        max_frame: usize,
    },
    /// Run the edge half over the test set, offloading to a cloud server.
    RunEdge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// IDX image file to classify instead of the configured test set.
        #[arg(long)]
        input: Option<PathBuf>,
        /// IDX labels matching `--input`.
        #[arg(long, requires = "input")]
        labels: Option<PathBuf>,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_FRAME)]
        max_frame: usize,
    },
    /// Check every sweep row against its trace file and print the frontier.
    Report,
    /// Write the configured train and test sets as IDX files.
    ExportData,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Train { strategy } => cmd_train(&cfg, &out, strategy.map(Into::into)),
        Command::Eval { checkpoint, threshold } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join("model.ckpt"));
            cmd_eval(&cfg, &out, &ckpt, threshold.unwrap_or(cfg.network.threshold))
        }
        Command::Sweep => cmd_sweep(&cfg, &out),
        Command::CompareStrategies => {
            explore::compare_strategies(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("strategies.csv"))?);
            Ok(())
        }
        Command::ServeCloud {
            checkpoint,
            bind,
            max_frame,
        } => {
            let net = checkpoint::load(&checkpoint)?;
            let server = runtime::serve_cloud(net, bind.as_str(), ServerOptions { max_frame })?;
            println!("listening addr={}", server.addr());
            std::io::stdout().flush()?;
            let stats = server.wait();
            println!(
                "stopped sessions={} rejected={} failed={}",
                stats.sessions_accepted, stats.sessions_rejected, stats.sessions_failed
            );
            Ok(())
        }
        Command::RunEdge {
            checkpoint,
            cloud,
            threshold,
            input,
            labels,
            limit,
            trace_out,
            max_frame,
        } => {
            let (data, has_labels) = match (input, labels) {
                (Some(i), Some(l)) => (data::load_idx(i, l)?, true),
                (Some(i), None) => {
                    let images = data::parse_idx_images(&std::fs::read(i)?)?;
                    let n = images.shape()[0];
                    (Dataset::new(images, vec![0; n], 1)?, false)
                }
                _ => (cfg.dataset.load()?.1, true),
            };
            let edge = EdgeArgs {
                checkpoint,
                cloud,
                threshold: threshold.unwrap_or(cfg.network.threshold),
                limit,
                trace_out,
                max_frame,
                has_labels,
            };
            cmd_run_edge(&cfg, &data, &edge)
        }
        Command::Report => cmd_report(&cfg, &out),
        Command::ExportData => {
            let (tr, te) = cfg.dataset.load()?;
            std::fs::create_dir_all(&out)?;
            data::write_idx(&tr, out.join("train-images.idx"), out.join("train-labels.idx"))?;
            data::write_idx(&te, out.join("test-images.idx"), out.join("test-labels.idx"))?;
            println!("exported train={} test={} dir={}", tr.len(), te.len(), out.display());
            Ok(())
        }
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, strategy: Option<Strategy>) -> Result<()> {
    let (tr, te) = cfg.dataset.load()?;
    let net_cfg = cfg.point_config(&cfg.base_point())?;
    let tc = cfg.train.config(&net_cfg, strategy.unwrap_or(cfg.train.strategy), cfg.seed);
    let mut net = HybridNetwork::build(net_cfg, cfg.seed)?;
    let report = train::train(&mut net, &tr, Some(&te), &tc)?;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&net, &ckpt)?;
    std::fs::write(out.join("train.log"), report.metrics_log())?;
    let digest: String = report.checkpoint_digest.iter().map(|b| format!("{b:02x}")).collect();
    let accs = report
        .last()
        .and_then(|r| r.test.as_ref())
        .map(|m| m.iter().map(|e| format!("{:.4}", e.acc)).collect::<Vec<_>>().join(";"))
        .unwrap_or_default();
    println!(
        "trained strategy={} epochs={} test_acc_per_exit={accs} checkpoint={} digest={digest}",
        tc.strategy,
        tc.epochs,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, ckpt: &Path, threshold: f64) -> Result<()> {
    let net = checkpoint::load(ckpt)?;
    let test = cfg.dataset.load()?.1;
    let (table, opts) = (&cfg.energy.table, &cfg.energy.options);
    let builder = TraceBuilder::new(&net, table, opts)?;
    let scores = explore::score_dataset(&net, &test)?;
    let traces = explore::gate_traces(&builder, &scores, &test.labels, threshold);
    std::fs::create_dir_all(out)?;
    let path = out.join("eval_traces.csv");
    gate::write_traces(BufWriter::new(std::fs::File::create(&path)?), &traces, net.num_exits())?;
    let point = explore::SweepPoint {
        m: net.split_point(),
        bits: net.config().edge_bits,
        exits: net.num_exits(),
    };
    let row = explore::report_row(&point, net.config(), threshold, &traces, &test.labels, table, opts)?;
    println!(
        "eval samples={} threshold={threshold} acc={:.4} exit_pct={:.2} total_pJ={:.1} reduction_x={:.3} traces={}",
        test.len(),
        row.acc,
        row.exit_pct,
        row.total_pj,
        row.reduction_x,
        path.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let report = explore::run_sweep(cfg, out)?;
    for (point, err) in &report.failures {
        eprintln!("point-failed point={point} error={err:?}");
    }
    println!(
        "sweep points={} rows={} pareto={} failures={} out={}",
        cfg.points().len(),
        report.rows.len(),
        report.pareto.len(),
        report.failures.len(),
        out.display()
    );
    if report.rows.is_empty() {
        return Err(Error::Training("every sweep point failed".into()));
    }
    Ok(())
}

struct EdgeArgs {
    checkpoint: PathBuf,
    cloud: String,
    threshold: f64,
    limit: Option<usize>,
    trace_out: Option<PathBuf>,
    max_frame: usize,
    has_labels: bool,
}

fn cmd_run_edge(cfg: &ExperimentConfig, data: &Dataset, a: &EdgeArgs) -> Result<()> {
    let net = checkpoint::load(&a.checkpoint)?;
    let n = a.limit.map_or(data.len(), |l| l.min(data.len()));
    let inputs = (0..n)
        .map(|i| Ok((i as u64, data.sample(i)?)))
        .collect::<Result<Vec<_>>>()?;
    let labels = a.has_labels.then(|| &data.labels[..n]);
    let opts = EdgeOptions {
        max_frame: a.max_frame,
        energy: cfg.energy.table,
        energy_options: cfg.energy.options,
    };
    let thresholds = vec![a.threshold; net.num_exits()];
    let run = runtime::run_edge(&net, a.cloud.as_str(), &inputs, labels, &thresholds, &opts)?;
    if let Some(p) = &a.trace_out {
        gate::write_traces(BufWriter::new(std::fs::File::create(p)?), &run.traces(), net.num_exits())?;
    }
    let local = run.samples.iter().filter(|s| s.outcome == SampleOutcome::Local).count();
    let cloud = run.samples.iter().filter(|s| s.outcome == SampleOutcome::Cloud).count();
    let correct = run
        .traces()
        .iter()
        .filter(|t| t.correct == Some(true))
        .count();
    let agree = run.cloud_stats.map(|c| c == run.edge_stats);
    println!(
        "edge samples={n} local={local} cloud={cloud} failed={} acc={} feature_bytes={} counters_agree={}",
        run.failures(),
        if labels.is_some() { format!("{:.4}", correct as f64 / n.max(1) as f64) } else { "na".into() },
        run.edge_stats.feature_bytes,
        agree.map_or("na".to_string(), |b| b.to_string())
    );
    if let Some(SampleOutcome::Failed(msg)) = run.samples.iter().map(|s| &s.outcome).find(|o| matches!(o, SampleOutcome::Failed(_))) {
        return Err(Error::Protocol(format!("{} samples failed; first: {msg}", run.failures())));
    }
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let checked = explore::verify_sweep(cfg, out)?;
    let pareto = explore::read_report(&out.join("pareto.csv"))?;
    for line in energy::report_header(&cfg.energy.table, &cfg.energy.options) {
        println!("{line}");
    }
    println!("# {checked} sweep rows recomputed from traces; pareto frontier follows");
    println!("{}", energy::REPORT_COLUMNS);
    for r in &pareto {
        println!("{}", r.to_csv());
    }
    Ok(())
}
