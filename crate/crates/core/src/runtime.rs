//! Edge runner and cloud server talking the [`crate::wire`] protocol over TCP.
//!
//! The server owns an immutable network and answers each session on its own
//! thread. A session opens with HELLO carrying the checkpoint digest; the
//! server echoes HELLO on a match and sends BYE otherwise. Each FEATURES
//! message gets one PREDICTION. STATS asks for the session counters, and BYE
//! closes the session. Any malformed frame ends that session alone.

use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::checkpoint::{network_digest, ConfigDigest};
use crate::energy::{EnergyOptions, EnergyTable};
use crate::error::{Error, Result};
use crate::gate::{self, EdgeOutcome, ExitPoint, GateDecision, InferenceTrace, TraceBuilder};
use crate::net::HybridNetwork;
use crate::ops;
use crate::tensor::Tensor;
use crate::wire::{self, Message, Stats, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerOptions {
    pub max_frame: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

/// Totals over every session the server has finished.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub sessions_accepted: u64,
    pub sessions_rejected: u64,
    pub sessions_failed: u64,
    pub traffic: Stats,
    /// `kind: message` of every session-ending error.
    pub errors: Vec<String>,
}

/// Open session streams with the threads serving them.
type Sessions = Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>;

pub struct CloudServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<ServerStats>>,
    accept: Option<JoinHandle<()>>,
    sessions: Sessions,
}

impl CloudServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        self.stats.lock().expect("stats lock").clone()
    }

    /// Block until the accept loop ends.
    pub fn wait(mut self) -> ServerStats {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.stats()
    }

    /// Stop accepting, close open sessions and wait for their threads.
    pub fn shutdown(mut self) -> ServerStats {
        self.stop_all();
        self.stats()
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let sessions = std::mem::take(&mut *self.sessions.lock().expect("session lock"));
        for (stream, handle) in sessions {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = handle.join();
        }
    }
}

impl Drop for CloudServer {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_all();
        }
    }
}

/// Bind and start serving the cloud half of `net` on background threads.
pub fn serve_cloud(net: HybridNetwork, bind: impl ToSocketAddrs, opts: ServerOptions) -> Result<CloudServer> {
    let digest = network_digest(&net)?;
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let net = Arc::new(net);
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(Mutex::new(ServerStats::default()));
    let sessions: Sessions = Arc::default();
    let accept = {
        let (stop, stats, sessions) = (stop.clone(), stats.clone(), sessions.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let Ok(handle_copy) = stream.try_clone() else { continue };
                let (net, stats) = (net.clone(), stats.clone());
                let h = std::thread::spawn(move || {
                    let outcome = run_session(stream, &net, &digest, opts.max_frame);
                    record(&stats, outcome);
                });
                let mut open = sessions.lock().expect("session lock");
                open.retain(|(_, h)| !h.is_finished());
                open.push((handle_copy, h));
            }
        })
    };
    Ok(CloudServer {
        addr,
        stop,
        stats,
        accept: Some(accept),
        sessions,
    })
}

enum SessionEnd {
    Closed(Stats),
    Rejected(String),
    Failed(Stats, Error),
}

fn record(stats: &Mutex<ServerStats>, end: SessionEnd) {
    let mut s = stats.lock().expect("stats lock");
    let add = |s: &mut ServerStats, t: Stats| {
        s.traffic.samples += t.samples;
        s.traffic.feature_bytes += t.feature_bytes;
        s.traffic.predictions += t.predictions;
    };
    match end {
        SessionEnd::Closed(t) => {
            s.sessions_accepted += 1;
            add(&mut s, t);
        }
        SessionEnd::Rejected(why) => {
            s.sessions_rejected += 1;
            s.errors.push(format!("protocol: {why}"));
        }
        SessionEnd::Failed(t, e) => {
            s.sessions_failed += 1;
            add(&mut s, t);
            s.errors.push(format!("{}: {e}", e.kind()));
        }
    }
}

fn run_session(mut stream: TcpStream, net: &HybridNetwork, digest: &ConfigDigest, max_frame: usize) -> SessionEnd {
    let mut counters = Stats::default();
    let mut greeted = false;
    let result: Result<()> = (|| loop {
        let Some((msg, frame_len)) = wire::read_message(&mut stream, max_frame)? else {
            return Ok(());
        };
        match msg {
            Message::Hello { version, digest: theirs } => {
                if greeted {
                    return Err(Error::Protocol("second HELLO in session".into()));
                }
                if version != PROTOCOL_VERSION || &theirs != digest {
                    let _ = wire::write_message(&mut stream, &Message::Bye);
                    return Err(Error::Protocol(if version != PROTOCOL_VERSION {
                        format!("protocol version {version} refused")
                    } else {
                        "checkpoint digest mismatch".into()
                    }));
                }
                wire::write_message(
                    &mut stream,
                    &Message::Hello {
                        version: PROTOCOL_VERSION,
                        digest: *digest,
                    },
                )?;
                greeted = true;
            }
            Message::Features {
                sample_id,
                layer,
                tensor,
            } => {
                if !greeted {
                    return Err(Error::Protocol("FEATURES before HELLO".into()));
                }
                if layer as usize != net.split_point() {
                    return Err(Error::Protocol(format!(
                        "features from layer {layer}, split point is {}",
                        net.split_point()
                    )));
                }
                counters.samples += 1;
                counters.feature_bytes += frame_len as u64;
                let logits = net.forward_cloud(&tensor)?;
                if logits.rank() != 1 {
                    return Err(Error::Protocol("FEATURES must carry a single sample".into()));
                }
                let reply = Message::Prediction {
                    sample_id,
                    class: logits.argmax() as u16,
                    probs: ops::softmax(logits.data()),
                };
                wire::write_message(&mut stream, &reply)?;
                counters.predictions += 1;
            }
            Message::Stats(_) => {
                wire::write_message(&mut stream, &Message::Stats(counters))?;
            }
            Message::Bye => {
                let _ = wire::write_message(&mut stream, &Message::Bye);
                return Ok(());
            }
            other @ Message::Prediction { .. } => {
                return Err(Error::Protocol(format!("unexpected {} from edge", other.name())));
            }
        }
    })();
    match result {
        Ok(()) => SessionEnd::Closed(counters),
        Err(Error::Protocol(m)) if !greeted && (m.contains("digest") || m.contains("version")) => SessionEnd::Rejected(m),
        Err(e) => {
            let _ = wire::write_message(&mut stream, &Message::Bye);
            let _ = stream.shutdown(Shutdown::Both);
            SessionEnd::Failed(counters, e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeOptions {
    pub max_frame: usize,
    pub energy: EnergyTable,
    pub energy_options: EnergyOptions,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            max_frame: DEFAULT_MAX_FRAME,
            energy: EnergyTable::default(),
            energy_options: EnergyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    /// Answered at an early exit on the edge.
    Local,
    /// Answered by the cloud.
    Cloud,
    /// Needed the cloud and could not get an answer.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSample {
    pub sample_id: u64,
    pub outcome: SampleOutcome,
    pub decision: Option<GateDecision>,
    pub trace: Option<InferenceTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRun {
    pub samples: Vec<EdgeSample>,
    /// Counters kept by the edge.
    pub edge_stats: Stats,
    /// Counters the server reported for this session, when one was opened and closed cleanly.
    pub cloud_stats: Option<Stats>,
}

impl EdgeRun {
    pub fn failures(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| matches!(s.outcome, SampleOutcome::Failed(_)))
            .count()
    }

    pub fn traces(&self) -> Vec<InferenceTrace> {
        self.samples.iter().filter_map(|s| s.trace.clone()).collect()
    }
}

struct Link {
    stream: TcpStream,
    max_frame: usize,
}

impl Link {
    fn open(addr: &[SocketAddr], digest: ConfigDigest, max_frame: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut link = Self { stream, max_frame };
        wire::write_message(
            &mut link.stream,
            &Message::Hello {
                version: PROTOCOL_VERSION,
                digest,
            },
        )?;
        match link.recv()? {
            Message::Hello { digest: d, .. } if d == digest => Ok(link),
            Message::Bye => Err(Error::Protocol("cloud refused the handshake".into())),
            other => Err(Error::Protocol(format!("expected HELLO, got {}", other.name()))),
        }
    }

    fn recv(&mut self) -> Result<Message> {
        match wire::read_message(&mut self.stream, self.max_frame)? {
            Some((m, _)) => Ok(m),
            None => Err(Error::Protocol("cloud closed the connection".into())),
        }
    }

    fn predict(&mut self, sample_id: u64, layer: u16, activation: Tensor) -> Result<(usize, u16, Vec<f32>)> {
        let msg = Message::Features {
            sample_id,
            layer,
            tensor: activation,
        };
        let sent = wire::write_message(&mut self.stream, &msg)?;
        match self.recv()? {
            Message::Prediction {
                sample_id: id,
                class,
                probs,
            } if id == sample_id => Ok((sent, class, probs)),
            Message::Prediction { sample_id: id, .. } => {
                Err(Error::Protocol(format!("prediction for sample {id}, expected {sample_id}")))
            }
            other => Err(Error::Protocol(format!("expected PREDICTION, got {}", other.name()))),
        }
    }

    fn close(mut self, ours: Stats) -> Result<Stats> {
        wire::write_message(&mut self.stream, &Message::Stats(ours))?;
        let theirs = match self.recv()? {
            Message::Stats(s) => s,
            other => return Err(Error::Protocol(format!("expected STATS, got {}", other.name()))),
        };
        wire::write_message(&mut self.stream, &Message::Bye)?;
        let _ = self.recv();
        Ok(theirs)
    }
}

enum LinkState {
    NotOpened,
    Open(Link),
    Broken(String),
}

/// Gate every sample on the edge and ship the undecided ones to the cloud,
/// one at a time. Results keep input order. Once the link fails, every later
/// sample that needs the cloud is marked failed; nothing is retried.
pub fn run_edge(
    net: &HybridNetwork,
    cloud: impl ToSocketAddrs,
    inputs: &[(u64, Tensor)],
    labels: Option<&[usize]>,
    thresholds: &[f64],
    opts: &EdgeOptions,
) -> Result<EdgeRun> {
    if let Some(l) = labels {
        if l.len() != inputs.len() {
            return Err(Error::Config(format!("{} inputs but {} labels", inputs.len(), l.len())));
        }
    }
    let addrs: Vec<SocketAddr> = cloud.to_socket_addrs()?.collect();
    let digest = network_digest(net)?;
    let builder = TraceBuilder::new(net, &opts.energy, &opts.energy_options)?;
    let layer = u16::try_from(net.split_point()).map_err(|_| Error::Config("split point exceeds u16".into()))?;
    let mut link = LinkState::NotOpened;
    let mut stats = Stats::default();
    let mut samples = Vec::with_capacity(inputs.len());
    for (i, (id, x)) in inputs.iter().enumerate() {
        let label = labels.map(|l| l[i]);
        let activation = match gate::run_edge_gated(net, x, thresholds)? {
            EdgeOutcome::Exited(r) => {
                samples.push(EdgeSample {
                    sample_id: *id,
                    outcome: SampleOutcome::Local,
                    trace: Some(builder.from_result(*id, &r, label)),
                    decision: Some(r.decision),
                });
                continue;
            }
            EdgeOutcome::Offload { activation, .. } => activation,
        };
        if let LinkState::NotOpened = link {
            link = match Link::open(&addrs, digest, opts.max_frame) {
                Ok(l) => LinkState::Open(l),
                Err(e) => LinkState::Broken(format!("{}: {e}", e.kind())),
            };
        }
        let reply = match &mut link {
            LinkState::Open(l) => l.predict(*id, layer, activation),
            LinkState::Broken(why) => Err(Error::Protocol(why.clone())),
            LinkState::NotOpened => unreachable!(),
        };
        match reply {
            Ok((sent, class, probs)) => {
                stats.samples += 1;
                stats.feature_bytes += sent as u64;
                stats.predictions += 1;
                let probs = Tensor::new(&[probs.len()], probs)?;
                let decision = GateDecision {
                    exit: ExitPoint::Final,
                    entropy: gate::entropy(probs.data())?,
                    probs,
                    predicted: class as usize,
                };
                let trace = builder.trace(*id, ExitPoint::Final, decision.entropy, decision.predicted, label, sent as u64);
                samples.push(EdgeSample {
                    sample_id: *id,
                    outcome: SampleOutcome::Cloud,
                    decision: Some(decision),
                    trace: Some(trace),
                });
            }
            Err(e) => {
                let why = format!("{}: {e}", e.kind());
                if let LinkState::Open(_) = link {
                    link = LinkState::Broken(why.clone());
                }
                samples.push(EdgeSample {
                    sample_id: *id,
                    outcome: SampleOutcome::Failed(why),
                    decision: None,
                    trace: None,
                });
            }
        }
    }
    let cloud_stats = match link {
        LinkState::Open(l) => l.close(stats).ok(),
        _ => None,
    };
    Ok(EdgeRun {
        samples,
        edge_stats: stats,
        cloud_stats,
    })
}
