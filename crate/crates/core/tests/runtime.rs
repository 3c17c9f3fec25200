mod common;

use std::io::Write;
use std::net::{TcpListener, TcpStream};

use cdhn_core::checkpoint::network_digest;
use cdhn_core::ops;
use cdhn_core::runtime::{self, EdgeOptions, SampleOutcome, ServerOptions};
use cdhn_core::wire::{self, Message, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};
use cdhn_core::{infer_conditional, HybridNetwork, Tensor};
use common::{random, rng, tiny_config};

fn inputs(n: usize, seed: u64) -> Vec<(u64, Tensor)> {
    let mut r = rng(seed);
    (0..n as u64).map(|i| (i, random(&[1, 6, 6], &mut r).map(|v| 3.0 * v))).collect()
}

fn net(seed: u64) -> HybridNetwork {
    HybridNetwork::build(tiny_config(1, vec![2, 4]), seed).unwrap()
}

#[test]
fn open_gate_sends_nothing() {
    let n = net(1);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let run = runtime::run_edge(&n, addr, &inputs(20, 1), None, &[f64::INFINITY; 2], &EdgeOptions::default()).unwrap();
    assert_eq!(run.failures(), 0);
    assert!(run.samples.iter().all(|s| s.outcome == SampleOutcome::Local));
    assert_eq!(run.edge_stats.feature_bytes, 0);
    assert!(run.cloud_stats.is_none());
    assert!(run.traces().iter().all(|t| t.bytes_to_cloud == 0));
}

#[test]
fn split_run_matches_monolithic_inference() {
    let n = net(2);
    let server = runtime::serve_cloud(n.clone(), "127.0.0.1:0", ServerOptions::default()).unwrap();
    let xs = inputs(40, 2);
    let t = [1.9, 2.1];
    let run = runtime::run_edge(&n, server.addr(), &xs, None, &t, &EdgeOptions::default()).unwrap();
    let mut cloud = 0u64;
    for ((_, x), s) in xs.iter().zip(&run.samples) {
        let want = infer_conditional(&n, x, &t).unwrap().decision;
        let got = s.decision.as_ref().unwrap();
        assert_eq!(got.exit, want.exit);
        assert_eq!(got.predicted, want.predicted);
        cloud += u64::from(s.outcome == SampleOutcome::Cloud);
    }
    assert!(cloud > 0 && cloud < 40, "{cloud}");
    let frame = wire::features_frame_len(&n.split_shape()) as u64;
    assert_eq!(run.edge_stats.feature_bytes, cloud * frame);
    assert_eq!(run.cloud_stats, Some(run.edge_stats));
    let stats = server.shutdown();
    assert_eq!(stats.traffic, run.edge_stats);
    assert_eq!(stats.sessions_accepted, 1);
}

#[test]
fn digest_mismatch_is_refused_before_features() {
    let server = runtime::serve_cloud(net(3), "127.0.0.1:0", ServerOptions::default()).unwrap();
    let run = runtime::run_edge(&net(4), server.addr(), &inputs(3, 3), None, &[0.0; 2], &EdgeOptions::default()).unwrap();
    assert_eq!(run.failures(), 3);
    for s in &run.samples {
        let SampleOutcome::Failed(why) = &s.outcome else { panic!("{s:?}") };
        assert!(why.starts_with("protocol"), "{why}");
    }
    let stats = server.shutdown();
    assert_eq!(stats.sessions_rejected, 1);
    assert_eq!(stats.traffic.samples, 0);
    assert_eq!(stats.traffic.feature_bytes, 0);
}

#[test]
fn features_before_hello_ends_session() {
    let n = net(5);
    let server = runtime::serve_cloud(n.clone(), "127.0.0.1:0", ServerOptions::default()).unwrap();
    let mut s = TcpStream::connect(server.addr()).unwrap();
    let act = Tensor::zeros(&n.split_shape());
    wire::write_message(&mut s, &Message::Features { sample_id: 1, layer: 4, tensor: act }).unwrap();
    let reply = wire::read_message(&mut s, DEFAULT_MAX_FRAME).unwrap().map(|(m, _)| m);
    assert_eq!(reply, Some(Message::Bye));
    drop(s);
    let stats = server.shutdown();
    assert_eq!(stats.sessions_failed, 1);
    assert!(stats.errors[0].starts_with("protocol"), "{:?}", stats.errors);
    assert!(stats.errors[0].contains("before HELLO"), "{:?}", stats.errors);
    assert_eq!(stats.traffic.predictions, 0);
}

/// A cloud that answers `answer` FEATURES frames and then drops the connection.
fn flaky_cloud(n: HybridNetwork, answer: usize) -> (std::net::SocketAddr, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let digest = network_digest(&n).unwrap();
    let h = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let _ = wire::read_message(&mut s, DEFAULT_MAX_FRAME).unwrap();
        wire::write_message(&mut s, &Message::Hello { version: PROTOCOL_VERSION, digest }).unwrap();
        for _ in 0..answer {
            let Some((Message::Features { sample_id, tensor, .. }, _)) = wire::read_message(&mut s, DEFAULT_MAX_FRAME).unwrap() else {
                panic!("expected FEATURES");
            };
            let z = n.forward_cloud(&tensor).unwrap();
            let reply = Message::Prediction { sample_id, class: z.argmax() as u16, probs: ops::softmax(z.data()) };
            wire::write_message(&mut s, &reply).unwrap();
        }
        s.flush().unwrap();
    });
    (addr, h)
}

#[test]
fn cloud_loss_mid_batch_keeps_local_answers() {
    let n = net(6);
    let xs = inputs(40, 6);
    let t = [1.9, 2.1];
    let want: Vec<_> = xs.iter().map(|(_, x)| infer_conditional(&n, x, &t).unwrap().decision).collect();
    assert!(want.iter().filter(|d| !d.exit.is_early()).count() >= 4);
    let (addr, h) = flaky_cloud(n.clone(), 2);
    let run = runtime::run_edge(&n, addr, &xs, None, &t, &EdgeOptions::default()).unwrap();
    h.join().unwrap();

    let mut answered = 0;
    for (s, w) in run.samples.iter().zip(&want) {
        if w.exit.is_early() {
            assert_eq!(s.outcome, SampleOutcome::Local);
            assert_eq!(s.decision.as_ref().unwrap(), w);
        } else if answered < 2 {
            assert_eq!(s.outcome, SampleOutcome::Cloud);
            assert_eq!(s.decision.as_ref().unwrap().predicted, w.predicted);
            answered += 1;
        } else {
            assert!(matches!(s.outcome, SampleOutcome::Failed(_)), "{s:?}");
            assert!(s.decision.is_none() && s.trace.is_none());
        }
    }
    assert_eq!(run.failures(), want.iter().filter(|d| !d.exit.is_early()).count() - 2);
    assert_eq!(run.edge_stats.predictions, 2);
    assert!(run.cloud_stats.is_none());
}

#[test]
fn unreachable_cloud_fails_only_offloaded_samples() {
    let n = net(7);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let xs = inputs(30, 7);
    let t = [1.9, 2.1];
    let run = runtime::run_edge(&n, addr, &xs, None, &t, &EdgeOptions::default()).unwrap();
    for ((_, x), s) in xs.iter().zip(&run.samples) {
        let early = infer_conditional(&n, x, &t).unwrap().decision.exit.is_early();
        assert_eq!(early, s.outcome == SampleOutcome::Local);
        assert_eq!(!early, matches!(s.outcome, SampleOutcome::Failed(_)));
    }
}

#[test]
fn label_count_mismatch_is_config_error() {
    let n = net(8);
    let err = runtime::run_edge(&n, "127.0.0.1:1", &inputs(3, 0), Some(&[1, 2]), &[0.0; 2], &EdgeOptions::default());
    assert!(matches!(err, Err(cdhn_core::Error::Config(_))));
}
