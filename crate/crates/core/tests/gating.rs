mod common;

use cdhn_core::energy::{EnergyOptions, EnergyTable};
use cdhn_core::gate::{self, entropy, ExitPoint, ExitScores, TraceBuilder};
use cdhn_core::train;
use cdhn_core::{infer_conditional, Error, HybridNetwork, Tensor};
use common::{random, rng, tiny_config};
use proptest::prelude::*;

fn samples(n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| random(&[1, 6, 6], &mut r).map(|v| 3.0 * v)).collect()
}

fn batched(xs: &[Tensor]) -> Tensor {
    let data: Vec<f32> = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
    Tensor::new(&[xs.len(), 1, 6, 6], data).unwrap()
}

fn poison_after(net: &mut HybridNetwork, layer: usize) {
    for b in net.blocks.iter_mut().skip(layer - 1) {
        b.conv.value = b.conv.value.map(|_| f32::NAN);
    }
    net.final_head.weight.value = net.final_head.weight.value.map(|_| f32::NAN);
}

#[test]
fn entropy_reference_values() {
    assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    assert!((entropy(&[0.1; 10]).unwrap() - std::f64::consts::LN_10).abs() < 1e-6);
    assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325083).abs() < 1e-6);
    assert!(matches!(entropy(&[1.2, -0.2]), Err(Error::Domain(_))));
    assert!(matches!(entropy(&[0.5, 0.4]), Err(Error::Domain(_))));
}

#[test]
fn fired_exit_skips_later_layers() {
    let mut net = HybridNetwork::build(tiny_config(32, vec![2, 3]), 5).unwrap();
    let xs = samples(10, 1);
    let clean: Vec<_> = xs.iter().map(|x| infer_conditional(&net, x, &[f64::INFINITY, 0.0]).unwrap()).collect();
    poison_after(&mut net, 2);
    for (x, want) in xs.iter().zip(&clean) {
        let got = infer_conditional(&net, x, &[f64::INFINITY, 0.0]).unwrap();
        assert_eq!(&got, want);
        assert_eq!(got.decision.exit, ExitPoint::Early(0));
        assert_eq!((got.layers_executed, got.exits_evaluated), (2, 1));
    }
    assert!(infer_conditional(&net, &xs[0], &[0.0, 0.0]).is_err());
}

#[test]
fn second_exit_fires_after_first_declines() {
    let mut net = HybridNetwork::build(tiny_config(32, vec![2, 3]), 5).unwrap();
    poison_after(&mut net, 3);
    for x in samples(5, 2) {
        let r = infer_conditional(&net, &x, &[0.0, f64::INFINITY]).unwrap();
        assert_eq!(r.decision.exit, ExitPoint::Early(1));
        assert_eq!((r.layers_executed, r.exits_evaluated), (3, 2));
    }
}

#[test]
fn closed_gate_runs_whole_network() {
    let net = HybridNetwork::build(tiny_config(1, vec![2, 4]), 3).unwrap();
    for x in samples(10, 3) {
        let r = infer_conditional(&net, &x, &[0.0, 0.0]).unwrap();
        assert_eq!(r.decision.exit, ExitPoint::Final);
        assert_eq!((r.layers_executed, r.exits_evaluated), (7, 2));
    }
}

#[test]
fn gated_prediction_matches_ungated_exit() {
    let net = HybridNetwork::build(tiny_config(2, vec![2, 4]), 8).unwrap();
    let xs = samples(30, 4);
    let all = net.forward_all_exits(&batched(&xs)).unwrap();
    let scores = gate::scores_from_batch(&all).unwrap();
    for t in [0.0, 1.5, 2.0, 2.2, f64::INFINITY] {
        for (i, x) in xs.iter().enumerate() {
            let r = infer_conditional(&net, x, &[t, t]).unwrap();
            let k = r.decision.exit.index(2);
            assert_eq!(r.decision.exit, scores[i].decide(&[t, t]));
            assert_eq!(r.decision.predicted, scores[i].predictions[k]);
            assert!((r.decision.entropy - scores[i].entropies[k]).abs() < 1e-4);
            let row = &all[k].data()[i * 10..(i + 1) * 10];
            let best = (0..10).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(r.decision.predicted, best);
        }
    }
}

#[test]
fn statistics_partition_and_edge_cases() {
    let net = HybridNetwork::build(tiny_config(1, vec![3]), 2).unwrap();
    let xs = samples(20, 5);
    let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
    let builder = TraceBuilder::new(&net, &EnergyTable::default(), &EnergyOptions::default()).unwrap();
    let run = |t: f64| {
        let traces: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| builder.from_result(i as u64, &infer_conditional(&net, x, &[t]).unwrap(), Some(labels[i])))
            .collect();
        (gate::gate_statistics(&traces, &labels, 1).unwrap(), traces)
    };

    let (closed, traces) = run(0.0);
    assert_eq!(closed.edge_fraction, 0.0);
    let final_acc = train::evaluate(&net, &cdhn_core::Dataset::new(batched(&xs), labels.clone(), 10).unwrap()).unwrap()[1];
    assert_eq!(closed.accuracy, final_acc);
    assert!(traces.iter().all(|t| t.bytes_to_cloud == builder.offload_bytes()));

    let (open, traces) = run(f64::INFINITY);
    assert_eq!(open.exit_fraction, vec![1.0, 0.0]);
    assert!(traces.iter().all(|t| t.bytes_to_cloud == 0));

    for t in [0.5, 1.0, 2.0] {
        let (s, _) = run(t);
        assert!((s.exit_fraction.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(gate::gate_statistics(&traces, &labels[..3], 1).is_err());
    assert!(gate::gate_statistics(&[], &[], 1).is_err());
}

#[test]
fn threshold_count_must_match_exits() {
    let net = HybridNetwork::build(tiny_config(1, vec![2, 3]), 2).unwrap();
    let x = &samples(1, 0)[0];
    assert!(matches!(infer_conditional(&net, x, &[0.5]), Err(Error::Config(_))));
}

#[test]
fn trace_rows_round_trip() {
    let net = HybridNetwork::build(tiny_config(1, vec![2]), 2).unwrap();
    let builder = TraceBuilder::new(&net, &EnergyTable::default(), &EnergyOptions::default()).unwrap();
    let traces: Vec<_> = samples(6, 7)
        .iter()
        .enumerate()
        .map(|(i, x)| builder.from_result(i as u64, &infer_conditional(&net, x, &[2.0]).unwrap(), Some(i % 10)))
        .collect();
    let mut buf = Vec::new();
    gate::write_traces(&mut buf, &traces, 1).unwrap();
    let rows = gate::read_traces(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), 6);
    for (t, r) in traces.iter().zip(&rows) {
        assert_eq!(r.exit_index, t.exit.index(1));
        assert_eq!(r.predicted, t.predicted);
        assert_eq!(r.bytes_to_cloud, t.bytes_to_cloud);
        assert!((r.energy_pj - t.energy.total()).abs() < 1e-3);
    }
    assert!(gate::read_traces("sample_id,exit\n".as_bytes()).is_err());
}

fn probs_strategy() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..10.0, 2..40).prop_filter_map("non-zero mass", |w| {
        let s: f32 = w.iter().sum();
        (s > 1e-3).then(|| w.iter().map(|v| v / s).collect())
    })
}

proptest! {
    #[test]
    fn entropy_within_bounds(p in probs_strategy()) {
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-6);
    }

    #[test]
    fn exit_fraction_monotone_in_threshold(
        ents in prop::collection::vec(prop::collection::vec(0.0f64..2.3, 3), 1..50),
        a in 0.0f64..2.5,
        b in 0.0f64..2.5,
        other in 0.0f64..2.5,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let scores: Vec<ExitScores> = ents
            .iter()
            .map(|e| ExitScores { entropies: e.clone(), predictions: vec![0; 3] })
            .collect();
        let early = |t: [f64; 2]| scores.iter().filter(|s| s.decide(&t).is_early()).count();
        prop_assert!(early([lo, other]) <= early([hi, other]));
        prop_assert!(early([other, lo]) <= early([other, hi]));
    }
}
