use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Tokenizer;
use crate::lm::TransformerConfig;
use crate::prompting::{extend_vocabulary, Pattern};

fn toy(seed: u64) -> (ModelParams<f64>, Verbalizer) {
    let words: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
    let mut tok = Tokenizer::whitespace(words).unwrap();
    let config = TransformerConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: tok.len(),
        max_positions: 24,
        float_width: 64,
    };
    let model = ModelParams::<f64>::init_random(&config, seed).unwrap();
    let labels: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
    extend_vocabulary(&model, &mut tok, &labels, seed).unwrap()
}

fn examples(vb: &Verbalizer, n: usize, seed: u64) -> Vec<PromptExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<usize> = (0..rng.random_range(2..6)).map(|_| rng.random_range(0..6)).collect();
            let s = [x[rng.random_range(0..x.len())]];
            PromptExample {
                pattern: Pattern::build(&x, &s, None, vb.sep, vb.eos).unwrap(),
                target: s[0] % 3,
            }
        })
        .collect()
}

fn gates_from(values: Vec<f64>, l: usize, h: usize, k: usize) -> GateParams<f64> {
    GateParams::from_logits(Tensor::from_vec(l, h, values), k, TemperatureSchedule::default()).unwrap()
}

#[test]
fn keeping_every_head_gives_all_ones() {
    let gates = gates_from(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1], 3, 2, 6);
    for mode in [MaskMode::Soft, MaskMode::Hard] {
        for seed in [None, Some(4)] {
            let m = sample_mask(&gates, mode, 0.5, seed).unwrap();
            assert!(m.values().iter().all(|&v| v == 1.0));
        }
    }
}

#[test]
fn unique_maximum_with_one_head() {
    let gates = gates_from(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1], 3, 2, 1);
    let m = sample_mask(&gates, MaskMode::Hard, 1.0, None).unwrap();
    assert_eq!(m.kept(), vec![(1, 0)]);
    let p = essential_partition(&gates, 1).unwrap();
    assert_eq!(p.essential, vec![(1, 0)]);
}

#[test]
fn soft_mask_anneals_to_the_hard_mask() {
    let gates = gates_from(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1], 3, 2, 3);
    let hard = sample_mask(&gates, MaskMode::Hard, 1e-3, None).unwrap();
    let soft = sample_mask(&gates, MaskMode::Soft, 1e-3, None).unwrap();
    for (s, h) in soft.values().iter().zip(hard.values()) {
        assert!((s - h).abs() <= 1e-3, "{s} vs {h}");
    }
    let warm = sample_mask(&gates, MaskMode::Soft, 1.0, None).unwrap();
    assert!(warm.values().iter().any(|&v| v > 0.05 && v < 0.95));
}

#[test]
fn every_sampled_hard_mask_keeps_exactly_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let temps = [1.0, 0.5, 0.1, 0.01];
    for i in 0..10_000u64 {
        let k = rng.random_range(1..=12);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gates = gates_from(logits, 4, 3, k);
        let m = sample_mask(&gates, MaskMode::Hard, temps[i as usize % 4], Some(i)).unwrap();
        assert_eq!(m.count_ones(), k);
        assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn invalid_k_and_temperature_are_rejected() {
    let t = Tensor::<f64>::zeros(2, 2);
    assert!(GateParams::from_logits(t.clone(), 0, TemperatureSchedule::default()).is_err());
    assert!(GateParams::from_logits(t.clone(), 5, TemperatureSchedule::default()).is_err());
    let gates = GateParams::from_logits(t, 2, TemperatureSchedule::default()).unwrap();
    assert!(sample_mask(&gates, MaskMode::Soft, 0.0, None).is_err());
    assert!(essential_partition(&gates, 7).is_err());
    let bad = TemperatureSchedule { start: 1.0, end: -0.1, steps: 3 };
    assert!(bad.validate().is_err());
}

#[test]
fn temperature_schedule_is_geometric() {
    let s = TemperatureSchedule { start: 1.0, end: 0.1, steps: 11 };
    assert_eq!(s.at(0), 1.0);
    assert!((s.at(10) - 0.1).abs() < 1e-12);
    assert!((s.at(5) - 0.1f64.sqrt()).abs() < 1e-12);
    assert!((s.at(50) - 0.1).abs() < 1e-12);
}

#[test]
fn gate_logit_gradients_match_finite_differences() {
    let (model, vb) = toy(2);
    let ex = &examples(&vb, 1, 5)[0];
    let prefix = PrefixParams::<f64>::init(&model.config, 2, 0.5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gates = gates_from(logits, 3, 2, 3);
    let noise = gumbel_noise(6, 9);
    let run = |g: &GateParams<f64>, p: &PrefixParams<f64>| {
        joint_loss_and_grads(&model, p, g, ex, &vb, &noise, 0.7, false, LossScope::Vocabulary).unwrap()
    };
    let (_, grads) = run(&gates, &prefix);
    let gate_grad = grads.last().unwrap();
    let n_prefix = grads.len() - 1;
    let h = 1e-5;
    for _ in 0..50 {
        let j = rng.random_range(0..6);
        let eval = |delta: f64| {
            let mut g = gates.clone();
            g.logits.data_mut()[j] += delta;
            run(&g, &prefix).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = gate_grad.data()[j];
        let scale = numeric.abs().max(analytic.abs()).max(1e-4);
        assert!((numeric - analytic).abs() / scale <= 1e-5, "gate {j}: {numeric} vs {analytic}");
    }
    for _ in 0..50 {
        let ti = rng.random_range(0..n_prefix);
        let j = rng.random_range(0..grads[ti].len());
        let eval = |delta: f64| {
            let mut p = prefix.clone();
            p.tensors_mut()[ti].data_mut()[j] += delta;
            run(&gates, &p).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads[ti].data()[j];
        let scale = numeric.abs().max(analytic.abs()).max(1e-4);
        assert!((numeric - analytic).abs() / scale <= 1e-5, "prefix: {numeric} vs {analytic}");
    }
}

#[test]
fn straight_through_forward_uses_the_hard_mask() {
    let (model, vb) = toy(3);
    let ex = &examples(&vb, 1, 2)[0];
    let prefix = PrefixParams::<f64>::init(&model.config, 2, 0.5, 1);
    let gates = gates_from(vec![1.0, -1.0, 0.5, 0.2, -0.3, 2.0], 3, 2, 3);
    let noise = vec![0.0; 6];
    let (st, st_grads) =
        joint_loss_and_grads(&model, &prefix, &gates, ex, &vb, &noise, 0.5, true, LossScope::Vocabulary).unwrap();
    let hard = sample_mask(&gates, MaskMode::Hard, 0.5, None).unwrap();
    let want = crate::prompting::prefix_loss_and_grads(&model, &prefix, ex, &vb, Some(&hard), LossScope::Vocabulary)
        .unwrap()
        .0;
    assert!((st - want).abs() < 1e-12);
    assert!(st_grads.last().unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn partition_on_a_full_size_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<f64> = (0..144).map(|_| rng.random_range(-2.0..2.0)).collect();
    let gates = gates_from(logits.clone(), 12, 12, 96);
    let p = essential_partition(&gates, 96).unwrap();
    assert_eq!(p.k(), 96);
    assert_eq!(p.non_essential().len(), 48);
    let mut min_kept = f64::INFINITY;
    for &(l, h) in &p.essential {
        min_kept = min_kept.min(logits[l * 12 + h]);
    }
    for &(l, h) in &p.non_essential() {
        assert!(logits[l * 12 + h] <= min_kept);
    }
    // Shifting every logit by a constant changes nothing.
    let shifted = gates_from(logits.iter().map(|v| v + 3.5).collect(), 12, 12, 96);
    assert_eq!(essential_partition(&shifted, 96).unwrap(), p);
    let flat = gates_from(vec![0.0; 144], 12, 12, 1);
    assert_eq!(essential_partition(&flat, 1).unwrap().essential, vec![(0, 0)]);
    assert_eq!(essential_partition(&flat, 13).unwrap().layer_counts()[..2], [12, 1]);
}

#[test]
fn masks_of_a_partition_are_complements() {
    let p = HeadPartition::new(3, 2, vec![(2, 1), (0, 0), (1, 1)]).unwrap();
    assert_eq!(p.essential, vec![(0, 0), (1, 1), (2, 1)]);
    let (e, n) = (p.essential_mask(), p.non_essential_mask());
    assert_eq!(e.complement(), n);
    for (a, b) in e.values().iter().zip(n.values()) {
        assert_eq!(a + b, 1.0);
    }
    assert_eq!(p.layer_counts(), vec![1, 1, 1]);
    assert!(HeadPartition::new(3, 2, vec![(0, 0), (0, 0)]).is_err());
    assert!(HeadPartition::new(3, 2, vec![(3, 0)]).is_err());
}

#[test]
fn partition_file_round_trip() {
    let p = HeadPartition::new(4, 3, vec![(0, 0), (0, 2), (3, 1)]).unwrap();
    let file = p.to_file("entity", &[1, 2, 3]);
    let json = serde_json::to_string(&file).unwrap();
    assert_eq!(json, r#"{"task":"entity","K":3,"essential":[[1,1],[1,3],[4,2]],"seeds":[1,2,3]}"#);
    let back: PartitionFile = serde_json::from_str(&json).unwrap();
    assert_eq!(HeadPartition::from_file(&back, 4, 3).unwrap(), p);
    let zero: PartitionFile = serde_json::from_str(r#"{"task":"t","K":1,"essential":[[0,1]],"seeds":[]}"#).unwrap();
    assert!(HeadPartition::from_file(&zero, 4, 3).is_err());
    let short: PartitionFile = serde_json::from_str(r#"{"task":"t","K":2,"essential":[[1,1]],"seeds":[]}"#).unwrap();
    assert!(HeadPartition::from_file(&short, 4, 3).is_err());
    assert!(serde_json::from_str::<PartitionFile>(r#"{"task":"t","K":1,"essential":[[1,1]],"seeds":[],"x":0}"#).is_err());
}

#[test]
fn joint_training_is_deterministic_and_leaves_the_model_alone() {
    let (model, vb) = toy(4);
    let exs = examples(&vb, 12, 1);
    let fingerprint = model.fingerprint();
    let config = JointTrainConfig {
        prefix: PrefixTrainConfig {
            prefix_len: 2,
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        },
        gates: GateTrainConfig {
            k: 3,
            gate_lr: 1e-1,
            ..Default::default()
        },
    };
    let a = train_joint(&model, &exs, &vb, &config, 7).unwrap();
    let b = train_joint(&model, &exs, &vb, &config, 7).unwrap();
    assert_eq!(model.fingerprint(), fingerprint);
    assert_eq!(a.prefix, b.prefix);
    assert_eq!(a.gates.logits, b.gates.logits);
    assert_eq!(a.step_masks, b.step_masks);
    assert_eq!(a.step_masks.len(), 6);
    assert!(a.step_masks.iter().all(|m| m.len() == 3));
    assert_ne!(a.gates.logits, Tensor::zeros(3, 2));
    assert!(train_joint(&model, &[], &vb, &config, 7).is_err());
    let mut bad = config;
    bad.gates.k = 7;
    assert!(train_joint(&model, &exs, &vb, &bad, 7).is_err());
}

proptest! {
    #[test]
    fn soft_weights_are_bounded_and_sum_to_k(
        logits in prop::collection::vec(-5.0f64..5.0, 2..20),
        k_frac in 0.0f64..1.0,
        temperature in 0.01f64..3.0,
        seed in 0u64..1000,
    ) {
        let n = logits.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let gates = gates_from(logits, 1, n, k);
        let m = sample_mask(&gates, MaskMode::Soft, temperature, Some(seed)).unwrap();
        prop_assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((m.values().iter().sum::<f64>() - k as f64).abs() < 1e-6);
    }
}

fn probe_setup(kind: ProbeKind, seed: u64) -> (ModelParams<f64>, Dataset, ProbeParams<f64>) {
    let task = crate::data::synthetic::generate_synthetic(
        &crate::data::synthetic::SyntheticConfig {
            n_classes: 3,
            words_per_class: 3,
            corpus_sentences: 10,
            probe_examples: 24,
            max_len: 6,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let config = TransformerConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: task.tokenizer.len(),
        max_positions: 16,
        float_width: 64,
    };
    let model = ModelParams::<f64>::init_random(&config, seed).unwrap();
    let pc = ProbeConfig {
        projection_dim: 4,
        hidden_dim: 5,
        ..Default::default()
    };
    let mut probe = ProbeParams::init(kind, 3, 8, 1, task.dataset.labels.clone(), &pc, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in probe.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    (model, task.dataset, probe)
}

#[test]
fn joint_probe_gradients_match_finite_differences() {
    for kind in [ProbeKind::Mlp, ProbeKind::Lr] {
        let (model, ds, probe) = probe_setup(kind, 3);
        let ex = &ds.examples[0];
        let target = ds.label_index(&ex.label).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gates = gates_from((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), 3, 2, 4);
        let noise = gumbel_noise(6, 2);
        let run = |p: &ProbeParams<f64>, g: &GateParams<f64>| {
            joint_probe_loss_and_grads(&model, p, g, ex, target, &noise, 0.6, false).unwrap()
        };
        let (_, grads) = run(&probe, &gates);
        let n_probe = probe.tensors().len();
        assert_eq!(grads.len(), n_probe + 1);
        let h = 1e-5;
        for _ in 0..50 {
            let j = rng.random_range(0..6);
            let eval = |d: f64| {
                let mut g = gates.clone();
                g.logits.data_mut()[j] += d;
                run(&probe, &g).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[n_probe].data()[j];
            let scale = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!((numeric - analytic).abs() / scale <= 1e-5, "{kind:?} gate {j}: {numeric} vs {analytic}");
        }
        for _ in 0..50 {
            let ti = rng.random_range(0..n_probe);
            let j = rng.random_range(0..grads[ti].len());
            let eval = |d: f64| {
                let mut p = probe.clone();
                p.tensors_mut()[ti].data_mut()[j] += d;
                run(&p, &gates).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[ti].data()[j];
            let scale = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!((numeric - analytic).abs() / scale <= 1e-5, "{kind:?} probe {ti}/{j}: {numeric} vs {analytic}");
        }
    }
}

#[test]
fn keeping_every_head_matches_the_plain_probe_loss() {
    let (model, ds, probe) = probe_setup(ProbeKind::Mlp, 5);
    let gates = gates_from(vec![0.0; 6], 3, 2, 6);
    for ex in &ds.examples[..5] {
        let target = ds.label_index(&ex.label).unwrap();
        let (joint, _) = joint_probe_loss_and_grads(&model, &probe, &gates, ex, target, &[0.0; 6], 0.5, false).unwrap();
        let feats = crate::diagnostic::span_features(ProbeKind::Mlp, &model, ex).unwrap();
        let (plain, _) = crate::diagnostic::probe_loss_and_grads(&probe, &feats, target).unwrap();
        assert!((joint - plain).abs() <= 1e-12 * plain.abs().max(1.0), "{joint} vs {plain}");
    }
}

#[test]
fn joint_probe_training_is_deterministic() {
    let (model, ds, _) = probe_setup(ProbeKind::Lr, 2);
    let fingerprint = model.fingerprint();
    let pc = ProbeConfig {
        projection_dim: 4,
        hidden_dim: 5,
        batch_size: 8,
        epochs: 2,
        ..Default::default()
    };
    let gc = GateTrainConfig {
        k: 2,
        ..Default::default()
    };
    let a = train_joint_probe(ProbeKind::Lr, &model, &ds, &pc, &gc, 9).unwrap();
    let b = train_joint_probe(ProbeKind::Lr, &model, &ds, &pc, &gc, 9).unwrap();
    assert_eq!(model.fingerprint(), fingerprint);
    assert_eq!(a.probe, b.probe);
    assert_eq!(a.gates.logits, b.gates.logits);
    assert_eq!(a.step_masks.len(), 6);
    assert!(a.step_masks.iter().all(|m| m.len() == 2));
    let bad = GateTrainConfig { k: 0, ..gc };
    assert!(train_joint_probe(ProbeKind::Lr, &model, &ds, &pc, &bad, 9).is_err());
}
