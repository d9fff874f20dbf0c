use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
use crate::lm::TransformerConfig;
use crate::tensor::DType;

fn toy_config(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: vocab,
        max_positions: 24,
        float_width: 64,
    }
}

fn small_task(seed: u64) -> crate::data::synthetic::SyntheticTask {
    let config = SyntheticConfig {
        n_classes: 3,
        words_per_class: 4,
        skew: 0.5,
        corpus_sentences: 10,
        probe_examples: 100,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&config, seed).unwrap()
}

fn small_probe_config() -> ProbeConfig {
    ProbeConfig {
        projection_dim: 4,
        hidden_dim: 6,
        ..ProbeConfig::default()
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("y{i}")).collect()
}

/// Moves every probe parameter off its initial value so zero scorers and
/// zero biases do not hide bugs.
fn jitter(probe: &mut ProbeParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in probe.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

fn random_trace(layers: usize, rows: usize, cols: usize, seed: u64) -> ActivationTrace<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActivationTrace {
        layers: (0..=layers).map(|_| Tensor::randn(rows, cols, 1.0, &mut rng)).collect(),
        final_logits: vec![],
    }
}

#[test]
fn one_hot_mix_reproduces_the_selected_layer() {
    let task = small_task(1);
    let model = ModelParams::<f64>::init_random(&toy_config(task.tokenizer.len()), 4).unwrap();
    let tr = trace(&model, &task.dataset.examples[0].tokens, None, None).unwrap();
    for l in 1..=3 {
        let mut w = vec![0.0; 3];
        w[l - 1] = 1.0;
        assert_eq!(scalar_mix(&tr, &w).unwrap(), tr.layers[l]);
    }
    let f32_model = ModelParams::<f32>::init_random(&toy_config(task.tokenizer.len()), 4).unwrap();
    let tr = trace(&f32_model, &task.dataset.examples[0].tokens, None, None).unwrap();
    assert_eq!(scalar_mix(&tr, &[0.0, 1.0, 0.0]).unwrap(), tr.layers[2]);
}

#[test]
fn uniform_mix_is_the_layer_mean() {
    let tr = random_trace(4, 5, 3, 2);
    let mixed = scalar_mix(&tr, &[0.25; 4]).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mean: f64 = tr.layers[1..].iter().map(|a| a.get(i, j)).sum::<f64>() / 4.0;
            assert!((mixed.get(i, j) - mean).abs() < 1e-12);
        }
    }
    assert!(scalar_mix(&tr, &[0.5; 2]).is_err());
}

proptest! {
    #[test]
    fn mix_stays_inside_the_layer_range(logits in prop::collection::vec(-4.0f64..4.0, 3), seed in 0u64..1000) {
        let tr = random_trace(3, 4, 2, seed);
        let w = softmax(&logits);
        let mixed = scalar_mix(&tr, &w).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let vals: Vec<f64> = tr.layers[1..].iter().map(|a| a.get(i, j)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mixed.get(i, j) >= lo - 1e-12 && mixed.get(i, j) <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn pooling_edge_cases() {
    let reps = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]);
    assert_eq!(pool_span(&reps, Span::new(1, 2), &[9.0, -3.0]).unwrap(), vec![3.0, -1.0]);
    let mean = pool_span(&reps, Span::new(0, 3), &[0.0, 0.0]).unwrap();
    assert!((mean[0] - 1.5).abs() < 1e-12 && (mean[1] - 0.5).abs() < 1e-12);
    let same = Tensor::<f64>::from_rows(&vec![vec![0.3, -0.7]; 4]);
    let pooled = pool_span(&same, Span::new(0, 4), &[2.0, 5.0]).unwrap();
    assert!((pooled[0] - 0.3).abs() < 1e-12 && (pooled[1] + 0.7).abs() < 1e-12);
    // A steep scorer picks the highest-scoring row.
    let sharp = pool_span(&reps, Span::new(0, 3), &[100.0, 0.0]).unwrap();
    assert!((sharp[0] - 3.0).abs() < 1e-9);
    assert!(pool_span(&reps, Span::new(2, 4), &[0.0, 0.0]).is_err());
    assert!(pool_span(&reps, Span::new(0, 1), &[0.0]).is_err());
}

fn finite_difference_check(kind: ProbeKind, n_spans: usize, seed: u64) {
    let tr = random_trace(3, 7, 8, seed);
    let spans = [Span::new(1, 4), Span::new(4, 6)];
    let feats = features_from_trace(kind, &tr, &spans[..n_spans]).unwrap();
    let mut probe = ProbeParams::<f64>::init(kind, 3, 8, n_spans, labels(3), &small_probe_config(), seed).unwrap();
    jitter(&mut probe, seed + 1);
    let (_, grads) = probe_loss_and_grads(&probe, &feats, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let h = 1e-5;
    let names: Vec<String> = probe.named_tensors().into_iter().map(|(n, _)| n).collect();
    // Mix logits, pooling vectors, and the remaining weights each get 50 draws.
    let groups: Vec<Vec<usize>> = vec![
        (0..names.len()).filter(|&i| names[i] == "mix.logits").collect(),
        (0..names.len()).filter(|&i| names[i].starts_with("pool.")).collect(),
        (0..names.len()).filter(|&i| names[i].contains("weight") || names[i].contains("bias")).collect(),
    ];
    for group in groups.iter().filter(|g| !g.is_empty()) {
        for _ in 0..50 {
            let ti = group[rng.random_range(0..group.len())];
            let j = rng.random_range(0..grads[ti].len());
            let eval = |delta: f64| {
                let mut p = probe.clone();
                p.tensors_mut()[ti].data_mut()[j] += delta;
                probe_loss_and_grads(&p, &feats, 2).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[ti].data()[j];
            let scale = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (numeric - analytic).abs() / scale <= 1e-5,
                "{} [{j}]: {numeric} vs {analytic}",
                names[ti]
            );
        }
    }
}

#[test]
fn mlp_probe_gradients_match_finite_differences() {
    finite_difference_check(ProbeKind::Mlp, 1, 3);
    finite_difference_check(ProbeKind::Mlp, 2, 4);
}

#[test]
fn linear_probe_gradients_match_finite_differences() {
    finite_difference_check(ProbeKind::Lr, 2, 5);
}

#[test]
fn graph_loss_agrees_with_direct_logits() {
    let tr = random_trace(3, 6, 8, 9);
    let feats = features_from_trace(ProbeKind::Mlp, &tr, &[Span::new(0, 3), Span::new(3, 6)]).unwrap();
    let mut probe = ProbeParams::<f64>::init(ProbeKind::Mlp, 3, 8, 2, labels(4), &small_probe_config(), 1).unwrap();
    jitter(&mut probe, 2);
    let logits = probe_logits(&probe, &feats).unwrap();
    let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
    for t in 0..4 {
        let (loss, _) = probe_loss_and_grads(&probe, &feats, t).unwrap();
        assert!((loss - (lse - logits[t])).abs() < 1e-12);
    }
    assert!(probe_loss_and_grads(&probe, &feats, 4).is_err());
}

/// Straight-line recomputation of the MLP probe from the model's hidden states.
fn brute_force_logits(probe: &ProbeParams<f64>, tr: &ActivationTrace<f64>, span: Span) -> Vec<f64> {
    let z: Vec<f64> = probe.mix_logits.as_ref().unwrap().data().to_vec();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let w: Vec<f64> = e.iter().map(|v| v / e.iter().sum::<f64>()).collect();
    let proj = probe.projection.as_ref().unwrap();
    let p = proj.weight.cols();
    let mut rows = Vec::new();
    for i in span.start..span.end {
        let d = tr.layers[1].cols();
        let mut r = vec![0.0; d];
        for (l, wl) in w.iter().enumerate() {
            for (k, rk) in r.iter_mut().enumerate() {
                *rk += wl * tr.layers[l + 1].get(i, k);
            }
        }
        let mut y = vec![0.0; p];
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = proj.bias.data()[o] + (0..d).map(|k| r[k] * proj.weight.get(k, o)).sum::<f64>();
        }
        rows.push(y);
    }
    let scorer = probe.scorers[0].data();
    let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(scorer).map(|(a, b)| a * b).sum()).collect();
    let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - smax).exp()).collect();
    let total: f64 = ex.iter().sum();
    let mut pooled = vec![0.0; p];
    for (r, a) in rows.iter().zip(&ex) {
        for (o, v) in pooled.iter_mut().zip(r) {
            *o += a / total * v;
        }
    }
    let hid = probe.hidden.as_ref().unwrap();
    let hidden: Vec<f64> = (0..hid.weight.cols())
        .map(|o| (hid.bias.data()[o] + (0..p).map(|k| pooled[k] * hid.weight.get(k, o)).sum::<f64>()).max(0.0))
        .collect();
    let out = &probe.output;
    (0..out.weight.cols())
        .map(|o| out.bias.data()[o] + hidden.iter().enumerate().map(|(k, h)| h * out.weight.get(k, o)).sum::<f64>())
        .collect()
}

#[test]
fn pipeline_matches_a_brute_force_oracle_on_100_examples() {
    let task = small_task(2);
    let model = ModelParams::<f64>::init_random(&toy_config(task.tokenizer.len()), 5).unwrap();
    let mut probe =
        ProbeParams::<f64>::init(ProbeKind::Mlp, 3, 8, 1, task.dataset.labels.clone(), &small_probe_config(), 6).unwrap();
    jitter(&mut probe, 7);
    for ex in &task.dataset.examples {
        let tr = trace(&model, &ex.tokens, None, None).unwrap();
        let want = brute_force_logits(&probe, &tr, ex.span1);
        let feats = span_features(ProbeKind::Mlp, &model, ex).unwrap();
        let got = probe_logits(&probe, &feats).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(probe_predict(&probe, &model, ex).unwrap(), argmax(&want));
    }
}

#[test]
fn linear_probe_reads_only_the_last_layer() {
    let tr = random_trace(3, 5, 8, 11);
    let feats = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(1, 3)]).unwrap();
    assert_eq!(feats.spans[0].len(), 1);
    let mut probe = ProbeParams::<f64>::init(ProbeKind::Lr, 3, 8, 1, labels(3), &small_probe_config(), 1).unwrap();
    jitter(&mut probe, 3);
    let before = probe_logits(&probe, &feats).unwrap();
    let mut altered = tr.clone();
    for l in 0..3 {
        altered.layers[l] = altered.layers[l].map(|v| v * 7.0 - 1.0);
    }
    let feats2 = features_from_trace(ProbeKind::Lr, &altered, &[Span::new(1, 3)]).unwrap();
    assert_eq!(probe_logits(&probe, &feats2).unwrap(), before);
    altered.layers[3].set(2, 0, 5.0);
    let feats3 = features_from_trace(ProbeKind::Lr, &altered, &[Span::new(1, 3)]).unwrap();
    assert_ne!(probe_logits(&probe, &feats3).unwrap(), before);
}

#[test]
fn span_order_matters_for_pairs() {
    let tr = random_trace(3, 6, 8, 12);
    let mut probe = ProbeParams::<f64>::init(ProbeKind::Lr, 3, 8, 2, labels(2), &small_probe_config(), 1).unwrap();
    // Only the first pooled vector feeds the output.
    for i in 8..16 {
        for c in 0..2 {
            probe.output.weight.set(i, c, 0.0);
        }
    }
    let ab = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(0, 2), Span::new(3, 6)]).unwrap();
    let ba = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(3, 6), Span::new(0, 2)]).unwrap();
    let only_first = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(0, 2), Span::new(0, 1)]).unwrap();
    let l_ab = probe_logits(&probe, &ab).unwrap();
    assert_ne!(l_ab, probe_logits(&probe, &ba).unwrap());
    assert_eq!(l_ab, probe_logits(&probe, &only_first).unwrap());
}

#[test]
fn bias_and_sign_decide_by_construction() {
    let tr = random_trace(2, 4, 8, 13);
    let feats = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(0, 4)]).unwrap();
    let mut probe = ProbeParams::<f64>::init(ProbeKind::Lr, 2, 8, 1, labels(4), &small_probe_config(), 1).unwrap();
    probe.output.weight = Tensor::zeros(8, 4);
    probe.output.bias = Tensor::row_vector(vec![0.1, -2.0, 3.0, 0.0]);
    assert_eq!(argmax(&probe_logits(&probe, &feats).unwrap()), 2);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut binary = ProbeParams::<f64>::init(ProbeKind::Lr, 2, 8, 1, labels(2), &small_probe_config(), 1).unwrap();
    binary.output.weight = Tensor::zeros(8, 2);
    for k in 0..8 {
        binary.output.weight.set(k, 1, rng.random_range(-1.0..1.0));
    }
    for s in 0..20 {
        let tr = random_trace(2, 3, 8, 100 + s);
        let feats = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(0, 3)]).unwrap();
        let pooled = pool_span(&feats.spans[0][0], Span::new(0, 3), binary.scorers[0].data()).unwrap();
        let score: f64 = pooled.iter().enumerate().map(|(k, v)| v * binary.output.weight.get(k, 1)).sum();
        let want = usize::from(score > 0.0);
        assert_eq!(argmax(&probe_logits(&binary, &feats).unwrap()), want);
    }
}

#[test]
fn linear_probe_separates_separable_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for i in 0..300 {
        let c = i % 3;
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                (0..6)
                    .map(|k| if k == c { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
                    .collect()
            })
            .collect();
        feats.push(SpanFeatures {
            spans: vec![vec![Tensor::from_rows(&rows)]],
        });
        targets.push(c);
    }
    let config = ProbeConfig {
        optimizer: AdamConfig::with_lr(5e-2),
        epochs: 3,
        ..small_probe_config()
    };
    let probe = ProbeParams::<f64>::init(ProbeKind::Lr, 1, 6, 1, labels(3), &config, 2).unwrap();
    let (probe, log) = train_on_features(probe, &feats, &targets, &config, 2).unwrap();
    let preds = probe_predict_all(&probe, &feats).unwrap();
    let correct = preds.iter().zip(&targets).filter(|(a, b)| a == b).count();
    assert!(correct >= 297, "{correct}/300");
    assert!(log.batch_losses.last().unwrap() < &log.batch_losses[0]);
}

#[test]
fn training_leaves_the_model_alone_and_is_deterministic() {
    let task = small_task(3);
    let model = ModelParams::<f64>::init_random(&toy_config(task.tokenizer.len()), 1).unwrap();
    let fingerprint = model.fingerprint();
    let config = small_probe_config();
    let (a, _) = train_probe(ProbeKind::Mlp, &model, &task.dataset, &config, 4).unwrap();
    let (b, _) = train_probe(ProbeKind::Mlp, &model, &task.dataset, &config, 4).unwrap();
    assert_eq!(model.fingerprint(), fingerprint);
    assert_eq!(a, b);
    let acc = probe_accuracy(&a, &model, &task.dataset).unwrap();
    assert!((0.0..=100.0).contains(&acc));
    let weights = a.mix_weights().unwrap();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, spans) in [(ProbeKind::Lr, 1), (ProbeKind::Mlp, 2)] {
        let mut probe = ProbeParams::<f64>::init(kind, 3, 8, spans, labels(5), &small_probe_config(), 8).unwrap();
        jitter(&mut probe, 9);
        let path = dir.path().join(format!("{}.bin", kind.name()));
        save_probe(&probe, "pos", &path).unwrap();
        let (back, task) = load_probe::<f64>(&path).unwrap();
        assert_eq!(back, probe);
        assert_eq!(task, "pos");
    }
    let mut file = TensorFile::<f64>::new(None);
    file.metadata.insert("probe_kind".into(), "lr".into());
    file.metadata.insert("labels".into(), serde_json::json!(["a", "b"]));
    file.push("pool.0", Tensor::zeros(1, 2));
    file.push("output.weight", Tensor::zeros(2, 2));
    file.push("output.bias", Tensor::zeros(1, 2));
    file.push("stray", Tensor::zeros(1, 1));
    let path = dir.path().join("stray.bin");
    file.write(&path, DType::F64).unwrap();
    assert!(matches!(load_probe::<f64>(&path), Err(Error::Header(_))));
}

#[test]
fn invalid_probe_inputs_are_rejected() {
    let c = small_probe_config();
    assert!(ProbeParams::<f64>::init(ProbeKind::Lr, 2, 4, 1, vec![], &c, 0).is_err());
    assert!(ProbeParams::<f64>::init(ProbeKind::Lr, 2, 4, 3, labels(2), &c, 0).is_err());
    let bad = ProbeConfig { epochs: 0, ..c.clone() };
    assert!(bad.validate().unwrap_err().is_config());
    let mut lr = ProbeParams::<f64>::init(ProbeKind::Lr, 2, 4, 1, labels(2), &c, 0).unwrap();
    lr.mix_logits = Some(Tensor::zeros(1, 2));
    assert!(lr.validate().is_err());
    let tr = random_trace(2, 4, 4, 1);
    let two = features_from_trace(ProbeKind::Lr, &tr, &[Span::new(0, 1), Span::new(1, 2)]).unwrap();
    let probe = ProbeParams::<f64>::init(ProbeKind::Lr, 2, 4, 1, labels(2), &c, 0).unwrap();
    assert!(probe_logits(&probe, &two).is_err());
    assert!(features_from_trace(ProbeKind::Lr, &tr, &[Span::new(3, 5)]).is_err());
}
