//! End-to-end acceptance checks, one PASS/FAIL line per criterion. Runs
//! without the libtest harness so every line shows up in `cargo test`
//! output; the process fails if any criterion does.
//!
//! The behavioural checks train toy models on the synthetic planted task and
//! take several minutes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probekit::analysis::{
    amnesic_suite, chance_baseline, essential_accuracy, majority_baseline, non_essential_accuracy,
    selectivity_delta, AmnesicMode, DistributionSource, LayerDistribution,
};
use probekit::data::synthetic::{generate_synthetic, SyntheticConfig, SyntheticTask};
use probekit::data::{Dataset, EdgeProbingExample, Span};
use probekit::diagnostic::{
    features_from_trace, probe_accuracy, probe_loss_and_grads, scalar_mix, train_probe, ProbeConfig, ProbeKind,
    ProbeParams,
};
use probekit::experiment::{run_experiment, ExperimentConfig};
use probekit::lm::{lm_windows, pretrain, trace, HeadMask, MaskMode, ModelParams, PrefixParams, PretrainConfig, TransformerConfig};
use probekit::optim::AdamConfig;
use probekit::prompting::{
    accuracy, extend_vocabulary, prefix_loss_and_grads, prompt_examples, train_prefix, LossScope, PrefixTrainConfig,
};
use probekit::pruning::{
    essential_partition, gumbel_noise, joint_loss_and_grads, sample_mask, train_joint, GateParams, GateTrainConfig,
    HeadPartition, JointTrainConfig, TemperatureSchedule,
};
use probekit::tensor::{Scalar, Tensor};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Gradients

fn fd_toy() -> (ModelParams<f64>, probekit::data::Tokenizer, probekit::prompting::Verbalizer, SyntheticTask) {
    let cfg = SyntheticConfig {
        n_classes: 3,
        words_per_class: 3,
        corpus_sentences: 10,
        probe_examples: 20,
        max_len: 6,
        ..SyntheticConfig::default()
    };
    let task = generate_synthetic(&cfg, 11).unwrap();
    let config = TransformerConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: task.tokenizer.len(),
        max_positions: 24,
        float_width: 64,
    };
    let model = ModelParams::<f64>::init_random(&config, 12).unwrap();
    let mut tok = task.tokenizer.clone();
    let (ext, vb) = extend_vocabulary(&model, &mut tok, &task.dataset.labels, 13).unwrap();
    (ext, tok, vb, task)
}

/// Central difference against the analytic value; returns the worst
/// relative error over `n` random coordinates of `sizes`.
fn fd_worst(
    n: usize,
    sizes: &[usize],
    rng: &mut ChaCha8Rng,
    analytic: impl Fn(usize, usize) -> f64,
    loss_at: impl Fn(usize, usize, f64) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.random_range(0..sizes.len());
        let j = rng.random_range(0..sizes[t]);
        let numeric = (loss_at(t, j, h) - loss_at(t, j, -h)) / (2.0 * h);
        let a = analytic(t, j);
        let scale = numeric.abs().max(a.abs()).max(1e-4);
        worst = worst.max((numeric - a).abs() / scale);
    }
    worst
}

fn gradient_correctness() {
    let start = Instant::now();
    let (model, _, vb, task) = fd_toy();
    let examples = prompt_examples(&task.dataset, &vb).unwrap();
    let ex = &examples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = Vec::new();

    let prefix = PrefixParams::<f64>::init(&model.config, 3, 0.5, 22);
    let (_, pg) = prefix_loss_and_grads(&model, &prefix, ex, &vb, None, LossScope::Vocabulary).unwrap();
    let sizes: Vec<usize> = pg.iter().map(Tensor::len).collect();
    worst.push((
        "prefix",
        fd_worst(50, &sizes, &mut rng, |t, j| pg[t].data()[j], |t, j, d| {
            let mut p = prefix.clone();
            p.tensors_mut()[t].data_mut()[j] += d;
            prefix_loss_and_grads(&model, &p, ex, &vb, None, LossScope::Vocabulary).unwrap().0
        }),
    ));

    let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gates = GateParams::from_logits(Tensor::from_vec(3, 2, logits), 3, TemperatureSchedule::default()).unwrap();
    let noise = gumbel_noise(6, 23);
    let joint = |g: &GateParams<f64>| {
        joint_loss_and_grads(&model, &prefix, g, ex, &vb, &noise, 0.7, false, LossScope::Vocabulary).unwrap()
    };
    let (_, jg) = joint(&gates);
    let gate_grad = jg.last().unwrap().clone();
    worst.push((
        "gate logits",
        fd_worst(50, &[6], &mut rng, |_, j| gate_grad.data()[j], |_, j, d| {
            let mut g = gates.clone();
            g.logits.data_mut()[j] += d;
            joint(&g).0
        }),
    ));

    // Multi-token spans, so the pooling softmax has more than one entry.
    let source = task.dataset.examples.iter().find(|e| e.tokens.len() >= 4).unwrap();
    let target = task.dataset.label_index(&source.label).unwrap();
    let tr = trace(&model, &source.tokens, None, None).unwrap();
    let n = source.tokens.len();
    let feats = features_from_trace(ProbeKind::Mlp, &tr, &[Span::new(0, 3), Span::new(1, n)]).unwrap();
    let small = ProbeConfig {
        projection_dim: 6,
        hidden_dim: 7,
        ..ProbeConfig::default()
    };
    let mut probe = ProbeParams::<f64>::init(ProbeKind::Mlp, 3, 8, 2, task.dataset.labels.clone(), &small, 24).unwrap();
    for t in probe.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let (_, qg) = probe_loss_and_grads(&probe, &feats, target).unwrap();
    let names: Vec<String> = probe.named_tensors().into_iter().map(|(n, _)| n).collect();
    let groups: [(&str, Vec<usize>); 3] = [
        ("scalar mix", (0..names.len()).filter(|&i| names[i] == "mix.logits").collect()),
        ("pooling", (0..names.len()).filter(|&i| names[i].starts_with("pool.")).collect()),
        (
            "probe weights",
            (0..names.len()).filter(|&i| names[i].ends_with("weight") || names[i].ends_with("bias")).collect(),
        ),
    ];
    for (name, idx) in &groups {
        let sizes: Vec<usize> = idx.iter().map(|&i| qg[i].len()).collect();
        worst.push((
            name,
            fd_worst(50, &sizes, &mut rng, |t, j| qg[idx[t]].data()[j], |t, j, d| {
                let mut p = probe.clone();
                p.tensors_mut()[idx[t]].data_mut()[j] += d;
                probe_loss_and_grads(&p, &feats, target).unwrap().0
            }),
        ));
    }

    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&(_, w)| w <= 1e-5) && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    verdict(
        "gradient correctness",
        pass,
        &format!("worst relative error {}; {:.1}s", detail.join(", "), elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// Exact identities

fn neutrality_diff<F: Scalar>(width: u32) -> f64 {
    let config = TransformerConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 16,
        d_head: 4,
        d_ff: 32,
        vocab_size: 40,
        max_positions: 24,
        float_width: width,
    };
    let model = ModelParams::<F>::init_random(&config, 31).unwrap();
    let empty = PrefixParams::<F>::init(&config, 0, 0.02, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=24);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let a = trace(&model, &tokens, None, None).unwrap();
        let b = trace(&model, &tokens, Some(&empty), None).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            worst = worst.max(x.max_abs_diff(y).to_f64().unwrap());
        }
        for (x, y) in a.final_logits.iter().zip(&b.final_logits) {
            worst = worst.max((*x - *y).abs().to_f64().unwrap());
        }
    }
    worst
}

fn prefix_neutrality() {
    let d32 = neutrality_diff::<f32>(32);
    let d64 = neutrality_diff::<f64>(64);
    verdict(
        "prefix neutrality",
        d32 <= 1e-6 && d64 == 0.0,
        &format!("max abs diff 32-bit {d32:.1e}, 64-bit {d64:e} over 20 inputs"),
    );
}

fn scalar_mix_one_hot() {
    let (model, _, _, task) = fd_toy();
    let mut exact = true;
    for ex in task.dataset.examples.iter().take(5) {
        let tr = trace(&model, &ex.tokens, None, None).unwrap();
        for l in 0..tr.n_layers() {
            let mut w = vec![0.0; tr.n_layers()];
            w[l] = 1.0;
            exact &= scalar_mix(&tr, &w).unwrap() == tr.layers[l + 1];
        }
    }
    verdict("scalar-mix one-hot equivalence", exact, "one-hot weights return the selected layer bit for bit");
}

fn exact_k_pruning() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let temperatures = [1e-3, 0.1, 0.5, 1.0, 5.0];
    let mut bad = 0;
    let mut total = 0;
    for i in 0..10_000u64 {
        let (l, h) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let k = rng.random_range(1..=l * h);
        let logits: Vec<f64> = (0..l * h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gates = GateParams::from_logits(Tensor::from_vec(l, h, logits), k, TemperatureSchedule::default()).unwrap();
        let t = temperatures[i as usize % temperatures.len()];
        let mask = sample_mask(&gates, MaskMode::Hard, t, Some(i)).unwrap();
        let ones = mask.values().iter().filter(|&&v| v == 1.0).count();
        let zeros = mask.values().iter().filter(|&&v| v == 0.0).count();
        if ones != k || ones + zeros != l * h {
            bad += 1;
        }
        total += 1;
    }
    verdict("exact-K pruning", bad == 0, &format!("{bad} of {total} hard masks off K"));
}

fn chance_and_delta_constants() {
    let expected = [(48, 2.08), (30, 3.33), (18, 5.56), (66, 1.52), (2, 50.00)];
    let mut ok = expected.iter().all(|&(n, v)| chance_baseline(n).unwrap() == v);
    ok &= selectivity_delta(94.28, 74.48).unwrap() == 19.80;
    ok &= selectivity_delta(89.56, 48.75).unwrap() == 40.81;
    // Majority: most frequent training label scored on the test split.
    let make = |labels: &[&str]| {
        let ex = labels
            .iter()
            .enumerate()
            .map(|(i, l)| EdgeProbingExample {
                text: "w".into(),
                tokens: vec![0],
                span1: Span::new(0, 1),
                span2: None,
                word_span1: Span::new(0, 1),
                word_span2: None,
                label: l.to_string(),
                task: "t".into(),
                record: i,
            })
            .collect();
        Dataset::new("t", ex)
    };
    let train = make(&["a", "a", "a", "b"]);
    let test = make(&["a", "b", "b"]);
    ok &= majority_baseline(&train, &test).unwrap() == 100.0 / 3.0;
    verdict(
        "chance/majority constants",
        ok,
        "chance 2.08/3.33/5.56/1.52/50.00, deltas 19.80 and 40.81, majority 1 of 3",
    );
}

fn center_of_gravity_arithmetic() {
    let uniform = LayerDistribution::new(DistributionSource::MlpScalarMix, vec![1.0 / 12.0; 12]).unwrap();
    let mut ok = uniform.center_of_gravity() == 6.5;
    for l in 0..12 {
        let mut w = vec![0.0; 12];
        w[l] = 1.0;
        ok &= LayerDistribution::new(DistributionSource::MlpScalarMix, w).unwrap().center_of_gravity() == (l + 1) as f64;
    }
    verdict(
        "center-of-gravity arithmetic",
        ok,
        &format!("uniform 12 layers {}; one-hot exact", uniform.center_of_gravity()),
    );
}

// ---------------------------------------------------------------------------
// Toy replications

fn toy_config(task: &SyntheticTask) -> TransformerConfig {
    TransformerConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        d_ff: 64,
        vocab_size: task.tokenizer.len(),
        max_positions: 32,
        float_width: 32,
    }
}

fn toy_pretrain(model: &mut ModelParams<f32>, task: &SyntheticTask, mask: Option<&HeadMask>, seed: u64) {
    let windows = lm_windows(&task.corpus_stream().unwrap(), 32);
    let config = PretrainConfig {
        epochs: 10,
        batch_size: 16,
        optimizer: AdamConfig::with_lr(3e-3),
        seed,
    };
    pretrain(model, &windows, &config, mask).unwrap();
}

fn prefix_config(loss: LossScope) -> PrefixTrainConfig {
    PrefixTrainConfig {
        prefix_len: 8,
        optimizer: AdamConfig::with_lr(0.1),
        batch_size: 16,
        epochs: 30,
        init_std: 0.02,
        loss,
    }
}

fn pp_accuracy(model: &ModelParams<f32>, task: &SyntheticTask, train: &Dataset, test: &Dataset, seed: u64) -> f64 {
    let mut tok = task.tokenizer.clone();
    let (ext, vb) = extend_vocabulary(model, &mut tok, &task.dataset.labels, seed).unwrap();
    let tr = prompt_examples(train, &vb).unwrap();
    let te = prompt_examples(test, &vb).unwrap();
    let (prefix, _) = train_prefix(&ext, &tr, &vb, &prefix_config(LossScope::Vocabulary), None, seed).unwrap();
    accuracy(&ext, Some(&prefix), &te, &vb, None).unwrap()
}

fn selectivity() {
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in SEEDS {
        let task = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
        let (train, test) = task.dataset.split(0.25, seed).unwrap();
        let majority = majority_baseline(&train, &test).unwrap();
        let random = ModelParams::<f32>::init_random(&toy_config(&task), seed).unwrap();
        let mut pretrained = random.clone();
        toy_pretrain(&mut pretrained, &task, None, seed);
        let pp_pre = pp_accuracy(&pretrained, &task, &train, &test, seed);
        let pp_rand = pp_accuracy(&random, &task, &train, &test, seed);
        let probe_config = ProbeConfig {
            epochs: 5,
            ..ProbeConfig::default()
        };
        let (probe, _) = train_probe(ProbeKind::Mlp, &random, &train, &probe_config, seed).unwrap();
        let dp_rand = probe_accuracy(&probe, &random, &test).unwrap();
        println!("  seed {seed}: majority {majority:.2}, pp pretrained {pp_pre:.2}, pp random {pp_rand:.2}, dp-mlp random {dp_rand:.2}");
        rows.push((majority, pp_pre, pp_rand, dp_rand));
    }
    let elapsed = start.elapsed();
    let maj = mean(rows.iter().map(|r| r.0));
    let (a, b, c) = (mean(rows.iter().map(|r| r.1)), mean(rows.iter().map(|r| r.2)), mean(rows.iter().map(|r| r.3)));
    let minutes = elapsed.as_secs_f64() / 60.0;
    let checks = [
        ("(a) pp pretrained >= majority + 20", a >= maj + 20.0, a),
        ("(b) pp random <= majority + 5", b <= maj + 5.0, b),
        ("(c) dp-mlp random >= majority + 5", c >= maj + 5.0, c),
    ];
    for (name, ok, v) in checks {
        println!("  {} {name}: {v:.2} vs majority {maj:.2}", if ok { "ok " } else { "BAD" });
    }
    verdict(
        "selectivity",
        checks.iter().all(|c| c.1) && minutes < 15.0,
        &format!("pp pretrained {a:.2}, pp random {b:.2}, dp-mlp random {c:.2}, majority {maj:.2}; {minutes:.1} min"),
    );
}

/// One seed of the planted toy: the task signal is written by layer-1 heads
/// and the upper heads are silenced after pretraining.
struct PlantedRun {
    majority: f64,
    partition: HeadPartition,
    drop_essential: f64,
    keep_random_k: f64,
    essential: f64,
    non_essential: f64,
}

fn planted_run(seed: u64) -> PlantedRun {
    let task = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
    let config = toy_config(&task);
    let (l, h) = (config.n_layers, config.n_heads);
    let layer1: Vec<(usize, usize)> = (0..h).map(|j| (0, j)).collect();
    let mut model = ModelParams::<f32>::init_random(&config, seed).unwrap();
    toy_pretrain(&mut model, &task, Some(&HeadMask::keep(l, h, &layer1).unwrap()), seed);
    for layer in &mut model.layers[1..] {
        layer.w_o.scale_assign(0.0);
    }
    let (train, test) = task.dataset.split(0.25, seed).unwrap();
    let majority = majority_baseline(&train, &test).unwrap();
    let mut tok = task.tokenizer.clone();
    let (ext, vb) = extend_vocabulary(&model, &mut tok, &task.dataset.labels, seed).unwrap();
    let tr = prompt_examples(&train, &vb).unwrap();
    let te = prompt_examples(&test, &vb).unwrap();
    let prefix = prefix_config(LossScope::Labels);
    let joint = JointTrainConfig {
        prefix: prefix.clone(),
        gates: GateTrainConfig {
            k: h,
            gate_lr: 1e-2,
            temperature_start: 1.0,
            temperature_end: 0.1,
            straight_through: false,
        },
    };
    let out = train_joint(&ext, &tr, &vb, &joint, seed).unwrap();
    let partition = essential_partition(&out.gates, h).unwrap();
    let sequences: Vec<Vec<usize>> = lm_windows(&task.corpus_stream().unwrap(), 32).into_iter().take(200).collect();
    let losses = amnesic_suite(&model, &partition, &sequences, seed).unwrap();
    let delta = |m: AmnesicMode| losses.iter().find(|e| e.mode == m).unwrap().delta;
    PlantedRun {
        majority,
        drop_essential: delta(AmnesicMode::DropEssential),
        keep_random_k: delta(AmnesicMode::KeepRandomK),
        essential: essential_accuracy(&ext, &partition, &tr, &te, &vb, &prefix, seed).unwrap(),
        non_essential: non_essential_accuracy(&ext, &partition, &tr, &te, &vb, &prefix, seed).unwrap(),
        partition,
    }
}

fn planted() -> &'static [PlantedRun] {
    static RUNS: OnceLock<Vec<PlantedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
            SEEDS
            .iter()
            .map(|&s| {
                let r = planted_run(s);
                println!(
                    "  planted seed {s}: essential {:?}, Δloss drop-essential {:.4}, keep-random-k {:.4}, essential-only {:.2}, non-essential {:.2}, majority {:.2}",
                    r.partition.essential, r.drop_essential, r.keep_random_k, r.essential, r.non_essential, r.majority
                );
                r
            })
            .collect()
    })
}

fn localization() {
    let runs = planted();
    let in_layer1 = mean(runs.iter().map(|r| r.partition.layer_counts()[0] as f64 / r.partition.k() as f64));
    let cog = mean(runs.iter().map(|r| {
        LayerDistribution::from_partition(&r.partition, DistributionSource::PpHeads)
            .unwrap()
            .center_of_gravity()
    }));
    verdict(
        "localization",
        in_layer1 >= 0.8 && cog < 2.0,
        &format!("{:.0}% of essential heads in layer 1, center of gravity {cog:.2}", 100.0 * in_layer1),
    );
}

fn amnesic_ordering() {
    let runs = planted();
    let drop = mean(runs.iter().map(|r| r.drop_essential));
    let random = mean(runs.iter().map(|r| r.keep_random_k));
    verdict(
        "amnesic ordering",
        drop >= random,
        &format!("Δloss drop-essential {drop:.4} vs keep-random-k {random:.4}"),
    );
}

fn essential_and_non_essential_accuracy() {
    let runs = planted();
    let maj = mean(runs.iter().map(|r| r.majority));
    let ess = mean(runs.iter().map(|r| r.essential));
    let non = mean(runs.iter().map(|r| r.non_essential));
    let non_ok = non <= maj + 5.0;
    let ess_ok = ess >= maj + 20.0;
    println!("  {} non-essential only <= majority + 5: {non:.2} vs {maj:.2}", if non_ok { "ok " } else { "BAD" });
    println!("  {} essential only >= majority + 20: {ess:.2} vs {maj:.2}", if ess_ok { "ok " } else { "BAD" });
    verdict(
        "essential vs non-essential accuracy",
        non_ok && ess_ok,
        &format!("essential-only {ess:.2}, non-essential-only {non:.2}, majority {maj:.2}"),
    );
}

// ---------------------------------------------------------------------------
// Determinism

const DETERMINISM: &str = r#"
task = "toy"
method = "pp"
seeds = [1, 2]
prefix_len = 2
keep_heads = 2

[model]
source = "synthetic"
seed = 5

[data]
kind = "synthetic"
seed = 6

[data.config]
n_classes = 3
words_per_class = 3
corpus_sentences = 40
probe_examples = 60
max_len = 6

[transformer]
n_layers = 2
n_heads = 2
d_model = 8
d_ff = 16
max_positions = 16
float_width = 32

[pretrain]
epochs = 1

[prefix]
epochs = 2

[gates]
"#;

fn end_to_end_determinism() {
    let config = ExperimentConfig::from_toml(DETERMINISM).unwrap();
    let mut outputs = Vec::new();
    for method in ["pp", "dp-mlp"] {
        let mut c = config.clone();
        c.method = method.into();
        if method != "pp" {
            c.prefix_len = None;
        }
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        outputs.push((
            serde_json::to_string_pretty(&a.report).unwrap(),
            serde_json::to_string_pretty(&b.report).unwrap(),
            serde_json::to_string(&a.partitions).unwrap() == serde_json::to_string(&b.partitions).unwrap(),
        ));
    }
    let same = outputs.iter().all(|(a, b, p)| a == b && *p);
    verdict(
        "end-to-end determinism",
        same,
        &format!("{} runs repeated, reports byte-identical: {same}", outputs.len()),
    );
}

fn main() {
    let checks: [(&str, fn()); 11] = [
        ("gradient correctness", gradient_correctness),
        ("prefix neutrality", prefix_neutrality),
        ("scalar-mix one-hot equivalence", scalar_mix_one_hot),
        ("exact-K pruning", exact_k_pruning),
        ("chance/majority constants", chance_and_delta_constants),
        ("center-of-gravity arithmetic", center_of_gravity_arithmetic),
        ("end-to-end determinism", end_to_end_determinism),
        ("selectivity", selectivity),
        ("localization", localization),
        ("amnesic ordering", amnesic_ordering),
        ("essential vs non-essential accuracy", essential_and_non_essential_accuracy),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if catch_unwind(AssertUnwindSafe(check)).is_err() {
            failed.push(name);
        }
    }
    println!("\nacceptance: {} of {} criteria passed", checks.len() - failed.len(), checks.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
