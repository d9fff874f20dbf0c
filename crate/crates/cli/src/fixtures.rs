//! Small self-contained inputs for trying the other subcommands.

use std::fs;
use std::path::Path;

use anyhow::Result;
use probekit::data::synthetic::{generate_synthetic, SyntheticConfig};
use probekit::experiment::{
    DataSource, ExperimentConfig, ModelSource, PrefixSettings, TokenizerSource, ToyTransformer,
};
use probekit::lm::{save_weights, ModelParams};
use probekit::optim::AdamConfig;

pub fn export(out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let task = generate_synthetic(&SyntheticConfig::default(), seed)?;
    let (train, test) = task.dataset.split(0.25, seed)?;
    train.write_jsonl(&out.join("train.jsonl"))?;
    test.write_jsonl(&out.join("test.jsonl"))?;
    fs::write(out.join("vocab.txt"), task.tokenizer.vocab().join("\n") + "\n")?;
    fs::write(out.join("corpus.txt"), task.corpus.join("\n") + "\n")?;

    let shape = ToyTransformer::default();
    let model = ModelParams::<f32>::init_random(&shape.config(task.tokenizer.len())?, seed)?;
    save_weights(&model, out.join("model.ptc"))?;

    let prefix = PrefixSettings {
        optimizer: AdamConfig::with_lr(0.1),
        epochs: 30,
        ..PrefixSettings::default()
    };
    let mut synthetic = ExperimentConfig::from_toml("task = \"synthetic\"\nmethod = \"pp\"\n[model]\nsource = \"synthetic\"\n")?;
    synthetic.prefix_len = Some(8);
    synthetic.prefix = prefix;
    synthetic.out = out.join("runs/pp_synthetic");
    synthetic.data = DataSource::Synthetic {
        seed,
        config: SyntheticConfig::default(),
    };
    synthetic.model = ModelSource::Synthetic { seed };
    fs::write(out.join("pp_synthetic.toml"), synthetic.to_toml()?)?;

    let mut files = synthetic.clone();
    files.out = out.join("runs/pp_fixture");
    files.model = ModelSource::Weights {
        path: out.join("model.ptc"),
    };
    files.data = DataSource::Jsonl {
        train: out.join("train.jsonl"),
        test: Some(out.join("test.jsonl")),
        tokenizer: TokenizerSource::Whitespace {
            vocab: out.join("vocab.txt"),
        },
        corpus: Some(out.join("corpus.txt")),
    };
    fs::write(out.join("pp_fixture.toml"), files.to_toml()?)?;
    println!("wrote fixtures to {}", out.display());
    Ok(())
}
