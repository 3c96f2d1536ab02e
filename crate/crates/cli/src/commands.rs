use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use gareader::corpus::{
    corpus_stats, load_embeddings, load_examples, save_examples, split_by_fraction, synth_generate, ClozeExample,
    EncodedExample, SynthConfig, Vocab,
};
use gareader::evalviz::{ablate as run_ablation, accuracy, attention_export, proportion_test, AblationData, AblationSpec};
use gareader::params::Checkpoint;
use gareader::train::{model_from_checkpoint, train_with, Trainer};
use gareader::Model;

use crate::config::{check_file, default_out_dir, RunConfig};
use crate::{AblateArgs, ConfigArgs, EvalArgs, PredictArgs, SynthArgs, TrainArgs, UsageError, VizArgs};

const METRICS_HEADER: &str = "epoch,lr,train_loss,valid_acc,timestamp";

fn resolve(args: &ConfigArgs) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    let mut named = Vec::new();
    if let Some(k) = args.k {
        named.push(format!("hops={k}"));
    }
    if let Some(e) = args.epochs {
        named.push(format!("epochs={e}"));
    }
    if let Some(s) = args.seed {
        named.push(format!("seed={s}"));
    }
    if let Some(g) = &args.gating {
        named.push(format!("gating={g}"));
    }
    cfg.apply_overrides(&named)?;
    for (slot, value) in [
        (&mut cfg.train_data, &args.train_data),
        (&mut cfg.valid_data, &args.valid_data),
        (&mut cfg.test_data, &args.test_data),
        (&mut cfg.embeddings, &args.embeddings),
    ] {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
    if let Some(o) = &args.out_dir {
        cfg.out_dir.clone_from(o);
    }
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn load_split(path: &Path, max_doc_len: Option<usize>) -> Result<Vec<ClozeExample>> {
    let report = load_examples(path, max_doc_len).with_context(|| format!("loading {}", path.display()))?;
    for r in &report.rejected {
        log::warn!("{}: record {} (line {}) skipped: {}", path.display(), r.record, r.line, r.reason);
    }
    Ok(report.examples)
}

fn encode(vocab: &Vocab, examples: &[ClozeExample]) -> Vec<EncodedExample> {
    examples.iter().map(|e| vocab.encode(e)).collect()
}

fn load_model(path: &Path) -> Result<Model> {
    check_file(path)?;
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    model_from_checkpoint(&ck).with_context(|| format!("checkpoint {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_entities: a.entities,
        n_relations: a.relations,
        n_examples: a.examples,
        hops: a.hops,
        facts_per_doc: a.facts,
    };
    let out = a.out_dir.clone().unwrap_or_else(default_out_dir);
    let data = synth_generate(&cfg).map_err(|e| UsageError(e.to_string()))?;
    let (train, valid, test) = split_by_fraction(&data, (0.8, 0.1), a.seed);
    create_dir(&out)?;
    for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let path = out.join(format!("{name}.txt"));
        save_examples(&path, split).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", corpus_stats(&train, &valid, &test));
    println!("wrote {}", out.display());
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve(&a.config)?;
    let train_path = cfg.require("train_data")?;
    let valid_path = cfg.require("valid_data")?;
    let embeddings = match &cfg.embeddings {
        Some(_) => Some(cfg.require("embeddings")?),
        None => None,
    };
    if let Some(r) = &a.resume {
        check_file(r)?;
    }
    let train_raw = load_split(train_path, cfg.max_doc_len)?;
    let valid_raw = load_split(valid_path, cfg.max_doc_len)?;
    if train_raw.is_empty() || valid_raw.is_empty() {
        anyhow::bail!("training and validation sets must both contain examples");
    }

    let trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let t = Trainer::resume(cfg.train.clone(), &ck)?;
            log::info!("resuming after epoch {}", t.epoch);
            t
        }
        None => {
            let vocab = Vocab::build(&train_raw);
            let mut model = Model::new(cfg.train.reader.clone(), vocab, cfg.train.seed)?;
            if let Some(path) = embeddings {
                let emb = load_embeddings(path, cfg.train.reader.word_dim)?;
                let n = model.params.load_pretrained(&model.vocab, &emb)?;
                log::info!("initialised {n} word vectors from {}", path.display());
            }
            Trainer::new(cfg.train.clone(), model)?
        }
    };
    let train_set = encode(&trainer.model.vocab, &train_raw);
    let valid_set = encode(&trainer.model.vocab, &valid_raw);

    create_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = if a.resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let best_path = cfg.out_dir.join("model.ckpt");
    let last_path = cfg.out_dir.join("last.ckpt");

    let outcome = train_with(trainer, &train_set, &valid_set, |m, t| {
        writeln!(metrics, "{m},{}", timestamp())?;
        metrics.flush()?;
        let ck = t.checkpoint();
        ck.save(&last_path)?;
        if m.improved {
            ck.save(&best_path)?;
        }
        println!(
            "epoch {} lr {:e} train_loss {:.4} valid_acc {:.4}{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.valid_acc,
            if m.improved { " *" } else { "" }
        );
        Ok(())
    })?;
    if outcome.clamp_count > 0 {
        log::warn!("{} training examples hit the log-probability clamp", outcome.clamp_count);
    }
    println!("best epoch {}; model saved to {}", outcome.best_epoch, best_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    check_file(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let data = encode(&model.vocab, &load_split(&a.data, None)?);
    if data.is_empty() {
        anyhow::bail!("{} holds no usable examples", a.data.display());
    }
    let acc = accuracy(&model, &data)?;
    let k = (acc * data.len() as f64).round() as usize;
    println!("accuracy {acc:.4} ({k}/{})", data.len());
    if let Some(p0) = a.p0 {
        let p = proportion_test(k, data.len(), p0).map_err(|e| UsageError(e.to_string()))?;
        println!("p-value (accuracy <= {p0}) {p:.6}");
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    check_file(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let raw = load_split(&a.data, None)?;
    let mut out = std::io::stdout().lock();
    for (i, ex) in raw.iter().enumerate() {
        let (c, p) = model.predict(&model.vocab.encode(ex))?;
        writeln!(out, "{i}\t{}\t{p:.6}", ex.candidate_text(c))?;
    }
    Ok(())
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>, UsageError> {
    specs
        .iter()
        .map(|s| {
            let (k, vs) = s
                .split_once('=')
                .ok_or_else(|| UsageError(format!("grid axis {s:?} is not KEY=V1,V2")))?;
            Ok((k.trim().to_string(), vs.split(',').map(|v| v.trim().to_string()).collect()))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, UsageError> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| UsageError(format!("bad seed {x:?}"))))
        .collect()
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve(&a.config)?;
    let paths = [cfg.require("train_data")?, cfg.require("valid_data")?, cfg.require("test_data")?];
    let axes = parse_grid(&a.grid)?;
    let seeds = parse_seeds(&a.seeds)?;
    let spec = AblationSpec::grid(&cfg.train, &axes, seeds).map_err(|e| UsageError(e.to_string()))?;
    let [train_raw, valid_raw, test_raw] = paths.map(|p| load_split(p, cfg.max_doc_len));
    let (train_raw, valid_raw, test_raw) = (train_raw?, valid_raw?, test_raw?);
    let vocab = Vocab::build(&train_raw);
    let (tr, va, te) = (encode(&vocab, &train_raw), encode(&vocab, &valid_raw), encode(&vocab, &test_raw));
    let report = run_ablation(
        &spec,
        &AblationData {
            vocab: &vocab,
            train: &tr,
            valid: &va,
            test: &te,
        },
    )?;
    let table = report.to_table();
    create_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("ablation.txt"), &table)?;
    fs::write(cfg.out_dir.join("ablation.csv"), report.to_csv()?)?;
    print!("{table}");
    Ok(())
}

pub fn viz(a: &VizArgs) -> Result<()> {
    check_file(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let raw = load_split(&a.data, None)?;
    let indices: Vec<usize> = if a.all {
        (0..raw.len()).collect()
    } else if a.examples.is_empty() {
        vec![0]
    } else {
        a.examples.clone()
    };
    let out: PathBuf = a.out_dir.clone().unwrap_or_else(default_out_dir);
    for &i in &indices {
        let ex = raw
            .get(i)
            .ok_or_else(|| UsageError(format!("example {i} out of range ({} examples)", raw.len())))?;
        let files = attention_export(&model, &model.vocab.encode(ex), &out, &format!("ex{i}"), a.full_document)?;
        for f in files {
            println!("{}", f.display());
        }
    }
    Ok(())
}
