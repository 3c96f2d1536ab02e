//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Pass name fragments as arguments to run a subset.

mod common;

use std::cell::OnceCell;
use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{check_leaves, check_params, random_tensor, reader_gradcheck, toy_config};
use gareader::corpus::{split_by_fraction, synth_generate, ClozeExample, EncodedExample, SynthConfig, Vocab};
use gareader::evalviz::{accuracy, attention_export, correctness, discordant, mcnemar_exact, median, proportion_test};
use gareader::params::{ParamGrads, ParamSet};
use gareader::reader::{aggregate_candidates, ga_module};
use gareader::seq::{bigru_full, gru_step, GruCellParams};
use gareader::tensor::{Tape, Tensor};
use gareader::train::{clip_gradients, lr_schedule, train, train_with, Trainer};
use gareader::{GatingKind, Model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Split {
    vocab: Vocab,
    train: Vec<EncodedExample>,
    valid: Vec<EncodedExample>,
    test: Vec<EncodedExample>,
}

fn encode_split(train: &[ClozeExample], valid: &[ClozeExample], test: &[ClozeExample]) -> Split {
    let vocab = Vocab::build(train);
    let enc = |v: &[ClozeExample]| v.iter().map(|e| vocab.encode(e)).collect::<Vec<_>>();
    let (train, valid, test) = (enc(train), enc(valid), enc(test));
    Split {
        vocab,
        train,
        valid,
        test,
    }
}

fn small_train_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.reader.hidden = 32;
    c.reader.word_dim = 32;
    c.reader.use_char = false;
    c
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst_op: f64 = 0.0;
    let mut track = |name: &str, err: f64| -> Result<(), String> {
        worst_op = worst_op.max(err);
        ensure(err < 1e-4, format!("{name}: relative error {err:e}"))
    };
    let a = random_tensor(vec![3, 4], &mut r);
    let b = random_tensor(vec![4, 2], &mut r);
    let v = random_tensor(vec![4], &mut r);
    let p = random_tensor(vec![3, 4], &mut r);
    let d = random_tensor(vec![4, 5], &mut r);
    let q = random_tensor(vec![4, 3], &mut r);
    let pos = Tensor::vector(vec![0.2, 0.5, 0.1, 0.7, 0.3]);
    let groups = vec![vec![0, 3], vec![1], vec![2, 4]];

    track("matmul", check_leaves(&[a.clone(), b.clone()], |t, x| t.matmul(x[0], x[1])))?;
    track("matvec", check_leaves(&[a.clone(), v.clone()], |t, x| t.matmul(x[0], x[1])))?;
    track("add", check_leaves(&[a.clone(), p.clone()], |t, x| t.add(x[0], x[1])))?;
    track("sub", check_leaves(&[a.clone(), p.clone()], |t, x| t.sub(x[0], x[1])))?;
    track("mul", check_leaves(&[a.clone(), p.clone()], |t, x| t.mul(x[0], x[1])))?;
    track("scale", check_leaves(std::slice::from_ref(&a), |t, x| Ok(t.scale(x[0], 1.7))))?;
    track("sigmoid", check_leaves(std::slice::from_ref(&a), |t, x| Ok(t.sigmoid(x[0]))))?;
    track("tanh", check_leaves(std::slice::from_ref(&a), |t, x| Ok(t.tanh(x[0]))))?;
    track("softmax", check_leaves(std::slice::from_ref(&v), |t, x| t.softmax_masked(x[0], &[true, true, false, true])))?;
    track("softmax cols", check_leaves(std::slice::from_ref(&a), |t, x| t.softmax_masked_cols(x[0], &[true, false, true])))?;
    track("concat", check_leaves(&[a.clone(), p.clone()], |t, x| t.concat(x[0], x[1], 0)))?;
    track("concat cols", check_leaves(&[a.clone(), p.clone()], |t, x| t.concat(x[0], x[1], 1)))?;
    track("gather", check_leaves(std::slice::from_ref(&a), |t, x| t.gather_rows(x[0], &[2, 0, 2])))?;
    track("transpose", check_leaves(std::slice::from_ref(&a), |t, x| t.transpose(x[0])))?;
    track("column", check_leaves(std::slice::from_ref(&a), |t, x| t.column(x[0], 2)))?;
    track("stack", check_leaves(&[v.clone(), v.clone()], |t, x| t.stack_columns(&[x[0], x[1]])))?;
    track("reshape", check_leaves(std::slice::from_ref(&a), |t, x| t.reshape(x[0], vec![2, 6])))?;
    track("sum", check_leaves(std::slice::from_ref(&a), |t, x| Ok(t.sum(x[0]))))?;
    track("group_sum", check_leaves(std::slice::from_ref(&pos), |t, x| t.group_sum(x[0], &groups)))?;
    track("normalize", check_leaves(std::slice::from_ref(&pos), |t, x| t.normalize(x[0])))?;
    track("neg_log", check_leaves(std::slice::from_ref(&pos), |t, x| t.neg_log(x[0], 1)))?;
    track(
        "dropout",
        check_leaves(std::slice::from_ref(&a), |t, x| t.dropout(x[0], 0.3, &mut rng(5), true)),
    )?;
    for g in [GatingKind::Multiply, GatingKind::Sum, GatingKind::Concat] {
        let err = check_leaves(&[d.clone(), q.clone()], |t, x| Ok(ga_module(t, x[0], x[1], g, &[true; 3])?.0));
        track(&format!("ga {g}"), err)?;
    }

    let mut set = ParamSet::new();
    let gp = GruCellParams::init(&mut set, "g", 3, 4, &mut r);
    for id in [gp.b_r, gp.b_z, gp.b_h] {
        *set.get_mut(id) = random_tensor(vec![4], &mut r);
    }
    let xv = random_tensor(vec![3], &mut r);
    let hv = random_tensor(vec![4], &mut r);
    track("gru_step inputs", check_leaves(&[xv.clone(), hv.clone()], |t, x| gru_step(t, &set, &gp, x[0], x[1])))?;
    for (name, err) in check_params(&set, |t, s| {
        let x = t.constant(xv.clone());
        let h = t.constant(hv.clone());
        gru_step(t, s, &gp, x, h)
    }) {
        track(&name, err)?;
    }
    let mut bset = ParamSet::new();
    let bp = gareader::seq::BiGruParams::init(&mut bset, "b", 2, 3, &mut r);
    let seq = random_tensor(vec![2, 4], &mut r);
    track(
        "bigru",
        check_leaves(&[seq], |t, x| {
            let h = t.constant(Tensor::zeros(vec![3]));
            bigru_full(t, &bset, &bp, x[0], h)
        }),
    )?;

    let mut worst_e2e: f64 = 0.0;
    for g in [GatingKind::Multiply, GatingKind::Sum, GatingKind::Concat] {
        for (name, err, norm) in reader_gradcheck(toy_config(g), 3) {
            worst_e2e = worst_e2e.max(err);
            ensure(err < 1e-3, format!("reader {g} {name}: relative error {err:e}"))?;
            ensure(norm > 0.0, format!("reader {g} {name}: zero gradient"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "worst op error {worst_op:.1e}, worst end-to-end error {worst_e2e:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn gru_zero_parameters() -> Outcome {
    let mut set = ParamSet::new();
    let p = GruCellParams::init(&mut set, "g", 3, 5, &mut rng(2));
    for id in p.ids() {
        let shape = set.get(id).shape().to_vec();
        *set.get_mut(id) = Tensor::zeros(shape);
    }
    let h_prev = vec![0.3, -1.2, 0.0, 2.5, -0.75];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let h = tape.constant(Tensor::vector(h_prev.clone()));
    let out = gru_step(&mut tape, &set, &p, x, h).map_err(|e| e.to_string())?;
    let want: Vec<f64> = h_prev.iter().map(|v| 0.5 * v).collect();
    ensure(tape.value(out).data() == want.as_slice(), format!("got {:?}", tape.value(out).data()))?;
    Ok("h' = 0.5 h exactly".into())
}

fn ga_identities() -> Outcome {
    let mut r = rng(3);
    let d = random_tensor(vec![4, 6], &mut r);
    let mut tape = Tape::new();
    let dv = tape.constant(d.clone());
    let q = tape.constant(Tensor::filled(vec![4, 1], 1.0));
    let (x, alpha) = ga_module(&mut tape, dv, q, GatingKind::Multiply, &[true]).map_err(|e| e.to_string())?;
    ensure(tape.value(alpha).data().iter().all(|&a| a == 1.0), "singleton query attention is not 1")?;
    ensure(tape.value(x) == &d, "multiply gating with an all-ones query is not the identity")?;
    Ok("alpha = 1 and X = D exactly".into())
}

fn pointer_sum_oracle() -> Outcome {
    let mut r = rng(4);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(2..30);
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let n_cand = r.random_range(1..6);
        let mut positions: Vec<Vec<usize>> = vec![Vec::new(); n_cand];
        for i in 0..n {
            if r.random_bool(0.6) {
                positions[r.random_range(0..n_cand)].push(i);
            }
        }
        for p in positions.iter_mut().filter(|p| p.is_empty()) {
            p.push(r.random_range(0..n));
            p.sort_unstable();
            p.dedup();
        }
        // Brute force: scan every document position for every candidate.
        let mass: Vec<f64> = positions
            .iter()
            .map(|p| {
                let mut m = 0.0;
                for (i, si) in s.iter().enumerate() {
                    if p.contains(&i) {
                        m += si;
                    }
                }
                m
            })
            .collect();
        let z: f64 = mass.iter().sum();
        let oracle: Vec<f64> = mass.iter().map(|m| m / z).collect();
        let got = aggregate_candidates(&s, &positions).map_err(|e| e.to_string())?;
        ensure(got == oracle, format!("aggregation {got:?} != oracle {oracle:?}"))?;
        worst_sum = worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum < 1e-6, format!("probabilities sum off by {worst_sum:e}"))?;
    Ok(format!("100 instances exact, max |sum - 1| = {worst_sum:.1e}"))
}

fn memorization() -> Outcome {
    let start = Instant::now();
    let data = synth_generate(&SynthConfig {
        seed: 5,
        n_examples: 200,
        hops: 1,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let split = encode_split(&data, &[], &[]);
    let mut cfg = small_train_config();
    cfg.reader.hops = 3;
    cfg.reader.dropout = 0.0;
    cfg.lr0 = 0.02;
    cfg.batch_size = 8;
    cfg.epochs = 30;
    let model = Model::new(cfg.reader.clone(), split.vocab.clone(), 5).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg, model).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    while trainer.epoch < 30 {
        trainer.run_epoch(&split.train, &[]).map_err(|e| e.to_string())?;
        acc = accuracy(&trainer.model, &split.train).map_err(|e| e.to_string())?;
        if acc >= 0.99 {
            break;
        }
    }
    let elapsed = start.elapsed();
    ensure(acc >= 0.99, format!("train accuracy {acc:.3} after {} epochs", trainer.epoch))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "train accuracy {:.1}% after {} epochs, {:.0}s",
        100.0 * acc,
        trainer.epoch,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Multi-hop experiments share one set of runs.

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const VARIANTS: [&str; 5] = ["ga-multiply", "no-ga", "ga-sum", "ga-concat", "k1"];

struct RunResult {
    test_acc: f64,
    correct: Vec<bool>,
}

struct MultiHop {
    runs: HashMap<(&'static str, u64), RunResult>,
    elapsed: HashMap<&'static str, Duration>,
}

impl MultiHop {
    fn median(&self, variant: &str) -> f64 {
        let accs: Vec<f64> = SEEDS.iter().map(|s| self.runs[&(variant_key(variant), *s)].test_acc).collect();
        median(&accs)
    }

    fn pooled(&self, variant: &str) -> Vec<bool> {
        SEEDS
            .iter()
            .flat_map(|s| self.runs[&(variant_key(variant), *s)].correct.clone())
            .collect()
    }

    fn accs(&self, variant: &str) -> String {
        let v: Vec<String> = SEEDS
            .iter()
            .map(|s| format!("{:.1}", 100.0 * self.runs[&(variant_key(variant), *s)].test_acc))
            .collect();
        v.join("/")
    }
}

fn variant_key(v: &str) -> &'static str {
    VARIANTS.iter().find(|k| **k == v).expect("known variant")
}

fn variant_config(variant: &str) -> TrainConfig {
    let mut c = small_train_config();
    c.epochs = 6;
    c.lr0 = 0.01;
    c.batch_size = 8;
    c.reader.dropout = 0.0;
    match variant {
        "ga-multiply" => {}
        "no-ga" => c.reader.use_ga = false,
        "ga-sum" => c.reader.gating = GatingKind::Sum,
        "ga-concat" => c.reader.gating = GatingKind::Concat,
        "k1" => c.reader.hops = 1,
        _ => unreachable!(),
    }
    c
}

fn run_multihop() -> Result<MultiHop, String> {
    let data = synth_generate(&SynthConfig {
        seed: 11,
        n_examples: 2000,
        hops: 2,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (tr, va, te) = split_by_fraction(&data, (0.8, 0.1), 11);
    let split = encode_split(&tr, &va, &te);
    let mut runs = HashMap::new();
    let mut elapsed = HashMap::new();
    for variant in VARIANTS {
        let start = Instant::now();
        for seed in SEEDS {
            let mut cfg = variant_config(variant);
            cfg.seed = seed;
            let model = Model::new(cfg.reader.clone(), split.vocab.clone(), seed).map_err(|e| e.to_string())?;
            let (best, _) = train(&cfg, model, &split.train, &split.valid).map_err(|e| e.to_string())?;
            let correct = correctness(&best, &split.test).map_err(|e| e.to_string())?;
            let test_acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
            runs.insert((variant, seed), RunResult { test_acc, correct });
        }
        elapsed.insert(variant, start.elapsed());
    }
    Ok(MultiHop { runs, elapsed })
}

fn multihop_ga(m: &MultiHop) -> Outcome {
    let (ga, no) = (m.median("ga-multiply"), m.median("no-ga"));
    let (b, c) = discordant(&m.pooled("ga-multiply"), &m.pooled("no-ga")).map_err(|e| e.to_string())?;
    let p = mcnemar_exact(b, c).map_err(|e| e.to_string())?;
    let runtime = m.elapsed["ga-multiply"] + m.elapsed["no-ga"];
    let detail = format!(
        "GA {:.1}% [{}] vs no GA {:.1}% [{}]; discordant {b}/{c}, McNemar p = {p:.2e}; {:.0}s",
        100.0 * ga,
        m.accs("ga-multiply"),
        100.0 * no,
        m.accs("no-ga"),
        runtime.as_secs_f64()
    );
    ensure(ga - no >= 0.05, format!("gap below 5 points: {detail}"))?;
    ensure(b > c && p < 0.05, format!("not significant: {detail}"))?;
    ensure(runtime < Duration::from_secs(1800), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn gating_comparison(m: &MultiHop) -> Outcome {
    let (mul, sum, cat) = (m.median("ga-multiply"), m.median("ga-sum"), m.median("ga-concat"));
    let detail = format!(
        "multiply {:.1}% [{}], sum {:.1}% [{}], concat {:.1}% [{}]",
        100.0 * mul,
        m.accs("ga-multiply"),
        100.0 * sum,
        m.accs("ga-sum"),
        100.0 * cat,
        m.accs("ga-concat")
    );
    ensure(mul >= sum && mul >= cat, detail.clone())?;
    Ok(detail)
}

fn hop_sweep(m: &MultiHop) -> Outcome {
    let (k3, k1) = (m.median("ga-multiply"), m.median("k1"));
    let detail = format!("K=3 {:.1}% [{}], K=1 {:.1}% [{}]", 100.0 * k3, m.accs("ga-multiply"), 100.0 * k1, m.accs("k1"));
    ensure(k3 >= k1, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

/// `C(n, k)` in exact integer arithmetic.
fn binom(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Upper normal tail by composite Simpson integration of the density.
fn normal_upper_tail(z: f64) -> f64 {
    let (a, b, n) = (z, z + 12.0, 20_000);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn statistics_oracles() -> Outcome {
    let tail: u64 = (8..=10).map(|k| binom(10, k)).sum();
    let oracle = tail as f64 / 1024.0;
    let got = mcnemar_exact(8, 2).map_err(|e| e.to_string())?;
    ensure((got - 56.0 / 1024.0).abs() < 1e-12 && (got - oracle).abs() < 1e-12, format!("McNemar {got}"))?;
    let p = proportion_test(60, 100, 0.5).map_err(|e| e.to_string())?;
    let oracle_p = normal_upper_tail(2.0);
    ensure((p - 0.0228).abs() < 1e-3 && (p - oracle_p).abs() < 1e-6, format!("proportion test {p}, oracle {oracle_p}"))?;
    Ok(format!("McNemar(8,2) = {got:.6} = 56/1024; proportion p = {p:.5}"))
}

fn determinism() -> Outcome {
    let data = synth_generate(&SynthConfig {
        seed: 6,
        n_examples: 120,
        hops: 2,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (tr, va, _) = split_by_fraction(&data, (0.8, 0.2), 6);
    let split = encode_split(&tr, &va, &[]);
    let mut cfg = TrainConfig::default();
    cfg.reader.hidden = 8;
    cfg.reader.word_dim = 8;
    cfg.reader.char_dim = 4;
    cfg.reader.char_hidden = 4;
    cfg.reader.char_out = 4;
    cfg.epochs = 3;
    cfg.seed = 42;
    let run = || -> Result<(String, Vec<u8>, Vec<u8>), String> {
        let model = Model::new(cfg.reader.clone(), split.vocab.clone(), cfg.seed).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(cfg.clone(), model).map_err(|e| e.to_string())?;
        let mut log = String::new();
        let mut best = Vec::new();
        let mut last = Vec::new();
        train_with(trainer, &split.train, &split.valid, |m, t| {
            log.push_str(&format!("{m}\n"));
            last = t.checkpoint().to_bytes();
            if m.improved {
                best = last.clone();
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok((log, best, last))
    };
    let a = run()?;
    let b = run()?;
    ensure(a.0 == b.0, "metrics logs differ")?;
    ensure(a.1 == b.1 && a.2 == b.2, "checkpoints differ")?;
    Ok(format!("3 epochs twice: identical logs and {}-byte checkpoints", a.2.len()))
}

fn schedule_and_clipping() -> Outcome {
    let lrs: Vec<f64> = (1..=5).map(|e| lr_schedule(e, 5e-4)).collect();
    ensure(lrs == [5e-4, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5], format!("schedule {lrs:?}"))?;
    let mut g = vec![vec![30.0, 40.0]];
    clip_gradients(&mut g, 10.0);
    ensure((g[0][0] - 6.0).abs() < 1e-12 && (g[0][1] - 8.0).abs() < 1e-12, format!("clipped {g:?}"))?;
    let mut pg = ParamGrads::from_vecs(vec![vec![30.0], vec![40.0]]);
    clip_gradients(pg.as_slices_mut(), 10.0);
    ensure((pg.global_norm() - 10.0).abs() < 1e-12, "global norm after clipping")?;
    Ok(format!("lr {lrs:?}; clip [30,40] -> {:?}", g[0]))
}

fn attention_files() -> Outcome {
    let data = synth_generate(&SynthConfig {
        seed: 7,
        n_examples: 60,
        hops: 2,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (tr, va, te) = split_by_fraction(&data, (0.8, 0.1), 7);
    let split = encode_split(&tr, &va, &te);
    let mut cfg = small_train_config();
    cfg.reader.hidden = 8;
    cfg.reader.word_dim = 8;
    cfg.epochs = 2;
    let model = Model::new(cfg.reader.clone(), split.vocab.clone(), 1).map_err(|e| e.to_string())?;
    let (model, _) = train(&cfg, model, &split.train, &split.valid).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked_rows = 0;
    for (i, ex) in split.test.iter().enumerate() {
        let sub = dir.path().join(format!("ex{i}"));
        let files = attention_export(&model, ex, &sub, "ex", false).map_err(|e| e.to_string())?;
        let names: Vec<String> = files
            .iter()
            .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        let alpha_csv = names.iter().filter(|n| n.contains("_alpha") && n.ends_with(".csv")).count();
        let s_csv = names.iter().filter(|n| n.ends_with("_s.csv")).count();
        ensure(alpha_csv == 2 && s_csv == 1, format!("files {names:?}"))?;
        for f in &files {
            let text = std::fs::read_to_string(f).map_err(|e| e.to_string())?;
            if f.extension().is_some_and(|e| e == "svg") {
                let doc = roxmltree::Document::parse(&text).map_err(|e| format!("{}: {e}", f.display()))?;
                ensure(doc.root_element().tag_name().name() == "svg", "root element is not svg")?;
                continue;
            }
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            for rec in reader.records() {
                let rec = rec.map_err(|e| e.to_string())?;
                let sum: f64 = rec.iter().skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
                ensure((sum - 1.0).abs() < 1e-6, format!("{} row sums to {sum}", f.display()))?;
                checked_rows += 1;
            }
        }
    }
    Ok(format!(
        "{} examples: 2 alpha CSVs + 1 s CSV each, {checked_rows} rows sum to 1, SVGs parse",
        split.test.len()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let multihop: OnceCell<Result<MultiHop, String>> = OnceCell::new();
    let shared = || multihop.get_or_init(run_multihop).as_ref().map_err(Clone::clone);

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("gru zero parameters", Box::new(gru_zero_parameters)),
        ("gated attention identities", Box::new(ga_identities)),
        ("pointer-sum oracle", Box::new(pointer_sum_oracle)),
        ("memorization", Box::new(memorization)),
        ("multi-hop GA vs no GA", Box::new(move || multihop_ga(shared()?))),
        ("gating comparison", Box::new(move || gating_comparison(shared()?))),
        ("hop sweep", Box::new(move || hop_sweep(shared()?))),
        ("statistics oracles", Box::new(statistics_oracles)),
        ("determinism", Box::new(determinism)),
        ("schedule and clipping", Box::new(schedule_and_clipping)),
        ("attention export", Box::new(attention_files)),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in &criteria {
        if !selected(name) {
            continue;
        }
        ran += 1;
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(o) => o,
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
