//! Helpers shared by the integration tests.
#![allow(dead_code)]

use gareader::corpus::{tokenize, ClozeExample, EncodedExample, Vocab};
use gareader::params::{ParamGrads, ParamSet};
use gareader::reader::{forward, Mode, ReaderParams};
use gareader::tensor::{Tape, Tensor, Var};
use gareader::{GatingKind, ReaderConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(analytic) + norm(numeric);
    if denom < 1e-300 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects `out` onto fixed pseudo-random weights so every output entry matters.
fn project(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(random_tensor(shape, &mut rng));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst relative error over all leaf inputs of `f`.
pub fn check_leaves<'s>(inputs: &[Tensor], f: impl Fn(&mut Tape<'s>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.dense(&tape, v)).collect();
        (tape.value(loss).data()[0], grads)
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric[j] = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Worst relative error over every parameter array of `set`.
pub fn check_params(set: &ParamSet, f: impl for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var>) -> Vec<(String, f64)> {
    let loss_of = |s: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let out = f(&mut tape, s).unwrap();
        let loss = project(&mut tape, out).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, set).unwrap();
    let loss = project(&mut tape, out).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut pg = ParamGrads::zeros_like(set);
    g.accumulate_params(&tape, &mut pg);
    let mut report = Vec::new();
    let mut work = set.clone();
    for id in set.ids() {
        let n = set.get(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = set.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + STEP;
            let up = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig - STEP;
            let down = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        report.push((set.name(id).to_string(), rel_err(pg.get(id), &numeric)));
    }
    report
}

/// Reader parameters perturbed away from zero biases so every path carries signal.
pub fn jitter(p: &mut ReaderParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in p.set.ids().collect::<Vec<_>>() {
        for v in p.set.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

pub fn toy_config(gating: GatingKind) -> ReaderConfig {
    ReaderConfig {
        hops: 2,
        gating,
        word_dim: 3,
        hidden: 4,
        char_dim: 2,
        char_hidden: 2,
        char_out: 2,
        feature_dim: 2,
        use_char: true,
        use_feature: true,
        dropout: 0.3,
        ..Default::default()
    }
}

/// Document of length 5, query of length 3, two candidates.
pub fn toy_example() -> (Vocab, EncodedExample) {
    let ex = ClozeExample::new(
        tokenize("mary went to the park"),
        tokenize("mary @cloze visited"),
        vec![tokenize("park"), tokenize("mary")],
        0,
    )
    .unwrap();
    let vocab = Vocab::build([&ex]);
    let enc = vocab.encode(&ex);
    (vocab, enc)
}

fn reader_loss(p: &ReaderParams, ex: &EncodedExample) -> f64 {
    let mut tape = Tape::new();
    let out = forward(&mut tape, p, ex, Mode::Train { seed: 7 }).unwrap();
    let loss = tape.neg_log(out.probs, ex.answer).unwrap();
    tape.value(loss).data()[0]
}

/// Finite-difference check of `-ln Pr(answer)` for the toy reader, per parameter array.
/// Returns `(name, relative error, analytic gradient norm)`.
pub fn reader_gradcheck(config: ReaderConfig, seed: u64) -> Vec<(String, f64, f64)> {
    let (vocab, ex) = toy_example();
    let mut p = ReaderParams::init(config, vocab.len(), vocab.num_chars(), seed).unwrap();
    jitter(&mut p, seed + 1);

    let mut tape = Tape::new();
    let out = forward(&mut tape, &p, &ex, Mode::Train { seed: 7 }).unwrap();
    let loss = tape.neg_log(out.probs, ex.answer).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut pg = ParamGrads::zeros_like(&p.set);
    g.accumulate_params(&tape, &mut pg);
    drop(tape);

    let mut work = p.clone();
    let mut report = Vec::new();
    for id in p.set.ids() {
        let n = p.set.get(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = p.set.get(id).data()[j];
            work.set.get_mut(id).data_mut()[j] = orig + STEP;
            let up = reader_loss(&work, &ex);
            work.set.get_mut(id).data_mut()[j] = orig - STEP;
            let down = reader_loss(&work, &ex);
            work.set.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        let norm = pg.get(id).iter().map(|v| v * v).sum::<f64>().sqrt();
        report.push((p.set.name(id).to_string(), rel_err(pg.get(id), &numeric), norm));
    }
    report
}
