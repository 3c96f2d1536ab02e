//! The Gated-Attention Reader.
//!
//! Document tokens pass through `K` layers. Layers `1..K-1` each run a document
//! Bi-GRU and a layer-specific query Bi-GRU, then gate every document token by
//! its own attention-weighted summary of the query. Layer `K` scores document
//! positions against the query state at the cloze position, and candidates
//! collect the probability mass of every position they occupy.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Embeddings, EncodedExample, Vocab};
use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamId, ParamSet};
use crate::seq::{bigru_full, bigru_states, BiGruParams};
use crate::tensor::{Tape, Tensor, Var};

pub use crate::corpus::qe_comm;

/// How a document token is combined with its query summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GatingKind {
    Multiply,
    Sum,
    Concat,
}

impl GatingKind {
    /// Output width for input width `d`.
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            GatingKind::Concat => 2 * d,
            GatingKind::Multiply | GatingKind::Sum => d,
        }
    }
}

impl fmt::Display for GatingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatingKind::Multiply => "multiply",
            GatingKind::Sum => "sum",
            GatingKind::Concat => "concat",
        })
    }
}

impl FromStr for GatingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" | "mul" => Ok(GatingKind::Multiply),
            "sum" | "add" => Ok(GatingKind::Sum),
            "concat" => Ok(GatingKind::Concat),
            _ => Err(Error::Parameter(format!("unknown gating kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderConfig {
    /// Number of layers `K`; `K = 1` has no gated-attention module.
    pub hops: usize,
    pub gating: GatingKind,
    pub use_ga: bool,
    /// When false, every document token is gated by the query state at the cloze position.
    pub use_token_attention: bool,
    pub use_char: bool,
    pub use_feature: bool,
    pub fix_word_table: bool,
    pub word_dim: usize,
    pub hidden: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub char_out: usize,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            hops: 3,
            gating: GatingKind::Multiply,
            use_ga: true,
            use_token_attention: true,
            use_char: true,
            use_feature: false,
            fix_word_table: false,
            word_dim: 100,
            hidden: 128,
            char_dim: 25,
            char_hidden: 50,
            char_out: 50,
            feature_dim: 2,
            dropout: 0.3,
        }
    }
}

fn parse_flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parameter(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parameter(format!("{key}: cannot parse {v:?}")))
}

impl ReaderConfig {
    pub const KEYS: [&'static str; 14] = [
        "hops",
        "gating",
        "use_ga",
        "use_token_attention",
        "use_char",
        "use_feature",
        "fix_word_table",
        "word_dim",
        "hidden",
        "char_dim",
        "char_hidden",
        "char_out",
        "feature_dim",
        "dropout",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "hops" | "k" => self.hops = parse_num(key, value)?,
            "gating" => self.gating = value.parse()?,
            "use_ga" => self.use_ga = parse_flag(key, value)?,
            "use_token_attention" => self.use_token_attention = parse_flag(key, value)?,
            "use_char" => self.use_char = parse_flag(key, value)?,
            "use_feature" => self.use_feature = parse_flag(key, value)?,
            "fix_word_table" => self.fix_word_table = parse_flag(key, value)?,
            "word_dim" => self.word_dim = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "char_dim" => self.char_dim = parse_num(key, value)?,
            "char_hidden" => self.char_hidden = parse_num(key, value)?,
            "char_out" => self.char_out = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let v = [
            self.hops.to_string(),
            self.gating.to_string(),
            self.use_ga.to_string(),
            self.use_token_attention.to_string(),
            self.use_char.to_string(),
            self.use_feature.to_string(),
            self.fix_word_table.to_string(),
            self.word_dim.to_string(),
            self.hidden.to_string(),
            self.char_dim.to_string(),
            self.char_hidden.to_string(),
            self.char_out.to_string(),
            self.feature_dim.to_string(),
            format!("{:?}", self.dropout),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hops", self.hops),
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("char_dim", self.char_dim),
            ("char_hidden", self.char_hidden),
            ("char_out", self.char_out),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{k} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Whether any layer runs a gated-attention module.
    pub fn has_ga(&self) -> bool {
        self.use_ga && self.hops > 1
    }

    pub fn embedding_dim(&self) -> usize {
        self.word_dim + if self.use_char { self.char_out } else { 0 }
    }

    /// Input width of document layer `k` (0-based).
    pub fn doc_input_dim(&self, k: usize) -> usize {
        let base = if k == 0 {
            self.embedding_dim()
        } else if self.use_ga {
            self.gating.output_dim(2 * self.hidden)
        } else {
            2 * self.hidden
        };
        if k + 1 == self.hops && self.use_feature {
            base + self.feature_dim
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharModel {
    pub table: ParamId,
    pub gru: BiGruParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// All trainable state of a reader plus the handles that locate each array.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderParams {
    pub config: ReaderConfig,
    pub set: ParamSet,
    pub word_table: ParamId,
    pub char_model: Option<CharModel>,
    pub feature_table: Option<ParamId>,
    pub doc_layers: Vec<BiGruParams>,
    pub query_layers: Vec<BiGruParams>,
}

impl ReaderParams {
    pub fn init(config: ReaderConfig, vocab_size: usize, n_chars: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let word_table = set.add_glorot("word_table", vocab_size, config.word_dim, &mut rng);
        set.set_frozen(word_table, config.fix_word_table);
        let char_model = config.use_char.then(|| CharModel {
            table: set.add_glorot("char.table", n_chars, config.char_dim, &mut rng),
            gru: BiGruParams::init(&mut set, "char.gru", config.char_dim, config.char_hidden, &mut rng),
            proj_w: set.add_glorot("char.proj_w", config.char_out, 2 * config.char_hidden, &mut rng),
            proj_b: set.add_zeros("char.proj_b", vec![config.char_out]),
        });
        let feature_table = config
            .use_feature
            .then(|| set.add_glorot("feature_table", 2, config.feature_dim, &mut rng));
        let mut doc_layers = Vec::with_capacity(config.hops);
        let mut query_layers = Vec::with_capacity(config.hops);
        for k in 0..config.hops {
            doc_layers.push(BiGruParams::init(
                &mut set,
                &format!("doc{}", k + 1),
                config.doc_input_dim(k),
                config.hidden,
                &mut rng,
            ));
            query_layers.push(BiGruParams::init(
                &mut set,
                &format!("query{}", k + 1),
                config.embedding_dim(),
                config.hidden,
                &mut rng,
            ));
        }
        let p = Self {
            config,
            set,
            word_table,
            char_model,
            feature_table,
            doc_layers,
            query_layers,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks that layer widths chain for the configured gating and features.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.hops == 0 || self.doc_layers.len() != c.hops || self.query_layers.len() != c.hops {
            return Err(Error::Parameter("layer count does not match hops".into()));
        }
        for (k, (d, q)) in self.doc_layers.iter().zip(&self.query_layers).enumerate() {
            d.validate(&self.set)?;
            q.validate(&self.set)?;
            if d.n_in() != c.doc_input_dim(k) || q.n_in() != c.embedding_dim() {
                return Err(Error::Dimension {
                    op: "reader layers",
                    lhs: vec![k, d.n_in(), q.n_in()],
                    rhs: vec![k, c.doc_input_dim(k), c.embedding_dim()],
                });
            }
        }
        Ok(())
    }

    /// Copies pretrained vectors into the word table rows of matching tokens.
    /// Returns how many rows were filled.
    pub fn load_pretrained(&mut self, vocab: &Vocab, emb: &Embeddings) -> Result<usize> {
        if emb.dim != self.config.word_dim {
            return Err(Error::Parameter(format!(
                "embedding file has dimension {}, model expects {}",
                emb.dim, self.config.word_dim
            )));
        }
        let d = self.config.word_dim;
        let table = self.set.get_mut(self.word_table).data_mut();
        let mut filled = 0;
        for (id, tok) in vocab.tokens().iter().enumerate() {
            if let Some(v) = emb.vectors.get(tok) {
                table[id * d..(id + 1) * d].copy_from_slice(v);
                filled += 1;
            }
        }
        Ok(filled)
    }
}

/// Forward-pass mode. Training mode draws dropout masks from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

pub struct ForwardOutput {
    /// Candidate probabilities, in candidate order.
    pub probs: Var,
    /// Attention `s` over document positions at the final layer.
    pub doc_attention: Var,
    /// Query attention `α` of each gated layer, `[|Q|, |D|]`.
    pub query_attention: Vec<Var>,
}

/// Query attention per document token and the gated document representation.
///
/// `d` is `[f, |D|]`, `q` is `[f, |Q|]`. Returns `(X, α)` with `α` of shape `[|Q|, |D|]`.
pub fn ga_module(tape: &mut Tape<'_>, d: Var, q: Var, gating: GatingKind, query_mask: &[bool]) -> Result<(Var, Var)> {
    if tape.shape(d).len() != 2 || tape.shape(q).len() != 2 || tape.shape(d)[0] != tape.shape(q)[0] {
        return Err(Error::Dimension {
            op: "ga_module",
            lhs: tape.shape(d).to_vec(),
            rhs: tape.shape(q).to_vec(),
        });
    }
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(qt, d)?;
    let alpha = tape.softmax_masked_cols(scores, query_mask)?;
    let q_tilde = tape.matmul(q, alpha)?;
    Ok((gate(tape, d, q_tilde, gating)?, alpha))
}

fn gate(tape: &mut Tape<'_>, d: Var, q_tilde: Var, gating: GatingKind) -> Result<Var> {
    match gating {
        GatingKind::Multiply => tape.mul(d, q_tilde),
        GatingKind::Sum => tape.add(d, q_tilde),
        GatingKind::Concat => tape.concat(d, q_tilde, 0),
    }
}

/// Gating by the single query column `pos` for every document token.
fn broadcast_gate(tape: &mut Tape<'_>, d: Var, q: Var, pos: usize, gating: GatingKind) -> Result<(Var, Var)> {
    let (nq, nd) = (tape.shape(q)[1], tape.shape(d)[1]);
    let mut onehot = Tensor::zeros(vec![nq, nd]);
    onehot.data_mut()[pos * nd..(pos + 1) * nd].fill(1.0);
    let alpha = tape.constant(onehot);
    let q_tilde = tape.matmul(q, alpha)?;
    Ok((gate(tape, d, q_tilde, gating)?, alpha))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

/// Fixed random vector for an out-of-vocabulary token, a pure function of its text.
pub fn oov_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token));
    let limit = (3.0 / dim as f64).sqrt();
    (0..dim).map(|_| rng.random_range(-limit..limit)).collect()
}

struct Embedder<'a, 'p> {
    p: &'p ReaderParams,
    char_cache: HashMap<&'a str, Var>,
}

impl<'a, 'p> Embedder<'a, 'p> {
    fn char_vector(&mut self, tape: &mut Tape<'p>, token: &'a str, chars: &[usize]) -> Result<Var> {
        if let Some(&v) = self.char_cache.get(token) {
            return Ok(v);
        }
        let cm = self.p.char_model.as_ref().expect("char model enabled");
        if chars.is_empty() {
            return Err(Error::Example(format!("token {token:?} has no characters")));
        }
        let set = &self.p.set;
        let table = tape.param(set, cm.table);
        let rows = tape.gather_rows(table, chars)?;
        let x = tape.transpose(rows)?;
        let h0 = tape.constant(Tensor::zeros(vec![cm.gru.n_h]));
        let states = bigru_states(tape, set, &cm.gru, x, h0)?;
        let (f, b) = states.finals();
        let z = tape.concat(f, b, 0)?;
        let w = tape.param(set, cm.proj_w);
        let bias = tape.param(set, cm.proj_b);
        let wz = tape.matmul(w, z)?;
        let out = tape.add(wz, bias)?;
        self.char_cache.insert(token, out);
        Ok(out)
    }

    /// `[embedding_dim, n]` matrix for a token sequence.
    fn embed(&mut self, tape: &mut Tape<'p>, ids: &[usize], tokens: &'a [String], chars: &[Vec<usize>]) -> Result<Var> {
        let p = self.p;
        let table = tape.param(&p.set, p.word_table);
        let words = if ids.contains(&Vocab::OOV) {
            let mut cols = Vec::with_capacity(ids.len());
            for (&id, tok) in ids.iter().zip(tokens) {
                let col = if id == Vocab::OOV {
                    tape.constant(Tensor::vector(oov_vector(tok, p.config.word_dim)))
                } else {
                    let row = tape.gather_rows(table, &[id])?;
                    tape.reshape(row, vec![p.config.word_dim])?
                };
                cols.push(col);
            }
            tape.stack_columns(&cols)?
        } else {
            let rows = tape.gather_rows(table, ids)?;
            tape.transpose(rows)?
        };
        if p.char_model.is_none() {
            return Ok(words);
        }
        let cols = tokens
            .iter()
            .zip(chars)
            .map(|(t, c)| self.char_vector(tape, t, c))
            .collect::<Result<Vec<_>>>()?;
        let ch = tape.stack_columns(&cols)?;
        tape.concat(words, ch, 0)
    }
}

/// Embedding of a single token: `L(w) ∥ C(w)` with characters, `L(w)` without.
pub fn embed_token<'p>(tape: &mut Tape<'p>, p: &'p ReaderParams, id: usize, token: &str, chars: &[usize]) -> Result<Var> {
    let tokens = [token.to_string()];
    let mut e = Embedder {
        p,
        char_cache: HashMap::new(),
    };
    let m = e.embed(tape, &[id], &tokens, &[chars.to_vec()])?;
    let n = tape.shape(m)[0];
    tape.reshape(m, vec![n])
}

/// Runs the reader on one example and returns candidate probabilities plus attention.
pub fn forward<'p>(tape: &mut Tape<'p>, p: &'p ReaderParams, ex: &EncodedExample, mode: Mode) -> Result<ForwardOutput> {
    ex.validate()?;
    let c = &p.config;
    let set = &p.set;
    let (training, seed) = match mode {
        Mode::Train { seed } => (true, seed),
        Mode::Eval => (false, 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc_mask = vec![true; ex.doc_ids.len()];
    let query_mask = vec![true; ex.query_ids.len()];

    let mut embedder = Embedder {
        p,
        char_cache: HashMap::new(),
    };
    let doc_emb = embedder.embed(tape, &ex.doc_ids, &ex.doc_tokens, &ex.doc_chars)?;
    let query_emb = embedder.embed(tape, &ex.query_ids, &ex.query_tokens, &ex.query_chars)?;
    let mut x = tape.dropout(doc_emb, c.dropout, &mut rng, training)?;
    let y = tape.dropout(query_emb, c.dropout, &mut rng, training)?;
    let h0 = tape.constant(Tensor::zeros(vec![c.hidden]));

    let mut query_attention = Vec::new();
    for k in 0..c.hops - 1 {
        if k > 0 {
            x = tape.dropout(x, c.dropout, &mut rng, training)?;
        }
        let d = bigru_full(tape, set, &p.doc_layers[k], x, h0)?;
        if !c.use_ga {
            x = d;
            continue;
        }
        let q = bigru_full(tape, set, &p.query_layers[k], y, h0)?;
        let (gated, alpha) = if c.use_token_attention {
            ga_module(tape, d, q, c.gating, &query_mask)?
        } else {
            broadcast_gate(tape, d, q, ex.cloze_pos, c.gating)?
        };
        x = gated;
        query_attention.push(alpha);
    }

    let last = c.hops - 1;
    if last > 0 {
        x = tape.dropout(x, c.dropout, &mut rng, training)?;
    }
    if let Some(f) = p.feature_table {
        let table = tape.param(set, f);
        let flags: Vec<usize> = ex.qe_flags.iter().map(|&b| usize::from(b)).collect();
        let rows = tape.gather_rows(table, &flags)?;
        let e = tape.transpose(rows)?;
        x = tape.concat(x, e, 0)?;
    }
    let d = bigru_full(tape, set, &p.doc_layers[last], x, h0)?;
    let q = bigru_full(tape, set, &p.query_layers[last], y, h0)?;
    let q_cloze = tape.column(q, ex.cloze_pos)?;
    let dt = tape.transpose(d)?;
    let scores = tape.matmul(dt, q_cloze)?;
    let s = tape.softmax_masked(scores, &doc_mask)?;
    let mass = tape.group_sum(s, &ex.candidate_positions)?;
    let probs = tape.normalize(mass)?;
    Ok(ForwardOutput {
        probs,
        doc_attention: s,
        query_attention,
    })
}

/// Pointer-sum aggregation on plain values: `Pr(c) ∝ Σ_{i ∈ I(c)} s_i`.
pub fn aggregate_candidates(s: &[f64], positions: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let sv = tape.constant(Tensor::vector(s.to_vec()));
    let mass = tape.group_sum(sv, positions)?;
    let probs = tape.normalize(mass)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Index of the most probable candidate; ties go to the lowest index.
pub fn predict(probs: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probs.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Parameter("cannot predict from an empty candidate list".into()))
}

/// Attention captured from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `α` per gated layer, each `[|Q|, |D|]`.
    pub query_attention: Vec<Tensor>,
    /// Final distribution over document positions.
    pub doc_attention: Vec<f64>,
    pub probs: Vec<f64>,
}

/// A reader together with the vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ReaderParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn new(config: ReaderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = ReaderParams::init(config, vocab.len(), vocab.num_chars(), seed)?;
        Ok(Self { params, vocab })
    }

    pub fn config(&self) -> &ReaderConfig {
        &self.params.config
    }

    pub fn trace(&self, ex: &EncodedExample) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &self.params, ex, Mode::Eval)?;
        Ok(AttentionTrace {
            query_attention: out
                .query_attention
                .iter()
                .map(|&a| tape.value(a).clone())
                .collect(),
            doc_attention: tape.value(out.doc_attention).data().to_vec(),
            probs: tape.value(out.probs).data().to_vec(),
        })
    }

    pub fn probabilities(&self, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &self.params, ex, Mode::Eval)?;
        Ok(tape.value(out.probs).data().to_vec())
    }

    /// Predicted candidate index and its probability.
    pub fn predict(&self, ex: &EncodedExample) -> Result<(usize, f64)> {
        let probs = self.probabilities(ex)?;
        let i = predict(&probs)?;
        Ok((i, probs[i]))
    }

    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut meta = vec![("kind".to_string(), "ga-reader".to_string())];
        meta.extend(self.params.config.pairs());
        meta.push(("vocab".into(), self.vocab.tokens().join(" ")));
        meta.push(("chars".into(), self.vocab.chars().iter().collect()));
        meta.extend_from_slice(extra);
        Checkpoint {
            meta,
            params: self.params.set.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = ReaderConfig::default();
        for key in ReaderConfig::KEYS {
            config.set(key, ck.require_meta(key)?)?;
        }
        let tokens: Vec<String> = ck.require_meta("vocab")?.split(' ').map(String::from).collect();
        let chars: Vec<char> = ck.require_meta("chars")?.chars().collect();
        let vocab = Vocab::from_parts(&tokens, &chars)?;
        let mut params = ReaderParams::init(config, vocab.len(), vocab.num_chars(), 0)?;
        if params.set.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, configuration expects {}",
                ck.params.len(),
                params.set.len()
            )));
        }
        params.set.load_values(&ck.params)?;
        for id in params.set.ids().collect::<Vec<_>>() {
            let name = params.set.name(id).to_string();
            let src = ck.params.find(&name).expect("checked by load_values");
            params.set.set_frozen(id, ck.params.is_frozen(src));
        }
        Ok(Self { params, vocab })
    }
}
