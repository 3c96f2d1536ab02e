//! Cloze examples, file formats, vocabularies, the synthetic task generator and batching.
//!
//! Native example files hold one record per example:
//!
//! ```text
//! <document tokens>
//! <query tokens, with @cloze at the blank>
//! <answer>
//! <candidate 1> | <candidate 2> | ...
//! <blank line>
//! ```
//!
//! Tokens are whitespace-separated and lowercased on load.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "@cloze";

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

/// One cloze question `(d, q, a, C)` with the document positions of every candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeExample {
    pub doc: Vec<String>,
    pub query: Vec<String>,
    /// Index of the placeholder in `query`.
    pub cloze_pos: usize,
    pub candidates: Vec<Vec<String>>,
    /// Index into `candidates`.
    pub answer: usize,
    /// `positions[c]` lists the document positions holding any token of candidate `c`.
    pub positions: Vec<Vec<usize>>,
}

/// Positions in `doc` where any token of each candidate occurs, ascending.
pub fn candidate_positions(doc: &[String], candidates: &[Vec<String>]) -> Vec<Vec<usize>> {
    candidates
        .iter()
        .map(|c| {
            doc.iter()
                .enumerate()
                .filter(|(_, t)| c.contains(t))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

impl ClozeExample {
    /// Validates the cloze invariants and computes candidate positions.
    pub fn new(doc: Vec<String>, query: Vec<String>, candidates: Vec<Vec<String>>, answer: usize) -> Result<Self> {
        if doc.is_empty() {
            return Err(Error::Example("empty document".into()));
        }
        let holes: Vec<usize> = query
            .iter()
            .enumerate()
            .filter(|(_, t)| *t == PLACEHOLDER)
            .map(|(i, _)| i)
            .collect();
        let cloze_pos = match holes.as_slice() {
            [p] => *p,
            _ => {
                return Err(Error::Example(format!(
                    "query must contain exactly one {PLACEHOLDER}, found {}",
                    holes.len()
                )))
            }
        };
        if answer >= candidates.len() {
            return Err(Error::Example("answer is not among the candidates".into()));
        }
        if candidates.iter().any(Vec::is_empty) {
            return Err(Error::Example("empty candidate".into()));
        }
        let positions = candidate_positions(&doc, &candidates);
        if let Some(c) = positions.iter().position(Vec::is_empty) {
            return Err(Error::Example(format!(
                "candidate {:?} does not occur in the document",
                candidates[c].join(" ")
            )));
        }
        Ok(Self {
            doc,
            query,
            cloze_pos,
            candidates,
            answer,
            positions,
        })
    }

    pub fn candidate_text(&self, c: usize) -> String {
        self.candidates[c].join(" ")
    }

    pub fn answer_text(&self) -> String {
        self.candidate_text(self.answer)
    }

    /// Drops tail tokens past `max_len`, then candidates left without positions.
    pub fn truncated(&self, max_len: usize) -> Result<Self> {
        if self.doc.len() <= max_len {
            return Ok(self.clone());
        }
        let doc: Vec<String> = self.doc[..max_len].to_vec();
        let positions = candidate_positions(&doc, &self.candidates);
        if positions[self.answer].is_empty() {
            return Err(Error::Example(format!(
                "answer {:?} falls entirely past the {max_len}-token limit",
                self.answer_text()
            )));
        }
        let mut candidates = Vec::new();
        let mut answer = 0;
        for (c, pos) in positions.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            if c == self.answer {
                answer = candidates.len();
            }
            candidates.push(self.candidates[c].clone());
        }
        Self::new(doc, self.query.clone(), candidates, answer)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based record number.
    pub record: usize,
    /// Line where the record starts.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub examples: Vec<ClozeExample>,
    pub rejected: Vec<Rejection>,
}

pub fn load_examples(path: &Path, max_doc_len: Option<usize>) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path)?;
    parse_examples(&text, &path.display().to_string(), max_doc_len)
}

/// Parses the native record format. Structural problems are errors; records that
/// parse but break a cloze invariant are collected in [`LoadReport::rejected`].
pub fn parse_examples(text: &str, source: &str, max_doc_len: Option<usize>) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut record: Vec<(usize, &str)> = Vec::with_capacity(4);
    let mut n_records = 0;
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut flush = |record: &mut Vec<(usize, &str)>, report: &mut LoadReport| -> Result<()> {
        if record.is_empty() {
            return Ok(());
        }
        n_records += 1;
        let start = record[0].0;
        if record.len() != 4 {
            return Err(Error::Parse {
                path: source.to_string(),
                line: start,
                msg: format!("record has {} lines, expected 4", record.len()),
            });
        }
        let doc = tokenize(record[0].1);
        let query = tokenize(record[1].1);
        let answer = tokenize(record[2].1);
        let candidates: Vec<Vec<String>> = record[3].1.split('|').map(tokenize).collect();
        record.clear();
        let built = match candidates.iter().position(|c| *c == answer) {
            Some(a) => ClozeExample::new(doc, query, candidates, a),
            None => Err(Error::Example(format!(
                "answer {:?} is not among the candidates",
                answer.join(" ")
            ))),
        }
        .and_then(|ex| match max_doc_len {
            Some(m) => ex.truncated(m),
            None => Ok(ex),
        });
        match built {
            Ok(ex) => report.examples.push(ex),
            Err(e) => report.rejected.push(Rejection {
                record: n_records,
                line: start,
                reason: e.to_string(),
            }),
        }
        Ok(())
    };
    for (no, line) in lines {
        if line.trim().is_empty() {
            flush(&mut record, &mut report)?;
        } else {
            record.push((no, line));
        }
    }
    flush(&mut record, &mut report)?;
    Ok(report)
}

pub fn write_examples<W: Write>(mut w: W, examples: &[ClozeExample]) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}", ex.doc.join(" "))?;
        writeln!(w, "{}", ex.query.join(" "))?;
        writeln!(w, "{}", ex.answer_text())?;
        let cands: Vec<String> = (0..ex.candidates.len()).map(|c| ex.candidate_text(c)).collect();
        writeln!(w, "{}", cands.join(" | "))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_examples(path: &Path, examples: &[ClozeExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_examples(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

/// Pretrained vectors keyed by token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    /// Tokens that appeared more than once; the last occurrence is kept.
    pub duplicates: Vec<String>,
}

pub fn load_embeddings(path: &Path, dim: usize) -> Result<Embeddings> {
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, &path.display().to_string(), dim)
}

pub fn parse_embeddings(text: &str, source: &str, dim: usize) -> Result<Embeddings> {
    let mut out = Embeddings {
        dim,
        ..Default::default()
    };
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let perr = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let values = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(perr(format!("expected {dim} values, found {}", values.len())));
        }
        let token = token.to_lowercase();
        if out.vectors.insert(token.clone(), values).is_some() {
            log::warn!("{source}:{}: duplicate embedding for {token:?}, keeping the last", i + 1);
            out.duplicates.push(token);
        }
    }
    Ok(out)
}

/// Per document token, whether it also occurs in the query.
pub fn qe_comm(doc: &[String], query: &[String]) -> Vec<bool> {
    let q: HashSet<&str> = query.iter().map(String::as_str).collect();
    doc.iter().map(|t| q.contains(t.as_str())).collect()
}

/// Token and character vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    chars: Vec<char>,
    char_index: HashMap<char, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const OOV: usize = 1;
    pub const PLACEHOLDER: usize = 2;
    pub const CHAR_PAD: usize = 0;
    pub const CHAR_UNK: usize = 1;
    const SPECIALS: [&'static str; 3] = ["<pad>", "<oov>", PLACEHOLDER];
    const CHAR_SPECIALS: usize = 2;

    /// Builds from tokens in order of first appearance, so ids are deterministic.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a ClozeExample>) -> Self {
        let mut tokens = Vec::new();
        let mut chars = Vec::new();
        let mut seen_c = HashSet::new();
        for ex in examples {
            let cand_tokens = ex.candidates.iter().flatten();
            for t in ex.doc.iter().chain(&ex.query).chain(cand_tokens) {
                tokens.push(t.clone());
                for ch in t.chars() {
                    if seen_c.insert(ch) {
                        chars.push(ch);
                    }
                }
            }
        }
        let mut v = Self::from_tokens(tokens);
        v.char_index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + Self::CHAR_SPECIALS))
            .collect();
        v.chars = chars;
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens: Self::SPECIALS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
            chars: Vec::new(),
            char_index: HashMap::new(),
        };
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            v.index.insert(s.to_string(), i);
        }
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its serialized token and character lists.
    pub fn from_parts(tokens: &[String], chars: &[char]) -> Result<Self> {
        if tokens.len() < Self::SPECIALS.len() || tokens[..3] != Self::SPECIALS.map(String::from) {
            return Err(Error::Checkpoint("vocabulary does not start with the special tokens".into()));
        }
        let mut v = Self::from_tokens(tokens[3..].to_vec());
        if v.tokens.len() != tokens.len() {
            return Err(Error::Checkpoint("vocabulary has duplicate tokens".into()));
        }
        v.chars = chars.to_vec();
        v.char_index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + Self::CHAR_SPECIALS))
            .collect();
        Ok(v)
    }

    /// Token count including the special entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len() + Self::CHAR_SPECIALS
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::OOV)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.char_index.get(&c).copied().unwrap_or(Self::CHAR_UNK))
            .collect()
    }

    pub fn encode(&self, ex: &ClozeExample) -> EncodedExample {
        EncodedExample {
            doc_ids: ex.doc.iter().map(|t| self.id(t)).collect(),
            query_ids: ex.query.iter().map(|t| self.id(t)).collect(),
            doc_chars: ex.doc.iter().map(|t| self.char_ids(t)).collect(),
            query_chars: ex.query.iter().map(|t| self.char_ids(t)).collect(),
            doc_tokens: ex.doc.clone(),
            query_tokens: ex.query.clone(),
            cloze_pos: ex.cloze_pos,
            candidate_positions: ex.positions.clone(),
            answer: ex.answer,
            qe_flags: qe_comm(&ex.doc, &ex.query),
        }
    }
}

/// Model-ready view of one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub doc_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub doc_chars: Vec<Vec<usize>>,
    pub query_chars: Vec<Vec<usize>>,
    /// Surface forms, used for out-of-vocabulary vectors and labels.
    pub doc_tokens: Vec<String>,
    pub query_tokens: Vec<String>,
    pub cloze_pos: usize,
    pub candidate_positions: Vec<Vec<usize>>,
    pub answer: usize,
    pub qe_flags: Vec<bool>,
}

impl EncodedExample {
    pub fn validate(&self) -> Result<()> {
        let (nd, nq) = (self.doc_ids.len(), self.query_ids.len());
        if nd == 0 || nq == 0 {
            return Err(Error::Example("empty document or query".into()));
        }
        if self.cloze_pos >= nq {
            return Err(Error::Index {
                what: "cloze position",
                index: self.cloze_pos,
                len: nq,
            });
        }
        if self.candidate_positions.is_empty() {
            return Err(Error::Example("no candidates".into()));
        }
        if self.candidate_positions.iter().all(Vec::is_empty) {
            return Err(Error::Example("no candidate occurs in the document".into()));
        }
        if let Some(&bad) = self.candidate_positions.iter().flatten().find(|&&p| p >= nd) {
            return Err(Error::Index {
                what: "candidate position",
                index: bad,
                len: nd,
            });
        }
        if self.answer >= self.candidate_positions.len() {
            return Err(Error::Index {
                what: "answer",
                index: self.answer,
                len: self.candidate_positions.len(),
            });
        }
        if self.doc_chars.len() != nd || self.query_chars.len() != nq || self.qe_flags.len() != nd {
            return Err(Error::Example("per-token arrays disagree in length".into()));
        }
        Ok(())
    }
}

/// Right-padded batch with masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub doc_ids: Vec<Vec<usize>>,
    pub doc_mask: Vec<Vec<bool>>,
    pub query_ids: Vec<Vec<usize>>,
    pub query_mask: Vec<Vec<bool>>,
    pub doc_chars: Vec<Vec<Vec<usize>>>,
    pub query_chars: Vec<Vec<Vec<usize>>>,
    pub doc_tokens: Vec<Vec<String>>,
    pub query_tokens: Vec<Vec<String>>,
    pub cloze_pos: Vec<usize>,
    pub candidate_positions: Vec<Vec<Vec<usize>>>,
    pub answers: Vec<usize>,
    pub qe_flags: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn doc_width(&self) -> usize {
        self.doc_ids.first().map_or(0, Vec::len)
    }

    /// Row `i` with padding stripped.
    pub fn example(&self, i: usize) -> EncodedExample {
        let nd = self.doc_mask[i].iter().filter(|&&m| m).count();
        let nq = self.query_mask[i].iter().filter(|&&m| m).count();
        EncodedExample {
            doc_ids: self.doc_ids[i][..nd].to_vec(),
            query_ids: self.query_ids[i][..nq].to_vec(),
            doc_chars: self.doc_chars[i][..nd].to_vec(),
            query_chars: self.query_chars[i][..nq].to_vec(),
            doc_tokens: self.doc_tokens[i][..nd].to_vec(),
            query_tokens: self.query_tokens[i][..nq].to_vec(),
            cloze_pos: self.cloze_pos[i],
            candidate_positions: self.candidate_positions[i].clone(),
            answer: self.answers[i],
            qe_flags: self.qe_flags[i][..nd].to_vec(),
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = EncodedExample> + '_ {
        (0..self.len()).map(|i| self.example(i))
    }
}

fn pad<T: Clone>(rows: Vec<Vec<T>>, fill: T) -> (Vec<Vec<T>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, fill.clone());
            r
        })
        .collect();
    (padded, masks)
}

/// Groups examples into padded batches, in order. Padding is appended at the end of
/// each sequence, so candidate positions carry over unchanged.
pub fn batchify(examples: &[EncodedExample], batch_size: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Parameter("cannot batch an empty example list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    Ok(examples.chunks(batch_size).map(make_batch).collect())
}

fn make_batch(chunk: &[EncodedExample]) -> Batch {
    let col = |f: fn(&EncodedExample) -> Vec<usize>| chunk.iter().map(f).collect::<Vec<_>>();
    let (doc_ids, doc_mask) = pad(col(|e| e.doc_ids.clone()), Vocab::PAD);
    let (query_ids, query_mask) = pad(col(|e| e.query_ids.clone()), Vocab::PAD);
    let (doc_chars, _) = pad(chunk.iter().map(|e| e.doc_chars.clone()).collect(), vec![]);
    let (query_chars, _) = pad(chunk.iter().map(|e| e.query_chars.clone()).collect(), vec![]);
    let (doc_tokens, _) = pad(chunk.iter().map(|e| e.doc_tokens.clone()).collect(), String::new());
    let (query_tokens, _) = pad(chunk.iter().map(|e| e.query_tokens.clone()).collect(), String::new());
    let (qe_flags, _) = pad(chunk.iter().map(|e| e.qe_flags.clone()).collect(), false);
    Batch {
        doc_ids,
        doc_mask,
        query_ids,
        query_mask,
        doc_chars,
        query_chars,
        doc_tokens,
        query_tokens,
        cloze_pos: chunk.iter().map(|e| e.cloze_pos).collect(),
        candidate_positions: chunk.iter().map(|e| e.candidate_positions.clone()).collect(),
        answers: chunk.iter().map(|e| e.answer).collect(),
        qe_flags,
    }
}

/// Dataset size summary: example counts per split, vocabulary size, longest document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
    pub max_doc_len: usize,
}

/// Vocabulary size counts distinct corpus tokens, without the special entries.
pub fn corpus_stats(train: &[ClozeExample], valid: &[ClozeExample], test: &[ClozeExample]) -> CorpusStats {
    let all = || train.iter().chain(valid).chain(test);
    let vocab: HashSet<&str> = all()
        .flat_map(|e| e.doc.iter().chain(&e.query).chain(e.candidates.iter().flatten()))
        .map(String::as_str)
        .filter(|t| *t != PLACEHOLDER)
        .collect();
    CorpusStats {
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
        vocab: vocab.len(),
        max_doc_len: all().map(|e| e.doc.len()).max().unwrap_or(0),
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# train       {}", self.train)?;
        writeln!(f, "# validation  {}", self.valid)?;
        writeln!(f, "# test        {}", self.test)?;
        writeln!(f, "# vocab       {}", self.vocab)?;
        writeln!(f, "max doc length {}", self.max_doc_len)
    }
}

/// Settings for the synthetic fact-chain task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_examples: usize,
    /// 1 or 2.
    pub hops: usize,
    /// Facts per document, including the answer chain.
    pub facts_per_doc: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_entities: 30,
            n_relations: 4,
            n_examples: 1000,
            hops: 1,
            facts_per_doc: 6,
        }
    }
}

/// A `(subject, relation, object)` triple, rendered as `e<s> r<r> e<o> .`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

pub fn entity_name(e: usize) -> String {
    format!("e{e}")
}

pub fn relation_name(r: usize) -> String {
    format!("r{r}")
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let gen = |m: &str| Err(Error::Generation(m.to_string()));
        if self.n_examples == 0 || self.n_relations == 0 || self.n_entities == 0 {
            return gen("sizes must be positive");
        }
        if !(1..=2).contains(&self.hops) {
            return gen("hops must be 1 or 2");
        }
        let min_facts = if self.hops == 1 { 1 } else { 2 };
        if self.facts_per_doc < min_facts {
            return gen("not enough facts per document for the hop count");
        }
        // Chain plus one fresh object per extra fact, plus spare subjects.
        let needed = self.hops + 1 + (self.facts_per_doc - self.hops) + 1;
        if self.n_entities < needed.max(2) {
            return Err(Error::Generation(format!(
                "{} entities cannot fill {}-fact documents for {}-hop questions (need at least {needed})",
                self.n_entities, self.facts_per_doc, self.hops
            )));
        }
        if self.hops == 2 && self.n_relations < 2 {
            return gen("two-hop questions need at least two relations");
        }
        Ok(())
    }
}

/// Deterministic fact-chain cloze corpus.
///
/// Each document lists `facts_per_doc` facts in random order. The query names a
/// cue entity and `hops` relations; the answer is the entity reached by following
/// those relations from the cue. Every fact's object is fresh within a document, so
/// chains never loop. For two-hop questions the answer never shares a fact with
/// the cue, and a decoy fact `cue <second relation> x` is planted when possible.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ClozeExample>> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_examples).map(|_| synth_one(cfg, &mut rng)).collect()
}

fn synth_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<ClozeExample> {
    let mut pool: Vec<usize> = (0..cfg.n_entities).collect();
    pool.shuffle(rng);
    let mut fresh = pool.into_iter();
    let mut next_entity = || fresh.next().ok_or_else(|| Error::Generation("ran out of entities".into()));

    let rels: Vec<usize> = (0..cfg.hops).map(|_| rng.random_range(0..cfg.n_relations)).collect();
    let cue = next_entity()?;
    let mut facts = Vec::with_capacity(cfg.facts_per_doc);
    let mut subjects = vec![cue];
    let mut cur = cue;
    for &r in &rels {
        let o = next_entity()?;
        facts.push(Fact {
            subject: cur,
            relation: r,
            object: o,
        });
        subjects.push(o);
        cur = o;
    }
    let answer = cur;
    let mut used: HashSet<(usize, usize)> = facts.iter().map(|f| (f.subject, f.relation)).collect();

    if cfg.hops == 2 && facts.len() < cfg.facts_per_doc && !used.contains(&(cue, rels[1])) {
        let o = next_entity()?;
        facts.push(Fact {
            subject: cue,
            relation: rels[1],
            object: o,
        });
        used.insert((cue, rels[1]));
        subjects.push(o);
    }
    let mut attempts = 0;
    while facts.len() < cfg.facts_per_doc {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Generation("could not place distractor facts".into()));
        }
        let s = if rng.random_bool(0.5) {
            *subjects.choose(rng).expect("nonempty")
        } else {
            match next_entity() {
                Ok(e) => {
                    subjects.push(e);
                    e
                }
                Err(_) => *subjects.choose(rng).expect("nonempty"),
            }
        };
        let r = rng.random_range(0..cfg.n_relations);
        // The answer must stay a leaf so the chain has a single end.
        if s == answer || used.contains(&(s, r)) {
            continue;
        }
        let o = next_entity()?;
        facts.push(Fact {
            subject: s,
            relation: r,
            object: o,
        });
        used.insert((s, r));
        subjects.push(o);
    }
    facts.shuffle(rng);

    let mut doc = Vec::with_capacity(4 * facts.len());
    let mut order = Vec::new();
    for f in &facts {
        for e in [f.subject, f.object] {
            if !order.contains(&e) {
                order.push(e);
            }
        }
        doc.extend([
            entity_name(f.subject),
            relation_name(f.relation),
            entity_name(f.object),
            ".".to_string(),
        ]);
    }
    let mut query = vec![entity_name(cue)];
    query.extend(rels.iter().map(|&r| relation_name(r)));
    query.push(PLACEHOLDER.to_string());
    let candidates: Vec<Vec<String>> = order.iter().map(|&e| vec![entity_name(e)]).collect();
    let answer_idx = order.iter().position(|&e| e == answer).expect("answer is in the document");
    ClozeExample::new(doc, query, candidates, answer_idx)
}

/// Deterministic train/valid/test split by shuffled index.
pub fn split_by_fraction<T: Clone>(items: &[T], fractions: (f64, f64), seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len();
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_valid = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    (
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_valid]),
        pick(&idx[n_train + n_valid..]),
    )
}

/// First `fraction` of a seeded permutation of `items`.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((fraction * items.len() as f64).round() as usize).clamp(1.min(items.len()), items.len());
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}
