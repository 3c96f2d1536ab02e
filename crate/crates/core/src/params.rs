//! Named parameter storage, initialization and the checkpoint archive.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    frozen: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform Glorot initialization for a matrix `[fan_out, fan_in]`.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        self.add(name, glorot_uniform(rows, cols, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces every value with the one stored under the same name in `other`.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(set: &ParamSet) -> Self {
        Self {
            grads: set.entries.iter().map(|e| vec![0.0; e.value.numel()]).collect(),
        }
    }

    pub fn from_vecs(grads: Vec<Vec<f64>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        for (d, v) in self.grads[id.0].iter_mut().zip(g) {
            *d += v;
        }
    }

    pub fn add_all(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn as_slices(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn as_slices_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.grads
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const MAGIC: &str = "gareader-checkpoint 1";

/// Self-describing text archive: free-form metadata plus named parameter arrays.
///
/// Floats are written in shortest round-trip form, so load(save(x)) is bit-exact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unserializable metadata key {k:?}")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        let mut line = String::new();
        for e in &self.params.entries {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "param {} {} {}", e.name, u8::from(e.frozen), dims.join("x"))?;
            line.clear();
            for (i, v) in e.value.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read_from<R: BufRead>(r: R, path: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_string(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, Ok(l))) if l == MAGIC => {}
            _ => return Err(perr(1, "not a gareader checkpoint".into())),
        }
        let mut ck = Checkpoint::default();
        while let Some((no, line)) = lines.next() {
            let line = line?;
            if line == "end" {
                return Ok(ck);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(perr(no, format!("bad param header {line:?}")));
                }
                let shape = parts[2]
                    .split('x')
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| perr(no, format!("bad shape: {e}")))?;
                let (vno, values) = lines
                    .next()
                    .ok_or_else(|| perr(no, "missing values line".into()))?;
                let data = values?
                    .split(' ')
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| perr(vno, format!("bad value: {e}")))?;
                let tensor = Tensor::new(shape, data).map_err(|e| perr(vno, e.to_string()))?;
                let id = ck.params.add(parts[0], tensor);
                ck.params.set_frozen(id, parts[1] == "1");
            } else {
                return Err(perr(no, format!("unexpected line {line:?}")));
            }
        }
        Err(perr(0, "truncated checkpoint (no end marker)".into()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), &path.display().to_string())
    }
}
