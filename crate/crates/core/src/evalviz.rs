//! Evaluation, significance tests, ablation sweeps and attention export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{subsample, EncodedExample, Vocab};
use crate::error::{Error, Result};
use crate::reader::Model;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Anything that picks a candidate index for an example.
pub trait Predictor {
    fn choose(&self, ex: &EncodedExample) -> Result<usize>;
}

impl Predictor for Model {
    fn choose(&self, ex: &EncodedExample) -> Result<usize> {
        Ok(self.predict(ex)?.0)
    }
}

/// Per-example correctness.
pub fn correctness<P: Predictor + ?Sized>(model: &P, data: &[EncodedExample]) -> Result<Vec<bool>> {
    data.iter().map(|ex| Ok(model.choose(ex)? == ex.answer)).collect()
}

pub fn accuracy<P: Predictor + ?Sized>(model: &P, data: &[EncodedExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("accuracy of an empty dataset".into()));
    }
    let hits = correctness(model, data)?.into_iter().filter(|&c| c).count();
    Ok(hits as f64 / data.len() as f64)
}

/// One-sided p-value for "true accuracy ≤ p0" using the normal approximation.
pub fn proportion_test(k: usize, n: usize, p0: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("proportion test with n = 0".into()));
    }
    if k > n || !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Parameter(format!("proportion test needs k <= n and 0 < p0 < 1 (k={k}, n={n}, p0={p0})")));
    }
    let nf = n as f64;
    let z = (k as f64 / nf - p0) / (p0 * (1.0 - p0) / nf).sqrt();
    Ok(1.0 - Normal::standard().cdf(z))
}

/// Exact one-sided McNemar test: `P(X >= max(b, c))` for `X ~ Binomial(b + c, 1/2)`.
pub fn mcnemar_exact(b: usize, c: usize) -> Result<f64> {
    let n = b + c;
    if n == 0 {
        return Err(Error::Parameter("McNemar test is undefined without discordant pairs".into()));
    }
    let m = b.max(c);
    // ln C(n, i) built up incrementally; each term scaled by 2^-n.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= m {
            total += (ln_c + ln_half_n).exp();
        }
    }
    Ok(total.min(1.0))
}

/// Discordant counts between two correctness vectors: `(only a, only b)`.
pub fn discordant(a: &[bool], b: &[bool]) -> Result<(usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "discordant",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let only_a = a.iter().zip(b).filter(|(x, y)| **x && !**y).count();
    let only_b = a.iter().zip(b).filter(|(x, y)| !**x && **y).count();
    Ok((only_a, only_b))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub train: TrainConfig,
    /// Fraction of the training split used, subsampled deterministically by seed.
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub configs: Vec<AblationConfig>,
    pub seeds: Vec<u64>,
    /// Index into `configs` of the configuration the others are tested against.
    pub baseline: usize,
}

/// Keys accepted on a grid axis besides the training and reader keys.
pub const FRACTION_KEY: &str = "train_fraction";

impl AblationSpec {
    /// Cartesian product of `axes` over `base`. The first configuration is the baseline.
    /// With one hop there is no gated layer, so `use_ga` is normalised away and
    /// duplicate configurations collapse.
    pub fn grid(base: &TrainConfig, axes: &[(String, Vec<String>)], seeds: Vec<u64>) -> Result<Self> {
        let mut configs: Vec<AblationConfig> = vec![AblationConfig {
            name: String::new(),
            train: base.clone(),
            train_fraction: 1.0,
        }];
        for (key, values) in axes {
            if values.is_empty() {
                return Err(Error::Parameter(format!("grid axis {key} has no values")));
            }
            let mut next = Vec::new();
            for c in &configs {
                for v in values {
                    let mut c = c.clone();
                    if key == FRACTION_KEY {
                        c.train_fraction = v
                            .parse()
                            .map_err(|_| Error::Parameter(format!("{key}: cannot parse {v:?}")))?;
                    } else if !c.train.set(key, v)? {
                        return Err(Error::Parameter(format!("unknown grid key {key}")));
                    }
                    if !c.name.is_empty() {
                        c.name.push(' ');
                    }
                    c.name.push_str(&format!("{key}={v}"));
                    next.push(c);
                }
            }
            configs = next;
        }
        let mut unique: Vec<AblationConfig> = Vec::new();
        for mut c in configs {
            if c.train.reader.hops == 1 {
                c.train.reader.use_ga = false;
            }
            if c.name.is_empty() {
                c.name = "base".into();
            }
            if !unique.iter().any(|u| u.train == c.train && u.train_fraction == c.train_fraction) {
                unique.push(c);
            }
        }
        let spec = Self {
            configs: unique,
            seeds,
            baseline: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Parameter("ablation needs at least one configuration and one seed".into()));
        }
        if self.baseline >= self.configs.len() {
            return Err(Error::Index {
                what: "baseline configuration",
                index: self.baseline,
                len: self.configs.len(),
            });
        }
        for c in &self.configs {
            if !(c.train_fraction > 0.0 && c.train_fraction <= 1.0) {
                return Err(Error::Parameter(format!("{}: train fraction must lie in (0, 1]", c.name)));
            }
            c.train.validate()?;
        }
        Ok(())
    }
}

/// Train, validation and test splits sharing one vocabulary.
pub struct AblationData<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [EncodedExample],
    pub valid: &'a [EncodedExample],
    pub test: &'a [EncodedExample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub valid_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    /// Test correctness per seed, concatenated in seed order.
    pub test_correct: Vec<bool>,
    /// Pooled discordant counts against the baseline: (only this row correct, only baseline correct).
    pub discordant: (usize, usize),
    /// `None` for the baseline row or when there are no discordant pairs.
    pub mcnemar_p: Option<f64>,
}

impl AblationRow {
    pub fn median_valid(&self) -> f64 {
        median(&self.valid_acc)
    }

    pub fn median_test(&self) -> f64 {
        median(&self.test_acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub baseline: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains every configuration with every seed and compares test predictions
/// against the baseline with McNemar's test, pooling examples over seeds.
pub fn ablate(spec: &AblationSpec, data: &AblationData<'_>) -> Result<AblationReport> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.configs.len());
    for c in &spec.configs {
        let mut row = AblationRow {
            name: c.name.clone(),
            valid_acc: Vec::new(),
            test_acc: Vec::new(),
            test_correct: Vec::new(),
            discordant: (0, 0),
            mcnemar_p: None,
        };
        for &seed in &spec.seeds {
            let mut cfg = c.train.clone();
            cfg.seed = seed;
            let train_set = if c.train_fraction < 1.0 {
                subsample(data.train, c.train_fraction, seed)
            } else {
                data.train.to_vec()
            };
            let model = Model::new(cfg.reader.clone(), data.vocab.clone(), seed)?;
            let (best, outcome) = train(&cfg, model, &train_set, data.valid)?;
            log::info!("{} seed {seed}: best epoch {}", c.name, outcome.best_epoch);
            row.valid_acc.push(if data.valid.is_empty() {
                0.0
            } else {
                accuracy(&best, data.valid)?
            });
            let correct = correctness(&best, data.test)?;
            row.test_acc.push(if correct.is_empty() {
                0.0
            } else {
                correct.iter().filter(|&&x| x).count() as f64 / correct.len() as f64
            });
            row.test_correct.extend(correct);
        }
        rows.push(row);
    }
    let base = rows[spec.baseline].test_correct.clone();
    for (i, row) in rows.iter_mut().enumerate() {
        if i == spec.baseline {
            continue;
        }
        row.discordant = discordant(&row.test_correct, &base)?;
        let (b, c) = row.discordant;
        row.mcnemar_p = if b + c > 0 { Some(mcnemar_exact(b, c)?) } else { None };
    }
    Ok(AblationReport {
        seeds: spec.seeds.clone(),
        baseline: spec.baseline,
        rows,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

impl AblationReport {
    /// Aligned text table with median accuracies (%) over seeds.
    pub fn to_table(&self) -> String {
        let header = ["model", "valid", "test", "+only", "-only", "mcnemar_p"];
        let mut cells: Vec<[String; 6]> = vec![header.map(String::from)];
        for (i, r) in self.rows.iter().enumerate() {
            let p = match (i == self.baseline, r.mcnemar_p) {
                (true, _) => "baseline".to_string(),
                (false, Some(p)) => format!("{p:.4}"),
                (false, None) => "-".to_string(),
            };
            let (b, c) = if i == self.baseline {
                ("-".to_string(), "-".to_string())
            } else {
                (r.discordant.0.to_string(), r.discordant.1.to_string())
            };
            cells.push([r.name.clone(), pct(r.median_valid()), pct(r.median_test()), b, c, p]);
        }
        let widths: Vec<usize> = (0..6).map(|j| cells.iter().map(|row| row[j].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, s)| if j == 0 { format!("{s:<w$}", w = widths[j]) } else { format!("{s:>w$}", w = widths[j]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// CSV twin of [`AblationReport::to_table`] with per-seed accuracies.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "median_valid".into(), "median_test".into()];
        for s in &self.seeds {
            header.push(format!("valid_seed{s}"));
            header.push(format!("test_seed{s}"));
        }
        header.extend(["only_model".into(), "only_baseline".into(), "mcnemar_p".into()]);
        w.write_record(&header).map_err(std::io::Error::from)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![r.name.clone(), format!("{:?}", r.median_valid()), format!("{:?}", r.median_test())];
            for (v, t) in r.valid_acc.iter().zip(&r.test_acc) {
                rec.push(format!("{v:?}"));
                rec.push(format!("{t:?}"));
            }
            if i == self.baseline {
                rec.extend(["".into(), "".into(), "baseline".into()]);
            } else {
                rec.push(r.discordant.0.to_string());
                rec.push(r.discordant.1.to_string());
                rec.push(r.mcnemar_p.map(|p| format!("{p:?}")).unwrap_or_default());
            }
            w.write_record(&rec).map_err(std::io::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Labelled matrix of weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major, `row_labels.len() x col_labels.len()`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_csv(&self, corner: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![corner.to_string()];
        header.extend(self.col_labels.iter().cloned());
        w.write_record(&header).map_err(std::io::Error::from)?;
        let cols = self.col_labels.len();
        for (i, label) in self.row_labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.values[i * cols..(i + 1) * cols].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(std::io::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Standalone SVG, linear grayscale from white (0) to black (1).
    pub fn to_svg(&self) -> String {
        const CELL: usize = 18;
        const CHAR_W: usize = 7;
        let left = 10 + CHAR_W * self.row_labels.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        let top = 30 + CHAR_W * self.col_labels.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        let width = left + CELL * self.col_labels.len() + 10;
        let height = top + CELL * self.row_labels.len() + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">"#
        );
        let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(&self.title));
        let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="4" y="14">{}</text>"#, xml_escape(&self.title));
        for (j, label) in self.col_labels.iter().enumerate() {
            let x = left + CELL * j + CELL / 2 + 4;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" transform="rotate(-90 {x} {})">{}</text>"#,
                top - 4,
                top - 4,
                xml_escape(label)
            );
        }
        let cols = self.col_labels.len();
        for (i, label) in self.row_labels.iter().enumerate() {
            let y = top + CELL * i;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4, y + CELL - 5, xml_escape(label));
            for j in 0..cols {
                let v = self.values[i * cols + j].clamp(0.0, 1.0);
                let g = (255.0 * (1.0 - v)).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"><title>{v:.4}</title></rect>"#,
                    left + CELL * j
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// `α` for one layer as a heatmap: rows are document positions (candidate
/// positions only unless `full_document`), columns are query tokens.
pub fn alpha_heatmap(alpha: &Tensor, ex: &EncodedExample, layer: usize, full_document: bool) -> Result<Heatmap> {
    let (q, d) = (alpha.rows(), alpha.cols());
    if q != ex.query_tokens.len() || d != ex.doc_tokens.len() {
        return Err(Error::Dimension {
            op: "alpha_heatmap",
            lhs: alpha.shape().to_vec(),
            rhs: vec![ex.query_tokens.len(), ex.doc_tokens.len()],
        });
    }
    let rows: Vec<usize> = if full_document {
        (0..d).collect()
    } else {
        let mut r: Vec<usize> = ex.candidate_positions.iter().flatten().copied().collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let mut values = Vec::with_capacity(rows.len() * q);
    for &i in &rows {
        values.extend((0..q).map(|j| alpha.at(j, i)));
    }
    Ok(Heatmap {
        title: format!("layer {layer} query attention"),
        row_labels: rows.iter().map(|&i| format!("{}:{}", i, ex.doc_tokens[i])).collect(),
        col_labels: ex.query_tokens.clone(),
        values,
    })
}

/// Writes `{stem}_alpha{k}.csv/.svg` for each gated layer `k` (1-based) and
/// `{stem}_s.csv/.svg` for the final document attention. Returns the paths written.
pub fn attention_export(model: &Model, ex: &EncodedExample, out_dir: &Path, stem: &str, full_document: bool) -> Result<Vec<PathBuf>> {
    let trace = model.trace(ex)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, map: &Heatmap, corner: &str| -> Result<()> {
        let csv_path = out_dir.join(format!("{name}.csv"));
        fs::write(&csv_path, map.to_csv(corner)?)?;
        let svg_path = out_dir.join(format!("{name}.svg"));
        fs::write(&svg_path, map.to_svg())?;
        written.push(csv_path);
        written.push(svg_path);
        Ok(())
    };
    for (k, alpha) in trace.query_attention.iter().enumerate() {
        let map = alpha_heatmap(alpha, ex, k + 1, full_document)?;
        emit(format!("{stem}_alpha{}", k + 1), &map, "doc_position")?;
    }
    let s_map = Heatmap {
        title: "document attention s".into(),
        row_labels: vec!["s".into()],
        col_labels: ex
            .doc_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}:{t}"))
            .collect(),
        values: trace.doc_attention.clone(),
    };
    emit(format!("{stem}_s"), &s_map, "")?;
    Ok(written)
}
