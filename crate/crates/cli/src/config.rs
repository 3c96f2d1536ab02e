//! Run configuration: a flat `key = value` file, then command-line overrides.

use std::path::{Path, PathBuf};

use gareader::TrainConfig;

use crate::UsageError;

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "GAREADER_OUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub max_doc_len: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_data: None,
            valid_data: None,
            test_data: None,
            embeddings: None,
            out_dir: default_out_dir(),
            max_doc_len: None,
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "train_data" => self.train_data = path(),
            "valid_data" => self.valid_data = path(),
            "test_data" => self.test_data = path(),
            "embeddings" => self.embeddings = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "max_doc_len" => {
                self.max_doc_len = Some(
                    value
                        .parse()
                        .map_err(|_| UsageError(format!("max_doc_len: cannot parse {value:?}")))?,
                )
            }
            _ => {
                let known = self.train.set(key, value).map_err(|e| UsageError(e.to_string()))?;
                if !known {
                    return Err(UsageError(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), UsageError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{source}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| UsageError(format!("{source}:{}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `KEY=VALUE` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), UsageError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UsageError(format!("override {o:?} is not KEY=VALUE")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Returns the path for `key`, checking that it was given and exists.
    pub fn require(&self, key: &str) -> Result<&Path, UsageError> {
        let p = match key {
            "train_data" => &self.train_data,
            "valid_data" => &self.valid_data,
            "test_data" => &self.test_data,
            "embeddings" => &self.embeddings,
            _ => unreachable!("not a path key: {key}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| UsageError(format!("{key} is required")))?;
        check_file(p)?;
        Ok(p)
    }

    /// Serialises back into the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, p) in [
            ("train_data", &self.train_data),
            ("valid_data", &self.valid_data),
            ("test_data", &self.test_data),
            ("embeddings", &self.embeddings),
        ] {
            if let Some(p) = p {
                out.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        if let Some(m) = self.max_doc_len {
            out.push_str(&format!("max_doc_len = {m}\n"));
        }
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out
    }
}

pub fn check_file(p: &Path) -> Result<(), UsageError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{} does not exist or is not a file", p.display())))
    }
}
