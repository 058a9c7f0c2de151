//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Later assignments of
//! the same key win, and command-line overrides are applied last through the
//! same [`RunConfig::set`] path.

use std::path::PathBuf;

use crate::attribution::{IgConfig, QuadratureRule};
use crate::encoder::DEFAULT_MAX_SEQ_LEN;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_EVAL_K;
use crate::explain::{CloudMode, DEFAULT_EXPLAIN_K};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Reference,
    External,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Reference => "reference",
            BackendKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Explicit encoder seed; otherwise derived from the global seed.
    pub seed: Option<u64>,
    pub dim: usize,
    pub max_seq_len: usize,
    /// Shell command that starts an external backend.
    pub command: Option<String>,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Reference,
            seed: None,
            dim: 32,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            command: None,
        }
    }
}

/// Fields of the second backend that were set explicitly; the rest follow the first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct BackendOverrides {
    kind: Option<BackendKind>,
    seed: Option<u64>,
    dim: Option<usize>,
    max_seq_len: Option<usize>,
    command: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendSpec,
    backend_b: BackendOverrides,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub ig: IgConfig,
    pub k_retrieve: usize,
    pub k_explain: usize,
    pub eval_k: usize,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub cloud_mode: CloudMode,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendSpec::default(),
            backend_b: BackendOverrides::default(),
            corpus: None,
            queries: None,
            qrels: None,
            ig: IgConfig::default(),
            k_retrieve: 10,
            k_explain: DEFAULT_EXPLAIN_K,
            eval_k: DEFAULT_EVAL_K,
            batch_size: 32,
            output_dir: PathBuf::from("out"),
            seed: 42,
            cloud_mode: CloudMode::Signed,
            threads: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a valid number")))
}

fn positive(key: &str, v: &str) -> Result<usize> {
    let n: usize = parse_num(key, v)?;
    if n == 0 {
        return Err(Error::Config(format!("`{key}` must be positive")));
    }
    Ok(n)
}

fn tolerance(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::Config(format!(
            "`{key}` must be a finite non-negative number"
        )));
    }
    Ok(x)
}

fn parse_kind(v: &str) -> Result<BackendKind> {
    match v {
        "reference" => Ok(BackendKind::Reference),
        "external" => Ok(BackendKind::External),
        other => Err(Error::Config(format!("unknown backend kind `{other}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(i + 1, format!("expected `key = value`, got `{line}`"))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "backend.kind" => self.backend.kind = parse_kind(v)?,
            "backend.seed" => self.backend.seed = Some(parse_num(key, v)?),
            "backend.dim" => self.backend.dim = positive(key, v)?,
            "backend.max_seq_len" => self.backend.max_seq_len = positive(key, v)?,
            "backend.command" => self.backend.command = Some(v.to_string()),
            "backend_b.kind" => self.backend_b.kind = Some(parse_kind(v)?),
            "backend_b.seed" => self.backend_b.seed = Some(parse_num(key, v)?),
            "backend_b.dim" => self.backend_b.dim = Some(positive(key, v)?),
            "backend_b.max_seq_len" => self.backend_b.max_seq_len = Some(positive(key, v)?),
            "backend_b.command" => self.backend_b.command = Some(v.to_string()),
            "corpus" => self.corpus = Some(PathBuf::from(v)),
            "queries" => self.queries = Some(PathBuf::from(v)),
            "qrels" => self.qrels = Some(PathBuf::from(v)),
            "ig.steps" => self.ig.steps = positive(key, v)?,
            "ig.rule" => self.ig.rule = v.parse::<QuadratureRule>()?,
            "ig.rel_tolerance" => self.ig.rel_tolerance = tolerance(key, v)?,
            "ig.abs_tolerance" => self.ig.abs_tolerance = tolerance(key, v)?,
            "k_retrieve" => self.k_retrieve = positive(key, v)?,
            "k_explain" => self.k_explain = positive(key, v)?,
            "eval_k" => self.eval_k = positive(key, v)?,
            "batch_size" => self.batch_size = positive(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v)?,
            "cloud_mode" => self.cloud_mode = v.parse()?,
            "threads" => self.threads = Some(positive(key, v)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn encoder_seed(&self) -> u64 {
        self.backend
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, "encoder"))
    }

    pub fn title_seed(&self) -> u64 {
        derive_seed(self.seed, "title-sampling")
    }

    /// The comparison backend: explicit `backend_b.*` keys over the first backend.
    pub fn backend_b(&self) -> BackendSpec {
        let a = &self.backend;
        let o = &self.backend_b;
        BackendSpec {
            kind: o.kind.unwrap_or(a.kind),
            seed: Some(o.seed.unwrap_or_else(|| self.encoder_seed())),
            dim: o.dim.unwrap_or(a.dim),
            max_seq_len: o.max_seq_len.unwrap_or(a.max_seq_len),
            command: o.command.clone().or_else(|| a.command.clone()),
        }
    }

    /// Effective settings as `key = value` lines, in a fixed order.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let b = self.backend_b();
        let lines = [
            ("backend.kind", self.backend.kind.as_str().to_string()),
            ("backend.seed", self.encoder_seed().to_string()),
            ("backend.dim", self.backend.dim.to_string()),
            ("backend.max_seq_len", self.backend.max_seq_len.to_string()),
            (
                "backend.command",
                self.backend.command.clone().unwrap_or_default(),
            ),
            ("backend_b.kind", b.kind.as_str().to_string()),
            ("backend_b.seed", b.seed.unwrap_or_default().to_string()),
            ("backend_b.dim", b.dim.to_string()),
            ("backend_b.max_seq_len", b.max_seq_len.to_string()),
            ("backend_b.command", b.command.unwrap_or_default()),
            ("corpus", path(&self.corpus)),
            ("queries", path(&self.queries)),
            ("qrels", path(&self.qrels)),
            ("ig.steps", self.ig.steps.to_string()),
            ("ig.rule", self.ig.rule.as_str().to_string()),
            ("ig.rel_tolerance", self.ig.rel_tolerance.to_string()),
            ("ig.abs_tolerance", self.ig.abs_tolerance.to_string()),
            ("k_retrieve", self.k_retrieve.to_string()),
            ("k_explain", self.k_explain.to_string()),
            ("eval_k", self.eval_k.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            (
                "cloud_mode",
                match self.cloud_mode {
                    CloudMode::Signed => "signed",
                    CloudMode::Separate => "separate",
                }
                .to_string(),
            ),
            (
                "threads",
                self.threads.map(|t| t.to_string()).unwrap_or_default(),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
