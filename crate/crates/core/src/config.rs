//! Plain-text `key = value` job files, resolved configurations, manifests
//! and sweep grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backend::remote::RemoteBackend;
use crate::backend::toy::ToyBackend;
use crate::backend::Backend;
use crate::controller::EditParams;
use crate::error::{Error, Result};
use crate::tensor::MaskThreshold;

/// Keys accepted in a job file, in manifest order.
pub const KEYS: [&str; 12] = [
    "prompt",
    "edit",
    "lambda_tau",
    "lambda_sv",
    "lambda_s",
    "alpha_m",
    "steps",
    "guidance",
    "seed",
    "backend",
    "out_dir",
    "dps.per_step",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Toy,
    Remote(String),
}

impl BackendSpec {
    pub fn connect(&self) -> Box<dyn Backend> {
        match self {
            BackendSpec::Toy => Box::new(ToyBackend::new()),
            BackendSpec::Remote(addr) => Box::new(RemoteBackend::new(addr.clone())),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(BackendSpec::Toy),
            other => match other.strip_prefix("remote:") {
                Some(addr) if !addr.is_empty() => Ok(BackendSpec::Remote(addr.to_string())),
                _ => Err(Error::Config(format!(
                    "backend must be `toy` or `remote:<host:port>`, got `{other}`"
                ))),
            },
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Toy => f.write_str("toy"),
            BackendSpec::Remote(addr) => write!(f, "remote:{addr}"),
        }
    }
}

/// Raw key/value entries of a job file. Later [`JobFile::set`] calls
/// override parsed values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JobFile {
    entries: BTreeMap<String, String>,
}

impl JobFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KEYS.contains(&key), "unknown key {key}");
        self.entries.insert(key.to_string(), value.into());
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Resolves every key, filling defaults. `default_out` is used when the
    /// file names no `out_dir`.
    pub fn resolve(&self, default_out: &Path) -> Result<EditConfig> {
        let prompt = self
            .get("prompt")
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Config("missing required key `prompt`".into()))?
            .to_string();
        let edit = self
            .get("edit")
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Config("missing required key `edit`".into()))?
            .to_string();
        let d = EditParams::default();
        let params = EditParams {
            lambda_tau: self.number("lambda_tau", d.lambda_tau)?,
            lambda_sv: self.number("lambda_sv", d.lambda_sv)?,
            lambda_s: self.number("lambda_s", d.lambda_s)?,
            alpha_m: MaskThreshold::new(self.number("alpha_m", d.alpha_m.value())?)?,
            steps: self.number("steps", d.steps)?,
            guidance: self.number("guidance", d.guidance)?,
            seed: self.number("seed", d.seed)?,
            per_step_spatial: self.number("dps.per_step", d.per_step_spatial)?,
        };
        params.validate()?;
        let backend = match self.get("backend") {
            Some(b) => b.parse()?,
            None => BackendSpec::Toy,
        };
        let out_dir = self
            .get("out_dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| default_out.to_path_buf());
        Ok(EditConfig {
            prompt,
            edit,
            params,
            backend,
            out_dir,
        })
    }

    fn number<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub prompt: String,
    pub edit: String,
    pub params: EditParams,
    pub backend: BackendSpec,
    pub out_dir: PathBuf,
}

impl EditConfig {
    /// Every key with its resolved value, parseable by [`JobFile::parse`].
    pub fn manifest(&self) -> String {
        let p = &self.params;
        let values = [
            self.prompt.clone(),
            self.edit.clone(),
            p.lambda_tau.to_string(),
            p.lambda_sv.to_string(),
            p.lambda_s.to_string(),
            p.alpha_m.value().to_string(),
            p.steps.to_string(),
            p.guidance.to_string(),
            p.seed.to_string(),
            self.backend.to_string(),
            self.out_dir.display().to_string(),
            p.per_step_spatial.to_string(),
        ];
        let width = KEYS.iter().map(|k| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k:<width$} = {v}");
        }
        out
    }

    /// The manifest preceded by `# ` comment lines.
    pub fn manifest_with_notes(&self, notes: &[String]) -> String {
        let mut out = String::new();
        for n in notes {
            let _ = writeln!(out, "# {n}");
        }
        out + &self.manifest()
    }
}

/// Cross product of hyper-parameter lists over a shared base job.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub base: EditConfig,
    pub lambda_tau: Vec<f32>,
    pub lambda_sv: Vec<f32>,
    pub lambda_s: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lambda_tau: f32,
    pub lambda_sv: f32,
    pub lambda_s: f32,
}

impl GridPoint {
    /// Subdirectory name; distinct points give distinct names because float
    /// `Display` round-trips.
    pub fn dir_name(&self) -> String {
        format!("tau{}_sv{}_s{}", self.lambda_tau, self.lambda_sv, self.lambda_s)
    }
}

impl SweepGrid {
    /// Parses a job file whose `lambda_*` values may be comma-separated lists.
    pub fn parse(text: &str, default_out: &Path) -> Result<Self> {
        Self::from_job(JobFile::parse(text)?, default_out)
    }

    pub fn from_job(mut job: JobFile, default_out: &Path) -> Result<Self> {
        let d = EditParams::default();
        let mut list = |k: &str, default: f32| match job.take(k) {
            None => Ok(vec![default]),
            Some(v) => parse_list(k, &v),
        };
        let tau = list("lambda_tau", d.lambda_tau)?;
        let sv = list("lambda_sv", d.lambda_sv)?;
        let s = list("lambda_s", d.lambda_s)?;
        let base = job.resolve(default_out)?;
        let grid = Self {
            base,
            lambda_tau: tau,
            lambda_sv: sv,
            lambda_s: s,
        };
        for p in grid.points() {
            grid.config_at(p).params.validate()?;
        }
        Ok(grid)
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &lambda_tau in &self.lambda_tau {
            for &lambda_sv in &self.lambda_sv {
                for &lambda_s in &self.lambda_s {
                    out.push(GridPoint {
                        lambda_tau,
                        lambda_sv,
                        lambda_s,
                    });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lambda_tau.len() * self.lambda_sv.len() * self.lambda_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn config_at(&self, p: GridPoint) -> EditConfig {
        let mut c = self.base.clone();
        c.params.lambda_tau = p.lambda_tau;
        c.params.lambda_sv = p.lambda_sv;
        c.params.lambda_s = p.lambda_s;
        c.out_dir = self.base.out_dir.join(p.dir_name());
        c
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f32>> {
    let mut out: Vec<f32> = Vec::new();
    for item in v.split(',') {
        let item = item.trim();
        let x: f32 = item
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{item}`")))?;
        if out.contains(&x) {
            return Err(Error::Config(format!("`{key}` lists {x} twice")));
        }
        out.push(x);
    }
    Ok(out)
}
