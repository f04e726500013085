//! Flat `key=value` run configuration with namespaced sections.
//!
//! Keys mirror the nested config structs joined by dots (`train.loss.lambda`,
//! `env.num_items`). Values are parsed against the type of the default they
//! replace, so unknown keys and ill-typed values are rejected up front.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::objectives::GfnVariant;
use crate::pipeline::BenchmarkConfig;
use crate::trainer::FlowFitConfig;
use crate::util::{read_json, sha256_hex, write_json};

/// Settings of the `verify-flow` reward-table fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub variant: GfnVariant,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub flow_lr_scale: f64,
    /// Rewards are exp(u) with u uniform on [-spread, spread].
    pub reward_spread: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            variant: GfnVariant::Tb,
            steps: 3000,
            lr: 0.03,
            momentum: 0.9,
            hidden: 64,
            flow_lr_scale: 1.0,
            reward_spread: 1.5,
        }
    }
}

impl VerifyConfig {
    pub fn fit_config(&self) -> FlowFitConfig {
        FlowFitConfig {
            variant: self.variant,
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            flow_lr_scale: self.flow_lr_scale,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub bench: BenchmarkConfig,
    pub flow: VerifyConfig,
}

/// Keys derived from other keys; they never appear in files or echoes.
const DERIVED_KEYS: [&str; 3] = ["train.seed", "train.eval_k", "train.eval_beam_width"];

impl RunConfig {
    /// Copies the run-level seed and eval settings into the train section.
    pub fn resolved(mut self) -> Self {
        let b = &mut self.bench;
        b.train.seed = b.seed;
        b.train.eval_k = b.eval.k;
        b.train.eval_beam_width = b.eval.beam_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bench;
        if b.env.num_items == 0 || b.env.num_users == 0 || b.env.dim == 0 {
            return Err(Error::Config("env.num_items, env.num_users and env.dim must be >= 1".into()));
        }
        if b.tok.levels == 0 || b.tok.vocab < 2 {
            return Err(Error::Config("tok.levels must be >= 1 and tok.vocab >= 2".into()));
        }
        if b.eval.k == 0 || b.eval.beam_width < b.eval.k {
            return Err(Error::Config(format!(
                "eval.beam_width {} must be >= eval.k {} >= 1",
                b.eval.beam_width, b.eval.k
            )));
        }
        if self.flow.steps == 0 || self.flow.hidden == 0 || self.flow.lr.is_nan() || self.flow.lr <= 0.0 {
            return Err(Error::Config("flow.steps, flow.hidden and flow.lr must be positive".into()));
        }
        b.train.validate()
    }

    /// Every settable key with its current value, sorted.
    pub fn entries(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        Ok(out)
    }

    /// `key=value` lines, the format accepted by [`RunConfig::parse`].
    pub fn echo(&self) -> Result<String> {
        Ok(self.entries()?.iter().map(|(k, v)| format!("{k}={v}\n")).collect())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in assignments {
            set_key(&mut tree, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Parses a config file body on top of `self`. `#` starts a comment.
    pub fn parse(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|message| Error::Parse { line: n + 1, message })?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    pub fn load(&self, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

impl ArtifactRef {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Record of one CLI invocation: effective config, seed and artifact hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, ArtifactRef>,
    pub outputs: BTreeMap<String, ArtifactRef>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed: cfg.bench.seed,
            config: cfg.entries()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path_in(dir: &Path, command: &str) -> std::path::PathBuf {
        dir.join(format!("manifest-{command}.json"))
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.into(), ArtifactRef::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.into(), ArtifactRef::of(path)?);
        Ok(())
    }

    /// Refuses to reuse an output directory whose manifest for the same
    /// command was produced from a different config or different inputs.
    pub fn guard(&self, dir: &Path) -> Result<()> {
        let path = Self::path_in(dir, &self.command);
        if !path.exists() {
            return Ok(());
        }
        let old: RunManifest = read_json(&path)?;
        if old.config != self.config || hashes(&old.inputs) != hashes(&self.inputs) {
            return Err(Error::State(format!(
                "{} belongs to a different run; choose a fresh --out directory",
                path.display()
            )));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        self.guard(dir)?;
        let path = Self::path_in(dir, &self.command);
        if path.exists() {
            let old: RunManifest = read_json(&path)?;
            if hashes(&old.outputs) != hashes(&self.outputs) {
                return Err(Error::State(format!("{} would change for identical inputs", path.display())));
            }
            return Ok(path);
        }
        write_json(&path, self)?;
        Ok(path)
    }
}

fn hashes(refs: &BTreeMap<String, ArtifactRef>) -> BTreeMap<&str, &str> {
    refs.iter().map(|(k, v)| (k.as_str(), v.sha256.as_str())).collect()
}

pub fn split_assignment(s: &str) -> std::result::Result<(&str, &str), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn set_key(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    if DERIVED_KEYS.contains(&key) {
        return Err(Error::Config(format!(
            "{key} is derived from the run-level setting and cannot be set"
        )));
    }
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(unknown)?;
    }
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    *node = match node {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::from(x)
        }
        Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(unknown()),
    };
    Ok(())
}
