//! Synthetic recommendation universe and feedback sessions.
//!
//! Items and users get isotropic Gaussian latents normalized to the unit
//! sphere. A user's utility for an item is `logistic(4 · <user, item>)`.
//! Sessions are impressions drawn by a behavior policy that mixes
//! utility-proportional sampling with uniform noise; each impression is then
//! labeled liked / clicked / presented from a single Bernoulli(utility) draw.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{dot, rng_for, sigmoid};

pub type ItemId = usize;
pub type UserId = usize;

/// Temperature applied to the latent dot product before the logistic.
pub const UTILITY_SCALE: f64 = 4.0;
pub const LIKED_THRESHOLD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemUniverse {
    pub num_items: usize,
    pub embedding_dim: usize,
    /// Row-major (num_items × embedding_dim), unit-norm rows.
    pub item_embeddings: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ItemUniverse {
    pub fn embedding(&self, item: ItemId) -> &[f64] {
        &self.item_embeddings[item]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserLatents {
    pub vectors: Vec<Vec<f64>>,
}

impl UserLatents {
    pub fn num_users(&self) -> usize {
        self.vectors.len()
    }
}

/// Ground-truth utility oracle for the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub universe: ItemUniverse,
    pub users: UserLatents,
}

impl World {
    pub fn utility(&self, user: UserId, item: ItemId) -> f64 {
        utility(&self.users.vectors[user], self.universe.embedding(item))
    }

    pub fn utilities(&self, user: UserId) -> Vec<f64> {
        (0..self.universe.num_items).map(|i| self.utility(user, i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        require_generated(path)?;
        crate::util::read_json(path)
    }
}

pub fn utility(user: &[f64], item: &[f64]) -> f64 {
    sigmoid(UTILITY_SCALE * dot(user, item))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackLevel {
    Liked,
    Clicked,
    Presented,
    Unpresented,
}

impl FeedbackLevel {
    pub fn is_positive(self) -> bool {
        matches!(self, FeedbackLevel::Liked | FeedbackLevel::Clicked)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackLevel::Liked => "liked",
            FeedbackLevel::Clicked => "clicked",
            FeedbackLevel::Presented => "presented",
            FeedbackLevel::Unpresented => "unpresented",
        }
    }
}

impl fmt::Display for FeedbackLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "liked" => Ok(FeedbackLevel::Liked),
            "clicked" => Ok(FeedbackLevel::Clicked),
            "presented" => Ok(FeedbackLevel::Presented),
            "unpresented" => Ok(FeedbackLevel::Unpresented),
            other => Err(Error::Config(format!("unknown feedback level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub user_id: UserId,
    pub user_history: Vec<ItemId>,
    pub presented: Vec<(ItemId, FeedbackLevel)>,
    pub target_item: ItemId,
}

impl SessionRecord {
    /// Feedback for `item` in this session; items never shown are unpresented.
    pub fn feedback(&self, item: ItemId) -> FeedbackLevel {
        self.presented
            .iter()
            .find(|(i, _)| *i == item)
            .map(|(_, f)| *f)
            .unwrap_or(FeedbackLevel::Unpresented)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_history.is_empty() {
            return Err(Error::Config(format!("user {} has an empty history", self.user_id)));
        }
        let mut seen = HashSet::new();
        for (item, level) in &self.presented {
            if !seen.insert(*item) {
                return Err(Error::Config(format!("user {}: item {item} presented twice", self.user_id)));
            }
            if *level == FeedbackLevel::Unpresented {
                return Err(Error::Config(format!(
                    "user {}: presented item {item} labeled unpresented",
                    self.user_id
                )));
            }
        }
        if !self.feedback(self.target_item).is_positive() {
            return Err(Error::Config(format!(
                "user {}: target {} is not a clicked or liked presented item",
                self.user_id, self.target_item
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorPolicy {
    /// Weight of utility-proportional sampling; the rest is uniform noise.
    pub utility_weight: f64,
}

impl Default for BehaviorPolicy {
    fn default() -> Self {
        Self { utility_weight: 0.7 }
    }
}

impl BehaviorPolicy {
    /// Single-draw impression probabilities over the catalog for one user.
    pub fn impression_probs(&self, utilities: &[f64]) -> Vec<f64> {
        let total: f64 = utilities.iter().sum();
        let m = utilities.len() as f64;
        utilities
            .iter()
            .map(|u| self.utility_weight * u / total + (1.0 - self.utility_weight) / m)
            .collect()
    }
}

fn unit_gaussian_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn generate_universe(num_items: usize, num_users: usize, dim: usize, seed: u64) -> Result<World> {
    if num_items < 2 {
        return Err(Error::Config(format!("num_items must be >= 2, got {num_items}")));
    }
    if dim < 2 {
        return Err(Error::Config(format!("dim must be >= 2, got {dim}")));
    }
    if num_users == 0 {
        return Err(Error::Config("num_users must be >= 1".into()));
    }
    let mut rng = rng_for(seed, 0);
    let item_embeddings = unit_gaussian_rows(&mut rng, num_items, dim);
    let users = unit_gaussian_rows(&mut rng, num_users, dim);
    Ok(World {
        universe: ItemUniverse {
            num_items,
            embedding_dim: dim,
            item_embeddings,
            seed,
        },
        users: UserLatents { vectors: users },
    })
}

fn label(rng: &mut impl Rng, utility: f64) -> FeedbackLevel {
    let success = rng.random::<f64>() < utility;
    match (success, utility > LIKED_THRESHOLD) {
        (true, true) => FeedbackLevel::Liked,
        (true, false) => FeedbackLevel::Clicked,
        (false, _) => FeedbackLevel::Presented,
    }
}

/// Draws `count` distinct items from `probs`, excluding `exclude`.
fn draw_distinct(rng: &mut impl Rng, probs: &[f64], count: usize, exclude: &HashSet<ItemId>) -> Vec<ItemId> {
    let mut weights: Vec<f64> = probs.to_vec();
    for &i in exclude {
        weights[i] = 0.0;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dist = WeightedIndex::new(&weights).expect("positive impression mass remains");
        let item = dist.sample(rng);
        weights[item] = 0.0;
        out.push(item);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    pub session_size: usize,
    pub history_len: usize,
    pub behavior: BehaviorPolicy,
}

/// One session per user. Histories are earlier clicked items of the same
/// user, drawn from the behavior policy and ordered oldest first.
pub fn generate_sessions(world: &World, cfg: &SessionConfig, seed: u64) -> Result<Vec<SessionRecord>> {
    let num_items = world.universe.num_items;
    if cfg.session_size < 2 {
        return Err(Error::Config("session_size must be >= 2".into()));
    }
    if cfg.session_size > num_items {
        return Err(Error::Config(format!(
            "session_size {} exceeds num_items {num_items}",
            cfg.session_size
        )));
    }
    if cfg.history_len == 0 || cfg.history_len >= num_items {
        return Err(Error::Config(format!(
            "history_len must be in 1..{num_items}, got {}",
            cfg.history_len
        )));
    }
    let mut records = Vec::with_capacity(world.users.num_users());
    for user in 0..world.users.num_users() {
        let mut rng = rng_for(seed, 1 + user as u64);
        let utilities = world.utilities(user);
        let probs = cfg.behavior.impression_probs(&utilities);

        let presented = loop {
            let items = draw_distinct(&mut rng, &probs, cfg.session_size, &HashSet::new());
            let labeled: Vec<(ItemId, FeedbackLevel)> = items.into_iter().map(|i| (i, label(&mut rng, utilities[i]))).collect();
            if labeled.iter().any(|(_, f)| f.is_positive()) {
                break labeled;
            }
        };
        let positives: Vec<ItemId> = presented.iter().filter(|(_, f)| f.is_positive()).map(|(i, _)| *i).collect();
        let target_item = positives[rng.random_range(0..positives.len())];

        let mut history = Vec::with_capacity(cfg.history_len);
        let mut excluded: HashSet<ItemId> = HashSet::from([target_item]);
        while history.len() < cfg.history_len {
            let item = draw_distinct(&mut rng, &probs, 1, &excluded)[0];
            if rng.random::<f64>() < utilities[item] {
                history.push(item);
                excluded.insert(item);
            }
        }

        records.push(SessionRecord {
            user_id: user,
            user_history: history,
            presented,
            target_item,
        });
    }
    Ok(records)
}

pub fn write_dataset(records: &[SessionRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn require_generated(path: &Path) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(Error::MissingArtifact {
        path: path.to_path_buf(),
        hint: "run `flowrec gen-data` first".into(),
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<SessionRecord>> {
    require_generated(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Parses line-delimited records; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<SessionRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SessionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
