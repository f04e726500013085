//! Matrix-factorization collaborative model trained with a pairwise
//! logistic (BPR-style) ranking loss on session feedback.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{ItemId, SessionRecord, UserId};
use crate::util::{dot, rng_for, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    /// Random unpresented negatives paired with every positive.
    pub unpresented_per_positive: usize,
    pub init_scale: f64,
}

impl Default for CmConfig {
    fn default() -> Self {
        Self {
            k: 8,
            epochs: 30,
            lr: 0.05,
            reg: 0.0,
            unpresented_per_positive: 2,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmParameters {
    pub k: usize,
    pub num_items: usize,
    /// Row per known user, in `user_ids` order.
    pub user_ids: Vec<UserId>,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    /// Mean raw score of each item over training users; used for cold users.
    pub item_mean_scores: Vec<f64>,
}

/// A trained model plus its per-epoch training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabModel {
    pub params: CmParameters,
    pub epoch_losses: Vec<f64>,
    #[serde(skip)]
    user_rows: BTreeMap<UserId, usize>,
}

/// (user row, positive item, negative item)
type Pair = (usize, ItemId, ItemId);

fn build_pairs(records: &[SessionRecord], rows: &BTreeMap<UserId, usize>, num_items: usize, cfg: &CmConfig, seed: u64) -> Vec<Pair> {
    let mut rng = rng_for(seed, 0xc0);
    let mut pairs = Vec::new();
    for r in records {
        let row = rows[&r.user_id];
        let presented: HashSet<ItemId> = r.presented.iter().map(|(i, _)| *i).collect();
        let unpresented: Vec<ItemId> = (0..num_items).filter(|i| !presented.contains(i)).collect();
        let negatives: Vec<ItemId> = r.presented.iter().filter(|(_, f)| !f.is_positive()).map(|(i, _)| *i).collect();
        for (pos, _) in r.presented.iter().filter(|(_, f)| f.is_positive()) {
            for &neg in &negatives {
                pairs.push((row, *pos, neg));
            }
            if !unpresented.is_empty() {
                for _ in 0..cfg.unpresented_per_positive {
                    let neg = unpresented[rng.random_range(0..unpresented.len())];
                    pairs.push((row, *pos, neg));
                }
            }
        }
    }
    pairs
}

fn pair_loss(params: &CmParameters, pairs: &[Pair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(u, p, n)| {
            let uf = &params.user_factors[u];
            let x = dot(uf, &params.item_factors[p]) - dot(uf, &params.item_factors[n]);
            // -ln sigmoid(x), stable on both tails
            if x > 0.0 {
                (-x).exp().ln_1p()
            } else {
                -x + x.exp().ln_1p()
            }
        })
        .sum();
    total / pairs.len() as f64
}

pub fn train_cm(records: &[SessionRecord], num_items: usize, cfg: &CmConfig, seed: u64) -> Result<CollabModel> {
    if records.is_empty() {
        return Err(Error::Config("cannot train the collaborative model on zero records".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("cm k must be >= 1".into()));
    }
    let mut user_rows = BTreeMap::new();
    for r in records {
        let next = user_rows.len();
        user_rows.entry(r.user_id).or_insert(next);
    }
    let mut user_ids = vec![0; user_rows.len()];
    for (&u, &row) in &user_rows {
        user_ids[row] = u;
    }
    let mut rng = rng_for(seed, 0xc1);
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..cfg.k).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * cfg.init_scale).collect())
            .collect()
    };
    let user_factors = init(user_ids.len());
    let item_factors = init(num_items);
    let mut params = CmParameters {
        k: cfg.k,
        num_items,
        user_ids,
        user_factors,
        item_factors,
        item_mean_scores: vec![0.0; num_items],
    };

    let pairs = build_pairs(records, &user_rows, num_items, cfg, seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = rng_for(seed, 0xc2);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for &idx in &order {
            let (u, p, n) = pairs[idx];
            let uf = params.user_factors[u].clone();
            let (pf, nf) = (params.item_factors[p].clone(), params.item_factors[n].clone());
            let x = dot(&uf, &pf) - dot(&uf, &nf);
            // d(-ln sigmoid(x))/dx
            let g = -sigmoid(-x);
            for d in 0..cfg.k {
                params.user_factors[u][d] -= cfg.lr * (g * (pf[d] - nf[d]) + cfg.reg * uf[d]);
                params.item_factors[p][d] -= cfg.lr * (g * uf[d] + cfg.reg * pf[d]);
                params.item_factors[n][d] -= cfg.lr * (-g * uf[d] + cfg.reg * nf[d]);
            }
        }
        epoch_losses.push(pair_loss(&params, &pairs));
    }

    let users = params.user_factors.len() as f64;
    for item in 0..num_items {
        let total: f64 = params.user_factors.iter().map(|uf| dot(uf, &params.item_factors[item])).sum();
        params.item_mean_scores[item] = total / users;
    }
    if !params
        .user_factors
        .iter()
        .chain(&params.item_factors)
        .flatten()
        .all(|v| v.is_finite())
    {
        return Err(Error::Training("collaborative model diverged".into()));
    }
    Ok(CollabModel {
        params,
        epoch_losses,
        user_rows,
    })
}

impl CollabModel {
    pub fn from_params(params: CmParameters, epoch_losses: Vec<f64>) -> Self {
        let user_rows = params.user_ids.iter().enumerate().map(|(row, &u)| (u, row)).collect();
        Self {
            params,
            epoch_losses,
            user_rows,
        }
    }

    /// Raw score `<user, item>`; users unseen in training get the item's mean score.
    pub fn raw_score(&self, user: UserId, item: ItemId) -> Result<f64> {
        let item_f = self
            .params
            .item_factors
            .get(item)
            .ok_or_else(|| Error::Lookup(format!("unknown item {item}")))?;
        Ok(match self.user_rows.get(&user) {
            Some(&row) => dot(&self.params.user_factors[row], item_f),
            None => self.params.item_mean_scores[item],
        })
    }

    /// Logistic of the raw score, strictly inside (0, 1) for finite inputs.
    pub fn score(&self, user: UserId, item: ItemId) -> Result<f64> {
        Ok(normalize_score(self.raw_score(user, item)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `flowrec train-cm` first".into(),
            });
        }
        let m: CollabModel = crate::util::read_json(path)?;
        Ok(Self::from_params(m.params, m.epoch_losses))
    }
}

pub fn normalize_score(raw: f64) -> f64 {
    sigmoid(raw).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sessions, generate_universe, BehaviorPolicy, FeedbackLevel, SessionConfig};

    fn sessions(world_seed: u64, session_seed: u64) -> Vec<SessionRecord> {
        let world = generate_universe(64, 200, 8, world_seed).unwrap();
        let cfg = SessionConfig {
            session_size: 10,
            history_len: 5,
            behavior: BehaviorPolicy::default(),
        };
        generate_sessions(&world, &cfg, session_seed).unwrap()
    }

    fn corpus(seed: u64) -> (usize, Vec<SessionRecord>) {
        (64, sessions(seed, seed))
    }

    #[test]
    fn dot_product_score() {
        let params = CmParameters {
            k: 2,
            num_items: 1,
            user_ids: vec![0],
            user_factors: vec![vec![1.0, 0.0]],
            item_factors: vec![vec![0.5, 0.2]],
            item_mean_scores: vec![0.5],
        };
        let m = CollabModel::from_params(params, vec![]);
        assert_eq!(m.raw_score(0, 0).unwrap(), 0.5);
        assert!(matches!(m.raw_score(0, 3), Err(Error::Lookup(_))));
        assert_eq!(normalize_score(0.0), 0.5);
        for raw in [-1e6, -30.0, 0.0, 30.0, 1e6] {
            let s = normalize_score(raw);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn single_pair_is_separated() {
        let rec = SessionRecord {
            user_id: 0,
            user_history: vec![0],
            presented: vec![(0, FeedbackLevel::Clicked), (1, FeedbackLevel::Presented)],
            target_item: 0,
        };
        let cfg = CmConfig {
            k: 1,
            epochs: 1000,
            unpresented_per_positive: 0,
            ..CmConfig::default()
        };
        let m = train_cm(&[rec], 2, &cfg, 9).unwrap();
        assert!(m.raw_score(0, 0).unwrap() > m.raw_score(0, 1).unwrap());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(train_cm(&[], 4, &CmConfig::default(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_loss_monotone() {
        let (n, records) = corpus(3);
        let a = train_cm(&records, n, &CmConfig::default(), 1).unwrap();
        let b = train_cm(&records, n, &CmConfig::default(), 1).unwrap();
        assert_eq!(a, b);
        for w in a.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss went up: {:?}", a.epoch_losses);
        }
    }

    #[test]
    fn clicked_items_outscore_unpresented_on_held_out_sessions() {
        let n = 64;
        let train = sessions(4, 4);
        let held = sessions(4, 5);
        let m = train_cm(&train, n, &CmConfig::default(), 2).unwrap();
        let (mut pos, mut np, mut neg, mut nn) = (0.0, 0, 0.0, 0);
        for r in &held {
            let shown: HashSet<ItemId> = r.presented.iter().map(|(i, _)| *i).collect();
            for (i, f) in &r.presented {
                if f.is_positive() {
                    pos += m.score(r.user_id, *i).unwrap();
                    np += 1;
                }
            }
            for i in (0..n).filter(|i| !shown.contains(i)) {
                neg += m.score(r.user_id, i).unwrap();
                nn += 1;
            }
        }
        let gap = pos / np as f64 - neg / nn as f64;
        assert!(gap > 0.0, "gap {gap}");
    }
}
