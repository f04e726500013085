//! Constrained beam search and evaluation metrics.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::CollabModel;
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyPass, UserContext};
use crate::synth::{ItemId, UserId};
use crate::tokenizer::{IdentifierIndex, Token};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: UserId,
    /// (item, cumulative log-probability), best first.
    pub items: Vec<(ItemId, f64)>,
}

impl RankedList {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|(i, _)| *i).collect()
    }
}

#[derive(Clone, Debug)]
struct Beam {
    tokens: Vec<Token>,
    score: f64,
    item: Option<ItemId>,
}

fn beam_order(a: &Beam, b: &Beam) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search restricted to valid identifiers. Finished beams keep
/// competing with unfinished ones; ties go to the lexicographically smaller
/// token sequence.
pub fn beam_search(policy: &Policy, ctx: &UserContext, index: &IdentifierIndex, beam_width: usize, k: usize) -> Result<Vec<(ItemId, f64)>> {
    if beam_width < k || k == 0 {
        return Err(Error::Config(format!("beam width {beam_width} must be >= K = {k} >= 1")));
    }
    let mut pass = policy.pass();
    let user = pass.user(ctx)?;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        item: None,
    }];
    while beams.iter().any(|b| b.item.is_none()) {
        let mut next = Vec::new();
        for beam in beams {
            if beam.item.is_some() {
                next.push(beam);
                continue;
            }
            let allowed = index.valid_next(&beam.tokens)?;
            let logp = expand(&mut pass, user, &beam.tokens)?;
            for t in allowed {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                let item = index.terminal_item(&tokens);
                next.push(Beam {
                    score: beam.score + logp[t],
                    tokens,
                    item,
                });
            }
        }
        next.sort_by(beam_order);
        next.truncate(beam_width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .take(k)
        .map(|b| (b.item.expect("finished beam"), b.score))
        .collect())
}

/// Top-`k` lists for many users; beams run in parallel, output keeps input order.
pub fn rank_users(
    policy: &Policy,
    users: &[(UserId, &UserContext)],
    index: &IdentifierIndex,
    beam_width: usize,
    k: usize,
) -> Result<Vec<RankedList>> {
    users
        .par_iter()
        .map(|(user_id, ctx)| {
            Ok(RankedList {
                user_id: *user_id,
                items: beam_search(policy, ctx, index, beam_width, k)?,
            })
        })
        .collect()
}

fn expand(pass: &mut PolicyPass, user: crate::policy::UserHandle, prefix: &[Token]) -> Result<Vec<f64>> {
    let v = pass.next_token_logprobs(user, prefix)?;
    Ok(pass.graph.value(v).to_vec())
}

/// Fraction of users whose target is in their top `k`.
pub fn recall_at_k(lists: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists.iter().zip(targets).filter(|(l, t)| l.iter().take(k).any(|i| i == *t)).count();
    hits as f64 / lists.len() as f64
}

/// Single-target NDCG: `1 / log2(1 + rank)` when the target is in the top `k`.
pub fn ndcg_at_k(lists: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let total: f64 = lists
        .iter()
        .zip(targets)
        .map(|(l, t)| match l.iter().take(k).position(|i| i == t) {
            Some(pos) => 1.0 / ((pos + 2) as f64).log2(),
            None => 0.0,
        })
        .sum();
    total / lists.len() as f64
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(pos, g)| g / ((pos + 2) as f64).log2()).sum()
}

/// Graded NDCG with `utility(user, item)` as gain; the ideal list is the `k`
/// highest-utility catalog items. Users whose ideal DCG is 0 score 0.
pub fn value_weighted_ndcg(lists: &[(UserId, Vec<ItemId>)], utility: &dyn Fn(UserId, ItemId) -> f64, num_items: usize, k: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let total: f64 = lists
        .iter()
        .map(|(user, items)| {
            let got = dcg(items.iter().take(k).map(|i| utility(*user, *i)));
            let mut all: Vec<f64> = (0..num_items).map(|i| utility(*user, i)).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            let ideal = dcg(all.into_iter().take(k));
            if ideal > 0.0 {
                got / ideal
            } else {
                0.0
            }
        })
        .sum();
    total / lists.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub num_identifiers: usize,
    pub total_variation: f64,
    pub pearson: f64,
    pub z_estimate: f64,
    pub reward_total: f64,
    pub z_relative_error: f64,
    pub model_mass: f64,
}

pub const MAX_ENUMERABLE: usize = 65_536;

/// Every identifier of a full `vocab^levels` space in lexicographic order.
pub fn enumerate_identifiers(levels: usize, vocab: usize) -> Result<Vec<Vec<Token>>> {
    let size = (vocab as f64).powi(levels as i32);
    if size > MAX_ENUMERABLE as f64 {
        return Err(Error::Config(format!(
            "identifier space {vocab}^{levels} exceeds {MAX_ENUMERABLE}; use fewer levels or a smaller vocabulary"
        )));
    }
    let size = size as usize;
    Ok((0..size)
        .map(|mut code| {
            let mut ident = vec![0; levels];
            for slot in ident.iter_mut().rev() {
                *slot = code % vocab;
                code /= vocab;
            }
            ident
        })
        .collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Compares `P(tau)` against `R / sum R` over a full identifier space.
/// `rewards[i]` belongs to the i-th identifier of [`enumerate_identifiers`].
pub fn flow_proportionality_report(policy: &Policy, ctx: &UserContext, rewards: &[f64]) -> Result<FlowReport> {
    let cfg = policy.config();
    let idents = enumerate_identifiers(cfg.levels, cfg.vocab)?;
    if rewards.len() != idents.len() {
        return Err(Error::Config(format!(
            "reward table has {} entries, identifier space has {}",
            rewards.len(),
            idents.len()
        )));
    }
    if rewards.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Reward("reward table entries must be positive and finite".into()));
    }
    let mut pass = policy.pass();
    let user = pass.user(ctx)?;
    let mut model = Vec::with_capacity(idents.len());
    for ident in &idents {
        let v = pass.trajectory_logprob(user, ident)?;
        model.push(pass.graph.scalar(v).exp());
    }
    let log_z = pass.log_z(user);
    let z_estimate = pass.graph.scalar(log_z).exp();
    let reward_total: f64 = rewards.iter().sum();
    let target: Vec<f64> = rewards.iter().map(|r| r / reward_total).collect();
    Ok(FlowReport {
        num_identifiers: idents.len(),
        total_variation: total_variation(&model, &target),
        pearson: pearson(&model, &target),
        z_estimate,
        reward_total,
        z_relative_error: (z_estimate - reward_total).abs() / reward_total,
        model_mass: model.iter().sum(),
    })
}

pub const KL_BINS: usize = 50;
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Share of all recommendation slots taken by each catalog item.
    pub item_frequencies: Vec<f64>,
    pub frequency_std: f64,
    pub kl_to_normal: f64,
    pub kl_bins: usize,
    pub cm_score_mean: f64,
    pub cm_score_range: f64,
    pub cm_score_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// KL(p || q) over aligned discrete distributions with additive smoothing.
pub fn kl_divergence(p: &[f64], q: &[f64], smoothing: f64) -> f64 {
    let norm = |v: &[f64]| -> Vec<f64> {
        let total: f64 = v.iter().map(|x| x + smoothing).sum();
        v.iter().map(|x| (x + smoothing) / total).collect()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (std * std::f64::consts::SQRT_2)))
}

// Abramowitz-Stegun 7.1.26
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0 - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t * (-x * x).exp();
    sign * y
}

/// KL between the histogram of `values` and a moment-matched normal
/// discretized on the same bins.
pub fn kl_to_fitted_normal(values: &[f64], bins: usize) -> f64 {
    let (mean, std) = mean_std(values);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if std == 0.0 || hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0.0; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        hist[b] += 1.0 / values.len() as f64;
    }
    let normal: Vec<f64> = (0..bins)
        .map(|b| {
            let a = lo + b as f64 * width;
            normal_cdf(a + width, mean, std) - normal_cdf(a, mean, std)
        })
        .collect();
    kl_divergence(&hist, &normal, KL_SMOOTHING)
}

pub fn diversity_report(lists: &[RankedList], num_items: usize, cm: Option<&CollabModel>) -> Result<DiversityReport> {
    if lists.is_empty() {
        return Err(Error::Config("diversity report needs at least one list".into()));
    }
    let mut counts = vec![0.0; num_items];
    let mut slots = 0.0;
    for l in lists {
        for (item, _) in &l.items {
            counts[*item] += 1.0;
            slots += 1.0;
        }
    }
    let item_frequencies: Vec<f64> = counts.iter().map(|c| c / slots).collect();
    let (_, frequency_std) = mean_std(&item_frequencies);
    let kl_to_normal = kl_to_fitted_normal(&item_frequencies, KL_BINS);

    let (mut cm_score_mean, mut cm_score_range, mut cm_score_std) = (0.0, 0.0, 0.0);
    if let Some(cm) = cm {
        let scores = lists
            .iter()
            .flat_map(|l| l.items.iter().map(move |(i, _)| cm.score(l.user_id, *i)))
            .collect::<Result<Vec<f64>>>()?;
        let (m, s) = mean_std(&scores);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        cm_score_mean = m;
        cm_score_std = s;
        cm_score_range = hi - lo;
    }
    Ok(DiversityReport {
        item_frequencies,
        frequency_std,
        kl_to_normal,
        kl_bins: KL_BINS,
        cm_score_mean,
        cm_score_range,
        cm_score_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn lists_of(items: &[&[ItemId]]) -> Vec<Vec<ItemId>> {
        items.iter().map(|l| l.to_vec()).collect()
    }

    #[test]
    fn recall_examples() {
        let lists = lists_of(&[&[1, 2], &[3, 4], &[5, 6], &[7, 8]]);
        assert_eq!(recall_at_k(&lists, &[1, 3, 5, 7], 2), 1.0);
        assert_eq!(recall_at_k(&lists, &[9, 9, 9, 9], 2), 0.0);
        assert_eq!(recall_at_k(&lists, &[2, 9, 9, 9], 2), 0.25);
    }

    #[test]
    fn ndcg_examples() {
        let lists = lists_of(&[&[1, 2, 3]]);
        assert_eq!(ndcg_at_k(&lists, &[1], 3), 1.0);
        assert!((ndcg_at_k(&lists, &[2], 3) - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&lists, &[4], 3), 0.0);
        assert_eq!(ndcg_at_k(&lists, &[3], 2), 0.0);
    }

    #[test]
    fn value_ndcg_ideal_and_degenerate() {
        let util = |_u: UserId, i: ItemId| [0.1, 0.9, 0.5, 0.7][i];
        let ideal = vec![(0, vec![1, 3, 2])];
        assert!((value_weighted_ndcg(&ideal, &util, 4, 3) - 1.0).abs() < 1e-12);
        let worse = vec![(0, vec![0, 2, 3])];
        assert!(value_weighted_ndcg(&worse, &util, 4, 3) < 1.0);
        let zero = |_u: UserId, _i: ItemId| 0.0;
        assert_eq!(value_weighted_ndcg(&ideal, &zero, 4, 3), 0.0);
    }

    #[test]
    fn beam_rejects_narrow_width() {
        let p = Policy::new(PolicyConfig::new(2, 3, 2)).unwrap();
        let idx = IdentifierIndex::from_identifiers(2, 3, vec![vec![0, 1], vec![1, 1]]).unwrap();
        let ctx = UserContext(vec![0.0, 0.0]);
        assert!(matches!(beam_search(&p, &ctx, &idx, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn dominant_path_wins_for_any_width() {
        let mut p = Policy::new(PolicyConfig::new(3, 4, 2)).unwrap();
        for (l, t) in [2usize, 0, 3].iter().enumerate() {
            let (_, b) = p.head_ids(l);
            p.params_mut().get_mut(b).data[*t] = 60.0;
        }
        let idents = enumerate_identifiers(3, 4).unwrap();
        let want = idents.iter().position(|i| i == &vec![2, 0, 3]).unwrap();
        let idx = IdentifierIndex::from_identifiers(3, 4, idents).unwrap();
        let ctx = UserContext(vec![0.2, -0.4]);
        for width in 1..6 {
            let top = beam_search(&p, &ctx, &idx, width, 1).unwrap();
            assert_eq!(top[0].0, want);
        }
    }

    #[test]
    fn beam_only_emits_valid_items() {
        let p = Policy::new(PolicyConfig::new(4, 4, 2)).unwrap();
        let idents = vec![vec![0, 1, 2], vec![0, 1, 3, 0], vec![0, 1, 3, 1], vec![3, 3, 3]];
        let idx = IdentifierIndex::from_identifiers(3, 4, idents).unwrap();
        let ctx = UserContext(vec![0.5, 0.1]);
        let out = beam_search(&p, &ctx, &idx, 4, 4).unwrap();
        let mut items: Vec<ItemId> = out.iter().map(|(i, _)| *i).collect();
        items.sort();
        assert_eq!(items, vec![0, 1, 2, 3]);
        for w in out.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn uniform_policy_tv_closed_form() {
        let mut p = Policy::new(PolicyConfig::new(2, 2, 2)).unwrap();
        for l in 0..2 {
            let (w, _) = p.head_ids(l);
            p.params_mut().get_mut(w).data.fill(0.0);
        }
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let report = flow_proportionality_report(&p, &UserContext(vec![0.0, 0.0]), &rewards).unwrap();
        let expect = 0.5 * rewards.iter().map(|r| (0.25 - r / 10.0f64).abs()).sum::<f64>();
        assert!((report.total_variation - expect).abs() < 1e-12);
        assert!((report.model_mass - 1.0).abs() < 1e-6);
        assert!((report.z_estimate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oversized_space_is_refused() {
        assert!(matches!(enumerate_identifiers(6, 8), Err(Error::Config(_))));
    }

    #[test]
    fn kl_and_frequency_degenerate_cases() {
        let d = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&d, &d, KL_SMOOTHING).abs() < 1e-15);

        let same: Vec<RankedList> = (0..5)
            .map(|u| RankedList {
                user_id: u,
                items: vec![(0, -1.0), (1, -2.0), (2, -3.0)],
            })
            .collect();
        let rep = diversity_report(&same, 10, None).unwrap();
        let (k, m) = (3.0f64, 10.0f64);
        let expect = (1.0 / (k * m) - 1.0 / (m * m)).sqrt();
        assert!((rep.frequency_std - expect).abs() < 1e-12);

        let spread: Vec<RankedList> = (0..5)
            .map(|u| RankedList {
                user_id: u,
                items: vec![(2 * u, -1.0), (2 * u + 1, -2.0)],
            })
            .collect();
        let rep = diversity_report(&spread, 10, None).unwrap();
        assert!(rep.frequency_std.abs() < 1e-15);
        assert_eq!(rep.kl_to_normal, 0.0);
    }

    #[test]
    fn pearson_and_tv_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }
}
