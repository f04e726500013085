//! Augmented-trajectory construction: the N-1 extra items trained next to
//! each record's positive.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collab::CollabModel;
use crate::error::{Error, Result};
use crate::eval::beam_search;
use crate::policy::{Policy, UserContext};
use crate::synth::{ItemId, SessionRecord};
use crate::tokenizer::IdentifierIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    InteractionLog,
    Random,
    CmCurriculum,
    OnPolicy,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interaction_log" => Ok(Self::InteractionLog),
            "random" => Ok(Self::Random),
            "cm_curriculum" => Ok(Self::CmCurriculum),
            "on_policy" => Ok(Self::OnPolicy),
            other => Err(Error::Config(format!(
                "unknown sampler strategy {other:?} (interaction_log, random, cm_curriculum, on_policy)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSelection {
    None,
    Min,
    Max,
}

impl std::str::FromStr for ConfidenceSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown confidence selection {other:?} (none, min, max)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    /// Trajectories per record, the positive included.
    pub n: usize,
    pub total_epochs: usize,
    pub confidence_selection: ConfidenceSelection,
    /// Candidate pool size is `pool_multiplier * n - 1`.
    pub pool_multiplier: usize,
    pub beam_width: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::CmCurriculum,
            n: 4,
            total_epochs: 30,
            confidence_selection: ConfidenceSelection::None,
            pool_multiplier: 2,
            beam_width: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("sampler n must be >= 1".into()));
        }
        if self.pool_multiplier == 0 {
            return Err(Error::Config("pool multiplier must be >= 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("curriculum total_epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.pool_multiplier * self.n - 1
    }
}

/// Augmented items plus how many of them came from the random fallback.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sample {
    pub items: Vec<ItemId>,
    pub random_fill: usize,
}

/// Tops `items` up to `need` with uniform draws that avoid `target` and
/// everything already chosen.
fn fill_random(items: &mut Vec<ItemId>, need: usize, target: ItemId, num_items: usize, rng: &mut impl Rng) -> usize {
    let before = items.len();
    if items.len() >= need {
        return 0;
    }
    let taken: HashSet<ItemId> = items.iter().copied().chain([target]).collect();
    let mut eligible: Vec<ItemId> = (0..num_items).filter(|i| !taken.contains(i)).collect();
    let missing = (need - items.len()).min(eligible.len());
    let (picked, _) = eligible.partial_shuffle(rng, missing);
    items.extend_from_slice(picked);
    let added = items.len() - before;
    if added > 0 {
        log::debug!("sampler shortfall: {added} item(s) filled at random");
    }
    added
}

/// Presented items other than the target, positives before presented-only,
/// uniformly shuffled within each tier.
pub fn sample_from_log(record: &SessionRecord, n: usize, num_items: usize, rng: &mut impl Rng) -> Sample {
    let need = n.saturating_sub(1);
    let tier = |positive: bool| -> Vec<ItemId> {
        record
            .presented
            .iter()
            .filter(|(i, f)| *i != record.target_item && f.is_positive() == positive)
            .map(|(i, _)| *i)
            .collect()
    };
    let mut items = Vec::with_capacity(need);
    for mut group in [tier(true), tier(false)] {
        group.shuffle(rng);
        items.extend(group.into_iter().take(need - items.len()));
    }
    let random_fill = fill_random(&mut items, need, record.target_item, num_items, rng);
    Sample { items, random_fill }
}

/// `count` distinct items drawn uniformly from the catalog minus `target`.
fn distinct_excluding(target: ItemId, count: usize, num_items: usize, rng: &mut impl Rng) -> Result<Vec<ItemId>> {
    if target >= num_items || count > num_items - 1 {
        return Err(Error::Config(format!(
            "cannot draw {count} items other than {target} from a catalog of {num_items}"
        )));
    }
    Ok(index::sample(rng, num_items - 1, count)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect())
}

pub fn sample_random(target: ItemId, n: usize, num_items: usize, rng: &mut impl Rng) -> Result<Sample> {
    Ok(Sample {
        items: distinct_excluding(target, n.saturating_sub(1), num_items, rng)?,
        random_fill: 0,
    })
}

/// Candidate pool for curriculum sampling, capped by the catalog.
pub fn curriculum_pool(target: ItemId, pool_size: usize, num_items: usize, rng: &mut impl Rng) -> Result<Vec<ItemId>> {
    distinct_excluding(target, pool_size.min(num_items.saturating_sub(1)), num_items, rng)
}

/// Start of the selection window over a pool sorted by ascending score.
/// Slides linearly from 0 at epoch 0 to the last position at the final epoch.
pub fn curriculum_offset(epoch: usize, total_epochs: usize, positions: usize) -> usize {
    if total_epochs <= 1 {
        return 0;
    }
    (epoch * positions / (total_epochs - 1)).min(positions)
}

/// Picks `need` items from `pool`: a contiguous window of the pool sorted by
/// CM score, sliding from the easiest to the hardest end over training.
pub fn curriculum_window(
    pool: &[ItemId],
    user: usize,
    need: usize,
    epoch: usize,
    total_epochs: usize,
    cm: &CollabModel,
) -> Result<Vec<ItemId>> {
    let mut scored = pool
        .iter()
        .map(|&i| Ok((cm.raw_score(user, i)?, i)))
        .collect::<Result<Vec<(f64, ItemId)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let need = need.min(scored.len());
    let start = curriculum_offset(epoch, total_epochs, scored.len() - need);
    Ok(scored[start..start + need].iter().map(|(_, i)| *i).collect())
}

pub fn sample_cm_curriculum(
    record: &SessionRecord,
    cfg: &SamplerConfig,
    epoch: usize,
    cm: Option<&CollabModel>,
    num_items: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let cm = cm.ok_or_else(|| Error::Config("cm_curriculum sampling needs a collaborative model".into()))?;
    let need = cfg.n.saturating_sub(1);
    let pool = curriculum_pool(record.target_item, cfg.pool_size(), num_items, rng)?;
    let mut items = curriculum_window(&pool, record.user_id, need, epoch, cfg.total_epochs, cm)?;
    let random_fill = fill_random(&mut items, need, record.target_item, num_items, rng);
    Ok(Sample { items, random_fill })
}

/// Chooses `need` candidates by beam score. `None` keeps the beam order,
/// `Min`/`Max` take the least/most confident members of the pool.
pub fn select_by_confidence(candidates: &[(ItemId, f64)], need: usize, selection: ConfidenceSelection) -> Vec<ItemId> {
    let mut ordered = candidates.to_vec();
    match selection {
        ConfidenceSelection::None => {}
        ConfidenceSelection::Max => ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))),
        ConfidenceSelection::Min => ordered.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
    }
    ordered.into_iter().take(need).map(|(i, _)| i).collect()
}

pub fn sample_on_policy(
    record: &SessionRecord,
    cfg: &SamplerConfig,
    policy: &Policy,
    ctx: &UserContext,
    index: &IdentifierIndex,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let num_items = index.num_items();
    let need = cfg.n.saturating_sub(1);
    if need == 0 {
        return Ok(Sample::default());
    }
    let pool = match cfg.confidence_selection {
        ConfidenceSelection::None => need,
        _ => cfg.pool_size().max(need),
    };
    // one extra slot in case the target is among the beams
    let k = (pool + 1).min(num_items);
    let found = beam_search(policy, ctx, index, cfg.beam_width.max(k), k)?;
    let candidates: Vec<(ItemId, f64)> = found.into_iter().filter(|(i, _)| *i != record.target_item).take(pool).collect();
    let mut items = select_by_confidence(&candidates, need, cfg.confidence_selection);
    let random_fill = fill_random(&mut items, need, record.target_item, num_items, rng);
    Ok(Sample { items, random_fill })
}

/// Read-only inputs a strategy may need.
#[derive(Clone, Copy)]
pub struct SamplerInputs<'a> {
    pub num_items: usize,
    pub cm: Option<&'a CollabModel>,
    /// Frozen policy snapshot for on-policy sampling.
    pub policy: Option<&'a Policy>,
    pub index: &'a IdentifierIndex,
}

pub fn sample_augmented(
    cfg: &SamplerConfig,
    record: &SessionRecord,
    ctx: &UserContext,
    epoch: usize,
    inputs: &SamplerInputs,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if cfg.n <= 1 {
        return Ok(Sample::default());
    }
    match cfg.strategy {
        SamplingStrategy::InteractionLog => Ok(sample_from_log(record, cfg.n, inputs.num_items, rng)),
        SamplingStrategy::Random => sample_random(record.target_item, cfg.n, inputs.num_items, rng),
        SamplingStrategy::CmCurriculum => sample_cm_curriculum(record, cfg, epoch, inputs.cm, inputs.num_items, rng),
        SamplingStrategy::OnPolicy => {
            let policy = inputs
                .policy
                .ok_or_else(|| Error::Config("on_policy sampling needs a policy snapshot".into()))?;
            sample_on_policy(record, cfg, policy, ctx, inputs.index, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::CmParameters;
    use crate::synth::FeedbackLevel;
    use crate::util::rng_for;

    fn record(presented: &[(ItemId, FeedbackLevel)], target: ItemId) -> SessionRecord {
        SessionRecord {
            user_id: 0,
            user_history: vec![0],
            presented: presented.to_vec(),
            target_item: target,
        }
    }

    fn check(items: &[ItemId], target: ItemId, need: usize) {
        assert_eq!(items.len(), need);
        assert!(!items.contains(&target));
        let set: HashSet<_> = items.iter().collect();
        assert_eq!(set.len(), items.len());
    }

    #[test]
    fn log_sampling_prefers_positives() {
        use FeedbackLevel::*;
        let mut presented = vec![(0, Clicked), (1, Clicked), (2, Liked), (3, Clicked)];
        presented.extend((4..9).map(|i| (i, Presented)));
        let r = record(&presented, 0);
        let mut rng = rng_for(1, 0);
        for _ in 0..50 {
            let s = sample_from_log(&r, 4, 20, &mut rng);
            let mut items = s.items.clone();
            items.sort();
            assert_eq!(items, vec![1, 2, 3]);
        }
    }

    #[test]
    fn log_sampling_forced_and_fallback() {
        use FeedbackLevel::*;
        let r = record(&[(5, Clicked), (6, Presented), (7, Presented)], 5);
        let mut rng = rng_for(2, 0);
        let s = sample_from_log(&r, 3, 10, &mut rng);
        let mut items = s.items.clone();
        items.sort();
        assert_eq!(items, vec![6, 7]);
        assert_eq!(s.random_fill, 0);

        let s = sample_from_log(&r, 6, 10, &mut rng);
        check(&s.items, 5, 5);
        assert_eq!(s.random_fill, 3);
    }

    #[test]
    fn random_sampling_constraints() {
        let mut rng = rng_for(3, 0);
        for draw in 0..10_000 {
            let target = draw % 30;
            let s = sample_random(target, 5, 30, &mut rng).unwrap();
            check(&s.items, target, 4);
        }
        let s = sample_random(2, 5, 5, &mut rng).unwrap();
        let mut items = s.items;
        items.sort();
        assert_eq!(items, vec![0, 1, 3, 4]);
        assert!(sample_random(0, 6, 5, &mut rng).is_err());
    }

    #[test]
    fn random_sampling_is_uniform() {
        let (num_items, target, draws, n) = (20usize, 7usize, 100_000usize, 4usize);
        let mut rng = rng_for(4, 0);
        let mut counts = vec![0.0f64; num_items];
        for _ in 0..draws {
            for i in sample_random(target, n, num_items, &mut rng).unwrap().items {
                counts[i] += 1.0;
            }
        }
        assert_eq!(counts[target], 0.0);
        let expected = draws as f64 * (n - 1) as f64 / (num_items - 1) as f64;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, c)| (c - expected).powi(2) / expected)
            .sum();
        // 18 degrees of freedom; the 0.999 quantile is 42.31
        assert!(chi2 < 42.31, "chi2 {chi2}");
        for (i, c) in counts.iter().enumerate().filter(|(i, _)| *i != target) {
            let p = (n - 1) as f64 / (num_items - 1) as f64;
            let se = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((c - expected).abs() < 3.0 * se + 1e-9, "item {i}: {c} vs {expected}");
        }
    }

    fn linear_cm(num_items: usize) -> CollabModel {
        let params = CmParameters {
            k: 1,
            num_items,
            user_ids: vec![0],
            user_factors: vec![vec![1.0]],
            item_factors: (0..num_items).map(|i| vec![i as f64 * 0.1]).collect(),
            item_mean_scores: (0..num_items).map(|i| i as f64 * 0.1).collect(),
        };
        CollabModel::from_params(params, vec![])
    }

    #[test]
    fn curriculum_endpoints() {
        let cm = linear_cm(30);
        let pool = vec![9, 3, 14, 1, 22, 5, 17];
        let first = curriculum_window(&pool, 0, 3, 0, 10, &cm).unwrap();
        assert_eq!(first, vec![1, 3, 5]);
        let last = curriculum_window(&pool, 0, 3, 9, 10, &cm).unwrap();
        assert_eq!(last, vec![14, 17, 22]);
        for epoch in 0..=12 {
            let w = curriculum_window(&pool, 0, 3, epoch, 10, &cm).unwrap();
            assert_eq!(w.len(), 3);
        }
        assert!(matches!(
            sample_cm_curriculum(
                &record(&[(0, FeedbackLevel::Clicked)], 0),
                &SamplerConfig::default(),
                0,
                None,
                30,
                &mut rng_for(0, 0)
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn offsets_cover_the_pool() {
        for total in 1..12 {
            for positions in 0..9 {
                let offs: Vec<usize> = (0..total).map(|e| curriculum_offset(e, total, positions)).collect();
                assert_eq!(offs[0], 0);
                if total > 1 {
                    assert_eq!(*offs.last().unwrap(), positions);
                }
                assert!(offs.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn confidence_selection() {
        let pool = [(3, 0.9f64.ln()), (8, 0.1f64.ln())];
        assert_eq!(select_by_confidence(&pool, 1, ConfidenceSelection::Min), vec![8]);
        assert_eq!(select_by_confidence(&pool, 1, ConfidenceSelection::Max), vec![3]);
        assert_eq!(select_by_confidence(&pool, 2, ConfidenceSelection::None), vec![3, 8]);
    }

    #[test]
    fn on_policy_excludes_target_and_passes_beams_through() {
        use crate::policy::PolicyConfig;
        let idents: Vec<Vec<usize>> = (0..9).map(|i| vec![i / 3, i % 3]).collect();
        let index = IdentifierIndex::from_identifiers(2, 3, idents).unwrap();
        let policy = Policy::new(PolicyConfig::new(2, 3, 2)).unwrap();
        let ctx = UserContext(vec![0.3, -0.2]);
        let top = beam_search(&policy, &ctx, &index, 4, 4).unwrap();
        let cfg = SamplerConfig {
            strategy: SamplingStrategy::OnPolicy,
            n: 4,
            beam_width: 4,
            ..SamplerConfig::default()
        };
        let mut rng = rng_for(5, 0);
        for target in 0..9 {
            let r = record(&[(target, FeedbackLevel::Clicked)], target);
            let s = sample_on_policy(&r, &cfg, &policy, &ctx, &index, &mut rng).unwrap();
            check(&s.items, target, 3);
            let expect: Vec<ItemId> = top.iter().map(|(i, _)| *i).filter(|i| *i != target).take(3).collect();
            assert_eq!(s.items, expect);
            assert_eq!(s.random_fill, 0);
        }
    }
}
