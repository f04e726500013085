//! End-to-end benchmark runs and hyperparameter sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::collab::{train_cm, CmConfig, CollabModel};
use crate::config::VerifyConfig;
use crate::error::{Error, Result};
use crate::eval::{
    diversity_report, flow_proportionality_report, rank_users, value_weighted_ndcg, DiversityReport, FlowReport, RankedList,
};
use crate::policy::{Policy, PolicyConfig, UserContext};
use crate::synth::{generate_sessions, generate_universe, BehaviorPolicy, ItemId, SessionConfig, SessionRecord, UserId, World};
use crate::tokenizer::Tokenizer;
use crate::trainer::{
    build_splits, fit_reward_table, ranking_metrics, train, EvalExample, RankingMetrics, Splits, TrainConfig, TrainOutcome,
};
use crate::util::{median, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub dim: usize,
    pub session_size: usize,
    pub history_len: usize,
    pub utility_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_items: 64,
            num_users: 200,
            dim: 4,
            session_size: 20,
            history_len: 5,
            utility_weight: 0.7,
        }
    }
}

impl EnvConfig {
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            session_size: self.session_size,
            history_len: self.history_len,
            behavior: BehaviorPolicy {
                utility_weight: self.utility_weight,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokConfig {
    pub levels: usize,
    pub vocab: usize,
}

impl Default for TokConfig {
    fn default() -> Self {
        Self { levels: 3, vocab: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub beam_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 10, beam_width: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub tok: TokConfig,
    pub cm: CmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Seeds of the individual stages, all derived from the run seed.
pub fn stage_seeds(seed: u64) -> [u64; 4] {
    let base = seed.wrapping_mul(1000);
    [base + 1, base + 2, base + 3, base + 4]
}

pub struct Prepared {
    pub world: World,
    pub records: Vec<SessionRecord>,
    pub tokenizer: Tokenizer,
    pub cm: CollabModel,
    pub splits: Splits,
}

pub fn prepare(cfg: &BenchmarkConfig) -> Result<Prepared> {
    let [world_seed, session_seed, tok_seed, cm_seed] = stage_seeds(cfg.seed);
    let world = generate_universe(cfg.env.num_items, cfg.env.num_users, cfg.env.dim, world_seed)?;
    let records = generate_sessions(&world, &cfg.env.session_config(), session_seed)?;
    let tokenizer = Tokenizer::fit(&world.universe, cfg.tok.levels, cfg.tok.vocab, tok_seed)?;
    let cm = train_cm(&records, cfg.env.num_items, &cfg.cm, cm_seed)?;
    let splits = build_splits(&records, &tokenizer)?;
    Ok(Prepared {
        world,
        records,
        tokenizer,
        cm,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub users: usize,
    pub k: usize,
    pub metrics: RankingMetrics,
    /// Graded NDCG@k with ground-truth utility as gain.
    pub value_ndcg: f64,
    pub diversity: DiversityReport,
}

pub fn evaluate(
    policy: &Policy,
    examples: &[EvalExample],
    split: &str,
    tok: &Tokenizer,
    world: &World,
    cm: Option<&CollabModel>,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<RankedList>)> {
    if examples.is_empty() {
        return Err(Error::Config(format!("split {split} has no examples")));
    }
    let users: Vec<(UserId, &UserContext)> = examples.iter().map(|e| (e.user_id, &e.context)).collect();
    let lists = rank_users(policy, &users, &tok.index, cfg.beam_width, cfg.k)?;
    let metrics = ranking_metrics(policy, examples, tok, cfg.beam_width, cfg.k)?;
    let pairs: Vec<(UserId, Vec<ItemId>)> = lists.iter().map(|l| (l.user_id, l.item_ids())).collect();
    let utility = |u: UserId, i: ItemId| world.utility(u, i);
    let value_ndcg = value_weighted_ndcg(&pairs, &utility, world.universe.num_items, cfg.k);
    let diversity = diversity_report(&lists, world.universe.num_items, cm)?;
    Ok((
        EvalReport {
            split: split.to_string(),
            users: examples.len(),
            k: cfg.k,
            metrics,
            value_ndcg,
            diversity,
        },
        lists,
    ))
}

pub struct BenchmarkRun {
    pub outcome: TrainOutcome,
    pub valid: EvalReport,
}

/// Prepares data, trains, and evaluates the best checkpoint on validation.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkRun> {
    let prepared = prepare(cfg)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        eval_k: cfg.eval.k,
        eval_beam_width: cfg.eval.beam_width,
        ..cfg.train.clone()
    };
    let outcome = train(&train_cfg, &prepared.splits, &prepared.tokenizer, Some(&prepared.cm))?;
    let (valid, _) = evaluate(
        &outcome.policy,
        &prepared.splits.valid,
        "valid",
        &prepared.tokenizer,
        &prepared.world,
        Some(&prepared.cm),
        &cfg.eval,
    )?;
    Ok(BenchmarkRun { outcome, valid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRun {
    pub rewards: Vec<f64>,
    pub losses: Vec<f64>,
    pub report: FlowReport,
}

/// Fits a fresh policy to a seeded positive reward table over every
/// identifier of a `tok.levels` x `tok.vocab` space and reports how closely
/// the sampling distribution follows R / sum(R).
pub fn verify_flow(cfg: &VerifyConfig, tok: &TokConfig, context_dim: usize, seed: u64) -> Result<FlowRun> {
    let size = tok.vocab.checked_pow(tok.levels as u32).unwrap_or(usize::MAX);
    if size > crate::eval::MAX_ENUMERABLE {
        return Err(Error::Config(format!(
            "{}^{} identifiers cannot be enumerated; lower tok.levels or tok.vocab",
            tok.vocab, tok.levels
        )));
    }
    if !(cfg.reward_spread >= 0.0 && cfg.reward_spread.is_finite()) {
        return Err(Error::Config(format!("flow.reward_spread must be >= 0, got {}", cfg.reward_spread)));
    }
    let mut rng = rng_for(seed, 0xf10);
    let rewards: Vec<f64> = (0..size)
        .map(|_| rng.random_range(-cfg.reward_spread..=cfg.reward_spread).exp())
        .collect();
    let ctx = UserContext((0..context_dim).map(|_| rng.random_range(-0.5..0.5)).collect());
    let mut pcfg = PolicyConfig::new(tok.levels, tok.vocab, context_dim);
    pcfg.hidden = cfg.hidden;
    pcfg.seed = seed;
    let mut policy = Policy::new(pcfg)?;
    let losses = fit_reward_table(&mut policy, &ctx, &rewards, &cfg.fit_config())?;
    let report = flow_proportionality_report(&policy, &ctx, &rewards)?;
    Ok(FlowRun { rewards, losses, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    /// Number of augmented trajectories, N - 1.
    Augmented,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "k" | "augmented" => Ok(Self::Augmented),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (lambda, k)"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, base: &BenchmarkConfig, value: f64) -> Result<BenchmarkConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Lambda => cfg.train.loss.lambda = value,
            SweepAxis::Augmented => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("augmented count must be a whole number, got {value}")));
                }
                cfg.train.sampler.n = value as usize + 1;
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seeds: Vec<u64>,
    pub ndcg_at_10: Vec<f64>,
    pub recall_at_10: Vec<f64>,
    pub value_ndcg: Vec<f64>,
    pub median_ndcg_at_10: f64,
    pub median_recall_at_10: f64,
    pub median_value_ndcg: f64,
}

/// One row per grid value; every cell is a full benchmark run per seed.
pub fn sweep(base: &BenchmarkConfig, axis: SweepAxis, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let cells: Vec<(usize, u64)> = (0..values.len()).flat_map(|v| seeds.iter().map(move |s| (v, *s))).collect();
    let results = cells
        .par_iter()
        .map(|&(v, seed)| {
            let mut cfg = axis.apply(base, values[v])?;
            cfg.seed = seed;
            run_benchmark(&cfg).map(|r| r.valid)
        })
        .collect::<Result<Vec<EvalReport>>>()?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(v, &value)| {
            let reports: Vec<&EvalReport> = results[v * seeds.len()..(v + 1) * seeds.len()].iter().collect();
            let ndcg: Vec<f64> = reports.iter().map(|r| r.metrics.ndcg_at_10).collect();
            let recall: Vec<f64> = reports.iter().map(|r| r.metrics.recall_at_10).collect();
            let value_ndcg: Vec<f64> = reports.iter().map(|r| r.value_ndcg).collect();
            SweepRow {
                axis,
                value,
                seeds: seeds.to_vec(),
                median_ndcg_at_10: median(&mut ndcg.clone()),
                median_recall_at_10: median(&mut recall.clone()),
                median_value_ndcg: median(&mut value_ndcg.clone()),
                ndcg_at_10: ndcg,
                recall_at_10: recall,
                value_ndcg,
            }
        })
        .collect())
}

/// Plain-text table of sweep rows.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis\tvalue\tmedian_ndcg@10\tmedian_recall@10\tmedian_value_ndcg@10\tndcg@10_per_seed\n");
    for r in rows {
        let per_seed: Vec<String> = r.ndcg_at_10.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            serde_json::to_value(r.axis).expect("axis serializes").as_str().unwrap_or_default(),
            r.value,
            r.median_ndcg_at_10,
            r.median_recall_at_10,
            r.median_value_ndcg,
            per_seed.join(",")
        ));
    }
    out
}
