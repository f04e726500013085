//! Training loop: trajectory sets, rewards, combined loss, validation,
//! early stopping and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Sgd, Var};
use crate::collab::CollabModel;
use crate::error::{Error, Result};
use crate::eval::{enumerate_identifiers, ndcg_at_k, rank_users, recall_at_k};
use crate::objectives::{loss_gfn, loss_total, GfnVariant, LossConfig};
use crate::policy::{Policy, PolicyConfig, UserContext};
use crate::reward::{
    fuse, llm_probability_rewards, log_reward_node, similarity_reward, FusionConfig, FusionMode, RewardBreakdown, NUM_SIGNALS,
};
use crate::sampler::{sample_augmented, SamplerConfig, SamplerInputs, SamplingStrategy};
use crate::synth::{ItemId, SessionRecord, UserId};
use crate::tokenizer::{Identifier, Tokenizer};
use crate::util::{rng_for, sha256_hex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub sampler: SamplerConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_k: usize,
    pub eval_beam_width: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub conditional_log_z: bool,
    /// Learning-rate multiplier for log Z and the flow head.
    pub flow_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.03,
            momentum: 0.9,
            clip_norm: 10.0,
            sampler: SamplerConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            early_stop_patience: 5,
            seed: 0,
            eval_every: 1,
            eval_k: 10,
            eval_beam_width: 20,
            hidden: 32,
            token_dim: 8,
            conditional_log_z: false,
            flow_lr_scale: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.loss.lambda)));
        }
        if self.eval_beam_width < self.eval_k {
            return Err(Error::Config(format!(
                "eval beam width {} must be >= eval k {}",
                self.eval_beam_width, self.eval_k
            )));
        }
        self.sampler.validate()?;
        self.fusion.validate()
    }

    pub fn policy_config(&self, tok: &Tokenizer) -> PolicyConfig {
        let mut cfg = PolicyConfig::for_tokenizer(tok);
        cfg.hidden = self.hidden;
        cfg.token_dim = self.token_dim;
        cfg.conditional_log_z = self.conditional_log_z;
        cfg.fusion_weights = if self.fusion.mode == FusionMode::WeightedSum {
            NUM_SIGNALS
        } else {
            0
        };
        cfg.seed = self.seed;
        cfg
    }

    fn needs_cm(&self) -> bool {
        self.fusion.use_collab || self.sampler.strategy == SamplingStrategy::CmCurriculum
    }
}

#[derive(Clone, Debug)]
pub struct TrainExample {
    pub record: SessionRecord,
    pub context: UserContext,
}

#[derive(Clone, Debug)]
pub struct EvalExample {
    pub user_id: UserId,
    pub context: UserContext,
    pub target: ItemId,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<TrainExample>,
    pub valid: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
}

/// Per user: train on the session target with the history minus its last two
/// items as context, validate on the second-to-last history item and test on
/// the last, each with the items before it as context.
pub fn build_splits(records: &[SessionRecord], tok: &Tokenizer) -> Result<Splits> {
    let mut splits = Splits {
        train: Vec::with_capacity(records.len()),
        valid: Vec::with_capacity(records.len()),
        test: Vec::with_capacity(records.len()),
    };
    for r in records {
        let m = r.user_history.len();
        if m < 3 {
            return Err(Error::Config(format!(
                "user {} has {m} history items; the split needs at least 3",
                r.user_id
            )));
        }
        let early = UserContext::from_history(tok, &r.user_history[..m - 2])?;
        splits.train.push(TrainExample {
            record: r.clone(),
            context: early.clone(),
        });
        splits.valid.push(EvalExample {
            user_id: r.user_id,
            context: early,
            target: r.user_history[m - 2],
        });
        splits.test.push(EvalExample {
            user_id: r.user_id,
            context: UserContext::from_history(tok, &r.user_history[..m - 1])?,
            target: r.user_history[m - 1],
        });
    }
    Ok(splits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
}

/// Beam-search every example and score its target.
pub fn ranking_metrics(policy: &Policy, examples: &[EvalExample], tok: &Tokenizer, beam_width: usize, k: usize) -> Result<RankingMetrics> {
    let users: Vec<(UserId, &UserContext)> = examples.iter().map(|e| (e.user_id, &e.context)).collect();
    let lists: Vec<Vec<ItemId>> = rank_users(policy, &users, &tok.index, beam_width, k)?
        .iter()
        .map(|l| l.item_ids())
        .collect();
    let targets: Vec<ItemId> = examples.iter().map(|e| e.target).collect();
    Ok(RankingMetrics {
        recall_at_5: recall_at_k(&lists, &targets, 5),
        recall_at_10: recall_at_k(&lists, &targets, 10),
        ndcg_at_5: ndcg_at_k(&lists, &targets, 5),
        ndcg_at_10: ndcg_at_k(&lists, &targets, 10),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub gr: f64,
    pub gfn: f64,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_gr: f64,
    pub train_gfn: f64,
    pub reward_mean: f64,
    /// Augmented items that came from the random fallback this epoch.
    pub sampler_random_fill: usize,
    pub valid: Option<RankingMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Policy at the best validation NDCG@10.
    pub policy: Policy,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub history: Vec<EpochMetrics>,
    pub steps: Vec<StepLog>,
    pub stopped_early: bool,
}

/// One record's trajectory set, prepared outside the gradient tape.
struct Prepared {
    items: Vec<ItemId>,
    identifiers: Vec<Identifier>,
    signals: Vec<RewardBreakdown>,
    random_fill: usize,
}

struct TrainContext<'a> {
    cfg: &'a TrainConfig,
    tok: &'a Tokenizer,
    cm: Option<&'a CollabModel>,
}

impl TrainContext<'_> {
    fn prepare(&self, ex: &TrainExample, epoch: usize, slot: usize, snapshot: Option<&Policy>) -> Result<Prepared> {
        let record = &ex.record;
        let mut rng = rng_for(self.cfg.seed ^ 0x5a3c_11d7, ((epoch as u64) << 32) | slot as u64);
        let inputs = SamplerInputs {
            num_items: self.tok.index.num_items(),
            cm: self.cm,
            policy: snapshot,
            index: &self.tok.index,
        };
        let sample = sample_augmented(&self.cfg.sampler, record, &ex.context, epoch, &inputs, &mut rng)?;
        let mut items = vec![record.target_item];
        items.extend(sample.items);
        let identifiers = items
            .iter()
            .map(|&i| self.tok.index.encode(i).cloned())
            .collect::<Result<Vec<_>>>()?;
        let levels = self.tok.codebooks.levels;
        let signals = items
            .iter()
            .zip(&identifiers)
            .map(|(&item, ident)| {
                Ok(RewardBreakdown {
                    r_a: self.cfg.fusion.interaction(record.feedback(item)),
                    r_c: match self.cm {
                        Some(cm) => cm.score(record.user_id, item)?,
                        None => 0.0,
                    },
                    r_sim: similarity_reward(ident, &identifiers[0], levels),
                    r_llm: 0.0,
                    fused: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            items,
            identifiers,
            signals,
            random_fill: sample.random_fill,
        })
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Runs training and returns the best-validation policy with its logs.
pub fn train(cfg: &TrainConfig, splits: &Splits, tok: &Tokenizer, cm: Option<&CollabModel>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.needs_cm() && cm.is_none() {
        return Err(Error::Config(
            "this configuration needs a collaborative model (cm_curriculum sampling or the collab reward); run `flowrec train-cm` or disable both".into(),
        ));
    }
    let ctx = TrainContext { cfg, tok, cm };
    let mut policy = Policy::new(cfg.policy_config(tok))?;
    let clip = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, clip);
    for id in policy.flow_param_ids() {
        opt.scale_lr(id, cfg.flow_lr_scale);
    }
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut shuffle_rng = rng_for(cfg.seed, 0x7a1);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(Policy, usize, f64)> = None;
    let mut evals_without_gain = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let snapshot = (cfg.sampler.strategy == SamplingStrategy::OnPolicy).then(|| policy.clone());
        let (mut losses, mut grs, mut gfns, mut rewards) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut random_fill = 0;

        for batch in order.chunks(cfg.batch_size) {
            let prepared = batch
                .par_iter()
                .map(|&slot| ctx.prepare(&splits.train[slot], epoch, slot, snapshot.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            random_fill += prepared.iter().map(|p| p.random_fill).sum::<usize>();

            let mut pass = policy.pass();
            let mut totals = Vec::with_capacity(batch.len());
            let (mut batch_gr, mut batch_gfn, mut batch_rewards) = (0.0, 0.0, Vec::new());
            let mut per_record = Vec::with_capacity(batch.len());
            for (&slot, prep) in batch.iter().zip(&prepared) {
                let ex = &splits.train[slot];
                let user = pass.user(&ex.context)?;
                let mut signals = prep.signals.clone();
                if cfg.fusion.use_llm {
                    let logps = prep
                        .identifiers
                        .iter()
                        .map(|id| pass.trajectory_logprob(user, id).map(|v| pass.graph.scalar(v)))
                        .collect::<Result<Vec<f64>>>()?;
                    for (s, r) in signals.iter_mut().zip(llm_probability_rewards(&logps)) {
                        s.r_llm = r;
                    }
                }
                let weights = pass.policy().fusion_weights();
                let mut trajectories = Vec::with_capacity(signals.len());
                for (s, ident) in signals.iter_mut().zip(&prep.identifiers) {
                    s.fused = fuse(s, &cfg.fusion, weights.as_deref())?;
                    batch_rewards.push(s.fused);
                    let lw = pass.fusion_log_weights();
                    let node = log_reward_node(&mut pass.graph, s, &cfg.fusion, lw)?;
                    trajectories.push((ident.as_slice(), node));
                }
                let parts = loss_total(&mut pass, user, &trajectories, &cfg.loss)?;
                let total = pass.graph.scalar(parts.total);
                per_record.push((ex.record.user_id, total, prep.items.clone(), signals));
                batch_gr += pass.graph.scalar(parts.gr);
                batch_gfn += pass.graph.scalar(parts.gfn);
                totals.push(parts.total);
            }
            let sum = pass.graph.sum(&totals);
            let loss = pass.graph.scale(sum, 1.0 / batch.len() as f64);
            let loss_value = pass.graph.scalar(loss);
            if !loss_value.is_finite() {
                let dump: Vec<String> = per_record
                    .iter()
                    .map(|(u, l, items, s)| {
                        let fused: Vec<f64> = s.iter().map(|b| b.fused).collect();
                        format!("user {u}: loss {l}, items {items:?}, rewards {fused:?}")
                    })
                    .collect();
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {}; batch: {}",
                    steps.len(),
                    dump.join("; ")
                )));
            }
            let grads = pass.backward(loss)?;
            drop(pass);
            let stats = opt.step(policy.params_mut(), grads)?;
            // same reduction as the loss node so lambda = 0 logs gr == loss exactly
            let inv = 1.0 / batch.len() as f64;
            let (batch_gr, batch_gfn) = (batch_gr * inv, batch_gfn * inv);
            steps.push(StepLog {
                step: steps.len(),
                epoch,
                loss: loss_value,
                gr: batch_gr,
                gfn: batch_gfn,
                reward_mean: mean(&batch_rewards),
                reward_min: batch_rewards.iter().cloned().fold(f64::INFINITY, f64::min),
                reward_max: batch_rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                grad_norm: stats.grad_norm,
            });
            log::debug!(
                "step {} epoch {epoch} loss {loss_value:.6} gr {:.6} gfn {:.6} grad_norm {:.4}",
                steps.len() - 1,
                batch_gr,
                batch_gfn,
                stats.grad_norm
            );
            losses.push(loss_value);
            grs.push(batch_gr);
            gfns.push(batch_gfn);
            rewards.extend(batch_rewards);
        }

        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let valid = if evaluate && !splits.valid.is_empty() {
            Some(ranking_metrics(&policy, &splits.valid, tok, cfg.eval_beam_width, cfg.eval_k)?)
        } else {
            None
        };
        history.push(EpochMetrics {
            epoch,
            train_loss: mean(&losses),
            train_gr: mean(&grs),
            train_gfn: mean(&gfns),
            reward_mean: mean(&rewards),
            sampler_random_fill: random_fill,
            valid,
        });
        log::info!(
            "epoch {epoch} loss {:.6} valid ndcg@10 {}",
            mean(&losses),
            valid.map_or("-".to_string(), |v| format!("{:.4}", v.ndcg_at_10))
        );

        if let Some(v) = valid {
            match &best {
                Some((_, _, score)) if v.ndcg_at_10 <= *score => {
                    evals_without_gain += 1;
                    if evals_without_gain >= cfg.early_stop_patience {
                        stopped_early = epoch + 1 < cfg.epochs;
                        break;
                    }
                }
                _ => {
                    best = Some((policy.clone(), epoch, v.ndcg_at_10));
                    evals_without_gain = 0;
                }
            }
        }
    }

    let (policy, best_epoch, best_valid_ndcg) = match best {
        Some(b) => b,
        None => (policy, cfg.epochs - 1, f64::NAN),
    };
    Ok(TrainOutcome {
        policy,
        best_epoch,
        best_valid_ndcg,
        history,
        steps,
        stopped_early,
    })
}

/// Canonical bytes of a metrics history; equal runs give equal hashes.
pub fn history_hash(history: &[EpochMetrics]) -> String {
    sha256_hex(serde_json::to_string(history).expect("history serializes").as_bytes())
}

pub const CHECKPOINT_FORMAT: &str = "flowrec-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: PolicyConfig,
    config_hash: String,
    params_sha256: String,
    params: ParamStore,
}

fn params_digest(params: &ParamStore) -> String {
    sha256_hex(serde_json::to_string(params).expect("params serialize").as_bytes())
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: policy.config().clone(),
        config_hash: policy.config().hash(),
        params_sha256: params_digest(policy.params()),
        params: policy.params().clone(),
    };
    crate::util::write_json(path, &file)
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `flowrec train` first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: unreadable checkpoint: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "checkpoint format {:?} is not supported (expected {CHECKPOINT_FORMAT})",
            file.format
        )));
    }
    if file.config.hash() != file.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    if params_digest(&file.params) != file.params_sha256 {
        return Err(Error::Checkpoint("parameter checksum mismatch; the file is corrupted".into()));
    }
    Policy::from_parts(file.config, file.params)
}

/// Loads a checkpoint and insists on a specific architecture.
pub fn load_checkpoint_for(path: &Path, expected: &PolicyConfig) -> Result<Policy> {
    let policy = load_checkpoint(path)?;
    if policy.config().hash() != expected.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match the requested {:?}",
            policy.config(),
            expected
        )));
    }
    Ok(policy)
}

/// Loads a checkpoint and checks that it was trained on `tok`'s identifier space.
pub fn load_checkpoint_for_tokenizer(path: &Path, tok: &Tokenizer) -> Result<Policy> {
    let policy = load_checkpoint(path)?;
    let want = PolicyConfig::for_tokenizer(tok);
    let got = policy.config();
    if (got.levels, got.vocab, got.context_dim) != (want.levels, want.vocab, want.context_dim) {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects identifiers of length {} over {} tokens with {}-d context, tokenizer has {}, {} and {}",
            got.levels, got.vocab, got.context_dim, want.levels, want.vocab, want.context_dim
        )));
    }
    Ok(policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowFitConfig {
    pub variant: GfnVariant,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub flow_lr_scale: f64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        Self {
            variant: GfnVariant::Tb,
            steps: 3000,
            lr: 0.03,
            momentum: 0.9,
            flow_lr_scale: 1.0,
        }
    }
}

/// Fits one user's policy to a reward table over the full identifier space
/// by full-batch descent on the mean balance loss. Returns the loss per step.
pub fn fit_reward_table(policy: &mut Policy, ctx: &UserContext, rewards: &[f64], cfg: &FlowFitConfig) -> Result<Vec<f64>> {
    let pcfg = policy.config().clone();
    let idents = enumerate_identifiers(pcfg.levels, pcfg.vocab)?;
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
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, Some(10.0));
    for id in policy.flow_param_ids() {
        opt.scale_lr(id, cfg.flow_lr_scale);
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut pass = policy.pass();
        let user = pass.user(ctx)?;
        let mut terms: Vec<Var> = Vec::with_capacity(idents.len());
        for (ident, r) in idents.iter().zip(rewards) {
            let log_r = pass.graph.constant_scalar(r.ln());
            terms.push(loss_gfn(&mut pass, user, ident, log_r, cfg.variant)?);
        }
        let sum = pass.graph.sum(&terms);
        let loss = pass.graph.scale(sum, 1.0 / idents.len() as f64);
        trace.push(pass.graph.scalar(loss));
        let grads = pass.backward(loss)?;
        drop(pass);
        opt.step(policy.params_mut(), grads)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::flow_proportionality_report;
    use crate::synth::{generate_sessions, generate_universe, BehaviorPolicy, SessionConfig};
    use crate::util::rng_for;
    use rand::Rng;

    fn small_setup() -> (Tokenizer, Splits) {
        let world = generate_universe(32, 40, 6, 11).unwrap();
        let sessions = SessionConfig {
            session_size: 8,
            history_len: 4,
            behavior: BehaviorPolicy::default(),
        };
        let records = generate_sessions(&world, &sessions, 12).unwrap();
        let tok = Tokenizer::fit(&world.universe, 2, 8, 13).unwrap();
        let splits = build_splits(&records, &tok).unwrap();
        (tok, splits)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            sampler: SamplerConfig {
                strategy: SamplingStrategy::Random,
                ..SamplerConfig::default()
            },
            fusion: FusionConfig {
                use_collab: false,
                ..FusionConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn splits_follow_history_order() {
        let (_, splits) = small_setup();
        assert_eq!(splits.train.len(), 40);
        let r = &splits.train[0].record;
        assert_eq!(splits.valid[0].target, r.user_history[2]);
        assert_eq!(splits.test[0].target, r.user_history[3]);
    }

    #[test]
    fn missing_cm_is_a_config_error() {
        let (tok, splits) = small_setup();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &splits, &tok, None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lambda_matches_sft_trace() {
        let (tok, splits) = small_setup();
        let sft = TrainConfig {
            loss: LossConfig {
                lambda: 0.0,
                ..LossConfig::default()
            },
            sampler: SamplerConfig {
                n: 1,
                ..quick_config().sampler
            },
            ..quick_config()
        };
        let with_extra = TrainConfig {
            sampler: SamplerConfig {
                n: 4,
                ..sft.sampler.clone()
            },
            ..sft.clone()
        };
        let a = train(&sft, &splits, &tok, None).unwrap();
        let b = train(&with_extra, &splits, &tok, None).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.gr.to_bits(), y.gr.to_bits());
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(a.policy.params(), b.policy.params());
    }

    #[test]
    fn same_seed_same_history() {
        let (tok, splits) = small_setup();
        let cfg = quick_config();
        let a = train(&cfg, &splits, &tok, None).unwrap();
        let b = train(&cfg, &splits, &tok, None).unwrap();
        assert_eq!(history_hash(&a.history), history_hash(&b.history));
        let c = train(&TrainConfig { seed: 1, ..cfg }, &splits, &tok, None).unwrap();
        assert_ne!(history_hash(&a.history), history_hash(&c.history));
    }

    #[test]
    fn best_checkpoint_has_max_validation() {
        let (tok, splits) = small_setup();
        let cfg = TrainConfig {
            epochs: 6,
            early_stop_patience: 2,
            ..quick_config()
        };
        let out = train(&cfg, &splits, &tok, None).unwrap();
        let max = out
            .history
            .iter()
            .filter_map(|h| h.valid.map(|v| v.ndcg_at_10))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_valid_ndcg, max);
        let again = ranking_metrics(&out.policy, &splits.valid, &tok, cfg.eval_beam_width, cfg.eval_k).unwrap();
        assert_eq!(again.ndcg_at_10, max);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let mut cfg = PolicyConfig::new(3, 5, 4);
        cfg.seed = 9;
        let policy = Policy::new(cfg.clone()).unwrap();
        save_checkpoint(&policy, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut rng = rng_for(1, 0);
        for _ in 0..100 {
            let ctx = UserContext((0..4).map(|_| rng.random::<f64>() - 0.5).collect());
            let len = rng.random_range(0..3);
            let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(0..5)).collect();
            let a = policy.next_token_logprobs(&ctx, &prefix).unwrap();
            let b = loaded.next_token_logprobs(&ctx, &prefix).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let other = PolicyConfig { hidden: 16, ..cfg.clone() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint_for(&path, &cfg).is_ok());

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let tampered = text.replacen("0.0", "0.5", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let versioned = text.replace(CHECKPOINT_FORMAT, "flowrec-checkpoint/0");
        std::fs::write(&path, versioned).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let missing = dir.path().join("nope.json");
        assert!(matches!(load_checkpoint(&missing), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn small_table_fit_reaches_proportionality() {
        let mut cfg = PolicyConfig::new(2, 3, 2);
        cfg.hidden = 16;
        let mut policy = Policy::new(cfg).unwrap();
        let ctx = UserContext(vec![0.4, -0.3]);
        let rewards = [0.5, 1.0, 2.0, 0.2, 3.0, 1.5, 0.7, 0.9, 4.0];
        let fit = FlowFitConfig {
            steps: 1500,
            lr: 0.02,
            ..FlowFitConfig::default()
        };
        let trace = fit_reward_table(&mut policy, &ctx, &rewards, &fit).unwrap();
        assert!(trace.last().unwrap() < &1e-4, "{:?}", trace.last());
        let report = flow_proportionality_report(&policy, &ctx, &rewards).unwrap();
        assert!(report.total_variation < 0.01, "{report:?}");
        assert!(report.z_relative_error < 0.02, "{report:?}");
    }
}
