//! Behavior-aware trajectory rewards and their fusion.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synth::FeedbackLevel;
use crate::tokenizer::Token;

pub const NUM_SIGNALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_a: f64,
    pub r_c: f64,
    pub r_sim: usize,
    pub r_llm: f64,
    pub fused: f64,
}

impl RewardBreakdown {
    pub fn signals(&self) -> [f64; NUM_SIGNALS] {
        [self.r_a, self.r_c, self.r_sim as f64, self.r_llm]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sum,
    WeightedSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub floor: f64,
    pub beta: f64,
    pub use_interaction: bool,
    pub use_collab: bool,
    pub use_similarity: bool,
    pub use_llm: bool,
    /// r_a given to presented-but-not-clicked items.
    pub presented_reward: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Sum,
            floor: 0.1,
            beta: 1.0,
            use_interaction: true,
            use_collab: true,
            use_similarity: true,
            use_llm: false,
            presented_reward: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor.is_finite()) {
            return Err(Error::Config(format!("reward floor must be > 0, got {}", self.floor)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("reward temperature must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn interaction(&self, level: FeedbackLevel) -> f64 {
        match level {
            FeedbackLevel::Presented => self.presented_reward,
            other => interaction_reward(other),
        }
    }
}

/// liked 10, clicked 1, everything else 0.
pub fn interaction_reward(level: FeedbackLevel) -> f64 {
    match level {
        FeedbackLevel::Liked => 10.0,
        FeedbackLevel::Clicked => 1.0,
        FeedbackLevel::Presented | FeedbackLevel::Unpresented => 0.0,
    }
}

/// Position-wise matches over the first `levels` tokens.
pub fn similarity_reward(candidate: &[Token], positive: &[Token], levels: usize) -> usize {
    candidate.iter().zip(positive).take(levels).filter(|(a, b)| a == b).count()
}

/// `exp(logp) / max exp(logp)` over one batch of trajectories.
pub fn llm_probability_rewards(logprobs: &[f64]) -> Vec<f64> {
    let max = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logprobs.iter().map(|lp| (lp - max).exp()).collect()
}

/// Signal values after the on/off switches.
pub fn active_signals(b: &RewardBreakdown, cfg: &FusionConfig) -> [f64; NUM_SIGNALS] {
    let s = b.signals();
    let on = [cfg.use_interaction, cfg.use_collab, cfg.use_similarity, cfg.use_llm];
    let mut out = [0.0; NUM_SIGNALS];
    for i in 0..NUM_SIGNALS {
        out[i] = if on[i] { s[i] } else { 0.0 };
    }
    out
}

/// Fused reward `max(beta * sum_i w_i r_i, floor)`. Weights default to 1,
/// which is also what sum mode uses.
pub fn fuse(b: &RewardBreakdown, cfg: &FusionConfig, weights: Option<&[f64]>) -> Result<f64> {
    let signals = active_signals(b, cfg);
    if signals.iter().any(|s| !s.is_finite()) {
        return Err(Error::Reward(format!("non-finite reward signal in {b:?}")));
    }
    let total: f64 = match (cfg.mode, weights) {
        (FusionMode::WeightedSum, Some(w)) => {
            if w.len() != NUM_SIGNALS || w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Reward(format!("bad fusion weights {w:?}")));
            }
            signals.iter().zip(w).map(|(s, w)| s * w).sum()
        }
        _ => signals.iter().sum(),
    };
    Ok((cfg.beta * total).max(cfg.floor))
}

/// `log R` as a graph node; differentiable in the fusion weights when
/// weighted-sum fusion is active and `log_weights` is provided.
pub fn log_reward_node(graph: &mut Graph, b: &RewardBreakdown, cfg: &FusionConfig, log_weights: Option<Var>) -> Result<Var> {
    match (cfg.mode, log_weights) {
        (FusionMode::WeightedSum, Some(lw)) => {
            let signals = active_signals(b, cfg);
            if signals.iter().any(|s| !s.is_finite()) {
                return Err(Error::Reward(format!("non-finite reward signal in {b:?}")));
            }
            let s = graph.constant(signals.to_vec());
            let w = graph.exp(lw);
            let weighted = graph.mul(w, s);
            let total = graph.sum(&[weighted]);
            let scaled = graph.scale(total, cfg.beta);
            let floored = graph.floor(scaled, cfg.floor);
            Ok(graph.ln(floored))
        }
        _ => {
            let r = fuse(b, cfg, None)?;
            Ok(graph.constant_scalar(r.ln()))
        }
    }
}
