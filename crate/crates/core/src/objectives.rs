//! Next-token, detailed-balance and trajectory-balance losses.
//!
//! The backward policy is deterministic (a state has exactly one parent
//! because tokens are only ever appended), so `log P_B = 0` everywhere and
//! never appears below.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::policy::{PolicyPass, UserHandle};
use crate::tokenizer::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GfnVariant {
    Db,
    Tb,
}

/// How per-trajectory GFN losses of one record are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryReduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: GfnVariant,
    pub lambda: f64,
    pub reduction: TrajectoryReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: GfnVariant::Tb,
            lambda: 1.0,
            reduction: TrajectoryReduction::Sum,
        }
    }
}

/// `-sum_l log P(t_l | U, t_<l)` for the positive identifier.
pub fn loss_gr(pass: &mut PolicyPass, user: UserHandle, positive: &[Token]) -> Result<Var> {
    let logp = pass.trajectory_logprob(user, positive)?;
    Ok(pass.graph.scale(logp, -1.0))
}

/// `sum_l (log F_l + log P_l - log F_{l+1})^2` with `log F_L` pinned to `log R`.
pub fn db_from_nodes(graph: &mut Graph, log_flows: &[Var], step_logprobs: &[Var], log_reward: Var) -> Var {
    debug_assert_eq!(log_flows.len(), step_logprobs.len());
    let mut terms = Vec::with_capacity(step_logprobs.len());
    for l in 0..step_logprobs.len() {
        let next = if l + 1 < log_flows.len() { log_flows[l + 1] } else { log_reward };
        let inflow = graph.add(log_flows[l], step_logprobs[l]);
        let residual = graph.sub(inflow, next);
        terms.push(graph.square(residual));
    }
    graph.sum(&terms)
}

/// `(log Z + sum_l log P_l - log R)^2`.
pub fn tb_from_nodes(graph: &mut Graph, log_z: Var, step_logprobs: &[Var], log_reward: Var) -> Var {
    let total = graph.sum(step_logprobs);
    let forward = graph.add(log_z, total);
    let residual = graph.sub(forward, log_reward);
    graph.square(residual)
}

fn check_reward(graph: &Graph, log_reward: Var) -> Result<()> {
    let v = graph.scalar(log_reward);
    if !v.is_finite() {
        return Err(Error::Reward(format!("log reward {v} is not finite; reward must be > 0")));
    }
    Ok(())
}

pub fn loss_db(pass: &mut PolicyPass, user: UserHandle, identifier: &[Token], log_reward: Var) -> Result<Var> {
    check_reward(&pass.graph, log_reward)?;
    let steps = pass.step_logprobs(user, identifier)?;
    let flows = (0..identifier.len())
        .map(|l| pass.flow_logvalue(user, &identifier[..l]))
        .collect::<Result<Vec<_>>>()?;
    Ok(db_from_nodes(&mut pass.graph, &flows, &steps, log_reward))
}

pub fn loss_tb(pass: &mut PolicyPass, user: UserHandle, identifier: &[Token], log_reward: Var) -> Result<Var> {
    check_reward(&pass.graph, log_reward)?;
    let steps = pass.step_logprobs(user, identifier)?;
    let log_z = pass.log_z(user);
    Ok(tb_from_nodes(&mut pass.graph, log_z, &steps, log_reward))
}

pub fn loss_gfn(pass: &mut PolicyPass, user: UserHandle, identifier: &[Token], log_reward: Var, variant: GfnVariant) -> Result<Var> {
    match variant {
        GfnVariant::Db => loss_db(pass, user, identifier, log_reward),
        GfnVariant::Tb => loss_tb(pass, user, identifier, log_reward),
    }
}

/// The loss nodes for one record.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub gr: Var,
    pub gfn: Var,
}

/// `L_GR(tau_1) + lambda * sum_n L_GFN(tau_n)`; `trajectories[0]` must be the positive.
pub fn loss_total(pass: &mut PolicyPass, user: UserHandle, trajectories: &[(&[Token], Var)], cfg: &LossConfig) -> Result<LossParts> {
    let (positive, _) = trajectories
        .first()
        .ok_or_else(|| Error::State("a record needs at least the positive trajectory".into()))?;
    let gr = loss_gr(pass, user, positive)?;
    let mut terms = Vec::with_capacity(trajectories.len());
    for (ident, log_r) in trajectories {
        terms.push(loss_gfn(pass, user, ident, *log_r, cfg.variant)?);
    }
    let mut gfn = pass.graph.sum(&terms);
    if cfg.reduction == TrajectoryReduction::Mean {
        gfn = pass.graph.scale(gfn, 1.0 / terms.len() as f64);
    }
    let weighted = pass.graph.scale(gfn, cfg.lambda);
    let total = pass.graph.add(gr, weighted);
    Ok(LossParts { total, gr, gfn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::policy::{Policy, PolicyConfig, UserContext};

    fn consts(g: &mut Graph, values: &[f64]) -> Vec<Var> {
        values.iter().map(|v| g.constant_scalar(*v)).collect()
    }

    #[test]
    fn balanced_flows_give_zero_db() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let flows = consts(&mut g, &[1.5, 0.7, -0.2]);
        let steps = consts(&mut g, &[-0.8, -0.9, -1.1]);
        let log_r = g.constant_scalar(-1.3);
        let loss = db_from_nodes(&mut g, &flows, &steps, log_r);
        assert!(g.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn single_step_db() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let flows = consts(&mut g, &[0.0]);
        let steps = consts(&mut g, &[-1.0]);
        let log_r = g.constant_scalar(0.0);
        let loss = db_from_nodes(&mut g, &flows, &steps, log_r);
        assert_eq!(g.scalar(loss), 1.0);
    }

    #[test]
    fn tb_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let cases = [
            (0.0, vec![-1.0, -1.0], -2.0, 0.0),
            (0.0, vec![0.0], 1.0, 1.0),
            (2.5, vec![-0.5, -1.25, -0.75], 0.0, 0.0),
        ];
        for (lz, steps, lr, want) in cases {
            let z = g.constant_scalar(lz);
            let s = consts(&mut g, &steps);
            let r = g.constant_scalar(lr);
            let loss = tb_from_nodes(&mut g, z, &s, r);
            assert!((g.scalar(loss) - want).abs() < 1e-12);
        }
    }

    fn uniform_policy() -> Policy {
        let mut p = Policy::new(PolicyConfig::new(3, 8, 4)).unwrap();
        for l in 0..3 {
            let (w, b) = p.head_ids(l);
            p.params_mut().get_mut(w).data.fill(0.0);
            p.params_mut().get_mut(b).data.fill(0.0);
        }
        p
    }

    #[test]
    fn gr_loss_of_uniform_policy() {
        let p = uniform_policy();
        let ctx = UserContext(vec![0.1, 0.2, 0.3, 0.4]);
        let mut pass = p.pass();
        let u = pass.user(&ctx).unwrap();
        let l = loss_gr(&mut pass, u, &[1, 2, 3]).unwrap();
        assert!((pass.graph.scalar(l) - 3.0 * 8f64.ln()).abs() < 1e-12);
        assert!((pass.graph.scalar(l) - 6.2383).abs() < 1e-4);
        let direct = p.trajectory_logprob(&ctx, &[1, 2, 3]).unwrap();
        assert_eq!(pass.graph.scalar(l), -direct);
    }

    #[test]
    fn certain_policy_has_zero_gr_loss() {
        let mut p = uniform_policy();
        for (l, t) in [1usize, 2, 3].iter().enumerate() {
            let (_, b) = p.head_ids(l);
            p.params_mut().get_mut(b).data[*t] = 800.0;
        }
        let ctx = UserContext(vec![0.0; 4]);
        let mut pass = p.pass();
        let u = pass.user(&ctx).unwrap();
        let l = loss_gr(&mut pass, u, &[1, 2, 3]).unwrap();
        assert!(pass.graph.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn invalid_reward_is_rejected() {
        let p = uniform_policy();
        let mut pass = p.pass();
        let u = pass.user(&UserContext(vec![0.0; 4])).unwrap();
        let bad = pass.graph.constant_scalar(f64::NEG_INFINITY);
        assert!(matches!(loss_tb(&mut pass, u, &[0, 0, 0], bad), Err(Error::Reward(_))));
        assert!(matches!(loss_db(&mut pass, u, &[0, 0, 0], bad), Err(Error::Reward(_))));
    }

    #[test]
    fn total_recomposes_from_parts() {
        let p = Policy::new(PolicyConfig::new(3, 8, 4)).unwrap();
        let ctx = UserContext(vec![0.3, -0.1, 0.2, 0.5]);
        let idents: Vec<Vec<Token>> = vec![vec![1, 2, 3], vec![4, 0, 7], vec![1, 5, 5]];
        let rewards = [4.2, 0.3, 1.1];
        for variant in [GfnVariant::Tb, GfnVariant::Db] {
            let cfg = LossConfig {
                variant,
                lambda: 0.7,
                reduction: TrajectoryReduction::Sum,
            };
            let mut pass = p.pass();
            let u = pass.user(&ctx).unwrap();
            let nodes: Vec<Var> = rewards.iter().map(|r: &f64| pass.graph.constant_scalar(r.ln())).collect();
            let trajs: Vec<(&[Token], Var)> = idents.iter().map(|i| i.as_slice()).zip(nodes.iter().copied()).collect();
            let parts = loss_total(&mut pass, u, &trajs, &cfg).unwrap();
            let total = pass.graph.scalar(parts.total);

            let mut sum_gfn = 0.0;
            for (ident, r) in idents.iter().zip(rewards) {
                let steps: Vec<f64> = (0..3)
                    .map(|l| p.next_token_logprobs(&ctx, &ident[..l]).unwrap()[ident[l]])
                    .collect();
                sum_gfn += match variant {
                    GfnVariant::Tb => {
                        let lz = p.log_z(&ctx).unwrap();
                        (lz + steps.iter().sum::<f64>() - r.ln()).powi(2)
                    }
                    GfnVariant::Db => {
                        let flows: Vec<f64> = (0..3).map(|l| p.flow_logvalue(&ctx, &ident[..l]).unwrap()).collect();
                        (0..3)
                            .map(|l| {
                                let next = if l + 1 < 3 { flows[l + 1] } else { r.ln() };
                                (flows[l] + steps[l] - next).powi(2)
                            })
                            .sum()
                    }
                };
            }
            let gr = -p.trajectory_logprob(&ctx, &idents[0]).unwrap();
            let expect = gr + 0.7 * sum_gfn;
            assert!(((total - expect) / expect).abs() < 1e-12, "{variant:?}: {total} vs {expect}");
        }
    }

    #[test]
    fn zero_lambda_reduces_to_gr() {
        let p = Policy::new(PolicyConfig::new(3, 8, 4)).unwrap();
        let ctx = UserContext(vec![0.3, -0.1, 0.2, 0.5]);
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let mut pass = p.pass();
        let u = pass.user(&ctx).unwrap();
        let r = pass.graph.constant_scalar(2f64.ln());
        let parts = loss_total(&mut pass, u, &[(&[1, 2, 3], r)], &cfg).unwrap();
        assert_eq!(pass.graph.scalar(parts.total).to_bits(), pass.graph.scalar(parts.gr).to_bits());
    }
}
