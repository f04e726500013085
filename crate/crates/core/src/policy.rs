//! Autoregressive token policy with a flow head and a log-partition scalar.
//!
//! Architecture: the user context (mean of the history items' tokenizer
//! vectors) goes through one tanh affine layer. The trunk input is that
//! encoding, one embedding slot per identifier position (zeros when the
//! position is not yet generated) and a one-hot of the prefix length. Two
//! tanh affine layers form the trunk; level `l` has its own logit head and a
//! shared scalar head produces `log F(s)`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::synth::ItemId;
use crate::tokenizer::{Token, Tokenizer};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Maximum identifier length (tokenizer levels, plus one when disambiguation is in use).
    pub levels: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub context_dim: usize,
    pub token_dim: usize,
    /// Replace the global log Z with a scalar head on the user encoding.
    pub conditional_log_z: bool,
    /// Number of learnable reward-fusion weights carried alongside the policy (0 = none).
    pub fusion_weights: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(levels: usize, vocab: usize, context_dim: usize) -> Self {
        Self {
            levels,
            vocab,
            hidden: 32,
            context_dim,
            token_dim: 8,
            conditional_log_z: false,
            fusion_weights: 0,
            seed: 0,
        }
    }

    pub fn for_tokenizer(tok: &Tokenizer) -> Self {
        Self::new(tok.index.max_len(), tok.index.vocab(), tok.codebooks.embedding_dim)
    }

    fn trunk_input_width(&self) -> usize {
        self.hidden + self.levels * self.token_dim + self.levels + 1
    }

    pub fn hash(&self) -> String {
        crate::util::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug)]
struct Handles {
    enc_w: ParamId,
    enc_b: ParamId,
    tok_emb: Vec<ParamId>,
    trunk1_w: ParamId,
    trunk1_b: ParamId,
    trunk2_w: ParamId,
    trunk2_b: ParamId,
    head_w: Vec<ParamId>,
    head_b: Vec<ParamId>,
    flow_w: ParamId,
    flow_b: ParamId,
    log_z: ParamId,
    z_head: Option<(ParamId, ParamId)>,
    fusion: Option<ParamId>,
}

impl Handles {
    fn resolve(cfg: &PolicyConfig, params: &ParamStore) -> Result<Self> {
        let id = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))
        };
        Ok(Self {
            enc_w: id("encoder.w".into())?,
            enc_b: id("encoder.b".into())?,
            tok_emb: (0..cfg.levels).map(|l| id(format!("token_emb.{l}"))).collect::<Result<_>>()?,
            trunk1_w: id("trunk1.w".into())?,
            trunk1_b: id("trunk1.b".into())?,
            trunk2_w: id("trunk2.w".into())?,
            trunk2_b: id("trunk2.b".into())?,
            head_w: (0..cfg.levels).map(|l| id(format!("head.{l}.w"))).collect::<Result<_>>()?,
            head_b: (0..cfg.levels).map(|l| id(format!("head.{l}.b"))).collect::<Result<_>>()?,
            flow_w: id("flow.w".into())?,
            flow_b: id("flow.b".into())?,
            log_z: id("log_z".into())?,
            z_head: if cfg.conditional_log_z {
                Some((id("z_head.w".into())?, id("z_head.b".into())?))
            } else {
                None
            },
            fusion: if cfg.fusion_weights > 0 {
                Some(id("fusion.log_w".into())?)
            } else {
                None
            },
        })
    }
}

/// Encoded user input for the policy: the pooled history vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UserContext(pub Vec<f64>);

impl UserContext {
    pub fn from_history(tok: &Tokenizer, history: &[ItemId]) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::State("empty user history".into()));
        }
        let mut acc = vec![0.0; tok.codebooks.embedding_dim];
        for &item in history {
            for (a, v) in acc.iter_mut().zip(tok.item_vector(item)?) {
                *a += v;
            }
        }
        let n = history.len() as f64;
        Ok(Self(acc.into_iter().map(|v| v / n).collect()))
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
    handles: Handles,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        if config.levels == 0 || config.vocab < 2 || config.hidden == 0 || config.context_dim == 0 {
            return Err(Error::Config(format!("invalid policy shape {config:?}")));
        }
        let mut rng = rng_for(config.seed, 0x901);
        let mut params = ParamStore::new();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
        };
        let h = config.hidden;
        let input = config.trunk_input_width();
        params.add(
            "encoder.w",
            h,
            config.context_dim,
            uniform(h, config.context_dim, config.context_dim),
        );
        params.add("encoder.b", h, 1, vec![0.0; h]);
        for l in 0..config.levels {
            let data = uniform(config.vocab, config.token_dim, config.token_dim);
            params.add(format!("token_emb.{l}"), config.vocab, config.token_dim, data);
        }
        params.add("trunk1.w", h, input, uniform(h, input, input));
        params.add("trunk1.b", h, 1, vec![0.0; h]);
        params.add("trunk2.w", h, h, uniform(h, h, h));
        params.add("trunk2.b", h, 1, vec![0.0; h]);
        for l in 0..config.levels {
            params.add(format!("head.{l}.w"), config.vocab, h, uniform(config.vocab, h, h));
            params.add(format!("head.{l}.b"), config.vocab, 1, vec![0.0; config.vocab]);
        }
        params.add("flow.w", 1, h, uniform(1, h, h));
        params.add("flow.b", 1, 1, vec![0.0]);
        params.add("log_z", 1, 1, vec![0.0]);
        if config.conditional_log_z {
            params.add("z_head.w", 1, h, vec![0.0; h]);
            params.add("z_head.b", 1, 1, vec![0.0]);
        }
        if config.fusion_weights > 0 {
            params.add("fusion.log_w", config.fusion_weights, 1, vec![0.0; config.fusion_weights]);
        }
        let handles = Handles::resolve(&config, &params)?;
        Ok(Self { config, params, handles })
    }

    /// Rebuilds a policy from stored parameters, checking every tensor's shape.
    pub fn from_parts(config: PolicyConfig, params: ParamStore) -> Result<Self> {
        let reference = Policy::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint("parameter count does not match the architecture".into()));
        }
        for (a, b) in reference.params.iter().zip(params.iter()) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols || b.data.len() != a.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} does not match the architecture", b.name)));
            }
        }
        let handles = Handles::resolve(&config, &params)?;
        Ok(Self { config, params, handles })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter id of the global log-partition scalar.
    pub fn log_z_id(&self) -> ParamId {
        self.handles.log_z
    }

    /// Everything that estimates flow magnitudes: log Z, the conditional
    /// Z head and the flow head.
    pub fn flow_param_ids(&self) -> Vec<ParamId> {
        let h = &self.handles;
        let mut ids = vec![h.log_z, h.flow_w, h.flow_b];
        if let Some((w, b)) = h.z_head {
            ids.extend([w, b]);
        }
        ids
    }

    pub fn head_ids(&self, level: usize) -> (ParamId, ParamId) {
        (self.handles.head_w[level], self.handles.head_b[level])
    }

    pub fn flow_ids(&self) -> (ParamId, ParamId) {
        (self.handles.flow_w, self.handles.flow_b)
    }

    pub fn fusion_id(&self) -> Option<ParamId> {
        self.handles.fusion
    }

    pub fn pass(&self) -> PolicyPass<'_> {
        PolicyPass {
            policy: self,
            graph: Graph::new(&self.params),
            users: Vec::new(),
            states: HashMap::new(),
        }
    }

    pub fn next_token_logprobs(&self, ctx: &UserContext, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut pass = self.pass();
        let u = pass.user(ctx)?;
        let v = pass.next_token_logprobs(u, prefix)?;
        Ok(pass.graph.value(v).to_vec())
    }

    pub fn trajectory_logprob(&self, ctx: &UserContext, identifier: &[Token]) -> Result<f64> {
        let mut pass = self.pass();
        let u = pass.user(ctx)?;
        let v = pass.trajectory_logprob(u, identifier)?;
        Ok(pass.graph.scalar(v))
    }

    pub fn flow_logvalue(&self, ctx: &UserContext, prefix: &[Token]) -> Result<f64> {
        let mut pass = self.pass();
        let u = pass.user(ctx)?;
        let v = pass.flow_logvalue(u, prefix)?;
        Ok(pass.graph.scalar(v))
    }

    pub fn log_z(&self, ctx: &UserContext) -> Result<f64> {
        let mut pass = self.pass();
        let u = pass.user(ctx)?;
        let v = pass.log_z(u);
        Ok(pass.graph.scalar(v))
    }

    /// Current positive fusion weights, if the policy carries them.
    pub fn fusion_weights(&self) -> Option<Vec<f64>> {
        self.handles
            .fusion
            .map(|id| self.params.get(id).data.iter().map(|w| w.exp()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UserHandle(usize);

#[derive(Clone, Copy, Debug, Default)]
struct StateNodes {
    trunk: Option<Var>,
    logp: Option<Var>,
    flow: Option<Var>,
}

/// One differentiable forward pass; state computations are shared within the pass.
pub struct PolicyPass<'a> {
    policy: &'a Policy,
    pub graph: Graph<'a>,
    users: Vec<Var>,
    states: HashMap<(usize, Vec<Token>), StateNodes>,
}

impl<'a> PolicyPass<'a> {
    pub fn policy(&self) -> &'a Policy {
        self.policy
    }

    pub fn user(&mut self, ctx: &UserContext) -> Result<UserHandle> {
        let cfg = &self.policy.config;
        if ctx.0.len() != cfg.context_dim {
            return Err(Error::State(format!(
                "user context has width {}, policy expects {}",
                ctx.0.len(),
                cfg.context_dim
            )));
        }
        let h = &self.policy.handles;
        let x = self.graph.constant(ctx.0.clone());
        let z = self.graph.affine(h.enc_w, h.enc_b, x);
        let enc = self.graph.tanh(z);
        self.users.push(enc);
        Ok(UserHandle(self.users.len() - 1))
    }

    fn check_prefix(&self, prefix: &[Token], max_level: usize) -> Result<()> {
        let cfg = &self.policy.config;
        if prefix.len() > max_level {
            return Err(Error::State(format!(
                "prefix length {} exceeds level bound {max_level}",
                prefix.len()
            )));
        }
        if let Some(t) = prefix.iter().find(|t| **t >= cfg.vocab) {
            return Err(Error::State(format!("token {t} outside vocabulary {}", cfg.vocab)));
        }
        Ok(())
    }

    fn trunk(&mut self, u: UserHandle, prefix: &[Token]) -> Var {
        let key = (u.0, prefix.to_vec());
        if let Some(t) = self.states.get(&key).and_then(|s| s.trunk) {
            return t;
        }
        let cfg = &self.policy.config;
        let h = &self.policy.handles;
        let mut parts = Vec::with_capacity(cfg.levels + 2);
        parts.push(self.users[u.0]);
        for l in 0..cfg.levels {
            let slot = match prefix.get(l) {
                Some(&t) => self.graph.embed(h.tok_emb[l], t),
                None => self.graph.constant(vec![0.0; cfg.token_dim]),
            };
            parts.push(slot);
        }
        let mut level = vec![0.0; cfg.levels + 1];
        level[prefix.len()] = 1.0;
        parts.push(self.graph.constant(level));
        let x = self.graph.concat(&parts);
        let a1 = self.graph.affine(h.trunk1_w, h.trunk1_b, x);
        let h1 = self.graph.tanh(a1);
        let a2 = self.graph.affine(h.trunk2_w, h.trunk2_b, h1);
        let out = self.graph.tanh(a2);
        self.states.entry(key).or_default().trunk = Some(out);
        out
    }

    /// Log-distribution over the next token at `prefix` (requires `prefix.len() < levels`).
    pub fn next_token_logprobs(&mut self, u: UserHandle, prefix: &[Token]) -> Result<Var> {
        let levels = self.policy.config.levels;
        if prefix.len() >= levels {
            return Err(Error::State(format!("no next token at level {} of {levels}", prefix.len())));
        }
        self.check_prefix(prefix, levels)?;
        let key = (u.0, prefix.to_vec());
        if let Some(v) = self.states.get(&key).and_then(|s| s.logp) {
            return Ok(v);
        }
        let trunk = self.trunk(u, prefix);
        let (w, b) = self.policy.head_ids(prefix.len());
        let logits = self.graph.affine(w, b, trunk);
        let logp = self.graph.log_softmax(logits);
        self.states.entry(key).or_default().logp = Some(logp);
        Ok(logp)
    }

    /// Per-step log P_F along `identifier`.
    pub fn step_logprobs(&mut self, u: UserHandle, identifier: &[Token]) -> Result<Vec<Var>> {
        self.check_prefix(identifier, self.policy.config.levels)?;
        (0..identifier.len())
            .map(|l| {
                let dist = self.next_token_logprobs(u, &identifier[..l])?;
                Ok(self.graph.pick(dist, identifier[l]))
            })
            .collect()
    }

    pub fn trajectory_logprob(&mut self, u: UserHandle, identifier: &[Token]) -> Result<Var> {
        let steps = self.step_logprobs(u, identifier)?;
        Ok(self.graph.sum(&steps))
    }

    pub fn flow_logvalue(&mut self, u: UserHandle, prefix: &[Token]) -> Result<Var> {
        self.check_prefix(prefix, self.policy.config.levels)?;
        let key = (u.0, prefix.to_vec());
        if let Some(v) = self.states.get(&key).and_then(|s| s.flow) {
            return Ok(v);
        }
        let trunk = self.trunk(u, prefix);
        let (w, b) = self.policy.flow_ids();
        let flow = self.graph.affine(w, b, trunk);
        self.states.entry(key).or_default().flow = Some(flow);
        Ok(flow)
    }

    pub fn log_z(&mut self, u: UserHandle) -> Var {
        let h = &self.policy.handles;
        let global = self.graph.param(h.log_z);
        match h.z_head {
            Some((w, b)) => {
                let enc = self.users[u.0];
                let head = self.graph.affine(w, b, enc);
                self.graph.add(global, head)
            }
            None => global,
        }
    }

    /// Log fusion weights as a differentiable vector.
    pub fn fusion_log_weights(&mut self) -> Option<Var> {
        self.policy.handles.fusion.map(|id| self.graph.param(id))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.graph.backward(loss)
    }
}
