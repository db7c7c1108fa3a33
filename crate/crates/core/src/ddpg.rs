//! Per-slice learned solver: the slice MDP, a replay buffer, and DDPG.
//!
//! The environment turns one slave problem into an episode of `T` steps.
//! At step `t` the state is the per-user cumulative utility through slot
//! `t - 1` divided by the user's minimum requirement, followed by the target
//! `d[t] = z[t] - y[t]` from the coordinator. The action is the vector of
//! per-user rates for slot `t`, and the reward is the slot's weighted
//! utility plus a sigmoid shaping term per user minus the consensus penalty.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::UserSpec;
use crate::nn::{
    adam_step, soft_update, AdamConfig, AdamState, ByteReader, Mlp, OutputActivation,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgHyper {
    pub episodes: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Exploration noise std at the first step; `sqrt(r_tot)` (variance `r_tot`) when unset.
    pub initial_noise: Option<f64>,
    /// Multiplicative noise decay per training update.
    pub noise_decay: f64,
    /// Factor applied to rewards before they reach the critic.
    pub reward_scale: f64,
    /// Weight the utility term of the reward by user weights. The shaping
    /// term always uses unweighted utilities.
    pub weighted_objective: bool,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        DdpgHyper {
            episodes: 20_000,
            batch_size: 1000,
            replay_capacity: 100_000,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 0.001,
            critic_lr: 0.001,
            hidden: vec![128, 128],
            leaky_slope: crate::nn::DEFAULT_LEAKY_SLOPE,
            initial_noise: None,
            noise_decay: 0.9999,
            reward_scale: 0.01,
            weighted_objective: true,
        }
    }
}

impl DdpgHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad(format!(
                "batch {} must be >= 1 and fit in replay capacity {}",
                self.batch_size, self.replay_capacity
            ));
        }
        if self.hidden.contains(&0) {
            return bad("zero-width hidden layer".into());
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.reward_scale > 0.0) {
            return bad("learning rates and reward scale must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad(format!("noise decay {} outside (0, 1]", self.noise_decay));
        }
        if self.initial_noise.is_some_and(|n| !(n >= 0.0)) {
            return bad("initial noise must be >= 0".into());
        }
        Ok(())
    }
}

/// Sigmoid shaping `H(x) = sigmoid(x) - 1`, in `(-1, 0)`.
pub fn shaping_h(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp() / (1.0 + (-x).exp())
    } else {
        -1.0 / (1.0 + x.exp())
    }
}

/// Constants of the slice MDP shared by every episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub r_tot: f64,
    pub rho: f64,
    pub beta: f64,
    pub horizon: usize,
    pub weighted_objective: bool,
}

/// Reward of allocating `x` in one slot with target `d_t`.
pub fn reward(users: &[UserSpec], x: &[f64], d_t: f64, params: &EnvParams) -> f64 {
    let horizon = params.horizon as f64;
    let mut r = 0.0;
    let mut total = 0.0;
    for (u, &xk) in users.iter().zip(x) {
        let util = u.utility.value(xk);
        let w = if params.weighted_objective { u.weight } else { 1.0 };
        r += w * util + params.beta * shaping_h(util - u.u_min / horizon);
        total += xk;
    }
    r - 0.5 * params.rho * (total - d_t) * (total - d_t)
}

fn normalizer(u: &UserSpec) -> f64 {
    if u.u_min > 0.0 {
        u.u_min
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct SliceEnv {
    users: Vec<UserSpec>,
    params: EnvParams,
    d: Vec<f64>,
    clock: usize,
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl SliceEnv {
    pub fn new(users: Vec<UserSpec>, params: EnvParams) -> Result<Self> {
        if users.is_empty() || params.horizon == 0 {
            return Err(Error::InvalidArgument(
                "environment needs users and a horizon >= 1".into(),
            ));
        }
        let n = users.len();
        Ok(SliceEnv {
            users,
            params,
            d: Vec::new(),
            clock: params.horizon,
            cumulative: vec![0.0; n],
        })
    }

    pub fn users(&self) -> &[UserSpec] {
        &self.users
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.users.len() + 1
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn cumulative_utility(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn reset(&mut self, d: &[f64]) -> Result<Vec<f64>> {
        if d.len() != self.params.horizon {
            return Err(Error::Shape(format!(
                "target has {} slots, horizon is {}",
                d.len(),
                self.params.horizon
            )));
        }
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("environment target".into()));
        }
        self.d = d.to_vec();
        self.clock = 0;
        self.cumulative.iter_mut().for_each(|c| *c = 0.0);
        Ok(self.observe())
    }

    fn observe(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .users
            .iter()
            .zip(&self.cumulative)
            .map(|(u, c)| c / normalizer(u))
            .collect();
        s.push(self.d.get(self.clock).copied().unwrap_or(0.0));
        s
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.clock >= self.params.horizon {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.users.len() {
            return Err(Error::Shape(format!(
                "action has {} rates for {} users",
                action.len(),
                self.users.len()
            )));
        }
        if action.iter().any(|&a| !(0.0..=self.params.r_tot).contains(&a)) {
            return Err(Error::Domain(format!(
                "action {action:?} outside [0, {}]",
                self.params.r_tot
            )));
        }
        let r = reward(&self.users, action, self.d[self.clock], &self.params);
        for ((c, u), &a) in self.cumulative.iter_mut().zip(&self.users).zip(action) {
            *c += u.utility.value(a);
        }
        self.clock += 1;
        Ok(StepOutcome {
            next_state: self.observe(),
            reward: r,
            done: self.clock == self.params.horizon,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO; the oldest transition is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be >= 1".into()));
        }
        Ok(ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.len() < n || n == 0 {
            return Err(Error::BufferUnderfilled {
                have: self.items.len(),
                need: n,
            });
        }
        Ok((0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// Actor, critic, their target copies, and optimizer state for one slice.
///
/// Network inputs are the environment state with the target `d` divided by
/// `r_tot`; the actor's sigmoid outputs are fractions of `r_tot`, which is
/// also how actions enter the critic.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub hyper: DdpgHyper,
    pub env: EnvParams,
    n_users: usize,
}

impl DdpgAgent {
    pub fn new(n_users: usize, env: EnvParams, hyper: DdpgHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if n_users == 0 {
            return Err(Error::InvalidArgument("agent needs at least one user".into()));
        }
        let state_dim = n_users + 1;
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&hyper.hidden);
        actor_dims.push(n_users);
        let mut critic_dims = vec![state_dim + n_users];
        critic_dims.extend(&hyper.hidden);
        critic_dims.push(1);
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::new(
            &actor_dims,
            hyper.leaky_slope,
            OutputActivation::Sigmoid,
            seeds.gen(),
        )?;
        let critic = Mlp::new(
            &critic_dims,
            hyper.leaky_slope,
            OutputActivation::Identity,
            seeds.gen(),
        )?;
        Ok(Self::from_networks(
            actor.clone(),
            critic.clone(),
            actor,
            critic,
            hyper,
            env,
        ))
    }

    fn from_networks(
        actor: Mlp,
        critic: Mlp,
        target_actor: Mlp,
        target_critic: Mlp,
        hyper: DdpgHyper,
        env: EnvParams,
    ) -> Self {
        let n_users = actor.output_dim();
        DdpgAgent {
            actor_opt: AdamState::new(&actor, AdamConfig::default()),
            critic_opt: AdamState::new(&critic, AdamConfig::default()),
            actor,
            critic,
            target_actor,
            target_critic,
            hyper,
            env,
            n_users,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    fn normalize_state(&self, state: &[f64]) -> Vec<f64> {
        let mut s = state.to_vec();
        if let Some(last) = s.last_mut() {
            *last /= self.env.r_tot;
        }
        s
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.n_users + 1 {
            return Err(Error::Shape(format!(
                "state has {} entries, agent expects {}",
                state.len(),
                self.n_users + 1
            )));
        }
        Ok(())
    }

    /// Deterministic policy output in rate units.
    pub fn policy(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let out = self.actor.infer(&self.normalize_state(state))?;
        Ok(out
            .into_iter()
            .map(|a| (a * self.env.r_tot).clamp(0.0, self.env.r_tot))
            .collect())
    }

    /// Policy action plus Gaussian exploration noise, clipped to `[0, r_tot]`.
    pub fn act<R: Rng>(&self, state: &[f64], noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.policy(state)?;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in &mut a {
                *v = (*v + normal.sample(rng)).clamp(0.0, self.env.r_tot);
            }
        } else if noise_std < 0.0 || noise_std.is_nan() {
            return Err(Error::InvalidArgument(format!("noise std {noise_std}")));
        }
        Ok(a)
    }

    /// Q-value estimate for a raw state and an action in rate units.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.check_state(state)?;
        let mut input = self.normalize_state(state);
        input.extend(action.iter().map(|a| a / self.env.r_tot));
        Ok(self.critic.infer(&input)?[0])
    }

    fn batch_matrices(&self, batch: &[&Transition]) -> Result<BatchMatrices> {
        let b = batch.len();
        let sd = self.n_users + 1;
        let mut states = Array2::zeros((b, sd));
        let mut next = Array2::zeros((b, sd));
        let mut actions = Array2::zeros((b, self.n_users));
        let mut rewards = Array1::zeros(b);
        let mut not_done = Array1::zeros(b);
        for (row, tr) in batch.iter().enumerate() {
            if tr.state.len() != sd || tr.next_state.len() != sd || tr.action.len() != self.n_users
            {
                return Err(Error::Shape("transition does not match agent".into()));
            }
            for (j, v) in self.normalize_state(&tr.state).into_iter().enumerate() {
                states[[row, j]] = v;
            }
            for (j, v) in self.normalize_state(&tr.next_state).into_iter().enumerate() {
                next[[row, j]] = v;
            }
            for (j, &a) in tr.action.iter().enumerate() {
                actions[[row, j]] = a / self.env.r_tot;
            }
            rewards[row] = tr.reward * self.hyper.reward_scale;
            not_done[row] = if tr.done { 0.0 } else { 1.0 };
        }
        Ok(BatchMatrices {
            states,
            actions,
            rewards,
            next,
            not_done,
        })
    }

    /// Bellman targets `r + gamma Q'(s', pi'(s'))` in scaled reward units;
    /// terminal transitions use the reward alone.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let m = self.batch_matrices(batch)?;
        Ok(self.targets_from(&m)?.to_vec())
    }

    fn targets_from(&self, m: &BatchMatrices) -> Result<Array1<f64>> {
        let mut g = m.rewards.clone();
        // Terminal rows never bootstrap; only the rest go through the targets.
        let live: Vec<usize> = (0..g.len()).filter(|&i| m.not_done[i] != 0.0).collect();
        if live.is_empty() {
            return Ok(g);
        }
        let next = m.next.select(Axis(0), &live);
        let next_actions = self.target_actor.infer_batch(next.view())?;
        let next_q = self
            .target_critic
            .infer_batch(concatenate![Axis(1), next, next_actions].view())?;
        for (row, &i) in live.iter().enumerate() {
            g[i] += self.hyper.gamma * next_q[[row, 0]];
        }
        Ok(g)
    }

    /// One critic regression step, one actor ascent step, and a soft update
    /// of both target networks.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<TrainStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len() as f64;
        let m = self.batch_matrices(batch)?;
        let targets = self.targets_from(&m)?;

        let critic_in = concatenate![Axis(1), m.states, m.actions];
        let (q, tape) = self.critic.forward_batch(critic_in.view())?;
        let diff = &q.column(0) - &targets;
        let critic_loss = diff.mapv(|v| v * v).sum() / b;
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {critic_loss}")));
        }
        let grad_q = diff.mapv(|v| 2.0 * v / b).insert_axis(Axis(1));
        let (critic_grads, _) = self.critic.backward(&tape, grad_q.view())?;
        adam_step(
            &mut self.critic,
            &critic_grads,
            &mut self.critic_opt,
            self.hyper.critic_lr,
        )?;

        let (policy_actions, actor_tape) = self.actor.forward_batch(m.states.view())?;
        let policy_in = concatenate![Axis(1), m.states, policy_actions];
        let (q_pi, q_tape) = self.critic.forward_batch(policy_in.view())?;
        let actor_objective = q_pi.sum() / b;
        if !actor_objective.is_finite() {
            return Err(Error::NonFinite(format!("actor objective {actor_objective}")));
        }
        // Minimize -mean(Q): seed the critic with -1/B and pull out dQ/da.
        let seed = Array2::from_elem((batch.len(), 1), -1.0 / b);
        let input_grad = self.critic.input_gradient(&q_tape, seed.view())?;
        let action_grad = input_grad.slice(s![.., self.n_users + 1..]).to_owned();
        let (actor_grads, _) = self.actor.backward(&actor_tape, action_grad.view())?;
        adam_step(
            &mut self.actor,
            &actor_grads,
            &mut self.actor_opt,
            self.hyper.actor_lr,
        )?;

        soft_update(&mut self.target_critic, &self.critic, self.hyper.tau)?;
        soft_update(&mut self.target_actor, &self.actor, self.hyper.tau)?;
        Ok(TrainStats {
            critic_loss,
            actor_objective,
        })
    }

    /// Noise-free rollout of one episode; returns rates `[k][t]` and the
    /// undiscounted return.
    pub fn rollout(&self, users: &[UserSpec], d: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        if users.len() != self.n_users {
            return Err(Error::Shape(format!(
                "agent trained for {} users, slice has {}",
                self.n_users,
                users.len()
            )));
        }
        let params = EnvParams {
            horizon: d.len(),
            ..self.env
        };
        let mut env = SliceEnv::new(users.to_vec(), params)?;
        let mut state = env.reset(d)?;
        let mut x = vec![Vec::with_capacity(d.len()); self.n_users];
        let mut ret = 0.0;
        loop {
            let a = self.policy(&state)?;
            for (row, v) in x.iter_mut().zip(&a) {
                row.push(*v);
            }
            let out = env.step(&a)?;
            ret += out.reward;
            if out.done {
                return Ok((x, ret));
            }
            state = out.next_state;
        }
    }
}

struct BatchMatrices {
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Array1<f64>,
    next: Array2<f64>,
    not_done: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub episode_return: f64,
    pub noise_std: f64,
    /// Critic loss of the most recent update (NaN before the first one).
    pub critic_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub agent: DdpgAgent,
    pub curve: Vec<CurvePoint>,
}

/// Trains one agent on its slice with targets `d[t] ~ U[0, r_tot]` drawn
/// fresh each episode.
pub fn train_agent(
    users: &[UserSpec],
    env: EnvParams,
    hyper: &DdpgHyper,
    seed: u64,
) -> Result<TrainedAgent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = DdpgAgent::new(users.len(), env, hyper.clone(), rng.gen())?;
    let mut sim = SliceEnv::new(users.to_vec(), env)?;
    let mut buffer = ReplayBuffer::new(hyper.replay_capacity)?;
    let mut noise = hyper.initial_noise.unwrap_or(env.r_tot.sqrt());
    let mut last_loss = f64::NAN;
    let mut curve = Vec::with_capacity(hyper.episodes);

    for episode in 0..hyper.episodes {
        let d: Vec<f64> = (0..env.horizon)
            .map(|_| rng.gen_range(0.0..=env.r_tot))
            .collect();
        let mut state = sim.reset(&d)?;
        let mut ret = 0.0;
        loop {
            let action = agent.act(&state, noise, &mut rng)?;
            let out = sim.step(&action)?;
            ret += out.reward;
            buffer.push(Transition {
                state: std::mem::take(&mut state),
                action,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            if buffer.len() >= hyper.batch_size {
                let batch = buffer.sample(hyper.batch_size, &mut rng)?;
                last_loss = agent.train_step(&batch)?.critic_loss;
                noise *= hyper.noise_decay;
            }
            if out.done {
                break;
            }
            state = out.next_state;
        }
        curve.push(CurvePoint {
            episode,
            episode_return: ret,
            noise_std: noise,
            critic_loss: last_loss,
        });
    }
    Ok(TrainedAgent { agent, curve })
}

/// Training curve as CSV: `episode,return,noise_std,critic_loss`.
pub fn curve_csv(curve: &[CurvePoint], provenance: &str) -> String {
    let mut out = format!("# {provenance}\nepisode,return,noise_std,critic_loss\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.episode, p.episode_return, p.noise_std, p.critic_loss
        ));
    }
    out
}

/// Identity of the slice an agent was trained for.
pub fn slice_fingerprint(users: &[UserSpec]) -> String {
    let json = serde_json::to_string(users).expect("user specs serialize");
    crate::io::short_hash(json.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHeader {
    pub hyper: DdpgHyper,
    pub env: EnvParams,
    pub n_users: usize,
    pub slice: String,
    pub seed: u64,
}

// Agent checkpoint layout: magic "DSAGENT1" | version u32 | header length u32
// | header JSON | four network checkpoints (actor, critic, target actor,
// target critic), each prefixed with its byte length as u64 | sha256.
const AGENT_MAGIC: &[u8; 8] = b"DSAGENT1";
const AGENT_VERSION: u32 = 1;

impl DdpgAgent {
    pub fn to_checkpoint_bytes(&self, header: &AgentHeader) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(AGENT_MAGIC);
        buf.extend_from_slice(&AGENT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(header).expect("agent header serializes");
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for net in [
            &self.actor,
            &self.critic,
            &self.target_actor,
            &self.target_critic,
        ] {
            let bytes = net.to_checkpoint_bytes();
            buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            buf.extend_from_slice(&bytes);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<(Self, AgentHeader), String> {
        if bytes.len() < 32 {
            return Err("truncated checkpoint".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = ByteReader::new(body);
        if r.take(8)? != AGENT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != AGENT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let len = r.u32()? as usize;
        let header: AgentHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| format!("header: {e}"))?;
        let mut nets = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = r.u64()? as usize;
            nets.push(Mlp::from_checkpoint_bytes(r.take(n)?)?);
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        let target_critic = nets.pop().unwrap();
        let target_actor = nets.pop().unwrap();
        let critic = nets.pop().unwrap();
        let actor = nets.pop().unwrap();
        if actor.output_dim() != header.n_users
            || !actor.same_architecture(&target_actor)
            || !critic.same_architecture(&target_critic)
        {
            return Err("networks do not match header".into());
        }
        let agent = Self::from_networks(
            actor,
            critic,
            target_actor,
            target_critic,
            header.hyper.clone(),
            header.env,
        );
        Ok((agent, header))
    }

    pub fn save(&self, header: &AgentHeader, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes(header))
    }

    pub fn load(path: &Path) -> Result<(Self, AgentHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|reason| Error::checkpoint(path, reason))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UtilityModel;
    use crate::oracle::SlaveProblem;

    fn linear_user(weight: f64, u_min: f64) -> UserSpec {
        UserSpec {
            weight,
            utility: UtilityModel::AlphaFair { alpha: 0.0 },
            u_min,
        }
    }

    fn params(horizon: usize, beta: f64, rho: f64) -> EnvParams {
        EnvParams {
            r_tot: 100.0,
            rho,
            beta,
            horizon,
            weighted_objective: true,
        }
    }

    fn sigma(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn shaping_examples() {
        assert_eq!(shaping_h(0.0), -0.5);
        assert!((shaping_h(10.0) - (sigma(10.0) - 1.0)).abs() < 1e-15);
        assert!((shaping_h(10.0) + 4.5398e-5).abs() < 1e-8);
        assert!((shaping_h(-10.0) + 0.9999546).abs() < 1e-7);
        let mut prev = -1.0;
        for i in -400..=400 {
            let h = shaping_h(i as f64 * 0.1);
            assert!(h >= prev && (-1.0..0.0).contains(&h));
            prev = h;
        }
    }

    #[test]
    fn reward_examples() {
        let users = [linear_user(1.0, 2.0)];
        let p = params(1, 20.0, 1.0);
        let r = reward(&users, &[10.0], 12.0, &p);
        assert!((r - (10.0 + 20.0 * (sigma(8.0) - 1.0) - 2.0)).abs() < 1e-12);
        assert!((r - 7.99329).abs() < 1e-5);
        let r = reward(&users, &[3.0], 3.0, &p);
        assert!((r + 2.37883).abs() < 1e-5);

        let users = [
            linear_user(0.3, 2.0),
            UserSpec {
                weight: 0.7,
                utility: UtilityModel::AlphaFair { alpha: 0.5 },
                u_min: 1.0,
            },
        ];
        let x = [4.0, 9.0];
        let r = reward(&users, &x, 50.0, &params(1, 0.0, 0.0));
        let util = crate::model::slice_utility(&users, &x).unwrap();
        assert!((r - util).abs() < 1e-12);
    }

    #[test]
    fn reset_produces_zero_history_and_target() {
        let users = vec![linear_user(0.5, 2.0); 5];
        let mut env = SliceEnv::new(users, params(1, 20.0, 1.0)).unwrap();
        let s = env.reset(&[37.5]).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 0.0, 37.5]);
        assert_eq!(env.reset(&[37.5]).unwrap(), s);
        assert!(env.reset(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn step_accumulates_and_terminates() {
        let mut env = SliceEnv::new(vec![linear_user(1.0, 2.0)], params(2, 20.0, 1.0)).unwrap();
        env.reset(&[4.0, 6.0]).unwrap();
        let out = env.step(&[1.0]).unwrap();
        assert_eq!(out.next_state, vec![0.5, 6.0]);
        assert!(!out.done);
        let out = env.step(&[0.0]).unwrap();
        assert!(out.done);
        assert_eq!(out.next_state, vec![0.5, 0.0]);
        // zero action: U(0) = 0 adds nothing, reward is shaping minus penalty
        let expected = 20.0 * shaping_h(0.0 - 1.0) - 0.5 * 36.0;
        assert!((out.reward - expected).abs() < 1e-12);
        assert!(matches!(env.step(&[1.0]), Err(Error::EpisodeDone)));

        let mut env = SliceEnv::new(vec![linear_user(1.0, 2.0)], params(1, 20.0, 1.0)).unwrap();
        env.reset(&[4.0]).unwrap();
        assert!(env.step(&[3.0]).unwrap().done);
    }

    #[test]
    fn step_rejects_out_of_box_action() {
        let mut env = SliceEnv::new(vec![linear_user(1.0, 2.0)], params(1, 20.0, 1.0)).unwrap();
        env.reset(&[4.0]).unwrap();
        assert!(env.step(&[101.0]).is_err());
        assert!(env.step(&[1.0, 2.0]).is_err());
    }

    fn transition(reward: f64, done: bool) -> Transition {
        Transition {
            state: vec![0.0, 0.3],
            action: vec![10.0],
            reward,
            next_state: vec![0.1, 0.5],
            done,
        }
    }

    #[test]
    fn buffer_is_fifo_and_sampling_is_seeded() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for r in [1.0, 2.0, 3.0] {
            buf.push(transition(r, true));
        }
        assert_eq!(buf.len(), 2);
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0]);
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let sa: Vec<f64> = buf.sample(2, &mut a).unwrap().iter().map(|t| t.reward).collect();
        let sb: Vec<f64> = buf.sample(2, &mut b).unwrap().iter().map(|t| t.reward).collect();
        assert_eq!(sa.len(), 2);
        assert_eq!(sa, sb);
        assert!(matches!(
            ReplayBuffer::new(4).unwrap().sample(1, &mut a),
            Err(Error::BufferUnderfilled { .. })
        ));
    }

    fn small_hyper() -> DdpgHyper {
        DdpgHyper {
            hidden: vec![16, 16],
            batch_size: 8,
            replay_capacity: 64,
            reward_scale: 1.0,
            ..DdpgHyper::default()
        }
    }

    #[test]
    fn actions_stay_in_box() {
        let agent = DdpgAgent::new(3, params(1, 20.0, 1.0), small_hyper(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = [0.0, 0.0, 0.0, 40.0];
        let a0 = agent.act(&state, 0.0, &mut rng).unwrap();
        assert_eq!(a0, agent.act(&state, 0.0, &mut rng).unwrap());
        for _ in 0..200 {
            for v in agent.act(&state, 100.0, &mut rng).unwrap() {
                assert!((0.0..=100.0).contains(&v));
            }
        }
        assert!(agent.act(&[0.0, 1.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn terminal_targets_ignore_target_networks() {
        let agent = DdpgAgent::new(1, params(1, 20.0, 1.0), small_hyper(), 3).unwrap();
        let t = transition(4.25, true);
        assert_eq!(agent.critic_targets(&[&t]).unwrap(), vec![4.25]);
        let t = transition(4.25, false);
        assert_ne!(agent.critic_targets(&[&t]).unwrap(), vec![4.25]);
    }

    #[test]
    fn critic_fits_constant_reward() {
        let hyper = DdpgHyper {
            gamma: 0.0,
            ..small_hyper()
        };
        let mut agent = DdpgAgent::new(1, params(1, 20.0, 1.0), hyper, 5).unwrap();
        let r = 3.0;
        let t = transition(r, false);
        let batch = vec![&t; 8];
        let first = agent.train_step(&batch).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..200 {
            last = agent.train_step(&batch).unwrap().critic_loss;
        }
        assert!(last < first);
        assert!(last < 0.01 * r * r, "final MSBE {last}");
    }

    #[test]
    fn zero_tau_freezes_targets() {
        let hyper = DdpgHyper {
            tau: 0.0,
            ..small_hyper()
        };
        let mut agent = DdpgAgent::new(1, params(1, 20.0, 1.0), hyper, 6).unwrap();
        let (ta, tc) = (agent.target_actor.clone(), agent.target_critic.clone());
        let t = transition(1.0, false);
        agent.train_step(&[&t; 8]).unwrap();
        assert_eq!(agent.target_actor, ta);
        assert_eq!(agent.target_critic, tc);
        assert_ne!(agent.actor, ta);
    }

    #[test]
    fn training_is_deterministic_and_zero_episodes_is_fresh() {
        let users = vec![linear_user(1.0, 2.0), linear_user(0.4, 2.0)];
        let hyper = DdpgHyper {
            episodes: 30,
            ..small_hyper()
        };
        let a = train_agent(&users, params(1, 20.0, 1.0), &hyper, 9).unwrap();
        let b = train_agent(&users, params(1, 20.0, 1.0), &hyper, 9).unwrap();
        assert_eq!(format!("{:?}", a.curve), format!("{:?}", b.curve));
        assert_eq!(a.agent.actor, b.agent.actor);

        let zero = DdpgHyper {
            episodes: 0,
            ..hyper
        };
        let fresh = train_agent(&users, params(1, 20.0, 1.0), &zero, 9).unwrap();
        assert!(fresh.curve.is_empty());
        assert_eq!(fresh.agent.actor, fresh.agent.target_actor);
    }

    #[test]
    fn undiscounted_return_equals_slave_objective() {
        let users = vec![
            linear_user(0.8, 2.0),
            UserSpec {
                weight: 0.3,
                utility: UtilityModel::AlphaFair { alpha: 0.6 },
                u_min: 2.0,
            },
        ];
        let env = EnvParams {
            horizon: 3,
            ..params(3, 0.0, 1.0)
        };
        let agent = DdpgAgent::new(2, env, small_hyper(), 8).unwrap();
        let d = [20.0, 70.0, 5.0];
        let (x, ret) = agent.rollout(&users, &d).unwrap();
        let p = SlaveProblem {
            users: &users,
            d: &d,
            rho: 1.0,
            r_tot: 100.0,
        };
        assert!((ret - p.objective(&x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = DdpgAgent::new(2, params(1, 20.0, 1.0), small_hyper(), 10).unwrap();
        let header = AgentHeader {
            hyper: agent.hyper.clone(),
            env: agent.env,
            n_users: 2,
            slice: "abc".into(),
            seed: 10,
        };
        let bytes = agent.to_checkpoint_bytes(&header);
        let (back, h) = DdpgAgent::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(back.actor, agent.actor);
        assert_eq!(back.to_checkpoint_bytes(&h), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(DdpgAgent::from_checkpoint_bytes(&bad).is_err());
    }
}
