//! Off-policy actor-critic on low-dimensional observations.
//!
//! Deterministic tanh actor, twin critics with target copies, clipped double
//! Q targets with clipped Gaussian target noise, scheduled exploration noise,
//! n-step returns and a delayed actor update that maximizes critic 1.
//!
//! Episodes end either on success or on the step limit. A success ends in an
//! absorbing state that keeps paying `success_reward` (by default 1, the upper
//! bound of every reward source), so its value is `1 / (1 - γ)`; a step-limit
//! end is a truncation and bootstraps from the target critics as usual.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{self, Observation, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::nn::{Activation, AdamConfig, AdamState, Gradients, Mlp, NnError};
use crate::reward::RewardEnsemble;
use crate::trajectory::{ReplayBuffer, Transition};

const CRITIC_INPUT: usize = OBS_DIM + ACTION_DIM;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("non-finite {what} at update {update}: {detail}")]
    NonFiniteLoss { what: &'static str, update: usize, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("reward source `reward_model` needs a trained reward model")]
    MissingRewardModel,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub decay_steps: usize,
    /// Bound on target-policy smoothing noise.
    pub clip: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self {
            sigma_start: 1.0,
            sigma_end: 0.1,
            decay_steps: 100_000,
            clip: 0.3,
        }
    }
}

impl ExplorationSchedule {
    pub fn sigma(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.sigma_end;
        }
        let frac = (step as f64 / self.decay_steps as f64).min(1.0);
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Uniform-random actions before learning starts.
    pub seed_steps: usize,
    /// Environment steps per critic update.
    pub update_every: usize,
    /// Critic updates per actor update.
    pub actor_delay: usize,
    pub exploration: ExplorationSchedule,
    /// Per-step reward of the absorbing state after a success; `None` repeats
    /// the final step's reward.
    pub success_reward: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.01,
            n_step: 3,
            batch_size: 256,
            replay_capacity: 100_000,
            seed_steps: 4000,
            update_every: 2,
            actor_delay: 2,
            exploration: ExplorationSchedule::default(),
            success_reward: Some(1.0),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.n_step == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("n_step, batch_size and replay_capacity must be positive");
        }
        if self.update_every == 0 || self.actor_delay == 0 {
            return bad("update_every and actor_delay must be positive");
        }
        Ok(())
    }
}

/// Sampled transitions with their n-step targets pre-accumulated.
///
/// TD target: `returns + terminal_value + discount * min(Q1', Q2')(next_obs, a')`.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub returns: Vec<f64>,
    pub next_obs: Array2<f64>,
    /// `γ^m` for bootstrapped rows, 0 where the window ends in success.
    pub discount: Vec<f64>,
    /// `γ^m r_success / (1 - γ)` where the window ends in success, else 0.
    pub terminal_value: Vec<f64>,
}

impl NStepBatch {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// One-step batch built straight from transitions.
    pub fn from_transitions(ts: &[Transition], gamma: f64, success_reward: Option<f64>) -> Self {
        let mut b = Self::with_capacity(ts.len());
        for t in ts {
            b.push_window(std::slice::from_ref(t), gamma, success_reward);
        }
        b.finish()
    }

    fn with_capacity(n: usize) -> NStepBuilder {
        NStepBuilder {
            obs: Vec::with_capacity(n * OBS_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            returns: Vec::with_capacity(n),
            next_obs: Vec::with_capacity(n * OBS_DIM),
            discount: Vec::with_capacity(n),
            terminal_value: Vec::with_capacity(n),
        }
    }
}

struct NStepBuilder {
    obs: Vec<f64>,
    actions: Vec<f64>,
    returns: Vec<f64>,
    next_obs: Vec<f64>,
    discount: Vec<f64>,
    terminal_value: Vec<f64>,
}

impl NStepBuilder {
    /// `window` holds consecutive transitions of one episode, the first being
    /// the sampled one; it stops at the first `done`.
    fn push_window(&mut self, window: &[Transition], gamma: f64, success_reward: Option<f64>) {
        let first = &window[0];
        let last = window.last().unwrap();
        let mut g = 0.0;
        let mut k = 1.0;
        for t in window {
            g += k * t.reward;
            k *= gamma;
        }
        self.obs.extend_from_slice(&first.obs.0);
        self.actions.extend_from_slice(&first.action);
        self.returns.push(g);
        self.next_obs.extend_from_slice(&last.next_obs.0);
        if last.done && last.info.success {
            self.discount.push(0.0);
            let r = success_reward.unwrap_or(last.reward);
            self.terminal_value.push(k * r / (1.0 - gamma));
        } else {
            self.discount.push(k);
            self.terminal_value.push(0.0);
        }
    }

    fn finish(self) -> NStepBatch {
        let n = self.returns.len();
        NStepBatch {
            obs: Array2::from_shape_vec((n, OBS_DIM), self.obs).unwrap(),
            actions: Array2::from_shape_vec((n, ACTION_DIM), self.actions).unwrap(),
            returns: self.returns,
            next_obs: Array2::from_shape_vec((n, OBS_DIM), self.next_obs).unwrap(),
            discount: self.discount,
            terminal_value: self.terminal_value,
        }
    }
}

/// Draws `batch_size` indices uniformly and builds n-step windows. A window
/// stops early at an episode end or at the newest stored transition.
pub fn sample_nstep(
    buffer: &ReplayBuffer,
    batch_size: usize,
    n_step: usize,
    gamma: f64,
    success_reward: Option<f64>,
    rng: &mut impl Rng,
) -> NStepBatch {
    let len = buffer.len();
    assert!(len > 0, "cannot sample from an empty buffer");
    let mut b = NStepBatch::with_capacity(batch_size);
    let mut window = Vec::with_capacity(n_step);
    for _ in 0..batch_size {
        let i = rng.random_range(0..len);
        window.clear();
        for j in i..(i + n_step).min(len) {
            let t = *buffer.get(j).unwrap();
            let done = t.done;
            window.push(t);
            if done {
                break;
            }
        }
        b.push_window(&window, gamma, success_reward);
    }
    b.finish()
}

fn concat_obs_action(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    let n = obs.nrows();
    let mut x = Array2::zeros((n, CRITIC_INPUT));
    x.slice_mut(s![.., ..OBS_DIM]).assign(obs);
    x.slice_mut(s![.., OBS_DIM..]).assign(actions);
    x
}

/// Mean squared TD error `mean((Q(x) - y)^2)` and its parameter gradients.
pub fn critic_loss(critic: &Mlp, inputs: &Array2<f64>, targets: &[f64]) -> Result<(f64, Gradients), NnError> {
    let cache = critic.forward_cached(inputs.view())?;
    let q = cache.output();
    let n = targets.len() as f64;
    let mut grad = Array2::zeros((targets.len(), 1));
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let e = q[[i, 0]] - y;
        loss += e * e;
        grad[[i, 0]] = 2.0 * e / n;
    }
    let (grads, _) = critic.backward_cached(&cache, grad.view())?;
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateLosses {
    pub critic1: f64,
    pub critic2: f64,
    /// `-mean Q1(s, π(s))`, present on steps with an actor update.
    pub actor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ActorCriticAgent {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub config: AgentConfig,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    updates: usize,
    rng: ChaCha8Rng,
}

impl ActorCriticAgent {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(&config.hidden);
            v.push(output);
            v
        };
        let actor = Mlp::new(&sizes(OBS_DIM, ACTION_DIM), Activation::Relu, Activation::Tanh, seed)?;
        let critic1 = Mlp::new(&sizes(CRITIC_INPUT, 1), Activation::Relu, Activation::Identity, seed.wrapping_add(1))?;
        let critic2 = Mlp::new(&sizes(CRITIC_INPUT, 1), Activation::Relu, Activation::Identity, seed.wrapping_add(2))?;
        Ok(Self {
            actor_opt: AdamState::for_net(&actor, AdamConfig::with_lr(config.actor_lr)),
            critic1_opt: AdamState::for_net(&critic1, AdamConfig::with_lr(config.critic_lr)),
            critic2_opt: AdamState::for_net(&critic2, AdamConfig::with_lr(config.critic_lr)),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            config,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x00C0_FFEE),
        })
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn policy(&self, obs: &Observation) -> [f64; 2] {
        let a = self.actor.forward(&obs.0).expect("observation width is fixed");
        [a[0], a[1]]
    }

    /// Deterministic actor output, or with `explore` plus `N(0, sigma(step)^2)`
    /// noise clamped to `[-1, 1]`.
    pub fn act(&mut self, obs: &Observation, step: usize, explore: bool) -> [f64; 2] {
        let mut a = self.policy(obs);
        if explore {
            let sigma = self.config.exploration.sigma(step);
            let noise = Normal::new(0.0, sigma).expect("sigma is non-negative");
            for v in &mut a {
                *v = (*v + noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
            }
        }
        a
    }

    pub fn random_action(&mut self) -> [f64; 2] {
        [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)]
    }

    fn actor_batch(&self, obs: &Array2<f64>) -> Array2<f64> {
        self.actor.forward_batch(obs.view()).expect("observation width is fixed")
    }

    /// Elementwise `min(Q1', Q2')` at `(obs, actions)`.
    pub fn target_q_min(&self, obs: &Array2<f64>, actions: &Array2<f64>) -> Vec<f64> {
        let x = concat_obs_action(obs, actions);
        let q1 = self.target1.forward_batch(x.view()).expect("width is fixed");
        let q2 = self.target2.forward_batch(x.view()).expect("width is fixed");
        q1.column(0).iter().zip(q2.column(0)).map(|(a, b)| a.min(*b)).collect()
    }

    /// Smoothed target actions: `clamp(π(s') + clip(ε, ±c), -1, 1)`.
    fn target_actions(&mut self, next_obs: &Array2<f64>, step: usize) -> Array2<f64> {
        let mut a = self.actor_batch(next_obs);
        let sched = self.config.exploration;
        let sigma = sched.sigma(step);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("sigma is non-negative");
            a.mapv_inplace(|v| (v + noise.sample(&mut self.rng).clamp(-sched.clip, sched.clip)).clamp(-1.0, 1.0));
        }
        a
    }

    /// TD targets for `batch`, using noise scale `sigma(step)`.
    pub fn td_targets(&mut self, batch: &NStepBatch, step: usize) -> Vec<f64> {
        let a_next = self.target_actions(&batch.next_obs, step);
        let q_min = self.target_q_min(&batch.next_obs, &a_next);
        (0..batch.len())
            .map(|i| {
                let boot = if batch.discount[i] == 0.0 { 0.0 } else { batch.discount[i] * q_min[i] };
                batch.returns[i] + batch.terminal_value[i] + boot
            })
            .collect()
    }

    /// One critic update, a delayed actor update and a soft target update.
    pub fn update(&mut self, batch: &NStepBatch, step: usize) -> Result<UpdateLosses, AgentError> {
        let update = self.updates;
        let targets = self.td_targets(batch, step);
        let x = concat_obs_action(&batch.obs, &batch.actions);
        let (l1, g1) = critic_loss(&self.critic1, &x, &targets)?;
        let (l2, g2) = critic_loss(&self.critic2, &x, &targets)?;
        if !l1.is_finite() || !l2.is_finite() {
            let worst = targets.iter().copied().fold(0.0f64, |m, t| if t.is_finite() { m.max(t.abs()) } else { f64::INFINITY });
            return Err(AgentError::NonFiniteLoss {
                what: "critic loss",
                update,
                detail: format!("critic1 {l1}, critic2 {l2}, max |target| {worst}"),
            });
        }
        self.critic1.apply_adam(&g1, &mut self.critic1_opt)?;
        self.critic2.apply_adam(&g2, &mut self.critic2_opt)?;

        let mut losses = UpdateLosses {
            critic1: l1,
            critic2: l2,
            actor: None,
        };
        if update % self.config.actor_delay == 0 {
            let loss = self.actor_step(&batch.obs)?;
            if !loss.is_finite() {
                return Err(AgentError::NonFiniteLoss {
                    what: "actor loss",
                    update,
                    detail: format!("{loss}"),
                });
            }
            losses.actor = Some(loss);
        }
        self.target1.soft_update_from(&self.critic1, self.config.tau);
        self.target2.soft_update_from(&self.critic2, self.config.tau);
        self.updates += 1;
        Ok(losses)
    }

    /// Gradient step on `-mean Q1(s, π(s))`; critic 1 is held fixed.
    fn actor_step(&mut self, obs: &Array2<f64>) -> Result<f64, AgentError> {
        let (loss, grads) = self.actor_loss(obs)?;
        self.actor.apply_adam(&grads, &mut self.actor_opt)?;
        Ok(loss)
    }

    /// `-mean Q1(s, π(s))` and its gradient with respect to actor parameters.
    pub fn actor_loss(&self, obs: &Array2<f64>) -> Result<(f64, Gradients), AgentError> {
        let n = obs.nrows();
        let a_cache = self.actor.forward_cached(obs.view())?;
        let x = concat_obs_action(obs, a_cache.output());
        let q_cache = self.critic1.forward_cached(x.view())?;
        let loss = -q_cache.output().column(0).sum() / n as f64;
        let dq = Array2::from_elem((n, 1), -1.0 / n as f64);
        let (_, dx) = self.critic1.backward_cached(&q_cache, dq.view())?;
        let da = dx.slice(s![.., OBS_DIM..]).to_owned();
        let (grads, _) = self.actor.backward_cached(&a_cache, da.view())?;
        Ok((loss, grads))
    }

    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir).map_err(|e| AgentError::Io(e.to_string()))?;
        for (name, net) in self.nets() {
            net.save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    /// Restores network weights saved by [`save`](Self::save). Optimizer
    /// state starts fresh.
    pub fn load(dir: &Path, config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        let mut agent = Self::new(config, seed)?;
        agent.actor = Mlp::load(&dir.join("actor.ckpt"))?;
        agent.critic1 = Mlp::load(&dir.join("critic1.ckpt"))?;
        agent.critic2 = Mlp::load(&dir.join("critic2.ckpt"))?;
        agent.target1 = Mlp::load(&dir.join("target1.ckpt"))?;
        agent.target2 = Mlp::load(&dir.join("target2.ckpt"))?;
        Ok(agent)
    }

    fn nets(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("target1", &self.target1),
            ("target2", &self.target2),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    EnvDense,
    EnvSparse,
    RewardModel,
}

impl RewardSource {
    pub fn name(self) -> &'static str {
        match self {
            RewardSource::EnvDense => "env_dense",
            RewardSource::EnvSparse => "env_sparse",
            RewardSource::RewardModel => "reward_model",
        }
    }
}

impl std::fmt::Display for RewardSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RewardSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "env_dense" => Ok(RewardSource::EnvDense),
            "env_sparse" => Ok(RewardSource::EnvSparse),
            "reward_model" => Ok(RewardSource::RewardModel),
            other => Err(format!("unknown reward source `{other}`")),
        }
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub seed: u64,
    pub success_rate: f64,
    /// Mean shadow (expert dense) return over the evaluation episodes.
    pub mean_return: f64,
    pub reward_source: RewardSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub spec: TaskSpec,
    pub reward_source: RewardSource,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub agent: AgentConfig,
    /// Agent checkpoints go to `<dir>/seed-<s>/step-<n>/` when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            spec: TaskSpec::new(env::TaskKind::Reach),
            reward_source: RewardSource::EnvDense,
            budget: 100_000,
            seeds: vec![0, 1, 2],
            eval_every: 5000,
            eval_episodes: 20,
            agent: AgentConfig::default(),
            checkpoint_dir: None,
        }
    }
}

/// Environment steps at which evaluation happens: multiples of `eval_every`
/// below the budget, always including step 0.
pub fn eval_steps(budget: usize, eval_every: usize) -> Vec<usize> {
    if eval_every == 0 {
        return vec![0];
    }
    (0..budget.max(1)).step_by(eval_every).collect()
}

/// Success rate and mean shadow return of the deterministic policy.
pub fn evaluate_policy(agent: &ActorCriticAgent, spec: TaskSpec, seeds: impl IntoIterator<Item = u64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut wins = 0usize;
    let mut ret = 0.0;
    for s in seeds {
        let (mut state, mut obs) = env::reset(spec, s);
        let mut g = 0.0;
        while !state.is_done() {
            let out = state.step(agent.policy(&obs)).expect("loop guard keeps episode open");
            g += out.info.expert_reward;
            obs = out.observation;
        }
        n += 1;
        wins += state.success as usize;
        ret += g;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (wins as f64 / n as f64, ret / n as f64)
}

fn eval_seed_range(seed: u64, episodes: usize) -> impl Iterator<Item = u64> {
    let base = 1_000_000 + seed * 10_000;
    base..base + episodes as u64
}

/// Trains one agent per seed and returns the concatenated metric log.
///
/// With `reward_model`, the learning reward of every stored transition is the
/// ensemble reward of `(obs, action)`; the environment reward is kept only as
/// the shadow value that feeds `mean_return`.
pub fn train_policy(cfg: &PolicyTrainConfig, rm: Option<&RewardEnsemble>) -> Result<Vec<MetricRow>, AgentError> {
    if cfg.reward_source == RewardSource::RewardModel && rm.is_none() {
        return Err(AgentError::MissingRewardModel);
    }
    cfg.agent.validate()?;
    cfg.spec.validate().map_err(|e| AgentError::Config(e.to_string()))?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(train_one_seed(cfg, rm, seed)?);
    }
    Ok(rows)
}

fn learning_reward(source: RewardSource, rm: Option<&RewardEnsemble>, obs: &Observation, action: &[f64; 2], next: &env::EnvState) -> f64 {
    match source {
        RewardSource::EnvDense => env::expert_reward(next),
        RewardSource::EnvSparse => env::sparse_reward(next),
        RewardSource::RewardModel => rm.expect("checked by caller").reward(obs, action),
    }
}

pub fn train_one_seed(cfg: &PolicyTrainConfig, rm: Option<&RewardEnsemble>, seed: u64) -> Result<Vec<MetricRow>, AgentError> {
    let spec = cfg.spec;
    let ac = &cfg.agent;
    let mut agent = ActorCriticAgent::new(ac.clone(), seed)?;
    let mut buffer = ReplayBuffer::new(ac.replay_capacity);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let evals = eval_steps(cfg.budget, cfg.eval_every);
    let mut next_eval = 0;
    let mut rows = Vec::with_capacity(evals.len());

    let mut episode = 0u64;
    let train_seed = |ep: u64| seed.wrapping_mul(1_000_003).wrapping_add(ep);
    let (mut state, mut obs) = env::reset(spec, train_seed(episode));
    let mut step = 0usize;
    loop {
        if next_eval < evals.len() && evals[next_eval] == step {
            let (success_rate, mean_return) = evaluate_policy(&agent, spec, eval_seed_range(seed, cfg.eval_episodes));
            tracing::info!(seed, step, success_rate, mean_return, source = %cfg.reward_source, "eval");
            rows.push(MetricRow {
                step,
                seed,
                success_rate,
                mean_return,
                reward_source: cfg.reward_source,
            });
            if let Some(dir) = &cfg.checkpoint_dir {
                agent.save(&dir.join(format!("seed-{seed}")).join(format!("step-{step}")))?;
            }
            next_eval += 1;
        }
        if step >= cfg.budget {
            break;
        }
        let action = if step < ac.seed_steps {
            agent.random_action()
        } else {
            agent.act(&obs, step, true)
        };
        let out = state.step(action).expect("episode reset keeps the state live");
        let reward = learning_reward(cfg.reward_source, rm, &obs, &action, &state);
        if !reward.is_finite() {
            return Err(AgentError::NonFiniteLoss {
                what: "reward",
                update: agent.updates(),
                detail: format!("{reward} at env step {step}"),
            });
        }
        buffer.push(Transition {
            obs,
            action,
            reward,
            env_reward: out.info.expert_reward,
            done: out.done,
            next_obs: out.observation,
            info: out.info,
        });
        obs = out.observation;
        if out.done {
            episode += 1;
            (state, obs) = env::reset(spec, train_seed(episode));
        }
        step += 1;
        if step >= ac.seed_steps && step % ac.update_every == 0 && buffer.len() >= ac.batch_size.min(ac.seed_steps.max(1)) {
            let batch = sample_nstep(&buffer, ac.batch_size, ac.n_step, ac.gamma, ac.success_reward, &mut sample_rng);
            agent.update(&batch, step)?;
        }
    }
    Ok(rows)
}

pub const METRIC_HEADER: [&str; 5] = ["step", "seed", "success_rate", "mean_return", "reward_source"];

pub fn write_metric_log(path: &Path, rows: &[MetricRow]) -> Result<(), AgentError> {
    let io_err = |e: &dyn std::fmt::Display| AgentError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_HEADER).map_err(|e| io_err(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(&e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(&e))?;
    crate::io::write_atomic(path, &bytes).map_err(|e| io_err(&e))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>, AgentError> {
    let io_err = |e: &dyn std::fmt::Display| AgentError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(&e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(&e))).collect()
}
