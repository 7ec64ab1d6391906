//! Runtime per-layer bit-width selection: layer-by-layer MDP over the frozen
//! super-net, a small fully-connected Q-network with per-layer feature
//! projections, epsilon-greedy rollouts, a replay buffer, and double-Q
//! updates (action by the main net, value by the target net).

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::quant::BitSet;
use crate::rng::{Rng, Stream};
use crate::supernet::{BitConfig, SuperNet};
use crate::tensor::{
    adam_step, fully_connected, fully_connected_backward, global_avg_pool, relu, relu_backward,
    AdamParams, Parameter, Tensor,
};
use crate::data::Dataset;
use std::collections::VecDeque;

/// Fixed projection width of the pooled feature part of the state.
pub const FEATURE_DIM: usize = 64;

/// Hidden widths of the 5-layer Q-network.
pub const HIDDEN: [usize; 4] = [64, 128, 256, 128];

/// Raw per-decision observation. The pooled feature map is stored
/// pre-projection so replayed updates train the projections end to end.
#[derive(Debug, Clone)]
pub struct State {
    /// Quantizable-layer index, 0-based.
    pub layer: usize,
    /// Global-average-pooled input feature map of that layer.
    pub pooled: Vec<f32>,
    /// Action taken at the previous layer, if any.
    pub prev_action: Option<usize>,
}

/// One replayed step of the layer-by-layer MDP.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub reward: f32,
    /// Absent on terminal transitions.
    pub next: Option<State>,
    pub terminal: bool,
}

/// Uniform-sampling ring replay buffer.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(t.terminal == t.next.is_none(), "terminal transitions carry no next state");
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut Rng) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.below(self.items.len() as u64) as usize]).collect()
    }
}

/// Simple trainable linear layer for the agent.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn new(d_out: usize, d_in: usize) -> Self {
        Linear {
            weight: Parameter::new(Tensor::zeros(&[d_out, d_in])),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
        }
    }

    fn init(&mut self, rng: &mut Rng) {
        let d_in = self.weight.value.shape()[1] as f64;
        self.weight.value = Tensor::randn(self.weight.value.shape(), (1.0 / d_in).sqrt(), rng);
        self.bias.value = Tensor::zeros(self.bias.value.shape());
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fully_connected(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (dx, dw, db) = fully_connected_backward(x, &self.weight.value, dy);
        self.weight.add_grad(dw.data());
        self.bias.add_grad(db.data());
        dx
    }

    fn macs(&self) -> u64 {
        (self.weight.value.shape()[0] * self.weight.value.shape()[1]) as u64
    }
}

/// 5 fully-connected layers over the state embedding, plus one pooled-feature
/// projection per quantizable layer (input width = that layer's channels).
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub projections: Vec<Linear>,
    pub mlp: Vec<Linear>,
    pub bits: BitSet,
    pub layer_channels: Vec<usize>,
}

/// Caches from one Q forward, consumed by `QNetwork::backward`.
pub struct QCache {
    pooled_in: Tensor,
    proj_layer: usize,
    embed: Tensor,
    /// Per MLP layer: (input, pre-relu output).
    stages: Vec<(Tensor, Tensor)>,
}

impl QNetwork {
    pub fn new(layer_channels: Vec<usize>, bits: BitSet, rng: &mut Rng) -> Self {
        let n_actions = bits.len();
        let embed_dim = FEATURE_DIM + 1 + n_actions + 1;
        let mut projections: Vec<Linear> =
            layer_channels.iter().map(|&c| Linear::new(FEATURE_DIM, c)).collect();
        let mut dims = vec![embed_dim];
        dims.extend_from_slice(&HIDDEN);
        dims.push(n_actions);
        let mut mlp: Vec<Linear> = dims.windows(2).map(|w| Linear::new(w[1], w[0])).collect();
        for p in projections.iter_mut().chain(mlp.iter_mut()) {
            p.init(rng);
        }
        QNetwork { projections, mlp, bits, layer_channels }
    }

    pub fn n_actions(&self) -> usize {
        self.bits.len()
    }

    pub fn l_q(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn embed_dim(&self) -> usize {
        FEATURE_DIM + 1 + self.n_actions() + 1
    }

    /// State embedding: projected pooled features, layer-index feature
    /// `(i+1)/L_q`, previous-action one-hot with an extra "none" slot.
    pub fn embed(&self, state: &State) -> Result<Tensor> {
        if state.layer >= self.l_q() {
            return Err(Error::Dim(format!("layer index {} out of range", state.layer)));
        }
        let c = self.layer_channels[state.layer];
        if state.pooled.len() != c {
            return Err(Error::Dim(format!(
                "pooled feature has {} channels, layer {} wants {c}",
                state.pooled.len(),
                state.layer
            )));
        }
        let pooled = Tensor::new(vec![1, c], state.pooled.clone())?;
        let projected = self.projections[state.layer].forward(&pooled)?;
        let n_actions = self.n_actions();
        let mut data = Vec::with_capacity(self.embed_dim());
        data.extend_from_slice(projected.data());
        data.push((state.layer as f32 + 1.0) / self.l_q() as f32);
        let mut onehot = vec![0.0f32; n_actions + 1];
        match state.prev_action {
            Some(a) if a < n_actions => onehot[a] = 1.0,
            Some(a) => return Err(Error::Domain(format!("previous action {a} out of range"))),
            None => onehot[n_actions] = 1.0,
        }
        data.extend_from_slice(&onehot);
        Tensor::new(vec![1, self.embed_dim()], data)
    }

    /// Embedding from a raw feature map (`[1,C,H,W]`): pools, projects,
    /// concatenates.
    pub fn encode_state(&self, feature_map: &Tensor, layer: usize, prev_action: Option<usize>) -> Result<Tensor> {
        let pooled = global_avg_pool(feature_map)?;
        if pooled.shape()[0] != 1 {
            return Err(Error::Dim("encode_state wants a single-sample feature map".into()));
        }
        self.embed(&State { layer, pooled: pooled.data().to_vec(), prev_action })
    }

    /// Q values for every action.
    pub fn q_values(&self, state: &State) -> Result<Vec<f32>> {
        let mut h = self.embed(state)?;
        let last = self.mlp.len() - 1;
        for (j, layer) in self.mlp.iter().enumerate() {
            h = layer.forward(&h)?;
            if j < last {
                h = relu(&h);
            }
        }
        Ok(h.data().to_vec())
    }

    fn forward_cached(&self, state: &State) -> Result<(Vec<f32>, QCache)> {
        let c = self.layer_channels[state.layer];
        let pooled = Tensor::new(vec![1, c], state.pooled.clone())?;
        let embed = self.embed(state)?;
        let mut stages = Vec::with_capacity(self.mlp.len());
        let mut h = embed.clone();
        let last = self.mlp.len() - 1;
        for (j, layer) in self.mlp.iter().enumerate() {
            let z = layer.forward(&h)?;
            stages.push((h, z.clone()));
            h = if j < last { relu(&z) } else { z };
        }
        Ok((h.data().to_vec(), QCache { pooled_in: pooled, proj_layer: state.layer, embed, stages }))
    }

    /// Backpropagates `dq` (gradient w.r.t. the Q outputs) through the MLP and
    /// the projection used by this state.
    fn backward(&mut self, cache: &QCache, dq: &[f32]) -> Result<()> {
        let mut d = Tensor::new(vec![1, dq.len()], dq.to_vec())?;
        let last = self.mlp.len() - 1;
        for j in (0..self.mlp.len()).rev() {
            if j < last {
                d = relu_backward(&cache.stages[j].1, &d);
            }
            d = self.mlp[j].backward(&cache.stages[j].0, &d);
        }
        debug_assert_eq!(d.shape(), cache.embed.shape());
        let d_proj = Tensor::new(vec![1, FEATURE_DIM], d.data()[..FEATURE_DIM].to_vec())?;
        self.projections[cache.proj_layer].backward(&cache.pooled_in, &d_proj);
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in self.projections.iter_mut().chain(self.mlp.iter_mut()) {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn ema_from(&mut self, src: &QNetwork, tau: f32) {
        for (d, s) in self.projections.iter_mut().zip(&src.projections) {
            d.weight.ema_from(&s.weight, tau);
            d.bias.ema_from(&s.bias, tau);
        }
        for (d, s) in self.mlp.iter_mut().zip(&src.mlp) {
            d.weight.ema_from(&s.weight, tau);
            d.bias.ema_from(&s.bias, tau);
        }
    }

    /// Multiply-accumulates of one decision: the MLP plus the widest
    /// per-layer projection (worst case).
    pub fn macs_per_decision(&self) -> u64 {
        let proj = self.projections.iter().map(Linear::macs).max().unwrap_or(0);
        proj + self.mlp.iter().map(Linear::macs).sum::<u64>()
    }
}

/// Reward shaping: a cost penalty each step, plus the task outcome at the
/// last layer.
#[derive(Clone, Copy)]
pub struct RewardShaper<'a> {
    pub alpha: f64,
    pub cost: &'a CostTable,
}

impl RewardShaper<'_> {
    /// `-alpha * normalized_cost(layer, b)`, plus `R_T` (1 for a correct
    /// prediction, else 0) when `is_last`.
    pub fn reward(&self, layer: usize, b: u8, is_last: bool, task_outcome: Option<bool>) -> Result<f64> {
        if is_last != task_outcome.is_some() {
            return Err(Error::Domain("task outcome must be provided exactly at the last layer".into()));
        }
        let mut r = -self.alpha * self.cost.normalized_cost(layer, b)?;
        if let Some(correct) = task_outcome {
            r += if correct { 1.0 } else { 0.0 };
        }
        Ok(r)
    }
}

/// Everything produced by one episode.
pub struct Rollout {
    pub config: BitConfig,
    pub transitions: Vec<Transition>,
    pub logits: Tensor,
    pub correct: bool,
    pub episode_reward: f64,
}

/// Runs one sample through the frozen net, choosing a bit per layer
/// epsilon-greedily from `q`.
pub fn episode_rollout(
    net: &SuperNet,
    q: &QNetwork,
    x: &Tensor,
    label: usize,
    epsilon: f64,
    rng: &mut Rng,
    shaper: &RewardShaper,
) -> Result<Rollout> {
    if x.shape()[0] != 1 {
        return Err(Error::Dim("episodes run one sample at a time".into()));
    }
    let l_q = net.l_q();
    let bits = q.bits.bits();
    let mut h = net.stem_eval(x)?;
    let mut states: Vec<State> = Vec::with_capacity(l_q);
    let mut actions = Vec::with_capacity(l_q);
    let mut chosen_bits = Vec::with_capacity(l_q);
    for layer in 0..l_q {
        let pooled = global_avg_pool(&h)?;
        let state = State {
            layer,
            pooled: pooled.data().to_vec(),
            prev_action: actions.last().copied(),
        };
        let action = if rng.uniform() < epsilon {
            rng.below(bits.len() as u64) as usize
        } else {
            argmax(&q.q_values(&state)?)
        };
        states.push(state);
        actions.push(action);
        chosen_bits.push(bits[action]);
        h = net.qlayer_eval(layer, &h, bits[action])?;
    }
    let logits = net.head_eval(&h)?;
    let correct = argmax(logits.data()) == label;

    let mut transitions = Vec::with_capacity(l_q);
    let mut episode_reward = 0.0;
    for layer in 0..l_q {
        let is_last = layer + 1 == l_q;
        let r = shaper.reward(layer, chosen_bits[layer], is_last, is_last.then_some(correct))?;
        episode_reward += r;
        transitions.push(Transition {
            state: states[layer].clone(),
            action: actions[layer],
            reward: r as f32,
            next: if is_last { None } else { Some(states[layer + 1].clone()) },
            terminal: is_last,
        });
    }
    Ok(Rollout { config: BitConfig::new(chosen_bits), transitions, logits, correct, episode_reward })
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Double-Q TD loss over a transition batch: actions for the bootstrap are
/// chosen by `q`, evaluated by `target`; terminal transitions never
/// bootstrap. Accumulates gradients into `q` and returns the mean squared TD
/// error.
pub fn dqn_loss(batch: &[&Transition], q: &mut QNetwork, target: &QNetwork, gamma: f64) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Domain("dqn batch is empty".into()));
    }
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    for t in batch {
        let target_value = match (&t.next, t.terminal) {
            (Some(next), false) => {
                let chooser = q.q_values(next)?;
                let a_star = argmax(&chooser);
                t.reward as f64 + gamma * target.q_values(next)?[a_star] as f64
            }
            _ => t.reward as f64,
        };
        let (qv, cache) = q.forward_cached(&t.state)?;
        let td = qv[t.action] as f64 - target_value;
        loss += td * td * inv;
        let mut dq = vec![0.0f32; qv.len()];
        dq[t.action] = (2.0 * td * inv) as f32;
        q.backward(&cache, &dq)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("dqn loss".into()));
    }
    Ok(loss as f32)
}

/// Agent hyperparameters.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// Cost weight in the reward.
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget the epsilon anneal spans.
    pub epsilon_frac: f64,
    /// Bootstrap discount; the finite-horizon MDP runs undiscounted.
    pub gamma: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    /// EMA decay syncing the target Q-net.
    pub target_ema: f64,
    pub lr: f64,
    /// Stratified fraction of the training set used for agent training.
    pub subset_frac: f64,
    /// Episode budget.
    pub steps: usize,
    pub seed: u64,
    pub updates_per_episode: usize,
}

impl AgentConfig {
    pub fn new(alpha: f64) -> Self {
        AgentConfig {
            alpha,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_frac: 0.6,
            gamma: 1.0,
            replay_capacity: 50_000,
            minibatch: 64,
            target_ema: 0.99,
            lr: 1e-6,
            subset_frac: 0.1,
            steps: 8_000,
            seed: 1,
            updates_per_episode: 1,
        }
    }

    /// Desk-scale preset: same shape, but a learning rate that converges
    /// within a few thousand episodes.
    pub fn desk(alpha: f64, steps: usize, seed: u64) -> Self {
        AgentConfig { steps, seed, lr: 1e-3, ..Self::new(alpha) }
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let span = (self.steps as f64 * self.epsilon_frac).max(1.0);
        let t = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }

    fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Domain("alpha must be non-negative".into()));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Domain(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.lr <= 0.0 {
            return Err(Error::Domain("agent lr must be positive".into()));
        }
        Ok(())
    }
}

/// Main + target Q-networks with their config.
#[derive(Debug, Clone)]
pub struct Agent {
    pub q: QNetwork,
    pub target: QNetwork,
    pub cfg: AgentConfig,
}

impl Agent {
    pub fn new(net: &SuperNet, cfg: AgentConfig) -> Self {
        let mut rng = Rng::new(cfg.seed, Stream::Init);
        let q = QNetwork::new(net.qlayer_in_channels(), net.bits.clone(), &mut rng);
        let target = q.clone();
        Agent { q, target, cfg }
    }
}

/// One reward-curve point.
#[derive(Debug, Clone, Copy)]
pub struct RewardPoint {
    pub episode: usize,
    pub reward: f64,
    pub moving_avg: f64,
}

/// Trains the agent against the frozen net on a stratified subset of
/// `data`; interleaves one episode with `updates_per_episode` replayed
/// double-Q updates and an EMA target sync.
pub fn train_agent(net: &SuperNet, data: &Dataset, cfg: AgentConfig) -> Result<(Agent, Vec<RewardPoint>)> {
    cfg.validate()?;
    let cost = net.cost_table();
    let shaper = RewardShaper { alpha: cfg.alpha, cost: &cost };
    let subset = if cfg.subset_frac < 1.0 {
        data.stratified_subset(cfg.subset_frac, cfg.seed)
    } else {
        data.clone()
    };
    if subset.is_empty() {
        return Err(Error::Domain("agent training subset is empty".into()));
    }
    let mut agent = Agent::new(net, cfg.clone());
    let mut rng = Rng::new(cfg.seed, Stream::Exploration);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut window = VecDeque::with_capacity(100);
    let mut order: Vec<usize> = (0..subset.len()).collect();
    rng.shuffle(&mut order);
    let mut pos = 0usize;
    let warmup = cfg.minibatch.max(256);
    let adam = AdamParams { lr: cfg.lr, ..Default::default() };

    for episode in 0..cfg.steps {
        if pos == order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let idx = order[pos];
        pos += 1;
        let (x, y) = subset.batch(&[idx]);
        let eps = cfg.epsilon_at(episode);
        let rollout = episode_rollout(net, &agent.q, &x, y[0], eps, &mut rng, &shaper)?;
        for t in rollout.transitions {
            replay.push(t);
        }
        if replay.len() >= warmup {
            for _ in 0..cfg.updates_per_episode {
                let batch = replay.sample(cfg.minibatch, &mut rng);
                agent.q.zero_grads();
                let loss = dqn_loss(&batch, &mut agent.q, &agent.target, cfg.gamma)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("dqn loss at episode {episode}")));
                }
                let mut failed = None;
                agent.q.visit_params(&mut |p| {
                    if failed.is_none() {
                        if let Err(e) = adam_step(p, &adam) {
                            failed = Some(e);
                        }
                    }
                });
                if let Some(e) = failed {
                    return Err(e);
                }
                agent.target.ema_from(&agent.q, cfg.target_ema as f32);
            }
        }
        if window.len() == 100 {
            window.pop_front();
        }
        window.push_back(rollout.episode_reward);
        let avg = window.iter().sum::<f64>() / window.len() as f64;
        curve.push(RewardPoint { episode, reward: rollout.episode_reward, moving_avg: avg });
    }
    Ok((agent, curve))
}

/// Per-sample evaluation outcome of the greedy policy.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample: usize,
    pub config: BitConfig,
    pub bitops: u64,
    pub correct: bool,
    pub reward: f64,
}

/// Greedy evaluation report.
#[derive(Debug, Clone)]
pub struct AgentReport {
    pub outcomes: Vec<SampleOutcome>,
    pub top1: f64,
    pub mean_bitops: f64,
    pub mean_reward: f64,
    /// `action_hist[layer][bit_index]` counts over the evaluated set.
    pub action_hist: Vec<Vec<u64>>,
    /// Sample ids of the lowest-BitOps decile, ascending by BitOps.
    pub easy: Vec<usize>,
    /// Sample ids of the highest-BitOps decile, descending by BitOps.
    pub hard: Vec<usize>,
    pub distinct_configs: usize,
}

/// Runs the greedy (epsilon = 0) policy over the whole set.
pub fn eval_agent(net: &SuperNet, agent: &Agent, data: &Dataset, alpha: f64) -> Result<AgentReport> {
    let cost = net.cost_table();
    let shaper = RewardShaper { alpha, cost: &cost };
    let mut rng = Rng::new(agent.cfg.seed, Stream::Eval);
    let mut outcomes = Vec::with_capacity(data.len());
    let mut hist = vec![vec![0u64; agent.q.n_actions()]; net.l_q()];
    let mut correct = 0usize;
    let mut bitops_sum = 0.0;
    let mut reward_sum = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.batch(&[i]);
        let rollout = episode_rollout(net, &agent.q, &x, y[0], 0.0, &mut rng, &shaper)?;
        let bitops = cost.network_bitops(&rollout.config)?;
        for (layer, &b) in rollout.config.bits().iter().enumerate() {
            hist[layer][agent.q.bits.index_of(b).unwrap()] += 1;
        }
        if rollout.correct {
            correct += 1;
        }
        bitops_sum += bitops as f64;
        reward_sum += rollout.episode_reward;
        outcomes.push(SampleOutcome {
            sample: i,
            config: rollout.config,
            bitops,
            correct: rollout.correct,
            reward: rollout.episode_reward,
        });
    }
    let n = data.len().max(1);
    let mut by_bitops: Vec<usize> = (0..outcomes.len()).collect();
    by_bitops.sort_by_key(|&i| (outcomes[i].bitops, i));
    let decile = (outcomes.len() / 10).max(1).min(outcomes.len());
    let easy: Vec<usize> = by_bitops[..decile].iter().map(|&i| outcomes[i].sample).collect();
    let hard: Vec<usize> = by_bitops[outcomes.len() - decile..].iter().rev().map(|&i| outcomes[i].sample).collect();
    let mut distinct: Vec<&BitConfig> = outcomes.iter().map(|o| &o.config).collect();
    distinct.sort();
    distinct.dedup();
    Ok(AgentReport {
        top1: 100.0 * correct as f64 / n as f64,
        mean_bitops: bitops_sum / n as f64,
        mean_reward: reward_sum / n as f64,
        action_hist: hist,
        easy,
        hard,
        distinct_configs: distinct.len(),
        outcomes,
    })
}
