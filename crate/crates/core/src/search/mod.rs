//! Layer-by-layer ratio search with a DDPG agent.
//!
//! An episode walks the prunable layers in order. The state for layer `i` is
//! that node's row of the aggregator output, recomputed with the ratios
//! chosen so far (undecided layers stay at 1.0). The agent proposes an
//! action, the budget check clips it, and it is snapped to the ratio grid.
//! Once every layer is set the configuration is scored and every transition
//! of the episode stores that one reward.

pub mod agent;
pub mod budget;
pub mod explore;
pub mod replay;

use rand::Rng;

pub use agent::{actor_forward, critic_forward, AgentConfig, DdpgAgent, Mlp, MlpVars};
pub use budget::{check_feasible, enforce_budget, flops_with, min_flops, snap_feasible, snap_to_grid};
pub use explore::{noise_at, sample_action, RewardNormalizer};
pub use replay::{ReplayBuffer, Transition};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gcn::{AggregatorParams, HIDDEN};
use crate::graph::{
    apply_ratio_sharing, build_adjacency, count_flops, node_features, renormalize_adjacency, ModelGraph,
    RatioAssignment,
};
use crate::init::{substream, SeededRng};
use crate::network::{validate_grid, Supernet};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::evaluate_config;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub episodes: usize,
    pub warmup_episodes: usize,
    pub noise_init: f64,
    /// Per-episode multiplicative noise decay.
    pub noise_decay: f64,
    pub gamma: f64,
    /// Upper bound on multiply-accumulates.
    pub budget: u64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub replay_capacity: usize,
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Agent updates after each post-warmup episode; 0 means one per prunable layer.
    pub updates_per_episode: usize,
    pub reward_window: usize,
    pub ratio_grid: Vec<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            warmup_episodes: 100,
            noise_init: 0.5,
            noise_decay: 0.99,
            gamma: 0.0,
            budget: u64::MAX,
            batch_size: 32,
            tau: 0.01,
            seed: 0,
            replay_capacity: 400,
            hidden: 128,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            updates_per_episode: 16,
            reward_window: 64,
            ratio_grid: crate::trainer::default_grid(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.ratio_grid)?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.noise_init.is_nan() || self.noise_init <= 0.0 {
            return bad("noise_init must be positive");
        }
        if !(self.noise_decay > 0.0 && self.noise_decay < 1.0) {
            return bad("noise_decay must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.hidden == 0 || self.reward_window == 0 {
            return bad("batch_size, hidden and reward_window must be positive");
        }
        Ok(())
    }

    fn agent(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            tau: self.tau,
            gamma: self.gamma,
        }
    }
}

/// Scores a complete configuration.
pub trait RewardFn {
    fn reward(&mut self, ratios: &RatioAssignment) -> Result<f64>;
}

/// `1 − ‖r − target‖²/l` over the free ratios; no network involved.
#[derive(Debug, Clone)]
pub struct SyntheticReward {
    pub graph: ModelGraph,
    pub target: Vec<f64>,
}

impl RewardFn for SyntheticReward {
    fn reward(&mut self, ratios: &RatioAssignment) -> Result<f64> {
        let free = ratios.free_values(&self.graph);
        let sq: f64 = free.iter().zip(&self.target).map(|(r, t)| (r - t).powi(2)).sum();
        Ok(1.0 - sq / free.len() as f64)
    }
}

/// Recalibrated top-1 accuracy of the supernet's generated network.
pub struct AccuracyReward<'a, T: Scalar> {
    pub net: &'a mut Supernet<T>,
    pub recalibration: &'a Dataset,
    pub evaluation: &'a Dataset,
    pub batch_size: usize,
}

impl<T: Scalar> RewardFn for AccuracyReward<'_, T> {
    fn reward(&mut self, ratios: &RatioAssignment) -> Result<f64> {
        Ok(evaluate_config(self.net, ratios, self.recalibration, self.evaluation, self.batch_size)?.accuracy)
    }
}

/// Computes agent states from a partial assignment.
#[derive(Debug, Clone)]
pub struct StateEncoder<T: Scalar> {
    graph: ModelGraph,
    aggregator: AggregatorParams<T>,
    a_hat: Tensor<T>,
}

impl<T: Scalar> StateEncoder<T> {
    pub fn new(graph: ModelGraph, aggregator: AggregatorParams<T>) -> Self {
        Self {
            a_hat: renormalize_adjacency(&build_adjacency(&graph)),
            graph,
            aggregator,
        }
    }

    pub fn from_supernet(net: &Supernet<T>) -> Self {
        Self::new(net.graph.clone(), net.aggregator.clone())
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Assignment with layers `< index` at `decided` and the rest at 1.0.
    pub fn partial(&self, decided: &[f64], index: usize) -> Result<RatioAssignment> {
        let raw: Vec<f64> = (0..self.graph.prunable().len())
            .map(|j| if j < index { decided[j] } else { 1.0 })
            .collect();
        apply_ratio_sharing(&self.graph, &raw)
    }

    /// Aggregator output (l×64) for the partial assignment.
    pub fn embeddings(&self, decided: &[f64], index: usize) -> Result<Tensor<T>> {
        let ratios = self.partial(decided, index)?;
        let f = node_features(&self.graph, &ratios).normalized();
        self.aggregator.aggregate(&self.a_hat, &f)
    }

    /// State for prunable layer `index`.
    pub fn state(&self, decided: &[f64], index: usize) -> Result<Vec<f64>> {
        let emb = self.embeddings(decided, index)?;
        let node = self.graph.prunable()[index];
        Ok(emb.row(node).iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub ratios: RatioAssignment,
    pub reward: f64,
    pub flops: u64,
    pub noise: f64,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchLogRow {
    pub episode: usize,
    pub reward: f64,
    pub flops: u64,
    pub noise: f64,
    /// Free ratios in prunable-layer order.
    pub ratios: Vec<f64>,
}

impl SearchLogRow {
    pub fn csv_header(g: &ModelGraph) -> String {
        let mut h = String::from("episode,reward,flops,noise");
        for p in g.prunable() {
            h.push_str(&format!(",r{p}"));
        }
        h
    }

    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{},{}", self.episode, self.reward, self.flops, self.noise);
        for r in &self.ratios {
            s.push_str(&format!(",{r}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: RatioAssignment,
    pub best_reward: f64,
    pub best_flops: u64,
    pub best_episode: usize,
    pub log: Vec<SearchLogRow>,
}

const SALT_WARMUP: u64 = 0x5EA_0001;
const SALT_NOISE: u64 = 0x5EA_0002;
const SALT_REPLAY: u64 = 0x5EA_0003;
const SALT_AGENT: u64 = 0x5EA_0004;

/// Owns the agent, the replay buffer and the random streams of one search.
pub struct Searcher<T: Scalar> {
    pub encoder: StateEncoder<T>,
    pub cfg: SearchConfig,
    pub agent: DdpgAgent,
    pub buffer: ReplayBuffer,
    pub normalizer: RewardNormalizer,
    warm_rng: SeededRng,
    noise_rng: SeededRng,
    replay_rng: SeededRng,
}

/// Random stream used for warm-up actions under `seed`.
pub fn warmup_rng(seed: u64) -> SeededRng {
    substream(seed, SALT_WARMUP)
}

impl<T: Scalar> Searcher<T> {
    pub fn new(encoder: StateEncoder<T>, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        check_feasible(encoder.graph(), &cfg.ratio_grid, cfg.budget)?;
        if encoder.graph().prunable().is_empty() {
            return Err(Error::Graph("graph has no prunable layers".into()));
        }
        Ok(Self {
            agent: DdpgAgent::new(&mut substream(cfg.seed, SALT_AGENT), HIDDEN, cfg.agent()),
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            normalizer: RewardNormalizer::new(cfg.reward_window),
            warm_rng: warmup_rng(cfg.seed),
            noise_rng: substream(cfg.seed, SALT_NOISE),
            replay_rng: substream(cfg.seed, SALT_REPLAY),
            encoder,
            cfg,
        })
    }

    /// Plays one episode and returns its configuration and transitions
    /// without touching the buffer or the agent.
    pub fn run_episode(&mut self, episode: usize, reward_fn: &mut dyn RewardFn) -> Result<EpisodeResult> {
        let g = self.encoder.graph().clone();
        let grid = self.cfg.ratio_grid.clone();
        let budget = self.cfg.budget;
        check_feasible(&g, &grid, budget)?;
        let noise = noise_at(self.cfg.noise_init, self.cfg.noise_decay, episode);
        let layers = g.prunable().len();
        let mut decided = vec![1.0; layers];
        let mut states = Vec::with_capacity(layers + 1);
        let mut actions = Vec::with_capacity(layers);
        for i in 0..layers {
            let s = self.encoder.state(&decided, i)?;
            let proposed = if episode < self.cfg.warmup_episodes {
                grid[self.warm_rng.random_range(0..grid.len())]
            } else {
                sample_action(self.agent.act(&s)?, noise, &mut self.noise_rng)
            };
            let clipped = enforce_budget(&g, &decided, i, proposed, budget, &grid)?;
            let a = snap_feasible(&g, &decided, i, clipped, budget, &grid)?;
            decided[i] = a;
            states.push(s);
            actions.push(a);
        }
        let ratios = apply_ratio_sharing(&g, &decided)?;
        let flops = count_flops(&g, &ratios)?;
        let reward = reward_fn.reward(&ratios)?;
        if !reward.is_finite() {
            return Err(Error::Numeric(format!("episode {episode} produced reward {reward}")));
        }
        let transitions = (0..layers)
            .map(|i| Transition {
                state: states[i].clone(),
                action: actions[i],
                reward,
                next_state: if i + 1 < layers { states[i + 1].clone() } else { vec![0.0; states[i].len()] },
                terminal: i + 1 == layers,
            })
            .collect();
        Ok(EpisodeResult {
            ratios,
            reward,
            flops,
            noise,
            transitions,
        })
    }

    /// Agent updates drawn from the buffer; returns the mean critic loss.
    pub fn train_agent(&mut self) -> Result<f64> {
        if self.buffer.is_empty() {
            return Ok(0.0);
        }
        let updates = match self.cfg.updates_per_episode {
            0 => self.encoder.graph().prunable().len(),
            n => n,
        };
        let mut total = 0.0;
        for _ in 0..updates {
            let batch = self.buffer.sample(self.cfg.batch_size, &mut self.replay_rng);
            let rewards: Vec<f64> = batch.iter().map(|t| self.normalizer.normalize(t.reward)).collect();
            total += self.agent.update(&batch, &rewards)?;
        }
        Ok(total / updates as f64)
    }

    /// Runs every configured episode; `on_episode` sees each log row as it
    /// is produced. Returns the best-reward configuration (earliest on ties).
    pub fn search(
        &mut self,
        reward_fn: &mut dyn RewardFn,
        mut on_episode: impl FnMut(&SearchLogRow),
    ) -> Result<SearchOutcome> {
        let g = self.encoder.graph().clone();
        let mut best: Option<(usize, EpisodeResult)> = None;
        let mut log = Vec::with_capacity(self.cfg.episodes);
        for e in 0..self.cfg.episodes {
            let res = self.run_episode(e, reward_fn)?;
            self.normalizer.push(res.reward);
            for t in &res.transitions {
                self.buffer.push(t.clone());
            }
            if e >= self.cfg.warmup_episodes {
                self.train_agent()?;
            }
            let row = SearchLogRow {
                episode: e,
                reward: res.reward,
                flops: res.flops,
                noise: res.noise,
                ratios: res.ratios.free_values(&g),
            };
            on_episode(&row);
            log.push(row);
            if best.as_ref().is_none_or(|(_, b)| res.reward > b.reward) {
                best = Some((e, res));
            }
        }
        let (best_episode, best) =
            best.ok_or_else(|| Error::Config("search needs at least one episode".into()))?;
        Ok(SearchOutcome {
            best: best.ratios,
            best_reward: best.reward,
            best_flops: best.flops,
            best_episode,
            log,
        })
    }
}

/// Runs a full search under `cfg` with states from `encoder`.
pub fn search<T: Scalar>(
    encoder: StateEncoder<T>,
    cfg: &SearchConfig,
    reward_fn: &mut dyn RewardFn,
    on_episode: impl FnMut(&SearchLogRow),
) -> Result<SearchOutcome> {
    Searcher::new(encoder, cfg.clone())?.search(reward_fn, on_episode)
}
