//! Actor and critic networks and the DDPG update.
//!
//! Both networks are two affine layers with a ReLU between them. The actor
//! squashes its output with a logistic so actions lie in [0, 1]; the critic
//! reads the state with the action appended as one extra column.

use rand::Rng;

use super::replay::Transition;
use crate::error::Result;
use crate::init::{glorot, uniform};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// Final-layer init bound, small so initial actions sit near 0.5 and initial
/// Q estimates near zero.
const OUT_INIT: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars<'t> {
    pub w1: Var<'t, f64>,
    pub b1: Var<'t, f64>,
    pub w2: Var<'t, f64>,
    pub b2: Var<'t, f64>,
}

impl Mlp {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        Self {
            w1: glorot(rng, input, hidden),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform(rng, &[hidden, 1], OUT_INIT),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<f64>, trainable: bool) -> MlpVars<'t> {
        let b = |t: &Tensor<f64>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        MlpVars {
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
        }
    }

    pub fn tensors(&self) -> [&Tensor<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `self ← τ·src + (1 − τ)·self`.
    pub fn soft_update(&mut self, src: &Mlp, tau: f64) {
        for (dst, s) in self.tensors_mut().into_iter().zip(src.tensors()) {
            for (d, &v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d = tau * v + (1.0 - tau) * *d;
            }
        }
    }
}

impl<'t> MlpVars<'t> {
    pub fn list(&self) -> [Var<'t, f64>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        x.linear(&self.w1, &self.b1)?.relu().linear(&self.w2, &self.b2)
    }
}

/// μ(s) for a batch of states (B×d) → B×1 in [0, 1].
pub fn actor_forward<'t>(actor: &MlpVars<'t>, states: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(actor.forward(states)?.sigmoid())
}

/// Q(s, a) for B×d states and B×1 actions → B×1.
pub fn critic_forward<'t>(critic: &MlpVars<'t>, states: Var<'t, f64>, actions: Var<'t, f64>) -> Result<Var<'t, f64>> {
    critic.forward(Var::concat_cols(&[states, actions])?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub gamma: f64,
}

/// Actor, critic, their target copies and optimizer state.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub cfg: AgentConfig,
    actor_opt: Adam<f64>,
    critic_opt: Adam<f64>,
}

fn rows(batch: &[&Transition], f: impl Fn(&Transition) -> &[f64]) -> Tensor<f64> {
    let d = f(batch[0]).len();
    let data: Vec<f64> = batch.iter().flat_map(|t| f(t).iter().copied()).collect();
    Tensor::new(&[batch.len(), d], data).expect("equal state widths")
}

impl DdpgAgent {
    pub fn new(rng: &mut impl Rng, state_dim: usize, cfg: AgentConfig) -> Self {
        let actor = Mlp::init(rng, state_dim, cfg.hidden);
        let critic = Mlp::init(rng, state_dim + 1, cfg.hidden);
        Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            cfg,
            actor_opt: Adam::new(),
            critic_opt: Adam::new(),
        }
    }

    /// Deterministic action μ(s).
    pub fn act(&self, state: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(&[1, state.len()], state.to_vec())?);
        let a = actor_forward(&self.actor.bind(&tape, false), s)?;
        Ok(a.value().data()[0])
    }

    /// Bellman targets `y = R̂ + γ·Q'(s', μ'(s'))`, with the bootstrap term
    /// dropped for terminal transitions.
    pub fn targets(&self, batch: &[&Transition], rewards: &[f64]) -> Result<Vec<f64>> {
        if self.cfg.gamma == 0.0 {
            return Ok(rewards.to_vec());
        }
        let tape = Tape::new();
        let next = tape.constant(rows(batch, |t| &t.next_state));
        let a = actor_forward(&self.actor_target.bind(&tape, false), next)?;
        let q = critic_forward(&self.critic_target.bind(&tape, false), next, a)?.value();
        Ok(batch
            .iter()
            .zip(rewards)
            .zip(q.data())
            .map(|((t, &r), &q)| if t.terminal { r } else { r + self.cfg.gamma * q })
            .collect())
    }

    /// Critic loss `mean (y − Q(s, a))²` at the current parameters.
    pub fn critic_loss(&self, batch: &[&Transition], targets: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.critic_loss_on(&tape, &self.critic.bind(&tape, false), batch, targets)?;
        Ok(loss.value().data()[0])
    }

    fn critic_loss_on<'t>(
        &self,
        tape: &'t Tape<f64>,
        critic: &MlpVars<'t>,
        batch: &[&Transition],
        targets: &[f64],
    ) -> Result<Var<'t, f64>> {
        let s = tape.constant(rows(batch, |t| &t.state));
        let a = tape.constant(Tensor::new(&[batch.len(), 1], batch.iter().map(|t| t.action).collect())?);
        let y = tape.constant(Tensor::new(&[batch.len(), 1], targets.to_vec())?);
        let diff = critic_forward(critic, s, a)?.sub(&y)?;
        Ok(diff.mul(&diff)?.mean())
    }

    /// One critic step, one actor step on the deterministic policy gradient,
    /// then soft target updates. `rewards` are the normalized rewards of the
    /// batch. Returns the critic loss before the step.
    pub fn update(&mut self, batch: &[&Transition], rewards: &[f64]) -> Result<f64> {
        let targets = self.targets(batch, rewards)?;
        let critic_cfg = AdamConfig::with_lr(self.cfg.critic_lr);
        let loss = {
            let tape = Tape::new();
            let vars = self.critic.bind(&tape, true);
            let loss = self.critic_loss_on(&tape, &vars, batch, &targets)?;
            let grads = tape.backward(loss)?;
            let names = ["critic.w1", "critic.b1", "critic.w2", "critic.b2"];
            for ((t, v), name) in self.critic.tensors_mut().into_iter().zip(vars.list()).zip(names) {
                self.critic_opt.step(name, t, &grads.wrt(v), critic_cfg);
            }
            loss.value().data()[0]
        };

        let actor_cfg = AdamConfig::with_lr(self.cfg.actor_lr);
        {
            let tape = Tape::new();
            let vars = self.actor.bind(&tape, true);
            let s = tape.constant(rows(batch, |t| &t.state));
            let a = actor_forward(&vars, s)?;
            let q = critic_forward(&self.critic.bind(&tape, false), s, a)?;
            let grads = tape.backward(q.mean().scale(-1.0))?;
            let names = ["actor.w1", "actor.b1", "actor.w2", "actor.b2"];
            for ((t, v), name) in self.actor.tensors_mut().into_iter().zip(vars.list()).zip(names) {
                self.actor_opt.step(name, t, &grads.wrt(v), actor_cfg);
            }
        }

        self.actor_target.soft_update(&self.actor, self.cfg.tau);
        self.critic_target.soft_update(&self.critic, self.cfg.tau);
        Ok(loss)
    }
}
