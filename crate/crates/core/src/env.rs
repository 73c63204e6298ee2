//! Particle-world formation control environment.
//!
//! N point agents with double-integrator dynamics steer toward a formation
//! template anchored at a destination point. Each agent observes itself plus
//! its in-range neighbors sorted by distance; the shared reward mixes a task
//! term with a per-step communication penalty.

use crate::error::Error;
use crate::rng::{seeded, uniform};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of agents (N).
    pub n_agents: usize,
    /// Maximum observation/communication range in meters.
    pub comm_range: f64,
    /// Formation destination point in meters.
    pub destination: [f64; 2],
    /// Initial positions are sampled uniformly from this interval squared.
    pub init_pos_range: [f64; 2],
    /// Per-component acceleration bounds in m/s^2, symmetric about zero.
    pub accel_range: [f64; 2],
    /// Integration step in seconds.
    pub dt: f64,
    /// Episode length in steps (T).
    pub episode_len: usize,
    /// (task weight, communication-penalty weight).
    pub reward_weights: [f64; 2],
    /// Per-agent offsets from the formation centroid; exactly N entries.
    pub formation_offsets: Vec<[f64; 2]>,
    /// Two agents closer than this count as colliding.
    pub collision_radius: f64,
    /// Per-component speed cap in m/s.
    pub velocity_cap: f64,
}

impl EnvConfig {
    /// Defaults: N=7 agents, 3 m range, destination (0, 10), positions in
    /// [-2, 2]^2, accelerations in [-0.5, 0.5], reward weights (1, 0.1),
    /// dt=0.1 s, 50-step episodes, regular-heptagon formation of
    /// circumradius 1 m.
    pub fn default_seven() -> Self {
        Self::for_agents(7)
    }

    /// Same defaults with a regular N-gon formation template.
    pub fn for_agents(n_agents: usize) -> Self {
        EnvConfig {
            n_agents,
            comm_range: 3.0,
            destination: [0.0, 10.0],
            init_pos_range: [-2.0, 2.0],
            accel_range: [-0.5, 0.5],
            dt: 0.1,
            episode_len: 50,
            reward_weights: [1.0, 0.1],
            formation_offsets: regular_polygon(n_agents, 1.0),
            collision_radius: 0.2,
            velocity_cap: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::InvalidConfig("n_agents must be >= 2".into()));
        }
        if !(self.comm_range > 0.0) {
            return Err(Error::InvalidConfig("comm_range must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        if self.accel_range[0] != -self.accel_range[1] || !(self.accel_range[1] > 0.0) {
            return Err(Error::InvalidConfig(
                "accel_range must be symmetric about 0".into(),
            ));
        }
        if self.init_pos_range[0] > self.init_pos_range[1] {
            return Err(Error::InvalidConfig("init_pos_range inverted".into()));
        }
        if self.formation_offsets.len() != self.n_agents {
            return Err(Error::InvalidConfig(format!(
                "formation_offsets has {} entries for {} agents",
                self.formation_offsets.len(),
                self.n_agents
            )));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidConfig("episode_len must be >= 1".into()));
        }
        if !(self.velocity_cap > 0.0) {
            return Err(Error::InvalidConfig("velocity_cap must be > 0".into()));
        }
        if self.collision_radius < 0.0 {
            return Err(Error::InvalidConfig("collision_radius negative".into()));
        }
        Ok(())
    }

    /// Length of the flattened global observation: (p, v) per agent.
    pub fn global_obs_dim(&self) -> usize {
        4 * self.n_agents
    }

    /// Length of one flattened local observation: (p, v, presence) per slot.
    pub fn local_obs_dim(&self) -> usize {
        5 * self.n_agents
    }
}

/// Vertices of a regular polygon, centroid at the origin.
pub fn regular_polygon(n: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / n as f64;
            [radius * theta.cos(), radius * theta.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    /// Step index, 0 at reset.
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel: [f64; 2],
}

/// One observation slot: slot 0 is the observer itself, later slots are
/// neighbors in ascending distance order. Absent slots are zero-filled with
/// presence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSlot {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub presence: f64,
    /// Index of the agent occupying this slot, if any.
    pub agent: Option<usize>,
}

impl ObsSlot {
    pub fn empty() -> Self {
        ObsSlot {
            pos: [0.0; 2],
            vel: [0.0; 2],
            presence: 0.0,
            agent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub slots: Vec<ObsSlot>,
}

impl AgentObservation {
    /// All-absent observation (used to seed zero-order-hold memory).
    pub fn zeros(n_agents: usize) -> Self {
        AgentObservation {
            slots: vec![ObsSlot::empty(); n_agents],
        }
    }

    /// Flatten to [p, v, presence] per slot; length 5N.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.slots.len() * 5);
        for s in &self.slots {
            out.extend_from_slice(&s.pos);
            out.extend_from_slice(&s.vel);
            out.push(s.presence);
        }
        out
    }
}

/// Initial state: positions i.i.d. uniform in `init_pos_range`^2, velocities
/// zero, clock at 0. Deterministic in the seed.
pub fn reset(config: &EnvConfig, seed: u64) -> WorldState {
    let mut rng = seeded(seed);
    let [lo, hi] = config.init_pos_range;
    let positions = (0..config.n_agents)
        .map(|_| {
            let x = uniform(&mut rng, lo, hi);
            let y = uniform(&mut rng, lo, hi);
            [x, y]
        })
        .collect();
    WorldState {
        positions,
        velocities: vec![[0.0; 2]; config.n_agents],
        t: 0,
    }
}

/// Semi-implicit Euler step plus the weighted reward. `n_triggers` is the
/// number of agents that transmitted this step.
pub fn step(
    state: &WorldState,
    actions: &[Action],
    n_triggers: usize,
    config: &EnvConfig,
) -> Result<(WorldState, f64, bool)> {
    if actions.len() != config.n_agents {
        return Err(Error::DimensionMismatch {
            what: "actions",
            expected: config.n_agents,
            got: actions.len(),
        });
    }
    let [lo, hi] = config.accel_range;
    for (i, a) in actions.iter().enumerate() {
        for (c, &u) in a.accel.iter().enumerate() {
            if !(lo..=hi).contains(&u) || !u.is_finite() {
                return Err(Error::ActionOutOfRange {
                    agent: i,
                    component: c,
                    value: u,
                    lo,
                    hi,
                });
            }
        }
    }
    assert!(state.t < config.episode_len, "step past episode end");

    let cap = config.velocity_cap;
    let mut next = state.clone();
    for i in 0..config.n_agents {
        for c in 0..2 {
            let v = (state.velocities[i][c] + actions[i].accel[c] * config.dt).clamp(-cap, cap);
            next.velocities[i][c] = v;
            next.positions[i][c] = state.positions[i][c] + v * config.dt;
        }
    }
    next.t = state.t + 1;

    let [w_task, w_comm] = config.reward_weights;
    let comm_penalty = -(n_triggers as f64) / config.n_agents as f64;
    let reward = w_task * task_reward(&next, config) + w_comm * comm_penalty;
    let done = next.t == config.episode_len;
    Ok((next, reward, done))
}

/// Task term: formation-offset error plus normalized centroid-to-destination
/// distance plus a pairwise collision count, all negated.
pub fn task_reward(state: &WorldState, config: &EnvConfig) -> f64 {
    let n = config.n_agents as f64;
    let mut centroid = [0.0; 2];
    for p in &state.positions {
        centroid[0] += p[0] / n;
        centroid[1] += p[1] / n;
    }

    let mut formation = 0.0;
    for (p, off) in state.positions.iter().zip(&config.formation_offsets) {
        let dx = (p[0] - centroid[0]) - off[0];
        let dy = (p[1] - centroid[1]) - off[1];
        formation += (dx * dx + dy * dy).sqrt() / n;
    }

    let dest = config.destination;
    let dist = ((centroid[0] - dest[0]).powi(2) + (centroid[1] - dest[1]).powi(2)).sqrt();
    let dest_norm = (dest[0] * dest[0] + dest[1] * dest[1]).sqrt();
    let navigation = if dest_norm > 0.0 {
        dist / dest_norm
    } else {
        dist
    };

    let mut collisions = 0.0;
    for i in 0..config.n_agents {
        for j in (i + 1)..config.n_agents {
            if distance(state.positions[i], state.positions[j]) < config.collision_radius {
                collisions += 1.0;
            }
        }
    }

    -formation - navigation - collisions
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Local observation of `agent`: self slot first, then neighbors within
/// `comm_range` by ascending distance (ties by agent index), zero-filled
/// beyond range.
pub fn observe(state: &WorldState, agent: usize, config: &EnvConfig) -> AgentObservation {
    assert!(agent < config.n_agents, "agent index out of range");
    let mut slots = vec![ObsSlot::empty(); config.n_agents];
    slots[0] = ObsSlot {
        pos: state.positions[agent],
        vel: state.velocities[agent],
        presence: 1.0,
        agent: Some(agent),
    };

    let mut neighbors: Vec<(f64, usize)> = (0..config.n_agents)
        .filter(|&j| j != agent)
        .map(|j| (distance(state.positions[agent], state.positions[j]), j))
        .filter(|&(d, _)| d < config.comm_range)
        .collect();
    neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    for (slot, &(_, j)) in slots.iter_mut().skip(1).zip(&neighbors) {
        *slot = ObsSlot {
            pos: state.positions[j],
            vel: state.velocities[j],
            presence: 1.0,
            agent: Some(j),
        };
    }
    AgentObservation { slots }
}

/// Concatenated (p, v) of every agent in index order; length 4N.
pub fn global_observe(state: &WorldState) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * state.positions.len());
    for (p, v) in state.positions.iter().zip(&state.velocities) {
        out.extend_from_slice(p);
        out.extend_from_slice(v);
    }
    out
}

/// Inverse of [`global_observe`]; used by round-trip checks.
pub fn parse_global(flat: &[f64]) -> Result<WorldState> {
    if !flat.len().is_multiple_of(4) || flat.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "global observation",
            expected: 4,
            got: flat.len(),
        });
    }
    let n = flat.len() / 4;
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for i in 0..n {
        positions.push([flat[4 * i], flat[4 * i + 1]]);
        velocities.push([flat[4 * i + 2], flat[4 * i + 3]]);
    }
    Ok(WorldState {
        positions,
        velocities,
        t: 0,
    })
}
