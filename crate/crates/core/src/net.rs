//! Learnable blocks of the consensus pipeline.
//!
//! Every block is defined once as a graph builder over [`Tape`]; the public
//! operations evaluate the same graphs on a scratch tape, so execution and
//! training share one code path. Per-agent data flow for one step:
//!
//! ```text
//! [m_self ∥ obs] ─ gru ─► row 0 ─┐
//! received + pos-encode ─► rows ─┤─► E ─ attention ─► h ─ estimator ─► ê
//!                                               │
//!            obs ─ encoder ─► E_o ──────────────┤
//!            obs ─ weight ──► ϖ ∈ (0,1) ────────┴─► m_next = E_o + ϖ·h
//!                                                        │
//!                                            executor ─► μ ─► action
//! ```

use crate::env::AgentObservation;
use crate::error::Error;
use crate::rng::{seeded, standard_normal, uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_agents: usize,
    /// Message dimension d_m; also the consensus dimension.
    pub d_m: usize,
    /// Positional-encoding dimension.
    pub d_pe: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    /// Exploration std-dev at epoch 0.
    pub sigma_start: f64,
    /// Multiplicative per-epoch decay.
    pub sigma_decay: f64,
    /// Schedule floor.
    pub sigma_min: f64,
}

impl NetConfig {
    pub fn default_for(n_agents: usize) -> Self {
        NetConfig {
            n_agents,
            d_m: 32,
            d_pe: 16,
            n_heads: 4,
            d_hidden: 64,
            sigma_start: 0.5,
            sigma_decay: 0.995,
            sigma_min: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1
            || self.d_m < 1
            || self.d_pe < 1
            || self.n_heads < 1
            || self.d_hidden < 1
        {
            return Err(Error::InvalidConfig("net dimensions must be >= 1".into()));
        }
        if !(self.d_m + self.d_pe).is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_m + d_pe = {} not divisible by n_heads = {}",
                self.d_m + self.d_pe,
                self.n_heads
            )));
        }
        if !(self.sigma_start > 0.0) || !(self.sigma_min > 0.0) || !(self.sigma_decay > 0.0) {
            return Err(Error::InvalidConfig("sigma schedule must stay > 0".into()));
        }
        Ok(())
    }

    /// Width of one embedding-matrix row.
    pub fn embed_dim(&self) -> usize {
        self.d_m + self.d_pe
    }

    /// Global-estimate dimension (matches the flattened global observation).
    pub fn est_dim(&self) -> usize {
        4 * self.n_agents
    }

    /// Flattened local-observation length.
    pub fn obs_dim(&self) -> usize {
        5 * self.n_agents
    }

    /// Trigger net consumes current and held observations concatenated.
    pub fn trigger_in_dim(&self) -> usize {
        2 * self.obs_dim()
    }

    /// Critic consumes the global observation plus every agent's message.
    pub fn critic_in_dim(&self) -> usize {
        4 * self.n_agents + self.n_agents * self.d_m
    }

    pub fn sigma_at(&self, epoch: usize) -> f64 {
        (self.sigma_start * self.sigma_decay.powi(epoch as i32)).max(self.sigma_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        MlpParams {
            w1: init_weight(rng, d_in, d_hidden),
            b1: Tensor::zeros(1, d_hidden),
            w2: init_weight(rng, d_hidden, d_out),
            b2: Tensor::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wz: Tensor,
    pub wr: Tensor,
    pub wn: Tensor,
    pub uz: Tensor,
    pub ur: Tensor,
    pub un: Tensor,
    pub bz: Tensor,
    pub br: Tensor,
    pub bn: Tensor,
}

impl GruParams {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_h: usize) -> Self {
        GruParams {
            wz: init_weight(rng, d_in, d_h),
            wr: init_weight(rng, d_in, d_h),
            wn: init_weight(rng, d_in, d_h),
            uz: init_weight(rng, d_h, d_h),
            ur: init_weight(rng, d_h, d_h),
            un: init_weight(rng, d_h, d_h),
            bz: Tensor::zeros(1, d_h),
            br: Tensor::zeros(1, d_h),
            bn: Tensor::zeros(1, d_h),
        }
    }

    pub fn d_in(&self) -> usize {
        self.wz.rows()
    }

    pub fn d_h(&self) -> usize {
        self.wz.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Down-projection of the attended self row to the consensus dimension.
    pub proj: Tensor,
    pub proj_b: Tensor,
}

impl AttnParams {
    fn init(rng: &mut ChaCha8Rng, d_embed: usize, d_out: usize) -> Self {
        AttnParams {
            wq: init_weight(rng, d_embed, d_embed),
            wk: init_weight(rng, d_embed, d_embed),
            wv: init_weight(rng, d_embed, d_embed),
            wo: init_weight(rng, d_embed, d_embed),
            proj: init_weight(rng, d_embed, d_out),
            proj_b: Tensor::zeros(1, d_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalParams {
    /// Frequencies, one per encoding dimension.
    pub w: Tensor,
}

/// All learnable parameters: the consensus-side set (positional, memory,
/// attention, estimator, trigger), the policy-side set (observation encoder,
/// communication weight, executor), and the centralized critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub pos: PositionalParams,
    pub memory: GruParams,
    pub attn: AttnParams,
    pub estimator: MlpParams,
    pub trigger: MlpParams,
    pub obs_encoder: MlpParams,
    pub comm_weight: MlpParams,
    pub executor: MlpParams,
    pub critic: MlpParams,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| uniform(rng, -scale, scale))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl ParamSet {
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let pos_w = Tensor::row_vec((0..cfg.d_pe).map(|_| uniform(&mut rng, 0.0, 2.0)).collect());
        ParamSet {
            pos: PositionalParams { w: pos_w },
            memory: GruParams::init(&mut rng, cfg.d_m + cfg.obs_dim(), cfg.d_m),
            attn: AttnParams::init(&mut rng, cfg.embed_dim(), cfg.d_m),
            estimator: MlpParams::init(&mut rng, cfg.d_m, cfg.d_hidden, cfg.est_dim()),
            trigger: MlpParams::init(&mut rng, cfg.trigger_in_dim(), cfg.d_hidden, cfg.est_dim()),
            obs_encoder: MlpParams::init(&mut rng, cfg.obs_dim(), cfg.d_hidden, cfg.d_m),
            comm_weight: MlpParams::init(&mut rng, cfg.obs_dim(), cfg.d_hidden, 1),
            executor: MlpParams::init(&mut rng, cfg.d_m, cfg.d_hidden, 2),
            critic: MlpParams::init(&mut rng, cfg.critic_in_dim(), cfg.d_hidden, 1),
        }
    }

    /// All tensors in canonical order; optimizer state, checkpoints, and
    /// gradient extraction rely on this ordering being stable.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("pos.w", &self.pos.w),
            ("memory.wz", &self.memory.wz),
            ("memory.wr", &self.memory.wr),
            ("memory.wn", &self.memory.wn),
            ("memory.uz", &self.memory.uz),
            ("memory.ur", &self.memory.ur),
            ("memory.un", &self.memory.un),
            ("memory.bz", &self.memory.bz),
            ("memory.br", &self.memory.br),
            ("memory.bn", &self.memory.bn),
            ("attn.wq", &self.attn.wq),
            ("attn.wk", &self.attn.wk),
            ("attn.wv", &self.attn.wv),
            ("attn.wo", &self.attn.wo),
            ("attn.proj", &self.attn.proj),
            ("attn.proj_b", &self.attn.proj_b),
            ("estimator.w1", &self.estimator.w1),
            ("estimator.b1", &self.estimator.b1),
            ("estimator.w2", &self.estimator.w2),
            ("estimator.b2", &self.estimator.b2),
            ("trigger.w1", &self.trigger.w1),
            ("trigger.b1", &self.trigger.b1),
            ("trigger.w2", &self.trigger.w2),
            ("trigger.b2", &self.trigger.b2),
            ("obs_encoder.w1", &self.obs_encoder.w1),
            ("obs_encoder.b1", &self.obs_encoder.b1),
            ("obs_encoder.w2", &self.obs_encoder.w2),
            ("obs_encoder.b2", &self.obs_encoder.b2),
            ("comm_weight.w1", &self.comm_weight.w1),
            ("comm_weight.b1", &self.comm_weight.b1),
            ("comm_weight.w2", &self.comm_weight.w2),
            ("comm_weight.b2", &self.comm_weight.b2),
            ("executor.w1", &self.executor.w1),
            ("executor.b1", &self.executor.b1),
            ("executor.w2", &self.executor.w2),
            ("executor.b2", &self.executor.b2),
            ("critic.w1", &self.critic.w1),
            ("critic.b1", &self.critic.b1),
            ("critic.w2", &self.critic.w2),
            ("critic.b2", &self.critic.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("pos.w", &mut self.pos.w),
            ("memory.wz", &mut self.memory.wz),
            ("memory.wr", &mut self.memory.wr),
            ("memory.wn", &mut self.memory.wn),
            ("memory.uz", &mut self.memory.uz),
            ("memory.ur", &mut self.memory.ur),
            ("memory.un", &mut self.memory.un),
            ("memory.bz", &mut self.memory.bz),
            ("memory.br", &mut self.memory.br),
            ("memory.bn", &mut self.memory.bn),
            ("attn.wq", &mut self.attn.wq),
            ("attn.wk", &mut self.attn.wk),
            ("attn.wv", &mut self.attn.wv),
            ("attn.wo", &mut self.attn.wo),
            ("attn.proj", &mut self.attn.proj),
            ("attn.proj_b", &mut self.attn.proj_b),
            ("estimator.w1", &mut self.estimator.w1),
            ("estimator.b1", &mut self.estimator.b1),
            ("estimator.w2", &mut self.estimator.w2),
            ("estimator.b2", &mut self.estimator.b2),
            ("trigger.w1", &mut self.trigger.w1),
            ("trigger.b1", &mut self.trigger.b1),
            ("trigger.w2", &mut self.trigger.w2),
            ("trigger.b2", &mut self.trigger.b2),
            ("obs_encoder.w1", &mut self.obs_encoder.w1),
            ("obs_encoder.b1", &mut self.obs_encoder.b1),
            ("obs_encoder.w2", &mut self.obs_encoder.w2),
            ("obs_encoder.b2", &mut self.obs_encoder.b2),
            ("comm_weight.w1", &mut self.comm_weight.w1),
            ("comm_weight.b1", &mut self.comm_weight.b1),
            ("comm_weight.w2", &mut self.comm_weight.w2),
            ("comm_weight.b2", &mut self.comm_weight.b2),
            ("executor.w1", &mut self.executor.w1),
            ("executor.b1", &mut self.executor.b1),
            ("executor.w2", &mut self.executor.w2),
            ("executor.b2", &mut self.executor.b2),
            ("critic.w1", &mut self.critic.w1),
            ("critic.b1", &mut self.critic.b1),
            ("critic.w2", &mut self.critic.w2),
            ("critic.b2", &mut self.critic.b2),
        ]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Bitwise equality across every tensor.
    pub fn value_equal(&self, other: &ParamSet) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|((_, a), (_, b))| {
                a.rows() == b.rows()
                    && a.cols() == b.cols()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

// ── graph builders ──────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub wr: Var,
    pub wn: Var,
    pub uz: Var,
    pub ur: Var,
    pub un: Var,
    pub bz: Var,
    pub br: Var,
    pub bn: Var,
}

#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub proj: Var,
    pub proj_b: Var,
}

#[derive(Clone, Copy)]
pub struct ParamVars {
    pub pos_w: Var,
    pub memory: GruVars,
    pub attn: AttnVars,
    pub estimator: MlpVars,
    pub trigger: MlpVars,
    pub obs_encoder: MlpVars,
    pub comm_weight: MlpVars,
    pub executor: MlpVars,
    pub critic: MlpVars,
}

impl ParamVars {
    /// Vars in the same canonical order as [`ParamSet::tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        vec![
            self.pos_w,
            self.memory.wz,
            self.memory.wr,
            self.memory.wn,
            self.memory.uz,
            self.memory.ur,
            self.memory.un,
            self.memory.bz,
            self.memory.br,
            self.memory.bn,
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
            self.attn.proj,
            self.attn.proj_b,
            self.estimator.w1,
            self.estimator.b1,
            self.estimator.w2,
            self.estimator.b2,
            self.trigger.w1,
            self.trigger.b1,
            self.trigger.w2,
            self.trigger.b2,
            self.obs_encoder.w1,
            self.obs_encoder.b1,
            self.obs_encoder.w2,
            self.obs_encoder.b2,
            self.comm_weight.w1,
            self.comm_weight.b1,
            self.comm_weight.w2,
            self.comm_weight.b2,
            self.executor.w1,
            self.executor.b1,
            self.executor.w2,
            self.executor.b2,
            self.critic.w1,
            self.critic.b1,
            self.critic.w2,
            self.critic.b2,
        ]
    }
}

pub fn mlp_vars(tape: &mut Tape, p: &MlpParams) -> MlpVars {
    MlpVars {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    }
}

pub fn gru_vars(tape: &mut Tape, p: &GruParams) -> GruVars {
    GruVars {
        wz: tape.leaf(p.wz.clone()),
        wr: tape.leaf(p.wr.clone()),
        wn: tape.leaf(p.wn.clone()),
        uz: tape.leaf(p.uz.clone()),
        ur: tape.leaf(p.ur.clone()),
        un: tape.leaf(p.un.clone()),
        bz: tape.leaf(p.bz.clone()),
        br: tape.leaf(p.br.clone()),
        bn: tape.leaf(p.bn.clone()),
    }
}

pub fn attn_vars(tape: &mut Tape, p: &AttnParams) -> AttnVars {
    AttnVars {
        wq: tape.leaf(p.wq.clone()),
        wk: tape.leaf(p.wk.clone()),
        wv: tape.leaf(p.wv.clone()),
        wo: tape.leaf(p.wo.clone()),
        proj: tape.leaf(p.proj.clone()),
        proj_b: tape.leaf(p.proj_b.clone()),
    }
}

/// Register a full parameter set as tape leaves.
pub fn register_params(tape: &mut Tape, p: &ParamSet) -> ParamVars {
    ParamVars {
        pos_w: tape.leaf(p.pos.w.clone()),
        memory: gru_vars(tape, &p.memory),
        attn: attn_vars(tape, &p.attn),
        estimator: mlp_vars(tape, &p.estimator),
        trigger: mlp_vars(tape, &p.trigger),
        obs_encoder: mlp_vars(tape, &p.obs_encoder),
        comm_weight: mlp_vars(tape, &p.comm_weight),
        executor: mlp_vars(tape, &p.executor),
        critic: mlp_vars(tape, &p.critic),
    }
}

/// Two-layer tanh MLP on a 1 x in row.
pub fn mlp_node(tape: &mut Tape, v: &MlpVars, x: Var) -> Var {
    let pre = tape.matmul(x, v.w1);
    let pre = tape.add(pre, v.b1);
    let act = tape.tanh(pre);
    let out = tape.matmul(act, v.w2);
    tape.add(out, v.b2)
}

/// One gated recurrent cell step; the returned node is both the cell output
/// and the next hidden state.
pub fn gru_node(tape: &mut Tape, v: &GruVars, x: Var, hidden: Var) -> Var {
    let zx = tape.matmul(x, v.wz);
    let zh = tape.matmul(hidden, v.uz);
    let z = tape.add(zx, zh);
    let z = tape.add(z, v.bz);
    let z = tape.sigmoid(z);

    let rx = tape.matmul(x, v.wr);
    let rh = tape.matmul(hidden, v.ur);
    let r = tape.add(rx, rh);
    let r = tape.add(r, v.br);
    let r = tape.sigmoid(r);

    let nx = tape.matmul(x, v.wn);
    let nh = tape.matmul(hidden, v.un);
    let gated = tape.mul(r, nh);
    let n = tape.add(nx, gated);
    let n = tape.add(n, v.bn);
    let n = tape.tanh(n);

    let keep = tape.affine(z, -1.0, 1.0); // 1 - z
    let kept = tape.mul(keep, hidden);
    let new = tape.mul(z, n);
    tape.add(kept, new)
}

/// Cosine positional code of a position's L2 norm: entry k is
/// sqrt(1/D) * cos(w_k * |p|).
pub fn positional_node(tape: &mut Tape, w: Var, p_norm: f64) -> Var {
    let d = tape.value(w).cols() as f64;
    let scaled = tape.affine(w, p_norm, 0.0);
    let c = tape.cos(scaled);
    tape.affine(c, (1.0 / d).sqrt(), 0.0)
}

/// Multi-head self-attention over the embedding rows; the attended self row
/// (row 0) is projected down to the consensus dimension.
pub fn attention_node(tape: &mut Tape, v: &AttnVars, e: Var, n_heads: usize) -> Var {
    let d_embed = tape.value(e).cols();
    assert_eq!(d_embed % n_heads, 0, "embed dim not divisible by heads");
    let d_head = d_embed / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = tape.matmul(e, v.wq);
    let k = tape.matmul(e, v.wk);
    let val = tape.matmul(e, v.wv);

    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let qh = tape.slice_cols(q, hd * d_head, d_head);
        let kh = tape.slice_cols(k, hd * d_head, d_head);
        let vh = tape.slice_cols(val, hd * d_head, d_head);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.affine(scores, scale, 0.0);
        let weights = tape.softmax_rows(scores);
        heads.push(tape.matmul(weights, vh));
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = tape.concat_cols(cat, h);
    }
    let out = tape.matmul(cat, v.wo);
    let row0 = tape.row(out, 0);
    let projected = tape.matmul(row0, v.proj);
    tape.add(projected, v.proj_b)
}

/// Plug-in seam for the aggregation step of the pipeline: reduce the
/// embedding matrix to the 1 x d_m consensus vector. The shipped
/// implementation is [`AttentionAggregator`]; alternative message-fusion
/// backends implement this to reuse the environment, trigger machinery,
/// and trainer unchanged (registering any extra parameters as tape leaves
/// themselves).
pub trait AggregatorNode {
    fn aggregate_node(&self, tape: &mut Tape, e: Var) -> Var;
}

/// Multi-head self-attention backed by a registered parameter set.
pub struct AttentionAggregator {
    pub vars: AttnVars,
    pub n_heads: usize,
}

impl AggregatorNode for AttentionAggregator {
    fn aggregate_node(&self, tape: &mut Tape, e: Var) -> Var {
        attention_node(tape, &self.vars, e, self.n_heads)
    }
}

/// Similarity score between the trigger net's prediction from (current,
/// held) observations and the previous global estimate.
pub fn trigger_score_node(
    tape: &mut Tape,
    trigger: &MlpVars,
    obs_now: Var,
    obs_held: Var,
    e_hat_prev: Var,
) -> Var {
    let joint = tape.concat_cols(obs_now, obs_held);
    let prediction = mlp_node(tape, trigger, joint);
    tape.cosine_sim(prediction, e_hat_prev)
}

/// Per-slot inputs for one agent's pipeline step. `received[0]` is the
/// agent's own current message.
pub struct PipelineInputs<'a> {
    pub obs_flat: &'a [f64],
    /// Presence flag per observation slot.
    pub slot_presence: &'a [f64],
    /// |p| per observation slot (ignored for absent slots).
    pub slot_pos_norms: &'a [f64],
    /// Routed message per slot, exactly zero where nothing arrived.
    pub received: &'a [Vec<f64>],
}

pub struct PipelineNodes {
    /// Memory-embedded self row (also the next hidden state).
    pub embed: Var,
    /// N x (d_m + d_pe) embedding matrix.
    pub e_matrix: Var,
    /// Consensus vector, 1 x d_m.
    pub h: Var,
    /// Global estimate, 1 x 4N.
    pub e_hat: Var,
    /// Message for the next step, 1 x d_m.
    pub m_next: Var,
    /// Action mean within the acceleration bounds, 1 x 2.
    pub mu: Var,
}

/// Build the full consensus pipeline for one agent and step, aggregating
/// through the registered attention parameters.
pub fn pipeline_node(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &NetConfig,
    inp: &PipelineInputs<'_>,
    hidden: Var,
    accel_max: f64,
) -> PipelineNodes {
    let agg = AttentionAggregator {
        vars: pv.attn,
        n_heads: cfg.n_heads,
    };
    pipeline_node_with(tape, pv, cfg, inp, hidden, accel_max, &agg)
}

/// Pipeline with a caller-supplied aggregation backend.
pub fn pipeline_node_with(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &NetConfig,
    inp: &PipelineInputs<'_>,
    hidden: Var,
    accel_max: f64,
    aggregator: &dyn AggregatorNode,
) -> PipelineNodes {
    let n = cfg.n_agents;
    assert_eq!(inp.obs_flat.len(), cfg.obs_dim(), "obs length");
    assert_eq!(inp.received.len(), n, "received slots");
    assert_eq!(inp.slot_presence.len(), n, "presence flags");

    let obs = tape.leaf_row(inp.obs_flat);
    let m_self = tape.leaf_row(&inp.received[0]);

    // self row: memory embedding of [m_self ∥ obs] plus own positional code
    let x = tape.concat_cols(m_self, obs);
    let embed = gru_node(tape, &pv.memory, x, hidden);
    let pos0 = positional_node(tape, pv.pos_w, inp.slot_pos_norms[0]);
    let row0 = tape.concat_cols(embed, pos0);

    let mut rows = vec![row0];
    for j in 1..n {
        if inp.slot_presence[j] > 0.0 {
            let msg = tape.leaf_row(&inp.received[j]);
            let pos = positional_node(tape, pv.pos_w, inp.slot_pos_norms[j]);
            rows.push(tape.concat_cols(msg, pos));
        } else {
            rows.push(tape.leaf(Tensor::zeros(1, cfg.embed_dim())));
        }
    }
    let e_matrix = tape.stack_rows(&rows);

    let h = aggregator.aggregate_node(tape, e_matrix);
    assert_eq!(
        tape.value(h).cols(),
        cfg.d_m,
        "aggregator must produce the consensus dimension"
    );
    let e_hat = mlp_node(tape, &pv.estimator, h);

    let e_obs = mlp_node(tape, &pv.obs_encoder, obs);
    let w_raw = mlp_node(tape, &pv.comm_weight, obs);
    let varpi = tape.sigmoid(w_raw);
    let weighted = tape.mul_scalar(h, varpi);
    let m_next = tape.add(e_obs, weighted);

    let mu_raw = mlp_node(tape, &pv.executor, m_next);
    let squashed = tape.tanh(mu_raw);
    let mu = tape.affine(squashed, accel_max, 0.0);

    PipelineNodes {
        embed,
        e_matrix,
        h,
        e_hat,
        m_next,
        mu,
    }
}

/// Log-density of a 2-D isotropic Gaussian at a fixed point, as a graph node:
/// -|u - mu|^2 / (2 sigma^2) - ln(2 pi sigma^2).
pub fn gaussian_logp_node(tape: &mut Tape, mu: Var, action: [f64; 2], sigma: f64) -> Var {
    let u = tape.leaf_row(&action);
    let diff = tape.sub(u, mu);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    tape.affine(
        s,
        -1.0 / (2.0 * sigma * sigma),
        -(std::f64::consts::TAU * sigma * sigma).ln(),
    )
}

/// Closed-form entropy of the 2-D isotropic Gaussian policy.
pub fn gaussian_entropy_2d(sigma: f64) -> f64 {
    1.0 + (std::f64::consts::TAU * sigma * sigma).ln()
}

// ── spec-level operations (scratch-tape wrappers) ───────────────────

/// Cosine positional encoding of a 2-D position.
pub fn positional_encode(p: [f64; 2], pos: &PositionalParams) -> Vec<f64> {
    let norm = p[0].hypot(p[1]);
    let mut tape = Tape::new();
    let w = tape.leaf(pos.w.clone());
    let out = positional_node(&mut tape, w, norm);
    tape.value(out).data().to_vec()
}

/// One memory-cell step over [m_self ∥ obs]; returns (output, next hidden).
pub fn memory_embed(
    m_self: &[f64],
    obs: &AgentObservation,
    hidden: &[f64],
    memory: &GruParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let obs_flat = obs.flatten();
    let expected = memory.d_in();
    if m_self.len() + obs_flat.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "memory input",
            expected,
            got: m_self.len() + obs_flat.len(),
        });
    }
    if hidden.len() != memory.d_h() {
        return Err(Error::DimensionMismatch {
            what: "memory hidden state",
            expected: memory.d_h(),
            got: hidden.len(),
        });
    }
    let mut tape = Tape::new();
    let v = gru_vars(&mut tape, memory);
    let m = tape.leaf_row(m_self);
    let o = tape.leaf_row(&obs_flat);
    let x = tape.concat_cols(m, o);
    let h = tape.leaf_row(hidden);
    let out = gru_node(&mut tape, &v, x, h);
    let data = tape.value(out).data().to_vec();
    Ok((data.clone(), data))
}

/// Assemble the N x (d_m + d_pe) embedding matrix from the self embedding,
/// the routed slot messages, and slot positions.
pub fn assemble_embedding(
    self_embed: &[f64],
    received: &[Vec<f64>],
    obs: &AgentObservation,
    pos: &PositionalParams,
) -> Tensor {
    let d_pe = pos.w.cols();
    let d_row = self_embed.len() + d_pe;
    let mut tape = Tape::new();
    let w = tape.leaf(pos.w.clone());

    let self_node = tape.leaf_row(self_embed);
    let norm0 = obs.slots[0].pos[0].hypot(obs.slots[0].pos[1]);
    let pos0 = positional_node(&mut tape, w, norm0);
    let row0 = tape.concat_cols(self_node, pos0);

    let mut rows = vec![row0];
    for (slot, msg) in obs.slots.iter().zip(received).skip(1) {
        if slot.presence > 0.0 {
            let m = tape.leaf_row(msg);
            let p = positional_node(&mut tape, w, slot.pos[0].hypot(slot.pos[1]));
            rows.push(tape.concat_cols(m, p));
        } else {
            rows.push(tape.leaf(Tensor::zeros(1, d_row)));
        }
    }
    let e = tape.stack_rows(&rows);
    tape.value(e).clone()
}

/// Attention aggregation of an embedding matrix into the consensus vector.
pub fn aggregate(e: &Tensor, attn: &AttnParams, n_heads: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = attn_vars(&mut tape, attn);
    let e_node = tape.leaf(e.clone());
    let h = attention_node(&mut tape, &v, e_node, n_heads);
    tape.value(h).data().to_vec()
}

/// Decode the consensus vector into a global-observation estimate.
pub fn estimate_global(h: &[f64], estimator: &MlpParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = mlp_vars(&mut tape, estimator);
    let h_node = tape.leaf_row(h);
    let out = mlp_node(&mut tape, &v, h_node);
    tape.value(out).data().to_vec()
}

/// Next-step message: encoded observation plus the sigmoid-squashed
/// communication weight times the consensus vector.
pub fn next_message(
    obs: &AgentObservation,
    h: &[f64],
    obs_encoder: &MlpParams,
    comm_weight: &MlpParams,
) -> Vec<f64> {
    let obs_flat = obs.flatten();
    let mut tape = Tape::new();
    let enc = mlp_vars(&mut tape, obs_encoder);
    let wgt = mlp_vars(&mut tape, comm_weight);
    let o = tape.leaf_row(&obs_flat);
    let e_obs = mlp_node(&mut tape, &enc, o);
    let w_raw = mlp_node(&mut tape, &wgt, o);
    let varpi = tape.sigmoid(w_raw);
    let h_node = tape.leaf_row(h);
    let weighted = tape.mul_scalar(h_node, varpi);
    let m = tape.add(e_obs, weighted);
    tape.value(m).data().to_vec()
}

/// The communication weight alone, squashed into (0, 1).
pub fn comm_weight_value(obs: &AgentObservation, comm_weight: &MlpParams) -> f64 {
    let obs_flat = obs.flatten();
    let mut tape = Tape::new();
    let wgt = mlp_vars(&mut tape, comm_weight);
    let o = tape.leaf_row(&obs_flat);
    let w_raw = mlp_node(&mut tape, &wgt, o);
    let v = tape.sigmoid(w_raw);
    tape.scalar(v)
}

/// Sample an action around the executor mean. `deterministic` takes the
/// sigma -> 0 limit (evaluation mode) where the action is exactly the mean.
/// The log-probability is the untruncated Gaussian density at the returned
/// (range-clamped) action.
pub fn act(
    m_next: &[f64],
    executor: &MlpParams,
    sigma: f64,
    accel_max: f64,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> (crate::env::Action, f64, [f64; 2]) {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut tape = Tape::new();
    let v = mlp_vars(&mut tape, executor);
    let m = tape.leaf_row(m_next);
    let raw = mlp_node(&mut tape, &v, m);
    let squashed = tape.tanh(raw);
    let mu_node = tape.affine(squashed, accel_max, 0.0);
    let mu = [tape.value(mu_node).at(0, 0), tape.value(mu_node).at(0, 1)];

    let u = if deterministic {
        mu
    } else {
        [
            (mu[0] + sigma * standard_normal(rng)).clamp(-accel_max, accel_max),
            (mu[1] + sigma * standard_normal(rng)).clamp(-accel_max, accel_max),
        ]
    };
    let log_prob = gaussian_logp(u, mu, sigma);
    (crate::env::Action { accel: u }, log_prob, mu)
}

/// Log-density of the 2-D isotropic Gaussian.
pub fn gaussian_logp(u: [f64; 2], mu: [f64; 2], sigma: f64) -> f64 {
    let d2 = (u[0] - mu[0]).powi(2) + (u[1] - mu[1]).powi(2);
    -d2 / (2.0 * sigma * sigma) - (std::f64::consts::TAU * sigma * sigma).ln()
}

/// Similarity between the trigger net's prediction and the previous global
/// estimate; 0 when either side is degenerate.
pub fn trigger_score(
    obs_now: &AgentObservation,
    obs_held: &AgentObservation,
    e_hat_prev: &[f64],
    trigger: &MlpParams,
) -> f64 {
    let mut tape = Tape::new();
    let v = mlp_vars(&mut tape, trigger);
    let now = tape.leaf_row(&obs_now.flatten());
    let held = tape.leaf_row(&obs_held.flatten());
    let prev = tape.leaf_row(e_hat_prev);
    let kappa = trigger_score_node(&mut tape, &v, now, held, prev);
    tape.scalar(kappa)
}

/// Centralized value estimate from the global observation plus all messages.
pub fn critic_value(global_input: &[f64], critic: &MlpParams) -> Result<f64> {
    if global_input.len() != critic.d_in() {
        return Err(Error::DimensionMismatch {
            what: "critic input",
            expected: critic.d_in(),
            got: global_input.len(),
        });
    }
    let mut tape = Tape::new();
    let v = mlp_vars(&mut tape, critic);
    let x = tape.leaf_row(global_input);
    let out = mlp_node(&mut tape, &v, x);
    Ok(tape.scalar(out))
}
