//! Distance-gated adjacency, event-trigger decisions, zero-order-hold
//! memory, message routing with exact zero-fill, and volume accounting.

use crate::env::AgentObservation;
use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] == 1
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// A(i,j) = 1 iff the pair is strictly within `comm_range`; the diagonal is
/// always 1 (an agent is its own neighbor).
pub fn build_adjacency(positions: &[[f64; 2]], comm_range: f64) -> AdjacencyMatrix {
    let n = positions.len();
    let mut entries = vec![0u8; n * n];
    for i in 0..n {
        entries[i * n + i] = 1;
        for j in (i + 1)..n {
            let d = (positions[i][0] - positions[j][0]).hypot(positions[i][1] - positions[j][1]);
            if d < comm_range {
                entries[i * n + j] = 1;
                entries[j * n + i] = 1;
            }
        }
    }
    AdjacencyMatrix { n, entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "VALID")]
    Valid,
    #[serde(rename = "VOID")]
    Void,
}

impl Decision {
    pub fn is_valid(self) -> bool {
        self == Decision::Valid
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Valid => write!(f, "VALID"),
            Decision::Void => write!(f, "VOID"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Threshold scale c > 0.
    pub c: f64,
    /// Per-step decay factor, 0 < zeta < 1.
    pub zeta: f64,
    /// Broadcast unconditionally at t = 0 to bootstrap consensus; without it
    /// the similarity score starts at 0 and no message ever flows.
    pub force_first_step: bool,
    /// Study switch: transmit when the score falls *below* the threshold
    /// instead of above it. Off by default.
    pub invert_rule: bool,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            c: 0.9,
            zeta: 0.99,
            force_first_step: true,
            invert_rule: false,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidConfig("trigger c must be > 0".into()));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidConfig("trigger zeta must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Time-decaying threshold c * zeta^t.
pub fn threshold(t: usize, cfg: &TriggerConfig) -> f64 {
    cfg.c * cfg.zeta.powi(t as i32)
}

/// Transmit when the similarity score exceeds the decaying threshold
/// (strictly); `force_first_step` overrides at t = 0.
pub fn trigger_decision(kappa: f64, t: usize, cfg: &TriggerConfig) -> Decision {
    if cfg.force_first_step && t == 0 {
        return Decision::Valid;
    }
    let thr = threshold(t, cfg);
    let fire = if cfg.invert_rule {
        kappa < thr
    } else {
        kappa > thr
    };
    if fire {
        Decision::Valid
    } else {
        Decision::Void
    }
}

/// Per-agent event history plus the observation held since the last trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub trigger_times: Vec<usize>,
    pub last_trigger: Option<usize>,
    pub held_obs: Option<AgentObservation>,
}

impl TriggerRecord {
    pub fn new() -> Self {
        TriggerRecord {
            trigger_times: Vec::new(),
            last_trigger: None,
            held_obs: None,
        }
    }

    /// Held observation, or the all-absent observation before any trigger.
    pub fn held_or_zero(&self, n_agents: usize) -> AgentObservation {
        self.held_obs
            .clone()
            .unwrap_or_else(|| AgentObservation::zeros(n_agents))
    }
}

impl Default for TriggerRecord {
    fn default() -> Self {
        Self::new()
    }
}

/// On VALID, record the trigger time and overwrite the held observation; on
/// VOID the record is unchanged (zero-order hold).
pub fn zoh_update(
    rec: &TriggerRecord,
    obs: &AgentObservation,
    decision: Decision,
    t: usize,
) -> TriggerRecord {
    if let Some(last) = rec.last_trigger {
        assert!(t > last, "zoh_update must move forward in time");
    }
    match decision {
        Decision::Void => rec.clone(),
        Decision::Valid => {
            let mut times = rec.trigger_times.clone();
            times.push(t);
            TriggerRecord {
                trigger_times: times,
                last_trigger: Some(t),
                held_obs: Some(obs.clone()),
            }
        }
    }
}

/// One step of routed communication: what everyone offered to send, who
/// actually transmitted, and what each receiver's slots contain.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageFrame {
    pub sent: Vec<Vec<f64>>,
    pub valid: Vec<Decision>,
    /// `received_slots[i][j]` aligns with receiver i's observation slot j;
    /// exactly zero where the sender was VOID, out of range, or absent.
    pub received_slots: Vec<Vec<Vec<f64>>>,
}

impl MessageFrame {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|d| d.is_valid()).count()
    }
}

/// Receiver i's slot j carries sender i_j's message iff that sender fired
/// VALID and is adjacent; the self slot always carries the agent's own
/// message. Everything else is the zero vector.
pub fn route(
    sent: &[Vec<f64>],
    valid: &[Decision],
    adjacency: &AdjacencyMatrix,
    observations: &[AgentObservation],
) -> Result<MessageFrame> {
    let n = adjacency.n();
    if sent.len() != n {
        return Err(Error::DimensionMismatch {
            what: "sent messages",
            expected: n,
            got: sent.len(),
        });
    }
    if valid.len() != n {
        return Err(Error::DimensionMismatch {
            what: "trigger decisions",
            expected: n,
            got: valid.len(),
        });
    }
    if observations.len() != n {
        return Err(Error::DimensionMismatch {
            what: "observations",
            expected: n,
            got: observations.len(),
        });
    }
    let d_m = sent.first().map(|m| m.len()).unwrap_or(0);
    for m in sent {
        if m.len() != d_m {
            return Err(Error::DimensionMismatch {
                what: "message dimension",
                expected: d_m,
                got: m.len(),
            });
        }
    }

    let mut received_slots = Vec::with_capacity(n);
    for (i, obs) in observations.iter().enumerate() {
        let mut slots = vec![vec![0.0; d_m]; obs.slots.len()];
        slots[0] = sent[i].clone();
        for (j, slot) in obs.slots.iter().enumerate().skip(1) {
            if let Some(sender) = slot.agent {
                if valid[sender].is_valid() && adjacency.get(i, sender) {
                    slots[j] = sent[sender].clone();
                }
            }
        }
        received_slots.push(slots);
    }
    Ok(MessageFrame {
        sent: sent.to_vec(),
        valid: valid.to_vec(),
        received_slots,
    })
}

/// Running totals of scalars put on the wire and consensus scalars
/// materialized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeCounter {
    pub message_volume: u64,
    pub consensus_volume: u64,
}

impl VolumeCounter {
    pub fn new() -> Self {
        VolumeCounter::default()
    }
}

/// Charge one step: every VALID sender pays `d_m` message scalars, and each
/// of the `n_consensus` consensus vectors materialized pays `d_h` scalars.
pub fn account(
    frame: &MessageFrame,
    counter: VolumeCounter,
    d_m: usize,
    d_h: usize,
    n_consensus: usize,
) -> VolumeCounter {
    VolumeCounter {
        message_volume: counter.message_volume + (frame.n_valid() * d_m) as u64,
        consensus_volume: counter.consensus_volume + (n_consensus * d_h) as u64,
    }
}

/// One JSONL row of the per-step trigger log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerLogRow {
    pub t: usize,
    pub agent: usize,
    pub kappa: f64,
    pub threshold: f64,
    pub decision: Decision,
}
