//! Trajectory and per-step record types.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::UnembeddingHead;
use crate::linalg::to_f64;

/// Free-form header annotations, e.g. the toy-model config needed to rebuild
/// the generating model. Ordered so serialization is deterministic.
pub type Notes = BTreeMap<String, serde_json::Value>;

/// A recorded generation: the hidden state `h_t` at each position that
/// produced a realized token `x_t`, together with `p_{x_t}(h_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    hidden: Vec<Vec<f32>>,
    token_ids: Vec<u32>,
    p_realized: Vec<f32>,
    model_id: String,
    context_len: u32,
    head: Option<UnembeddingHead>,
    notes: Notes,
}

impl Trajectory {
    pub fn new(
        model_id: impl Into<String>,
        context_len: u32,
        hidden: Vec<Vec<f32>>,
        token_ids: Vec<u32>,
        p_realized: Vec<f32>,
    ) -> Result<Self> {
        let traj = Self {
            hidden,
            token_ids,
            p_realized,
            model_id: model_id.into(),
            context_len,
            head: None,
            notes: Notes::new(),
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn with_head(mut self, head: UnembeddingHead) -> Result<Self> {
        self.head = Some(head);
        self.validate()?;
        Ok(self)
    }

    pub fn with_notes(mut self, notes: Notes) -> Self {
        self.notes = notes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.hidden.len();
        if t == 0 {
            return Err(Error::InvalidTrajectory(
                "trajectory must have at least one step".into(),
            ));
        }
        if self.token_ids.len() != t || self.p_realized.len() != t {
            return Err(Error::InvalidTrajectory(format!(
                "sequence lengths differ: hidden {t}, token_ids {}, p_realized {}",
                self.token_ids.len(),
                self.p_realized.len()
            )));
        }
        let d = self.hidden[0].len();
        if d == 0 {
            return Err(Error::InvalidTrajectory("hidden dimension must be positive".into()));
        }
        if let Some(bad) = self.hidden.iter().position(|h| h.len() != d) {
            return Err(Error::InvalidTrajectory(format!(
                "hidden state {bad} has dimension {}, expected {d}",
                self.hidden[bad].len()
            )));
        }
        if self.hidden.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hidden states"));
        }
        for (index, &p) in self.p_realized.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::ProbabilityOutOfRange {
                    index,
                    value: f64::from(p),
                });
            }
        }
        if let Some(head) = &self.head {
            if head.hidden_dim() != d {
                return Err(Error::InvalidTrajectory(format!(
                    "head hidden_dim {} does not match hidden states ({d})",
                    head.hidden_dim()
                )));
            }
            if let Some(&id) = self.token_ids.iter().find(|&&id| id as usize >= head.vocab_size()) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: head.vocab_size(),
                });
            }
        }
        Ok(())
    }

    /// Number of recorded steps `T`.
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden[0].len()
    }

    pub fn hidden(&self) -> &[Vec<f32>] {
        &self.hidden
    }

    pub fn hidden_f64(&self, t: usize) -> Vec<f64> {
        to_f64(&self.hidden[t])
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn p_realized(&self) -> &[f32] {
        &self.p_realized
    }

    /// Point perplexity `1 / p_{x_t}(h_t)`.
    pub fn point_perplexity(&self, t: usize) -> f64 {
        1.0 / f64::from(self.p_realized[t])
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn context_len(&self) -> u32 {
        self.context_len
    }

    pub fn head(&self) -> Option<&UnembeddingHead> {
        self.head.as_ref()
    }

    pub fn require_head(&self) -> Result<&UnembeddingHead> {
        self.head.as_ref().ok_or(Error::MissingHead)
    }

    pub fn notes(&self) -> &Notes {
        &self.notes
    }
}

/// Mechanical quantities of one step `t >= 1` (unit mass, so momentum equals
/// velocity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMechanics {
    pub t: usize,
    /// `v_t = h_t - h_{t-1}`
    pub velocity: Vec<f64>,
    /// `|v_t|^2 / 2`
    pub speed_sq_half: f64,
    /// `K_t = ln(|v_t|^2 / 2)`
    pub kinetic: f64,
    /// `V_t = -ln p_{x_t}(h_t)`
    pub potential: f64,
    /// `L_t = K_t - V_t`
    pub lagrangian: f64,
    /// `H_t = K_t + V_t`
    pub log_energy: f64,
    /// `E_t = exp(H_t) = |v_t|^2 / 2 * PPL_t`
    pub energy: f64,
}

/// Conservation and drift statistics over one or more trajectories. All
/// statistics are taken on the log-energy `H_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanicsSummary {
    pub n_steps: usize,
    pub mean_log_e: f64,
    pub global_cv: f64,
    pub avg_traj_cv: f64,
    pub kv_ratio: f64,
    pub mean_drift: f64,
    pub mean_abs_jump: f64,
    pub drift_ratio: f64,
    pub mean_entropy: Option<f64>,
}
