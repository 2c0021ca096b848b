//! Query-rotation controller.
//!
//! At the end of an epoch the controller measures how differently the query
//! aligns with the average keys of the two modalities (the attention
//! imbalance rate, AIR). When the imbalance is at least `beta` it rotates the
//! query onto a rebalancing anchor that leans towards the under-attended
//! modality:
//!
//! ```text
//! AIR   = mean_i(cos(q_i, k̂a_i) − cos(q_i, k̂v_i))          ∈ [−2, 2]
//! alpha = ½·(1 + tanh(−rho·AIR))
//! u     = alpha·unit(E[k̂a]) + (1 − alpha)·unit(E[k̂v])
//! q_b   = unit(u)·‖E[q]‖
//! R_b   : unit(E[q])·R_b = unit(q_b)
//! R     ← R·R_b
//! ```
//!
//! The rotation is a constant re-parameterization: it changes where the query
//! points, never any trainable parameter.

use crate::error::{Error, Result};
use crate::fusion::{FusionForwardTrace, FusionParams, Modality};
use crate::linalg::{cosine_similarity, matmul, plane_rotation_from_pair, Matrix, Vector, DEGENERATE_NORM};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RollingQConfig {
    pub rho: f64,
    pub beta: f64,
    pub max_rotations: usize,
}

impl Default for RollingQConfig {
    fn default() -> Self {
        RollingQConfig {
            rho: 1.0,
            beta: 0.5,
            max_rotations: 3,
        }
    }
}

impl RollingQConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Batch statistics of the query and the per-sample average keys.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchKeyStats {
    pub mean_avg_key_a: Vector,
    pub mean_avg_key_v: Vector,
    pub mean_query: Vector,
    pub mean_cos_a: f64,
    pub mean_cos_v: f64,
    pub air: f64,
    pub samples: usize,
}

impl BatchKeyStats {
    pub fn mean_avg_key(&self, m: Modality) -> &Vector {
        match m {
            Modality::A => &self.mean_avg_key_a,
            Modality::V => &self.mean_avg_key_v,
        }
    }
}

/// Streaming accumulator behind [`compute_batch_stats`]; also used to average
/// over a whole epoch.
#[derive(Clone, Debug, Default)]
pub struct KeyStatsAccumulator {
    sum_key_a: Option<Vector>,
    sum_key_v: Option<Vector>,
    sum_query: Option<Vector>,
    sum_cos_a: f64,
    sum_cos_v: f64,
    sum_diff: f64,
    count: usize,
}

fn accumulate(slot: &mut Option<Vector>, v: &Vector) {
    match slot {
        Some(acc) => acc.axpy(1.0, v),
        None => *slot = Some(v.clone()),
    }
}

impl KeyStatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trace: &FusionForwardTrace) -> Result<()> {
        let ka = trace.average_key(Modality::A);
        let kv = trace.average_key(Modality::V);
        let cos_a = cosine_similarity(&trace.query, &ka)?;
        let cos_v = cosine_similarity(&trace.query, &kv)?;
        accumulate(&mut self.sum_key_a, &ka);
        accumulate(&mut self.sum_key_v, &kv);
        accumulate(&mut self.sum_query, &trace.query);
        self.sum_cos_a += cos_a;
        self.sum_cos_v += cos_v;
        self.sum_diff += cos_a - cos_v;
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn finish(&self) -> Result<BatchKeyStats> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("key statistics need at least one sample".into()));
        }
        let n = self.count as f64;
        let mean = |v: &Option<Vector>| v.as_ref().expect("nonempty").scaled(1.0 / n);
        Ok(BatchKeyStats {
            mean_avg_key_a: mean(&self.sum_key_a),
            mean_avg_key_v: mean(&self.sum_key_v),
            mean_query: mean(&self.sum_query),
            mean_cos_a: self.sum_cos_a / n,
            mean_cos_v: self.sum_cos_v / n,
            air: (self.sum_diff / n).clamp(-2.0, 2.0),
            samples: self.count,
        })
    }
}

pub fn compute_batch_stats(traces: &[FusionForwardTrace]) -> Result<BatchKeyStats> {
    let mut acc = KeyStatsAccumulator::new();
    for t in traces {
        acc.push(t)?;
    }
    acc.finish()
}

pub fn compute_alpha(air: f64, rho: f64) -> f64 {
    0.5 * (1.0 + (-rho * air).tanh())
}

/// Rebalancing anchor: the alpha-blend of the two unit mean keys, rescaled
/// to the norm of the mean query.
pub fn compute_anchor(stats: &BatchKeyStats, alpha: f64) -> Result<Vector> {
    let ka = stats.mean_avg_key_a.unit("mean average key of a")?;
    let kv = stats.mean_avg_key_v.unit("mean average key of v")?;
    let q_norm = stats.mean_query.norm();
    if q_norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateVector("mean query"));
    }
    let mut blend = ka.scaled(alpha);
    blend.axpy(1.0 - alpha, &kv);
    let n = blend.norm();
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateAnchor);
    }
    Ok(blend.scaled(q_norm / n))
}

pub fn compute_rotation(stats: &BatchKeyStats, anchor: &Vector) -> Result<Matrix> {
    plane_rotation_from_pair(&stats.mean_query, anchor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControllerState {
    pub rotations_used: usize,
    pub air_history: Vec<(usize, f64)>,
}

/// What the controller did at one invocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerEvent {
    pub epoch: usize,
    pub air: f64,
    pub alpha: Option<f64>,
    pub rotation_applied: bool,
}

/// One end-of-epoch controller invocation. Only `fusion.rotation` can change.
pub fn controller_step(
    state: &mut ControllerState,
    config: &RollingQConfig,
    stats: &BatchKeyStats,
    fusion: &mut FusionParams,
    epoch: usize,
) -> Result<ControllerEvent> {
    state.air_history.push((epoch, stats.air));
    let mut event = ControllerEvent {
        epoch,
        air: stats.air,
        alpha: None,
        rotation_applied: false,
    };
    if stats.air.abs() < config.beta || state.rotations_used >= config.max_rotations {
        return Ok(event);
    }
    let alpha = compute_alpha(stats.air, config.rho);
    let anchor = compute_anchor(stats, alpha)?;
    let step = compute_rotation(stats, &anchor)?;
    fusion.rotation = matmul(&fusion.rotation, &step)?;
    state.rotations_used += 1;
    event.alpha = Some(alpha);
    event.rotation_applied = true;
    Ok(event)
}
