//! Loss kernels for pose-with-uncertainty and BEV prediction, with analytic
//! gradients for the uncertainty terms.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bev::{BevError, BevGrid};
use crate::estimator::{NodeId, PoseEstimate};
use crate::geometry::{Pose, UnitQuat};

/// Predicted variances are clamped to at least this value before use.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// BCE clamps predictions into `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;
/// Soft-Dice smoothing.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("weight {name} = {value} outside [0, 1]")]
    BadWeight { name: &'static str, value: f64 },
    #[error("no estimate for edge {0} -> {1}")]
    MissingEdge(NodeId, NodeId),
    #[error("no ground truth for edge {0} -> {1}")]
    MissingTruth(NodeId, NodeId),
    #[error(transparent)]
    Grid(#[from] BevError),
}

/// One scalar Gaussian negative log-likelihood term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnllTerm {
    pub mu: f64,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
}

impl GnllTerm {
    pub fn new(mu: f64, mu_hat: f64, sigma2_hat: f64) -> Result<Self, LossError> {
        if !mu.is_finite() || !mu_hat.is_finite() {
            return Err(LossError::NonFinite);
        }
        if !(sigma2_hat > 0.0) || !sigma2_hat.is_finite() {
            return Err(LossError::NonPositiveVariance(sigma2_hat));
        }
        Ok(Self { mu, mu_hat, sigma2_hat })
    }

    /// True when the variance is at or below the floor and gets clamped.
    pub fn is_clamped(&self) -> bool {
        self.sigma2_hat <= VARIANCE_FLOOR
    }

    fn variance(&self) -> f64 {
        self.sigma2_hat.max(VARIANCE_FLOOR)
    }
}

/// `0.5 * (ln s2 + (mu_hat - mu)^2 / s2)`
pub fn gnll(term: &GnllTerm) -> f64 {
    let s2 = term.variance();
    let r = term.mu_hat - term.mu;
    0.5 * (s2.ln() + r * r / s2)
}

/// Partial derivatives of [`gnll`] with respect to `mu_hat` and `sigma2_hat`.
pub fn gnll_grad(term: &GnllTerm) -> (f64, f64) {
    let s2 = term.variance();
    let r = term.mu_hat - term.mu;
    (r / s2, 0.5 * (1.0 / s2 - r * r / (s2 * s2)))
}

fn check_variance(sigma2: f64) -> Result<f64, LossError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(LossError::NonPositiveVariance(sigma2));
    }
    Ok(sigma2.max(VARIANCE_FLOOR))
}

/// Squared chordal distance `min(|q - q_hat|^2, |q + q_hat|^2)` on raw 4-vectors,
/// together with the sign that achieved the minimum.
fn d2_raw(q: &[f64; 4], q_hat: &[f64; 4]) -> (f64, f64) {
    let mut minus = 0.0;
    let mut plus = 0.0;
    for k in 0..4 {
        minus += (q[k] - q_hat[k]).powi(2);
        plus += (q[k] + q_hat[k]).powi(2);
    }
    if minus <= plus {
        (minus, 1.0)
    } else {
        (plus, -1.0)
    }
}

/// `2 d^2 (4 - d^2)` with `d` the chordal quaternion distance; in `[0, 8]`.
pub fn chord_sq(q: &UnitQuat, q_hat: &UnitQuat) -> f64 {
    let (d2, _) = d2_raw(&q.to_array(), &q_hat.to_array());
    2.0 * d2 * (4.0 - d2)
}

/// Rotation GNLL: `0.5 * (ln s2 + chord_sq / s2)`.
pub fn chord_gnll(q: &UnitQuat, q_hat: &UnitQuat, sigma2_hat: f64) -> Result<f64, LossError> {
    let s2 = check_variance(sigma2_hat)?;
    Ok(0.5 * (s2.ln() + chord_sq(q, q_hat) / s2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordGnllGrad {
    /// Gradient with respect to the raw components of `q_hat`, projected onto
    /// the tangent space of the unit sphere at `q_hat`.
    pub d_q_hat: [f64; 4],
    pub d_sigma2_hat: f64,
}

pub fn chord_gnll_grad(q: &UnitQuat, q_hat: &UnitQuat, sigma2_hat: f64) -> Result<ChordGnllGrad, LossError> {
    let s2 = check_variance(sigma2_hat)?;
    let qa = q.to_array();
    let qh = q_hat.to_array();
    let (d2, sign) = d2_raw(&qa, &qh);
    let l = 2.0 * d2 * (4.0 - d2);
    // dL/d(d2) = 8 - 4 d2 ; d(d2)/dq_hat = 2 (q_hat - sign q)
    let scale = (8.0 - 4.0 * d2) / (2.0 * s2);
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = scale * 2.0 * (qh[k] - sign * qa[k]);
    }
    let radial: f64 = (0..4).map(|k| g[k] * qh[k]).sum();
    for k in 0..4 {
        g[k] -= radial * qh[k];
    }
    Ok(ChordGnllGrad { d_q_hat: g, d_sigma2_hat: 0.5 * (1.0 / s2 - l / (s2 * s2)) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Dice share of the BEV combo loss.
    pub alpha: f64,
    /// Rotation share of the pose loss.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LossError> {
        for (name, value) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0 }
    }
}

/// Soft Dice loss `1 - (2 sum(t p) + eps) / (sum t + sum p + eps)`.
pub fn dice_loss(truth: &BevGrid, pred: &BevGrid) -> Result<f64, LossError> {
    truth.same_shape(pred)?;
    let (mut tp, mut st, mut sp) = (0.0f64, 0.0f64, 0.0f64);
    for (&t, &p) in truth.cells().iter().zip(pred.cells()) {
        let (t, p) = (t as f64, p as f64);
        tp += t * p;
        st += t;
        sp += p;
    }
    Ok(1.0 - (2.0 * tp + DICE_EPS) / (st + sp + DICE_EPS))
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss(truth: &BevGrid, pred: &BevGrid) -> Result<f64, LossError> {
    truth.same_shape(pred)?;
    let n = truth.cells().len() as f64;
    let sum: f64 = truth
        .cells()
        .iter()
        .zip(pred.cells())
        .map(|(&t, &p)| {
            let (t, p) = (t as f64, (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS));
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / n)
}

pub fn combo_loss(truth: &BevGrid, pred: &BevGrid, w: &LossWeights) -> Result<f64, LossError> {
    Ok(w.alpha * dice_loss(truth, pred)? + (1.0 - w.alpha) * bce_loss(truth, pred)?)
}

/// Per-axis position GNLL summed over x, y, z.
pub fn position_gnll(truth: &Pose, est: &PoseEstimate) -> Result<f64, LossError> {
    let t = truth.position.to_array();
    let p = est.p_hat.to_array();
    let s = est.sigma_p.to_array();
    let mut sum = 0.0;
    for k in 0..3 {
        sum += gnll(&GnllTerm::new(t[k], p[k], s[k] * s[k])?);
    }
    Ok(sum)
}

/// `(1 - beta) * position GNLL + beta * rotation chordal GNLL`.
pub fn pose_loss(truth: &Pose, est: &PoseEstimate, w: &LossWeights) -> Result<f64, LossError> {
    let pos = position_gnll(truth, est)?;
    let rot = chord_gnll(&truth.rotation, &est.q_hat, est.sigma_q * est.sigma_q)?;
    Ok((1.0 - w.beta) * pos + w.beta * rot)
}

/// One node's contribution to the total loss.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub node: NodeId,
    pub bev_truth: BevGrid,
    pub bev_pred: BevGrid,
    pub neighbors: Vec<NodeId>,
    /// True relative pose of each neighbor in this node's frame.
    pub edge_truths: BTreeMap<NodeId, Pose>,
    pub estimates: Vec<PoseEstimate>,
}

/// Sum over nodes of the BEV combo loss plus the pose loss of every outgoing edge.
pub fn total_loss(samples: &[LossSample], w: &LossWeights) -> Result<f64, LossError> {
    let mut total = 0.0;
    for s in samples {
        total += combo_loss(&s.bev_truth, &s.bev_pred, w)?;
        for &j in &s.neighbors {
            let est = s
                .estimates
                .iter()
                .find(|e| e.src == s.node && e.dst == j)
                .ok_or(LossError::MissingEdge(s.node, j))?;
            let truth = s.edge_truths.get(&j).ok_or(LossError::MissingTruth(s.node, j))?;
            total += pose_loss(truth, est, w)?;
        }
    }
    Ok(total)
}
