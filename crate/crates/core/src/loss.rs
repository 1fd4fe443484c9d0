//! Attribute classification loss, cosine triplet ranking loss and the
//! dynamically weighted total loss, each with its analytic gradient.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{AgmanError, Result};
use crate::ops::{sigmoid, softplus};

/// `w0` and `w1` are clamped to `[-LOSS_WEIGHT_CLAMP, LOSS_WEIGHT_CLAMP]`.
pub const LOSS_WEIGHT_CLAMP: f64 = 10.0;

/// Mean over attributes of the weighted binary cross-entropy on logits.
pub fn classification_loss(logits: ArrayView1<f64>, target: ArrayView1<f64>, class_weights: ArrayView1<f64>) -> Result<f64> {
    Ok(classification_loss_grad(logits, target, class_weights)?.0)
}

/// Loss value and its gradient w.r.t. the logits.
pub fn classification_loss_grad(
    logits: ArrayView1<f64>,
    target: ArrayView1<f64>,
    class_weights: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let n = logits.len();
    if n == 0 || target.len() != n || class_weights.len() != n {
        return Err(AgmanError::Argument(format!(
            "classification loss needs equal non-zero lengths, got logits {n}, targets {}, weights {}",
            target.len(),
            class_weights.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array1::zeros(n);
    for i in 0..n {
        let (x, y, w) = (logits[i], target[i], class_weights[i]);
        // -[y log s(x) + (1 - y) log(1 - s(x))] = softplus(x) - y x
        loss += w * (softplus(x) - y * x);
        grad[i] = w * (sigmoid(x) - y) / n as f64;
    }
    Ok((loss / n as f64, grad))
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AgmanError::Argument(format!(
            "cosine similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(AgmanError::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// Cosine similarity and its gradients w.r.t. `u` and `v`.
pub fn cosine_similarity_grad(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let cos = cosine_similarity(u, v)?;
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    let du = &v / (nu * nv) - &u * (cos / (nu * nu));
    let dv = &u / (nu * nv) - &v * (cos / (nv * nv));
    Ok((cos, du, dv))
}

/// How the hinge combines the positive and negative cosine similarities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMode {
    /// `max(0, m - s_p + s_n)`: distances read as `1 - cos`.
    #[default]
    SimilarityCorrected,
    /// `max(0, m + s_p - s_n)`: similarities substituted for distances verbatim.
    AsWritten,
}

pub fn triplet_loss(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    margin: f64,
    mode: TripletMode,
) -> Result<f64> {
    let sp = cosine_similarity(anchor, positive)?;
    let sn = cosine_similarity(anchor, negative)?;
    Ok(hinge(sp, sn, margin, mode))
}

fn hinge(sp: f64, sn: f64, margin: f64, mode: TripletMode) -> f64 {
    match mode {
        TripletMode::SimilarityCorrected => (margin - sp + sn).max(0.0),
        TripletMode::AsWritten => (margin + sp - sn).max(0.0),
    }
}

/// Triplet loss with gradients w.r.t. anchor, positive and negative.
pub fn triplet_loss_grad(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    margin: f64,
    mode: TripletMode,
) -> Result<(f64, [Array1<f64>; 3])> {
    let (sp, da_p, dp) = cosine_similarity_grad(anchor, positive)?;
    let (sn, da_n, dn) = cosine_similarity_grad(anchor, negative)?;
    let loss = hinge(sp, sn, margin, mode);
    let k = anchor.len();
    if loss <= 0.0 {
        return Ok((0.0, [Array1::zeros(k), Array1::zeros(k), Array1::zeros(k)]));
    }
    // sign of d loss / d s_p
    let sign = match mode {
        TripletMode::SimilarityCorrected => -1.0,
        TripletMode::AsWritten => 1.0,
    };
    let d_anchor = &da_p * sign - &da_n * sign;
    Ok((loss, [d_anchor, dp * sign, dn * -sign]))
}

/// Learned weights of the total loss together with per-attribute class
/// weights for the classification term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub w0: f64,
    pub w1: f64,
    pub class_weights: Vec<f64>,
}

impl LossWeights {
    pub fn initial(attributes: usize) -> Self {
        Self {
            w0: 0.0,
            w1: 0.0,
            class_weights: vec![1.0; attributes],
        }
    }
}

pub fn clamp_loss_weight(w: f64) -> f64 {
    w.clamp(-LOSS_WEIGHT_CLAMP, LOSS_WEIGHT_CLAMP)
}

/// `0.5 e^{w0} L_c + w0 + 0.5 e^{w1} L_t + w1` with both weights clamped first.
pub fn combined_loss(classification: f64, triplet: f64, weights: &LossWeights) -> f64 {
    combined_loss_grad(classification, triplet, weights.w0, weights.w1).value
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombinedLossGrad {
    pub value: f64,
    pub d_classification: f64,
    pub d_triplet: f64,
    pub d_w0: f64,
    pub d_w1: f64,
}

pub fn combined_loss_grad(classification: f64, triplet: f64, w0: f64, w1: f64) -> CombinedLossGrad {
    let (c0, c1) = (clamp_loss_weight(w0), clamp_loss_weight(w1));
    let (e0, e1) = (0.5 * c0.exp(), 0.5 * c1.exp());
    let pass = |w: f64| if w.abs() <= LOSS_WEIGHT_CLAMP { 1.0 } else { 0.0 };
    CombinedLossGrad {
        value: e0 * classification + c0 + e1 * triplet + c1,
        d_classification: e0,
        d_triplet: e1,
        d_w0: (e0 * classification + 1.0) * pass(w0),
        d_w1: (e1 * triplet + 1.0) * pass(w1),
    }
}
