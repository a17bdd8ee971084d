//! Contrastive, focal and mixed objectives, as plain functions and as graph ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::{cosine_parts, focal_term, log_sum_exp};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Use only the negatives in the contrastive denominator.
    pub literal_denominator: bool,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.5, alpha: 0.25, gamma: 2.0, lambda: 0.5, literal_denominator: false, epsilon: 1e-12 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::config(format!("{what} out of range: {v}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be > 0;", self.tau);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must be in (0, 1);", self.alpha);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0;", self.gamma);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1];", self.lambda);
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad("epsilon must be in (0, 0.5);", self.epsilon);
        }
        Ok(())
    }
}

/// Cosine similarity; 0 when either vector has (near) zero norm.
pub fn cosine_sim(u: &[f64], v: &[f64], eps: f64) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let (c, nu, nv) = cosine_parts(u, v, eps);
    if nu * nv < eps {
        log::debug!("cosine similarity of a zero vector taken as 0");
    }
    c
}

/// Contrastive loss of one anchor. `None` when the denominator would be
/// empty, i.e. literal mode without negatives.
pub fn kacl_loss(z_image: &[f64], z_radiomic: &[f64], negatives: &[&[f64]], cfg: &LossConfig) -> Option<f64> {
    let pos = cosine_sim(z_image, z_radiomic, cfg.epsilon) / cfg.tau;
    let mut terms: Vec<f64> = negatives.iter().map(|n| cosine_sim(z_image, n, cfg.epsilon) / cfg.tau).collect();
    if !cfg.literal_denominator {
        terms.push(pos);
    }
    if terms.is_empty() {
        return None;
    }
    Some(log_sum_exp(&terms) - pos)
}

/// Graph version of [`kacl_loss`]; differentiable through all projections.
pub fn kacl_loss_graph(
    g: &mut Graph,
    z_image: Var,
    z_radiomic: Var,
    negatives: &[Var],
    cfg: &LossConfig,
) -> Result<Option<Var>> {
    let inv_tau = 1.0 / cfg.tau;
    let c = g.cosine(z_image, z_radiomic, cfg.epsilon)?;
    let pos = g.scale(c, inv_tau);
    let mut terms = Vec::with_capacity(negatives.len() + 1);
    for &n in negatives {
        let c = g.cosine(z_image, n, cfg.epsilon)?;
        terms.push(g.scale(c, inv_tau));
    }
    if !cfg.literal_denominator {
        terms.push(pos);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let stacked = g.stack(&terms)?;
    let lse = g.log_sum_exp(stacked)?;
    Ok(Some(g.sub(lse, pos)?))
}

/// Focal loss of one predicted probability against a 0/1 label.
pub fn focal_loss(p: f64, y: f64, cfg: &LossConfig) -> f64 {
    let p = p.clamp(cfg.epsilon, 1.0 - cfg.epsilon);
    focal_term(p, y, cfg.alpha, cfg.gamma).0
}

/// Mean focal loss over all (sample, class) cells.
pub fn focal_loss_mean(probs: &[f64], targets: &[f64], cfg: &LossConfig) -> f64 {
    assert_eq!(probs.len(), targets.len(), "probability and target counts differ");
    probs.iter().zip(targets).map(|(&p, &y)| focal_loss(p, y, cfg)).sum::<f64>() / probs.len() as f64
}

pub fn focal_loss_graph(g: &mut Graph, probs: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    g.focal(probs, targets, cfg.alpha, cfg.gamma, cfg.epsilon)
}

/// `λ·L_cl + (1-λ)·L_fl`; endpoints return the selected term exactly.
pub fn total_loss(l_cl: f64, l_fl: f64, cfg: &LossConfig) -> Result<f64> {
    if !l_cl.is_finite() || !l_fl.is_finite() {
        return Err(Error::numerical(format!("non-finite loss component: contrastive {l_cl}, focal {l_fl}")));
    }
    Ok(match cfg.lambda {
        l if l == 0.0 => l_fl,
        l if l == 1.0 => l_cl,
        l => l * l_cl + (1.0 - l) * l_fl,
    })
}
