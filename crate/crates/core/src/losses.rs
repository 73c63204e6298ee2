//! Training objectives: consensus-establishment loss, trigger loss, batch
//! Gaussian moments, closed-form diagonal-Gaussian KL, the
//! information-bottleneck regularizer built from those pieces, and the
//! composite loss.
//!
//! Each loss exists twice on purpose: a plain function over slices (the
//! public operation) and a graph builder used inside the training update.
//! A unit test pins the two routes to each other.

use crate::error::Error;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Compression weight inside the bottleneck objective.
    pub eta: f64,
    /// Weight of the trigger loss in the composite.
    pub varrho: f64,
    /// Weight of the bottleneck term in the composite.
    pub rho: f64,
    /// Entropy coefficient.
    pub alpha: f64,
    /// Floor for batch std-dev estimates.
    pub sigma_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.1,
            varrho: 0.1,
            rho: 0.1,
            alpha: 0.01,
            sigma_floor: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.varrho < 0.0 || self.rho < 0.0 || self.alpha < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig("sigma_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Diagonal-Gaussian summary of a batch: per-dimension mean and std-dev.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianMoments {
    pub fn standard(k: usize) -> Self {
        GaussianMoments {
            mu: vec![0.0; k],
            sigma: vec![1.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean over the batch of squared Euclidean distance between estimate and
/// target rows.
pub fn ce_loss(e_hat: &Tensor, o_g: &Tensor) -> Result<f64> {
    if e_hat.rows() != o_g.rows() || e_hat.cols() != o_g.cols() {
        return Err(Error::DimensionMismatch {
            what: "ce_loss batch",
            expected: o_g.len(),
            got: e_hat.len(),
        });
    }
    let b = e_hat.rows() as f64;
    let total: f64 = e_hat
        .data()
        .iter()
        .zip(o_g.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / b)
}

/// Mean squared similarity score; the trigger trains toward silence.
pub fn etm_loss(kappas: &[f64]) -> f64 {
    if kappas.is_empty() {
        return 0.0;
    }
    kappas.iter().map(|k| k * k).sum::<f64>() / kappas.len() as f64
}

/// Per-dimension sample mean and std-dev (denominator B), std floored.
pub fn batch_moments(samples: &Tensor, sigma_floor: f64) -> Result<GaussianMoments> {
    let b = samples.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let k = samples.cols();
    let mut mu = vec![0.0; k];
    for r in 0..b {
        for (j, m) in mu.iter_mut().enumerate() {
            *m += samples.at(r, j);
        }
    }
    for m in mu.iter_mut() {
        *m /= b as f64;
    }
    let mut sigma = vec![0.0; k];
    for r in 0..b {
        for (j, s) in sigma.iter_mut().enumerate() {
            let d = samples.at(r, j) - mu[j];
            *s += d * d;
        }
    }
    for s in sigma.iter_mut() {
        *s = (*s / b as f64).sqrt().max(sigma_floor);
    }
    Ok(GaussianMoments { mu, sigma })
}

/// Closed-form KL(m ‖ l) for diagonal Gaussians:
/// sum_k [ ln(σ_l/σ_m) + (σ_m² + (μ_m−μ_l)²) / (2 σ_l²) − 1/2 ].
pub fn gaussian_kl(m: &GaussianMoments, l: &GaussianMoments) -> Result<f64> {
    if m.dim() != l.dim() {
        return Err(Error::DimensionMismatch {
            what: "gaussian_kl dims",
            expected: l.dim(),
            got: m.dim(),
        });
    }
    let mut total = 0.0;
    for k in 0..m.dim() {
        let (mm, sm) = (m.mu[k], m.sigma[k]);
        let (ml, sl) = (l.mu[k], l.sigma[k]);
        total += (sl / sm).ln() + (sm * sm + (mm - ml) * (mm - ml)) / (2.0 * sl * sl) - 0.5;
    }
    Ok(total)
}

/// KL against the standard normal prior; zero exactly at mu = 0, sigma = 1.
pub fn kl_to_standard_normal(m: &GaussianMoments) -> f64 {
    gaussian_kl(m, &GaussianMoments::standard(m.dim())).expect("dims match by construction")
}

/// The bottleneck regularizer: distribution-match term between the global
/// observation batch and the estimate batch, plus eta times the compression
/// of the consensus batch toward the standard normal.
pub fn gib_loss(o_g: &Tensor, e_hat: &Tensor, h: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let (m, c) = gib_terms(o_g, e_hat, h, cfg.sigma_floor)?;
    Ok(m + cfg.eta * c)
}

/// (match term, compression term) of the bottleneck loss, unweighted.
pub fn gib_terms(o_g: &Tensor, e_hat: &Tensor, h: &Tensor, sigma_floor: f64) -> Result<(f64, f64)> {
    if o_g.cols() != e_hat.cols() {
        return Err(Error::DimensionMismatch {
            what: "gib estimate width",
            expected: o_g.cols(),
            got: e_hat.cols(),
        });
    }
    let m_og = batch_moments(o_g, sigma_floor)?;
    let m_eh = batch_moments(e_hat, sigma_floor)?;
    let m_h = batch_moments(h, sigma_floor)?;
    Ok((gaussian_kl(&m_og, &m_eh)?, kl_to_standard_normal(&m_h)))
}

/// The printed-form bottleneck value (log-ratio sign as printed, constants
/// dropped, trailing −1); logged alongside the KL-form for comparison.
pub fn gib_printed_form(o_g: &Tensor, e_hat: &Tensor, h: &Tensor, sigma_floor: f64) -> Result<f64> {
    let m_og = batch_moments(o_g, sigma_floor)?;
    let m_eh = batch_moments(e_hat, sigma_floor)?;
    let m_h = batch_moments(h, sigma_floor)?;
    let mut term1 = 0.0;
    for k in 0..m_og.dim() {
        let (mo, so) = (m_og.mu[k], m_og.sigma[k]);
        let (me, se) = (m_eh.mu[k], m_eh.sigma[k]);
        term1 += (so / se).ln() + (so * so + (mo - me) * (mo - me)) / (2.0 * se * se);
    }
    let mut term2 = 0.0;
    for k in 0..m_h.dim() {
        let (mh, sh) = (m_h.mu[k], m_h.sigma[k]);
        term2 += sh.ln() + (sh * sh + mh * mh) / 2.0;
    }
    Ok(term1 + term2 - 1.0)
}

/// Composite training loss: -J + L_ce + varrho * L_etm + rho * L_gib.
pub fn total_loss(j_mappo: f64, ce: f64, etm: f64, gib: f64, cfg: &LossConfig) -> f64 {
    -j_mappo + ce + cfg.varrho * etm + cfg.rho * gib
}

/// Plug-in estimate of the bound-side condition behind the match term:
/// 1 minus the mean, over the global-observation batch rows y, of
/// pdf_estimate(y) / pdf_global(y) under the fitted diagonal Gaussians.
/// Logged for diagnosis only, never enforced.
pub fn nwj_condition(o_g: &Tensor, e_hat: &Tensor, sigma_floor: f64) -> Result<f64> {
    let m_og = batch_moments(o_g, sigma_floor)?;
    let m_eh = batch_moments(e_hat, sigma_floor)?;
    if m_og.dim() != m_eh.dim() {
        return Err(Error::DimensionMismatch {
            what: "nwj condition dims",
            expected: m_og.dim(),
            got: m_eh.dim(),
        });
    }
    let log_pdf = |x: f64, mu: f64, s: f64| {
        -((x - mu) * (x - mu)) / (2.0 * s * s) - (s * std::f64::consts::TAU.sqrt()).ln()
    };
    let mut mean_ratio = 0.0;
    for r in 0..o_g.rows() {
        let y = o_g.row_slice(r);
        let mut log_ratio = 0.0;
        for k in 0..m_og.dim() {
            log_ratio +=
                log_pdf(y[k], m_eh.mu[k], m_eh.sigma[k]) - log_pdf(y[k], m_og.mu[k], m_og.sigma[k]);
        }
        mean_ratio += log_ratio.min(700.0).exp();
    }
    Ok(1.0 - mean_ratio / o_g.rows() as f64)
}

// ── graph builders ──────────────────────────────────────────────────

/// Batch moments as tape nodes. The variance is floored before the square
/// root so degenerate batches stay differentiable.
pub fn moments_nodes(tape: &mut Tape, x: Var, sigma_floor: f64) -> (Var, Var) {
    let mu = tape.mean_rows(x);
    let centered = tape.sub_row(x, mu);
    let sq = tape.square(centered);
    let var = tape.mean_rows(sq);
    let var_floored = tape.clamp_min(var, sigma_floor * sigma_floor);
    let sigma = tape.sqrt(var_floored);
    (mu, sigma)
}

/// Closed-form diagonal KL as a tape node.
pub fn gaussian_kl_node(tape: &mut Tape, m: (Var, Var), l: (Var, Var)) -> Var {
    let (mu_m, sig_m) = m;
    let (mu_l, sig_l) = l;
    let log_l = tape.log(sig_l);
    let log_m = tape.log(sig_m);
    let log_ratio = tape.sub(log_l, log_m);
    let dmu = tape.sub(mu_m, mu_l);
    let dmu2 = tape.square(dmu);
    let sm2 = tape.square(sig_m);
    let num = tape.add(sm2, dmu2);
    let sl2 = tape.square(sig_l);
    let denom = tape.affine(sl2, 2.0, 0.0);
    let frac = tape.div(num, denom);
    let term = tape.add(log_ratio, frac);
    let term = tape.affine(term, 1.0, -0.5);
    tape.sum(term)
}

/// KL against the standard normal as a tape node.
pub fn kl_std_normal_node(tape: &mut Tape, mu: Var, sigma: Var) -> Var {
    let neg_log = tape.log(sigma);
    let neg_log = tape.affine(neg_log, -1.0, 0.0);
    let s2 = tape.square(sigma);
    let m2 = tape.square(mu);
    let quad = tape.add(s2, m2);
    let quad = tape.affine(quad, 0.5, 0.0);
    let term = tape.add(neg_log, quad);
    let term = tape.affine(term, 1.0, -0.5);
    tape.sum(term)
}

/// Consensus-establishment loss as a tape node: mean over rows of the
/// squared distance between estimates and targets.
pub fn ce_node(tape: &mut Tape, e_hat: Var, o_g: Var) -> Var {
    let b = tape.value(e_hat).rows() as f64;
    let diff = tape.sub(o_g, e_hat);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    tape.affine(s, 1.0 / b, 0.0)
}

/// Trigger loss as a tape node over stacked scores (B x 1).
pub fn etm_node(tape: &mut Tape, kappas: Var) -> Var {
    let sq = tape.square(kappas);
    tape.mean(sq)
}

/// Bottleneck loss (and its two sub-terms) as tape nodes.
pub fn gib_node(
    tape: &mut Tape,
    o_g: Var,
    e_hat: Var,
    h: Var,
    cfg: &LossConfig,
) -> (Var, Var, Var) {
    let mom_og = moments_nodes(tape, o_g, cfg.sigma_floor);
    let mom_eh = moments_nodes(tape, e_hat, cfg.sigma_floor);
    let (mu_h, sig_h) = moments_nodes(tape, h, cfg.sigma_floor);
    let match_term = gaussian_kl_node(tape, mom_og, mom_eh);
    let compress_term = kl_std_normal_node(tape, mu_h, sig_h);
    let weighted = tape.affine(compress_term, cfg.eta, 0.0);
    let total = tape.add(match_term, weighted);
    (total, match_term, compress_term)
}
