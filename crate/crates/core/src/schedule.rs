//! Forward noising process, reverse DDPM sampling step, and training loss.
//!
//! Closed-form forward sample at step t:
//!     Z_t = sqrt(ᾱ_t)·Z_0 + sqrt(1-ᾱ_t)·ε,   ᾱ_t = Π_{i≤t}(1-β_i)
//! with ᾱ_0 := 1 so that t = 0 is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, ValueId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Chain length T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        // Short desk-scale chain that still reaches near-unit noise:
        // with T=50 and betas 1e-4..0.2, ᾱ_T ≈ 5e-3.
        SchedulerConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

/// Precomputed schedule tables. Index convention: entry t-1 holds the
/// value for diffusion step t ∈ 1..=T.
#[derive(Debug, Clone)]
pub struct SchedulerParams {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl SchedulerParams {
    /// Linear β interpolation from `beta_start` to `beta_end` over T steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("make_schedule", "need at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "make_schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {}..{}", beta_start, beta_end),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &SchedulerConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    /// Build tables from explicit betas. Zero betas are allowed here so
    /// degenerate noiseless chains can be constructed in tests.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("make_schedule", "empty beta table"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::invalid("make_schedule", "betas must lie in [0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut posterior_var = Vec::with_capacity(betas.len());
        for t in 1..=betas.len() {
            let prev = if t >= 2 { alpha_bars[t - 2] } else { 1.0 };
            let denom = 1.0 - alpha_bars[t - 1];
            // σ_1² = 0 by the ᾱ_0 = 1 convention; also guard β = 0 chains.
            posterior_var.push(if denom > 0.0 {
                betas[t - 1] * (1.0 - prev) / denom
            } else {
                0.0
            });
        }
        Ok(SchedulerParams {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::invalid(
                op,
                format!("step {} outside 1..={}", t, self.steps()),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

/// Forward sample: sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·eps, elementwise.
pub fn q_sample<T: Element>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    params: &SchedulerParams,
) -> Result<Tensor<T>> {
    params.check_t("q_sample", t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = params.alpha_bar(t);
    let signal = T::from_f64(ab.sqrt());
    let noise = T::from_f64((1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| signal * z + noise * e)
        .collect();
    Tensor::from_vec(z0.shape().to_vec(), data)
}

/// One reverse DDPM step: posterior mean
///     μ = (Z_t - β_t/sqrt(1-ᾱ_t)·ε̂) / sqrt(α_t)
/// plus σ_t·z with σ_t² = β_t·(1-ᾱ_{t-1})/(1-ᾱ_t). Callers pass z = 0 at
/// t = 1; the σ_1 = 0 convention makes the noise term vanish either way.
pub fn reverse_step<T: Element>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    params: &SchedulerParams,
) -> Result<Tensor<T>> {
    params.check_t("reverse_step", t)?;
    if z_t.shape() != eps_hat.shape() || z_t.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            lhs: z_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let beta = params.beta(t);
    let one_minus_ab = 1.0 - params.alpha_bar(t);
    // β = 0 steps remove no noise: μ = Z_t / sqrt(α_t) = Z_t.
    let eps_coef = if one_minus_ab > 0.0 {
        beta / one_minus_ab.sqrt()
    } else {
        0.0
    };
    let inv_sqrt_alpha = T::from_f64(1.0 / params.alpha(t).sqrt());
    let eps_coef = T::from_f64(eps_coef);
    let sigma = T::from_f64(params.posterior_variance(t).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&zt, &eh), &zn)| inv_sqrt_alpha * (zt - eps_coef * eh) + sigma * zn)
        .collect();
    Tensor::from_vec(z_t.shape().to_vec(), data)
}

/// Squared error between noise and prediction, averaged over elements with
/// nonzero loss weight. Pure counterpart of the recorded graph op used in
/// training; the two are asserted equal in tests.
pub fn training_loss<T: Element>(
    eps: &Tensor<T>,
    eps_hat: &Tensor<T>,
    loss_weights: &Tensor<T>,
) -> Result<T> {
    if eps.shape() != eps_hat.shape() || eps.shape() != loss_weights.shape() {
        return Err(Error::ShapeMismatch {
            op: "training_loss",
            lhs: eps.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let wsum: f64 = loss_weights.data().iter().map(|w| w.as_f64()).sum();
    if wsum <= 0.0 {
        return Err(Error::invalid("training_loss", "loss mask selects no elements"));
    }
    let mut acc = T::zero();
    for ((&e, &eh), &w) in eps.data().iter().zip(eps_hat.data()).zip(loss_weights.data()) {
        let d = e - eh;
        acc += w * d * d;
    }
    Ok(acc * T::from_f64(1.0 / wsum))
}

/// Recorded version of `training_loss` for the training graph.
pub fn training_loss_on_graph<T: Element>(
    g: &mut Graph<T>,
    eps: ValueId,
    eps_hat: ValueId,
    loss_weights: &Tensor<T>,
) -> Result<ValueId> {
    g.weighted_mse(eps_hat, eps, loss_weights)
}
