//! Group-relative advantages and clipped surrogate objectives.
//!
//! Two variants are supported:
//!
//! ```text
//! standard-kl : min(r·Â, clip(r, 1-ε, 1+ε)·Â) - β·KL(π_θ ‖ π_ref)
//! clip-high   : min(r·Â, clip(r, 1-ε, 1+δ)·Â)          (δ > ε, no KL)
//! ```
//!
//! Objectives are maximized; everything here reports `loss = -objective`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest |log-ratio| passed to `exp`.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipVariant {
    StandardKl,
    #[default]
    ClipHigh,
}

impl std::str::FromStr for ClipVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard-kl" => Ok(ClipVariant::StandardKl),
            "clip-high" => Ok(ClipVariant::ClipHigh),
            _ => Err(Error::InvalidInput(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub variant: ClipVariant,
    pub std_floor: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            epsilon: 0.2,
            delta: 0.3,
            beta: 0.04,
            variant: ClipVariant::ClipHigh,
            std_floor: 1e-8,
        }
    }
}

impl ClipConfig {
    pub fn standard(epsilon: f64, beta: f64) -> Self {
        ClipConfig {
            epsilon,
            beta,
            variant: ClipVariant::StandardKl,
            ..Default::default()
        }
    }

    pub fn clip_high(epsilon: f64, delta: f64) -> Self {
        ClipConfig {
            epsilon,
            delta,
            variant: ClipVariant::ClipHigh,
            ..Default::default()
        }
    }

    /// Upper clip bound `1+ε` or `1+δ`.
    pub fn upper(&self) -> f64 {
        match self.variant {
            ClipVariant::StandardKl => 1.0 + self.epsilon,
            ClipVariant::ClipHigh => 1.0 + self.delta,
        }
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.epsilon
    }

    /// KL weight actually applied (zero for clip-high).
    pub fn kl_weight(&self) -> f64 {
        match self.variant {
            ClipVariant::StandardKl => self.beta,
            ClipVariant::ClipHigh => 0.0,
        }
    }

    /// Requirements for evaluating the objective. Clip-high only needs `δ ≥ ε` here so
    /// that the degenerate `δ = ε` case can be compared against the standard variant.
    pub fn check_objective(&self) -> Result<()> {
        let finite = [self.epsilon, self.delta, self.beta, self.std_floor]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.epsilon <= 0.0 || self.beta < 0.0 || self.std_floor < 0.0 {
            return Err(Error::Config(format!("invalid clip config {self:?}")));
        }
        if self.variant == ClipVariant::ClipHigh && self.delta < self.epsilon {
            return Err(Error::Config(format!(
                "clip-high needs delta >= epsilon, got delta={} epsilon={}",
                self.delta, self.epsilon
            )));
        }
        Ok(())
    }

    /// Training-time validation: clip-high additionally requires `δ > ε`.
    pub fn validate(&self) -> Result<()> {
        self.check_objective()?;
        if self.variant == ClipVariant::ClipHigh && self.delta <= self.epsilon {
            return Err(Error::Config(format!(
                "clip-high needs delta > epsilon, got delta={} epsilon={}",
                self.delta, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Group-normalized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub mean_reward: f64,
    pub std_reward: f64,
}

/// `Â_i = (R_i - mean) / std` with the population standard deviation; all zero
/// when `std <= std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if std <= std_floor {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageVector {
        values,
        mean_reward: mean,
        std_reward: std,
    })
}

/// `exp(logp_new - logp_old)`, with the exponent clamped to ±[`MAX_LOG_RATIO`].
pub fn prob_ratio(logp_new: f64, logp_old: f64) -> f64 {
    let d = logp_new - logp_old;
    if d.abs() > MAX_LOG_RATIO {
        log::warn!("log-ratio {d} clamped to ±{MAX_LOG_RATIO}");
    }
    d.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp()
}

/// `min(r·A, clip(r, 1-ε, U)·A)`.
pub fn surrogate_term(r: f64, a: f64, cfg: &ClipConfig) -> f64 {
    let clipped = r.clamp(cfg.lower(), cfg.upper());
    (r * a).min(clipped * a)
}

/// True when the clipped branch strictly wins the min (the term is then flat in `r`).
pub fn clipped_branch_active(r: f64, a: f64, cfg: &ClipConfig) -> bool {
    let clipped = r.clamp(cfg.lower(), cfg.upper());
    clipped * a < r * a
}

/// Exact `Σ_steps Σ_k p_k ln(p_k / q_k)` over matched categorical distributions.
pub fn kl_exact(current: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if current.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "KL over {} vs {} steps",
            current.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (t, (p, q)) in current.iter().zip(reference).enumerate() {
        if p.len() != q.len() {
            return Err(Error::InvalidInput(format!(
                "step {t}: distributions of size {} and {}",
                p.len(),
                q.len()
            )));
        }
        for (k, (&pk, &qk)) in p.iter().zip(q).enumerate() {
            if pk > 0.0 {
                if qk <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "step {t}: reference has no support at index {k}"
                    )));
                }
                total += pk * (pk / qk).ln();
            }
        }
    }
    Ok(total)
}

/// One sampled group: rewards and sequence log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub rewards: Vec<f64>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    /// Per output, the per-step `(current, reference)` distributions for the exact KL.
    pub ref_dists: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.rewards.len();
        if g < 2 {
            return Err(Error::InvalidInput(format!("group size {g} < 2")));
        }
        if self.logp_new.len() != g || self.logp_old.len() != g {
            return Err(Error::InvalidInput("group lists differ in length".into()));
        }
        if let Some(d) = &self.ref_dists {
            if d.len() != g {
                return Err(Error::InvalidInput("ref_dists length differs from group".into()));
            }
        }
        for &lp in self.logp_new.iter().chain(&self.logp_old) {
            if !lp.is_finite() || lp > 0.0 {
                return Err(Error::InvalidInput(format!("invalid log-probability {lp}")));
            }
        }
        Ok(())
    }
}

/// Loss and per-output gradient coefficients for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupObjective {
    pub loss: f64,
    /// `∂(-surrogate_i)/∂logp_new_i`: `-r_i·Â_i` on the unclipped branch, 0 when clipped.
    /// The group loss averages terms, so `∂loss/∂logp_new_i = grad_coeff_i / G`.
    pub grad_coeff: Vec<f64>,
    /// Mean KL over the group (0 when not computed).
    pub kl: f64,
    pub frac_clipped: f64,
}

/// `loss = -(1/G)·Σ surrogate_i + β·KL` where KL is the group-mean exact divergence.
pub fn group_objective(g: &Group, adv: &AdvantageVector, cfg: &ClipConfig) -> Result<GroupObjective> {
    cfg.check_objective()?;
    g.validate()?;
    if adv.values.len() != g.size() {
        return Err(Error::InvalidInput(format!(
            "{} advantages for a group of {}",
            adv.values.len(),
            g.size()
        )));
    }
    let n = g.size() as f64;
    let mut surrogate = 0.0;
    let mut grad_coeff = Vec::with_capacity(g.size());
    let mut clipped = 0usize;
    for i in 0..g.size() {
        let r = prob_ratio(g.logp_new[i], g.logp_old[i]);
        let a = adv.values[i];
        surrogate += surrogate_term(r, a, cfg);
        if clipped_branch_active(r, a, cfg) {
            clipped += 1;
            grad_coeff.push(0.0);
        } else {
            grad_coeff.push(-r * a);
        }
    }
    let mut kl = 0.0;
    if cfg.kl_weight() > 0.0 {
        if let Some(dists) = &g.ref_dists {
            for (cur, reference) in dists {
                kl += kl_exact(cur, reference)?;
            }
            kl /= n;
        }
    }
    Ok(GroupObjective {
        loss: -surrogate / n + cfg.kl_weight() * kl,
        grad_coeff,
        kl,
        frac_clipped: clipped as f64 / n,
    })
}
