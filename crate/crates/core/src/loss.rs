//! Two-sub-model objective: cross-entropy on each sub-model plus
//! temperature-scaled KL terms pulling the two output distributions together.
//!
//! Per sample, with `p_i = softmax(z_i / T)`:
//!
//! ```text
//! J_1 = (1 - a) CE(z_1, y) + a T^2 KL(p_2 || p_1)
//! J_2 = (1 - a) CE(z_2, y) + a T^2 KL(p_1 || p_2)
//! ```
//!
//! and the batch loss is the mean of `J_1 + J_2`. Class labels are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {t}")))
    }
}

/// `softmax(logits / temperature)`, max-shifted.
pub fn softmax_temp(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Cross-entropy of untempered logits against `label`, with its gradient
/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax_temp(logits, 1.0)?;
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// `KL(p || q)` with gradients with respect to both distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct KlTerm {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_q: Vec<f64>,
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("{name} is not a probability vector (sum = {sum})")));
    }
    Ok(())
}

/// `sum_k p_k ln(p_k / q_k)` with both arguments floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<KlTerm> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut value = 0.0;
    let mut grad_p = Vec::with_capacity(p.len());
    let mut grad_q = Vec::with_capacity(p.len());
    for (&pk, &qk) in p.iter().zip(q) {
        let (pc, qc) = (pk.max(PROB_FLOOR), qk.max(PROB_FLOOR));
        let log_ratio = (pc / qc).ln();
        value += pk * log_ratio;
        grad_p.push(log_ratio + 1.0);
        grad_q.push(-pk / qc);
    }
    Ok(KlTerm { value, grad_p, grad_q })
}

/// Loss weights: `alpha` on the KL terms, `temperature` for the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub temperature: f64,
    /// Treat the peer distribution in each KL term as a constant.
    #[serde(default)]
    pub detach_peer: bool,
    /// Apply the temperature to the cross-entropy logits as well.
    #[serde(default)]
    pub tempered_ce: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            temperature: 3.0,
            detach_peer: false,
            tempered_ce: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Logits of both sub-models, row-major `batch x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsPair {
    pub logits1: Vec<f64>,
    pub logits2: Vec<f64>,
    pub classes: usize,
}

impl LogitsPair {
    pub fn new(logits1: Vec<f64>, logits2: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || logits1.len() != logits2.len() || !logits1.len().is_multiple_of(classes) {
            return Err(Error::shape("LogitsPair", &[logits1.len(), classes], &[logits2.len(), classes]));
        }
        if logits1.iter().chain(&logits2).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(Self { logits1, logits2, classes })
    }

    pub fn batch(&self) -> usize {
        self.logits1.len() / self.classes
    }
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce1: f64,
    pub ce2: f64,
    /// Mean `KL(p_1 || p_2)`, the consistency term of sub-model 2.
    pub kl12: f64,
    /// Mean `KL(p_2 || p_1)`, the consistency term of sub-model 1.
    pub kl21: f64,
}

impl LossBreakdown {
    /// Recomposes the total from its parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let t2 = w.temperature * w.temperature;
        (1.0 - w.alpha) * (self.ce1 + self.ce2) + w.alpha * t2 * (self.kl12 + self.kl21)
    }
}

/// Loss value and gradients with respect to both logit sets.
#[derive(Clone, Debug, PartialEq)]
pub struct RBlockLoss {
    pub breakdown: LossBreakdown,
    pub grad1: Vec<f64>,
    pub grad2: Vec<f64>,
}

fn ce_term(logits: &[f64], label: usize, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    if w.tempered_ce {
        let t = w.temperature;
        let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
        let (v, g) = cross_entropy(&scaled, label)?;
        Ok((v, g.into_iter().map(|x| x / t).collect()))
    } else {
        cross_entropy(logits, label)
    }
}

/// Mean over the batch of `J_1 + J_2`, and its gradient.
///
/// Each KL term is differentiated through both of its distributions unless
/// `detach_peer` is set, in which case `J_i` only moves sub-model `i`.
pub fn rblock_loss(pair: &LogitsPair, labels: &[usize], w: &LossWeights) -> Result<RBlockLoss> {
    w.validate()?;
    let (nb, kc) = (pair.batch(), pair.classes);
    if labels.len() != nb {
        return Err(Error::shape("rblock_loss labels", &[labels.len()], &[nb]));
    }
    let t = w.temperature;
    let kl_scale = w.alpha * t * t;
    let inv_b = 1.0 / nb as f64;
    let mut bd = LossBreakdown::default();
    let mut grad1 = vec![0.0; nb * kc];
    let mut grad2 = vec![0.0; nb * kc];

    for (b, &label) in labels.iter().enumerate() {
        let z1 = &pair.logits1[b * kc..(b + 1) * kc];
        let z2 = &pair.logits2[b * kc..(b + 1) * kc];
        let (ce1, gce1) = ce_term(z1, label, w)?;
        let (ce2, gce2) = ce_term(z2, label, w)?;
        let p1 = softmax_temp(z1, t)?;
        let p2 = softmax_temp(z2, t)?;
        let kl12 = kl_divergence(&p1, &p2)?;
        let kl21 = kl_divergence(&p2, &p1)?;
        bd.ce1 += ce1 * inv_b;
        bd.ce2 += ce2 * inv_b;
        bd.kl12 += kl12.value * inv_b;
        bd.kl21 += kl21.value * inv_b;

        // d/dz of a function of softmax(z / T): (1/T) p * (g - <p, g>)
        let through_softmax = |p: &[f64], g: &[f64]| -> Vec<f64> {
            let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            p.iter().zip(g).map(|(pk, gk)| pk * (gk - inner) / t).collect()
        };
        // J_1 holds KL(p2 || p1): q-side for z1, p-side for z2.
        let j1_z1 = through_softmax(&p1, &kl21.grad_q);
        let j2_z2 = through_softmax(&p2, &kl12.grad_q);
        let g1 = &mut grad1[b * kc..(b + 1) * kc];
        let g2 = &mut grad2[b * kc..(b + 1) * kc];
        for k in 0..kc {
            g1[k] = ((1.0 - w.alpha) * gce1[k] + kl_scale * j1_z1[k]) * inv_b;
            g2[k] = ((1.0 - w.alpha) * gce2[k] + kl_scale * j2_z2[k]) * inv_b;
        }
        if !w.detach_peer {
            let j2_z1 = through_softmax(&p1, &kl12.grad_p);
            let j1_z2 = through_softmax(&p2, &kl21.grad_p);
            for k in 0..kc {
                g1[k] += kl_scale * j2_z1[k] * inv_b;
                g2[k] += kl_scale * j1_z2[k] * inv_b;
            }
        }
    }
    bd.total = bd.recompose(w);
    Ok(RBlockLoss {
        breakdown: bd,
        grad1,
        grad2,
    })
}

/// Batch-mean cross-entropy of one logit set, with gradient.
pub fn mean_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::shape("mean_cross_entropy", &[logits.len()], &[labels.len(), classes]));
    }
    let inv_b = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        let (v, g) = cross_entropy(&logits[b * classes..(b + 1) * classes], label)?;
        total += v * inv_b;
        for (d, s) in grad[b * classes..(b + 1) * classes].iter_mut().zip(g) {
            *d = s * inv_b;
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_values() {
        let p = softmax_temp(&[0.0, 0.0, 0.0], 7.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_temp(&[1.0, 2.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -2.0).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_temp(&[1000.0, -1000.0, 999.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let (v, _) = cross_entropy(&[0.3; 10], 4).unwrap();
        assert!((v - 10f64.ln()).abs() <= 1e-12);
        assert!(cross_entropy(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn cross_entropy_decreases_with_correct_logit() {
        let mut z = vec![0.5, -0.2, 1.0];
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let (v, _) = cross_entropy(&z, 1).unwrap();
            assert!(v < last);
            last = v;
            z[1] += 0.7;
        }
    }

    #[test]
    fn kl_values() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap().value;
        assert!((v - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((v - 0.143841).abs() < 1e-6);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn alpha_zero_reduces_to_cross_entropy() {
        let pair = LogitsPair::new(vec![0.1, 0.9, -0.3, 0.4, 0.2, 0.0], vec![1.0, -1.0, 0.5, 0.0, 0.3, 0.3], 3).unwrap();
        let w = LossWeights { alpha: 0.0, ..LossWeights::default() };
        let r = rblock_loss(&pair, &[1, 0], &w).unwrap();
        assert_eq!(r.breakdown.total, r.breakdown.ce1 + r.breakdown.ce2);
        assert!(r.breakdown.kl12 > 0.0 && r.breakdown.kl21 > 0.0);
    }

    #[test]
    fn identical_logits_have_zero_kl_and_gradient() {
        let z = vec![0.1, 0.9, -0.3, 0.4, 0.2, 0.0];
        let pair = LogitsPair::new(z.clone(), z.clone(), 3).unwrap();
        let w = LossWeights::default();
        let r = rblock_loss(&pair, &[2, 0], &w).unwrap();
        assert_eq!(r.breakdown.kl12, 0.0);
        assert_eq!(r.breakdown.kl21, 0.0);
        let (ce, g) = mean_cross_entropy(&z, &[2, 0], 3).unwrap();
        assert!((r.breakdown.total - (1.0 - w.alpha) * 2.0 * ce).abs() < 1e-15);
        for (a, b) in r.grad1.iter().zip(&g) {
            assert!((a - (1.0 - w.alpha) * b).abs() < 1e-15);
        }
    }

    #[test]
    fn breakdown_recomposes() {
        let pair = LogitsPair::new(vec![0.3, -1.2, 2.0, 0.1], vec![-0.5, 0.7, 1.1, 1.4], 2).unwrap();
        let w = LossWeights { alpha: 0.37, temperature: 2.5, ..LossWeights::default() };
        let r = rblock_loss(&pair, &[0, 1], &w).unwrap();
        let b = r.breakdown;
        let manual = 0.63 * (b.ce1 + b.ce2) + 0.37 * 6.25 * (b.kl12 + b.kl21);
        assert!((b.total - manual).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pair = LogitsPair::new(vec![0.0; 4], vec![0.0; 4], 2).unwrap();
        assert!(rblock_loss(&pair, &[0], &LossWeights::default()).is_err());
        assert!(rblock_loss(&pair, &[0, 2], &LossWeights::default()).is_err());
        let bad_t = LossWeights { temperature: 0.0, ..LossWeights::default() };
        assert!(rblock_loss(&pair, &[0, 1], &bad_t).is_err());
        assert!(LogitsPair::new(vec![0.0; 4], vec![0.0; 3], 2).is_err());
        assert!(LogitsPair::new(vec![f64::NAN, 0.0], vec![0.0; 2], 2).is_err());
    }
}
