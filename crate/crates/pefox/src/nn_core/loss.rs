//! Adversarial log losses over detector probabilities.
//!
//! Probabilities are clamped away from 0 and 1 before taking logs so a
//! saturated network never produces an infinite loss or gradient.

use super::NnError;

/// Clamp applied to probabilities before `ln`.
pub const PROB_EPSILON: f64 = 1e-7;

fn check_probs(name: &str, probs: &[f64]) -> Result<(), NnError> {
    if probs.is_empty() {
        return Err(NnError::DomainError { reason: format!("{name}: empty probability slice") });
    }
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(NnError::DomainError {
                reason: format!("{name}: probability {p} at index {i} outside [0, 1]"),
            });
        }
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Generator objective: mean log-probability that adversarial examples are
/// still labeled malicious. Minimizing drives the detections toward zero.
pub fn loss_generator(malicious_probs: &[f64]) -> Result<f64, NnError> {
    check_probs("loss_generator", malicious_probs)?;
    let n = malicious_probs.len() as f64;
    Ok(malicious_probs.iter().map(|&p| clamp(p).ln()).sum::<f64>() / n)
}

/// d(loss_generator)/d(p_i) = 1 / (n * p_i) on the clamped probability.
pub fn loss_generator_grad(malicious_probs: &[f64]) -> Result<Vec<f64>, NnError> {
    check_probs("loss_generator", malicious_probs)?;
    let n = malicious_probs.len() as f64;
    Ok(malicious_probs.iter().map(|&p| 1.0 / (n * clamp(p))).collect())
}

/// Discriminator objective: negative log-likelihood of labeling benign
/// samples benign and malicious samples malicious. Each probability is the
/// predicted chance of the *malicious* class.
pub fn loss_discriminator(
    benign_probs: &[f64],
    malicious_probs: &[f64],
) -> Result<f64, NnError> {
    check_probs("loss_discriminator(benign)", benign_probs)?;
    check_probs("loss_discriminator(malicious)", malicious_probs)?;
    let nb = benign_probs.len() as f64;
    let nm = malicious_probs.len() as f64;
    let benign: f64 = benign_probs.iter().map(|&p| (1.0 - clamp(p)).ln()).sum();
    let malicious: f64 = malicious_probs.iter().map(|&p| clamp(p).ln()).sum();
    Ok(-benign / nb - malicious / nm)
}

/// Gradients of [`loss_discriminator`] with respect to each probability:
/// `+1 / (n_b * (1 - p))` for benign inputs, `-1 / (n_m * p)` for malicious.
pub fn loss_discriminator_grads(
    benign_probs: &[f64],
    malicious_probs: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    check_probs("loss_discriminator(benign)", benign_probs)?;
    check_probs("loss_discriminator(malicious)", malicious_probs)?;
    let nb = benign_probs.len() as f64;
    let nm = malicious_probs.len() as f64;
    let benign = benign_probs.iter().map(|&p| 1.0 / (nb * (1.0 - clamp(p)))).collect();
    let malicious = malicious_probs.iter().map(|&p| -1.0 / (nm * clamp(p))).collect();
    Ok((benign, malicious))
}
