//! Policy-loss primitives: the dual-clipped surrogate and the token-wise
//! KL penalty, as plain functions.
//!
//! These mirror the fused graph operations in [`crate::graph`] and serve
//! as their value oracle; the graph side carries the gradients.

/// Per-token dual-clipped policy-gradient surrogate.
///
/// For non-negative advantages this is the familiar clipped objective
/// `max(-r A, -clip(r, 1-eps_l, 1+eps_h) A)`; for negative advantages the
/// same expression is additionally bounded above by `-c A`.
pub fn pg_token_loss(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64, dual_clip: f64) -> f64 {
    debug_assert!(ratio > 0.0);
    debug_assert!(dual_clip > 1.0 + eps_high);
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    let unclipped_term = -ratio * advantage;
    let clipped_term = -clipped * advantage;
    let inner = unclipped_term.max(clipped_term);
    if advantage >= 0.0 {
        inner
    } else {
        inner.min(-dual_clip * advantage)
    }
}

/// Low-variance non-negative KL estimator for one token:
/// `exp(d) - d - 1` with `d = ref_lp - actor_lp`.
pub fn kl_penalty_token(actor_lp: f64, ref_lp: f64) -> f64 {
    let d = ref_lp - actor_lp;
    d.exp() - d - 1.0
}

/// Token-wise KL penalties over aligned log-prob arrays.
pub fn kl_penalty(actor_lp: &[f64], ref_lp: &[f64]) -> Vec<f64> {
    debug_assert_eq!(actor_lp.len(), ref_lp.len());
    actor_lp
        .iter()
        .zip(ref_lp)
        .map(|(&a, &r)| kl_penalty_token(a, r))
        .collect()
}
