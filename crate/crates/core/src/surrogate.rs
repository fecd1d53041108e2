//! Surrogate gradients for the non-differentiable fire/reset step.
//!
//! The fused state update `tau = alpha * (F * v_reset + (1 - F) * U) + beta`
//! with `F = step(U - v_th)` gets these pseudo-derivatives, where `dw` is the
//! rectangular window `dw(x) = 1 if |x| < mu else 0` standing in for the
//! delta that differentiating the step would produce:
//!
//! ```text
//! d tau / d U       = alpha * dw(U - v_th) * (v_reset - U) + alpha * (1 - F)
//! d tau / d v_th    = -alpha * dw(U - v_th) * (v_reset - U)
//! d tau / d v_reset = alpha * F
//! d tau / d alpha   = F * v_reset + (1 - F) * U
//! d tau / d beta    = 1
//! ```
//!
//! Outside the window the formulas reduce to the exact local derivatives of
//! the (locally smooth) forward pass, which is what makes finite-difference
//! checks meaningful away from the threshold.

use crate::activation::rect_window;

#[derive(Debug, Clone, Copy)]
pub struct TauGrads {
    pub d_u: f64,
    pub d_v_th: f64,
    pub d_v_reset: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

/// Per-element surrogate gradients of the fused update at membrane value `u`.
pub fn surrogate_tau_grad(
    u: f64,
    v_th: f64,
    v_reset: f64,
    alpha: f64,
    mu: f64,
) -> TauGrads {
    let fired = u >= v_th;
    let f = if fired { 1.0 } else { 0.0 };
    let dw = rect_window(u - v_th, mu);
    let bump = dw * (v_reset - u);
    TauGrads {
        d_u: alpha * bump + alpha * (1.0 - f),
        d_v_th: -alpha * bump,
        d_v_reset: alpha * f,
        d_alpha: f * v_reset + (1.0 - f) * u,
        d_beta: 1.0,
    }
}

/// Pseudo-derivative of the spike output `y = step(u - v_th)` w.r.t. `u`.
/// The v_th derivative is its negation.
pub fn surrogate_spike_grad(u: f64, v_th: f64, mu: f64) -> f64 {
    rect_window(u - v_th, mu)
}
