use alloc::vec;

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

/// Mean binary cross-entropy between boundary probabilities `[N]` and the
/// union-of-positive-anchors target, over the first `valid_len` snippets.
pub fn boundary_loss(
    tape: &mut Tape,
    probs: Var,
    target: &[f64],
    weight: Option<&[f64]>,
    valid_len: usize,
) -> Result<Var> {
    let ones;
    let w = match weight {
        Some(w) => w,
        None => {
            ones = vec![1.0; target.len()];
            &ones
        }
    };
    tape.bce_prob(probs, target, w, valid_len)
}

/// Mean weighted binary cross-entropy on activity logits `N×(C+1)`, with
/// per-class positive weights `pos_weight`.
pub fn activity_loss(
    tape: &mut Tape,
    logits: Var,
    target: &[f64],
    pos_weight: &[f64],
    weight: Option<&[f64]>,
    valid_len: usize,
) -> Result<Var> {
    if let Some(&p) = pos_weight.iter().find(|&&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::Config(alloc::format!("positive weight {p} must be positive")));
    }
    let ones;
    let w = match weight {
        Some(w) => w,
        None => {
            ones = vec![1.0; target.len()];
            &ones
        }
    };
    tape.bce_logits(logits, target, pos_weight, w, valid_len)
}

/// `lambda · L_act + L_br`.
pub fn total_loss(tape: &mut Tape, l_act: Var, l_br: Var, lambda: f64) -> Result<Var> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(alloc::format!("loss weight {lambda} must be finite and non-negative")));
    }
    let a = tape.scale(l_act, lambda);
    tape.add(a, l_br)
}
