//! Pixel-averaged cross-entropy shared by the supervised, mixup and
//! contrastive objectives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::IGNORE;

/// Result of a masked cross-entropy: the scalar loss and how many pixels
/// contributed. Zero valid pixels yields a constant zero loss.
#[derive(Debug, Clone, Copy)]
pub struct PixelLoss {
    pub loss: Var,
    pub valid: usize,
}

/// Mean over labelled pixels of `-log softmax(logits)[label]`.
///
/// `logits` is `[C, ...]` with the class axis first, `labels` holds one
/// entry per trailing position. 255 and classes rejected by `keep` are
/// skipped.
pub fn cross_entropy_where<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    keep: impl Fn(u8) -> bool,
) -> Result<PixelLoss> {
    let shape = tape.shape(logits).to_vec();
    let classes = shape[0];
    let px: usize = shape[1..].iter().product();
    if px != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut picks = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE || !keep(l) {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        picks.push(l as usize * px + p);
    }
    let valid = picks.len();
    let logp = tape.log_softmax(logits, 0)?;
    let loss = tape.pick_mean_neg(logp, picks)?;
    Ok(PixelLoss { loss, valid })
}

pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
) -> Result<PixelLoss> {
    cross_entropy_where(tape, logits, labels, |_| true)
}
