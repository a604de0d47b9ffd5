//! Night pseudo-label refinement from a coarsely aligned day/night pair:
//! confidently static day predictions replace the night prediction, the
//! rest comes from the night branch or is ignored.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::Taxonomy;
use crate::tensor::{LabelMap, Tensor, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Day,
    Night,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub theta_day: f64,
    pub theta_night: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            theta_day: 0.9,
            theta_night: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: LabelMap,
    pub confidence: Tensor<f32>,
    pub provenance: Vec<Provenance>,
}

impl PseudoLabel {
    pub fn ignored_fraction(&self) -> f64 {
        let n = self.provenance.len().max(1);
        self.provenance
            .iter()
            .filter(|p| **p == Provenance::Ignored)
            .count() as f64
            / n as f64
    }
}

fn best<T: Scalar>(probs: &[T], classes: usize, px: usize, p: usize) -> (u8, T) {
    let mut arg = 0;
    for c in 1..classes {
        if probs[c * px + p] > probs[arg * px + p] {
            arg = c;
        }
    }
    (arg as u8, probs[arg * px + p])
}

/// Fuses teacher probabilities `[C,H,W]` of a day/night pair into a night
/// pseudo-label.
pub fn refine_night_pseudo<T: Scalar>(
    day_probs: &Tensor<T>,
    night_probs: &Tensor<T>,
    taxonomy: &Taxonomy,
    cfg: &RefineConfig,
) -> Result<PseudoLabel> {
    if day_probs.shape() != night_probs.shape() || day_probs.rank() != 3 {
        return Err(Error::Shape {
            op: "refine_night_pseudo",
            lhs: day_probs.shape().to_vec(),
            rhs: night_probs.shape().to_vec(),
        });
    }
    let (c, h, w) = (
        day_probs.shape()[0],
        day_probs.shape()[1],
        day_probs.shape()[2],
    );
    let px = h * w;
    let (td, tn) = (T::c(cfg.theta_day), T::c(cfg.theta_night));
    let mut label = vec![IGNORE; px];
    let mut conf = vec![0f32; px];
    let mut prov = vec![Provenance::Ignored; px];
    for p in 0..px {
        let (dc, dp) = best(day_probs.data(), c, px, p);
        let (nc, np) = best(night_probs.data(), c, px, p);
        if taxonomy.is_static(dc) && dp >= td {
            label[p] = dc;
            conf[p] = dp.f64() as f32;
            prov[p] = Provenance::Day;
        } else if np >= tn {
            label[p] = nc;
            conf[p] = np.f64() as f32;
            prov[p] = Provenance::Night;
        } else {
            conf[p] = np.f64() as f32;
        }
    }
    Ok(PseudoLabel {
        label: Tensor::new(vec![h, w], label)?,
        confidence: Tensor::new(vec![h, w], conf)?,
        provenance: prov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::taxonomy::{BUILDING, CAR, ROAD};

    /// Single-pixel probability map with `p` on `class`, rest spread evenly.
    fn one_px(class: u8, p: f64) -> Tensor<f64> {
        let rest = (1.0 - p) / 9.0;
        Tensor::from_fn(&[10, 1, 1], |c| if c == class as usize { p } else { rest })
    }

    #[test]
    fn static_day_wins() {
        let r = refine_night_pseudo(
            &one_px(ROAD, 0.99),
            &one_px(BUILDING, 0.6),
            &Taxonomy::street(),
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(r.label.data(), &[ROAD]);
        assert_eq!(r.provenance, vec![Provenance::Day]);
    }

    #[test]
    fn dynamic_comes_from_night() {
        let r = refine_night_pseudo(
            &one_px(CAR, 0.99),
            &one_px(CAR, 0.7),
            &Taxonomy::street(),
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(r.label.data(), &[CAR]);
        assert_eq!(r.provenance, vec![Provenance::Night]);
        assert!((r.confidence.data()[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn low_confidence_is_ignored() {
        let r = refine_night_pseudo(
            &one_px(ROAD, 0.5),
            &one_px(CAR, 0.3),
            &Taxonomy::street(),
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(r.label.data(), &[IGNORE]);
        assert_eq!(r.provenance, vec![Provenance::Ignored]);
        assert_eq!(r.ignored_fraction(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[10, 2, 2]);
        let b = Tensor::<f64>::zeros(&[10, 2, 3]);
        assert!(
            refine_night_pseudo(&a, &b, &Taxonomy::street(), &RefineConfig::default()).is_err()
        );
    }
}
