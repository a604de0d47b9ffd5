//! Feature-prototype alignment: per-class feature centroids, re-weighted
//! cosine-similarity logits and the four cross-domain contrastive terms.

use crate::error::{Error, Result};
use crate::loss::{self, PixelLoss};
use crate::scalar::Scalar;
use crate::synth::{Domain, Taxonomy};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{LabelMap, Tensor, IGNORE};
use std::collections::BTreeSet;

/// Spatial stride between input pixels and feature cells.
pub const FEATURE_STRIDE: usize = 4;

/// Logit given to classes with no prototype; vanishes under softmax.
pub const ABSENT_LOGIT: f64 = -1e9;

const NORM_EPS: f64 = 1e-12;

/// Nearest-neighbour downsampling of an `[H, W]` label map by `factor`,
/// sampling the centre of each cell.
pub fn downsample_labels(label: &LabelMap, factor: usize) -> Result<LabelMap> {
    let s = label.shape();
    if s.len() != 2 || factor == 0 || !s[0].is_multiple_of(factor) || !s[1].is_multiple_of(factor) {
        return Err(Error::invalid(
            "downsample_labels",
            format!("cannot downsample {s:?} by {factor}"),
        ));
    }
    let (h, w) = (s[0] / factor, s[1] / factor);
    let c = factor / 2;
    let src = label.data();
    let data = (0..h * w)
        .map(|i| src[(i / w * factor + c) * s[1] + i % w * factor + c])
        .collect();
    Tensor::new(vec![h, w], data)
}

#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `[C, D]` on the tape; rows of absent classes are zero.
    pub vectors: Var,
    pub present: Vec<bool>,
    pub domain: Domain,
}

impl PrototypeSet {
    pub fn classes(&self) -> BTreeSet<u8> {
        (0..self.present.len())
            .filter(|&c| self.present[c])
            .map(|c| c as u8)
            .collect()
    }
}

/// Per-class masked means of `features [D,h,w]` under `label [h,w]`.
pub fn compute_prototypes<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    label: &LabelMap,
    num_classes: usize,
    domain: Domain,
) -> Result<PrototypeSet> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 || s[1..] != *label.shape() {
        return Err(Error::Shape {
            op: "compute_prototypes",
            lhs: s,
            rhs: label.shape().to_vec(),
        });
    }
    let mut rows = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mask: Vec<bool> = label
            .data()
            .iter()
            .map(|&l| l != IGNORE && l as usize == c)
            .collect();
        rows.push(tape.masked_mean(features, &mask)?);
    }
    let present = rows.iter().map(Option::is_some).collect();
    let vectors = tape.stack_rows(&rows, s[0])?;
    Ok(PrototypeSet {
        vectors,
        present,
        domain,
    })
}

/// Similarity weights between a feature-side domain `A` and a
/// prototype-side domain `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    /// `s = |A ∩ B|`.
    pub overlap_count: usize,
    pub overlap: BTreeSet<u8>,
    /// Long-tailed classes inside the overlap.
    pub long_tailed: BTreeSet<u8>,
}

impl ClassWeights {
    pub fn is_empty(&self) -> bool {
        self.overlap_count == 0
    }

    /// Unit weight for every class in `b`; used when re-weighting is off.
    pub fn uniform(a: &BTreeSet<u8>, b: &BTreeSet<u8>, num_classes: usize) -> Self {
        let overlap: BTreeSet<u8> = a.intersection(b).copied().collect();
        let mut w = vec![0.0; num_classes];
        for &c in b {
            w[c as usize] = 1.0;
        }
        ClassWeights {
            w,
            overlap_count: overlap.len(),
            overlap,
            long_tailed: BTreeSet::new(),
        }
    }
}

/// Zero outside the overlap, 1 on shared regular classes and `(s+1)/s` on
/// shared long-tailed classes.
pub fn class_weights(a: &BTreeSet<u8>, b: &BTreeSet<u8>, taxonomy: &Taxonomy) -> ClassWeights {
    let overlap: BTreeSet<u8> = a.intersection(b).copied().collect();
    let s = overlap.len();
    let long_tailed: BTreeSet<u8> = overlap
        .iter()
        .copied()
        .filter(|&c| taxonomy.class(c).long_tailed)
        .collect();
    let mut w = vec![0.0; taxonomy.num_classes()];
    for &c in &overlap {
        w[c as usize] = if long_tailed.contains(&c) {
            (s as f64 + 1.0) / s as f64
        } else {
            1.0
        };
    }
    ClassWeights {
        w,
        overlap_count: s,
        overlap,
        long_tailed,
    }
}

/// `S^c(h,w) = W^c · cos(f^{h,w}, ρ^c) / τ`, shaped `[C, h, w]`. Classes
/// without a prototype get [`ABSENT_LOGIT`].
pub fn similarity_logits<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    protos: &PrototypeSet,
    weights: &ClassWeights,
    tau: f64,
) -> Result<Var> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(
            "similarity_logits",
            format!("tau must be positive, got {tau}"),
        ));
    }
    let fs = tape.shape(features).to_vec();
    let ps = tape.shape(protos.vectors).to_vec();
    let c = protos.present.len();
    if fs.len() != 3 || ps != [c, fs[0]] || weights.w.len() != c {
        return Err(Error::Shape {
            op: "similarity_logits",
            lhs: fs,
            rhs: ps,
        });
    }
    let px = fs[1] * fs[2];
    let eps = T::c(NORM_EPS);
    let fnorm = tape.l2_normalize(features, 0, eps)?;
    let fnorm = tape.reshape(fnorm, &[fs[0], px])?;
    let pnorm = tape.l2_normalize(protos.vectors, 1, eps)?;
    let cos = tape.matmul(pnorm, fnorm)?;
    let scale = Tensor::from_fn(&[c, px], |i| {
        let k = i / px;
        if protos.present[k] {
            T::c(weights.w[k] / tau)
        } else {
            T::zero()
        }
    });
    let offset = Tensor::from_fn(&[c, px], |i| {
        if protos.present[i / px] {
            T::zero()
        } else {
            T::c(ABSENT_LOGIT)
        }
    });
    let scale = tape.constant(scale);
    let offset = tape.constant(offset);
    let s = tape.mul(cos, scale)?;
    let s = tape.add(s, offset)?;
    tape.reshape(s, &[c, fs[1], fs[2]])
}

/// Mean `-log softmax(logits)[label]` over pixels whose class has a
/// prototype. Zero when nothing qualifies.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    label: &LabelMap,
    present: &[bool],
) -> Result<PixelLoss> {
    loss::cross_entropy_where(tape, logits, label.data(), |l| {
        present.get(l as usize).copied().unwrap_or(false)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpaConfig {
    pub tau: f64,
    pub stop_grad_protos: bool,
    pub enable_reweight: bool,
}

impl Default for FpaConfig {
    fn default() -> Self {
        FpaConfig {
            tau: 0.1,
            stop_grad_protos: false,
            enable_reweight: true,
        }
    }
}

/// Features `[D,h,w]` of one domain with its labels at feature resolution.
#[derive(Debug, Clone, Copy)]
pub struct DomainFeatures<'a> {
    pub features: Var,
    pub label: &'a LabelMap,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    MixedToSource,
    SourceToMixed,
    NightToSource,
    SourceToNight,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::MixedToSource,
        Direction::SourceToMixed,
        Direction::NightToSource,
        Direction::SourceToNight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::MixedToSource => "m->s",
            Direction::SourceToMixed => "s->m",
            Direction::NightToSource => "n->s",
            Direction::SourceToNight => "s->n",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub direction: Direction,
    pub loss: Var,
    pub valid: usize,
    /// No shared classes, so the term was not evaluated.
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct ProtoLoss {
    pub total: Var,
    pub terms: Vec<Term>,
}

/// One directed term: features and labels of `a` against prototypes of `b`.
pub fn directed_term<T: Scalar>(
    tape: &mut Tape<T>,
    a: &DomainFeatures,
    protos_b: &PrototypeSet,
    taxonomy: &Taxonomy,
    cfg: &FpaConfig,
    direction: Direction,
) -> Result<Term> {
    let classes_a: BTreeSet<u8> = a
        .label
        .data()
        .iter()
        .copied()
        .filter(|&l| l != IGNORE)
        .collect();
    let classes_b = protos_b.classes();
    let weights = if cfg.enable_reweight {
        class_weights(&classes_a, &classes_b, taxonomy)
    } else {
        ClassWeights::uniform(&classes_a, &classes_b, taxonomy.num_classes())
    };
    if weights.is_empty() {
        return Ok(Term {
            direction,
            loss: tape.constant(Tensor::scalar(T::zero())),
            valid: 0,
            skipped: true,
        });
    }
    let logits = similarity_logits(tape, a.features, protos_b, &weights, cfg.tau)?;
    let r = contrastive_loss(tape, logits, a.label, &protos_b.present)?;
    Ok(Term {
        direction,
        loss: r.loss,
        valid: r.valid,
        skipped: false,
    })
}

/// `L_{m→s} + L_{s→m} + L_{n→s} + L_{s→n}`.
pub fn proto_loss<T: Scalar>(
    tape: &mut Tape<T>,
    source: &DomainFeatures,
    mixed: &DomainFeatures,
    night: &DomainFeatures,
    taxonomy: &Taxonomy,
    cfg: &FpaConfig,
) -> Result<ProtoLoss> {
    let k = taxonomy.num_classes();
    let protos = |tape: &mut Tape<T>, d: &DomainFeatures| -> Result<PrototypeSet> {
        let mut p = compute_prototypes(tape, d.features, d.label, k, d.domain)?;
        if cfg.stop_grad_protos {
            p.vectors = tape.detach(p.vectors);
        }
        Ok(p)
    };
    let rho_s = protos(tape, source)?;
    let rho_m = protos(tape, mixed)?;
    let rho_n = protos(tape, night)?;
    let mut terms = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let (a, b) = match dir {
            Direction::MixedToSource => (mixed, &rho_s),
            Direction::SourceToMixed => (source, &rho_m),
            Direction::NightToSource => (night, &rho_s),
            Direction::SourceToNight => (source, &rho_n),
        };
        terms.push(directed_term(tape, a, b, taxonomy, cfg, dir)?);
    }
    let mut total = terms[0].loss;
    for t in &terms[1..] {
        total = tape.add(total, t.loss)?;
    }
    Ok(ProtoLoss { total, terms })
}
