//! Dynamic-and-small object refinement: class-driven composite masks,
//! image/label mixup of source objects into night images, and FIFO memory
//! banks of long-tailed source instances.

use crate::error::{Error, Result};
use crate::loss::{self, PixelLoss};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::{Kind, Taxonomy};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{LabelMap, Tensor, IGNORE};
use rand::seq::index;
use rand::Rng as _;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Binary selector over an `[H, W]` grid plus the classes that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMask {
    /// 0/1 values.
    pub mask: Tensor<u8>,
    pub selected: BTreeSet<u8>,
}

impl CompositeMask {
    pub fn empty(h: usize, w: usize) -> Self {
        CompositeMask {
            mask: Tensor::zeros(&[h, w]),
            selected: BTreeSet::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0).count()
    }

    pub fn union(&self, other: &CompositeMask) -> Result<CompositeMask> {
        if self.mask.shape() != other.mask.shape() {
            return Err(Error::Shape {
                op: "mask union",
                lhs: self.mask.shape().to_vec(),
                rhs: other.mask.shape().to_vec(),
            });
        }
        let data = self
            .mask
            .data()
            .iter()
            .zip(other.mask.data())
            .map(|(&a, &b)| a | b)
            .collect();
        Ok(CompositeMask {
            mask: Tensor::new(self.mask.shape().to_vec(), data)?,
            selected: self.selected.union(&other.selected).copied().collect(),
        })
    }
}

/// Indicator of `label ∈ classes`; ignored pixels are never selected.
pub fn class_mask(label: &LabelMap, classes: &BTreeSet<u8>) -> CompositeMask {
    CompositeMask {
        mask: label.map(|v| u8::from(v != IGNORE && classes.contains(&v))),
        selected: classes.clone(),
    }
}

pub fn classes_present(label: &LabelMap) -> BTreeSet<u8> {
    label
        .data()
        .iter()
        .copied()
        .filter(|&v| v != IGNORE)
        .collect()
}

/// Uniformly picks `ceil(k * fraction)` of the `k` classes present, without
/// replacement.
pub fn select_random_classes(label: &LabelMap, rng: &mut Rng, fraction: f64) -> BTreeSet<u8> {
    let present: Vec<u8> = classes_present(label).into_iter().collect();
    if present.is_empty() {
        return BTreeSet::new();
    }
    let n = ((present.len() as f64 * fraction).ceil() as usize).clamp(1, present.len());
    index::sample(rng, present.len(), n)
        .into_iter()
        .map(|i| present[i])
        .collect()
}

/// Which classes are always pasted on top of the random selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedClasses {
    /// Random classes only (plain class mix).
    None,
    Small,
    Dynamic,
    /// Every dynamic-or-small class present.
    DynamicSmall,
}

impl FixedClasses {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(FixedClasses::None),
            "small" => Some(FixedClasses::Small),
            "dynamic" => Some(FixedClasses::Dynamic),
            "dynamic_small" => Some(FixedClasses::DynamicSmall),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FixedClasses::None => "none",
            FixedClasses::Small => "small",
            FixedClasses::Dynamic => "dynamic",
            FixedClasses::DynamicSmall => "dynamic_small",
        }
    }

    pub fn classes(self, taxonomy: &Taxonomy) -> BTreeSet<u8> {
        let kinds: &[Kind] = match self {
            FixedClasses::None => &[],
            FixedClasses::Small => &[Kind::Small],
            FixedClasses::Dynamic => &[Kind::Dynamic],
            FixedClasses::DynamicSmall => &[Kind::Small, Kind::Dynamic],
        };
        taxonomy
            .ids_where(|c| kinds.contains(&c.kind))
            .into_iter()
            .collect()
    }
}

/// `M_c = M_r ∪ M_m`: random-class mask joined with the mask of the fixed
/// (by default all dynamic-and-small) classes present in the source label.
pub fn composite_mask(
    label: &LabelMap,
    rng: &mut Rng,
    taxonomy: &Taxonomy,
    fixed: FixedClasses,
    fraction: f64,
) -> CompositeMask {
    let random = class_mask(label, &select_random_classes(label, rng, fraction));
    let present = classes_present(label);
    let fixed: BTreeSet<u8> = fixed
        .classes(taxonomy)
        .intersection(&present)
        .copied()
        .collect();
    random
        .union(&class_mask(label, &fixed))
        .expect("same label grid")
}

fn check_mask(op: &'static str, plane: &[usize], mask: &Tensor<u8>) -> Result<()> {
    if plane != mask.shape() {
        return Err(Error::Shape {
            op,
            lhs: plane.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    Ok(())
}

/// `M⊙X_s + (1−M)⊙X_n` over `[C, H, W]` images with an `[H, W]` mask.
pub fn image_mixup(
    x_source: &Tensor<f32>,
    x_night: &Tensor<f32>,
    mask: &Tensor<u8>,
) -> Result<Tensor<f32>> {
    if x_source.shape() != x_night.shape() || x_source.rank() != 3 {
        return Err(Error::Shape {
            op: "image_mixup",
            lhs: x_source.shape().to_vec(),
            rhs: x_night.shape().to_vec(),
        });
    }
    check_mask("image_mixup", &x_source.shape()[1..], mask)?;
    let px = mask.numel();
    let m = mask.data();
    let data = x_source
        .data()
        .iter()
        .zip(x_night.data())
        .enumerate()
        .map(|(i, (&s, &n))| if m[i % px] != 0 { s } else { n })
        .collect();
    Tensor::new(x_source.shape().to_vec(), data)
}

/// `M⊙Y_s + (1−M)⊙y'_n`; ignore values only enter from the night side.
pub fn label_mixup(y_source: &LabelMap, y_night: &LabelMap, mask: &Tensor<u8>) -> Result<LabelMap> {
    if y_source.shape() != y_night.shape() {
        return Err(Error::Shape {
            op: "label_mixup",
            lhs: y_source.shape().to_vec(),
            rhs: y_night.shape().to_vec(),
        });
    }
    check_mask("label_mixup", y_source.shape(), mask)?;
    let data = y_source
        .data()
        .iter()
        .zip(y_night.data())
        .zip(mask.data())
        .map(|((&s, &n), &m)| if m != 0 { s } else { n })
        .collect();
    Tensor::new(y_source.shape().to_vec(), data)
}

/// Where a mixed pixel came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Source,
    Night,
    Bank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub origin: Vec<Origin>,
}

/// Image and label mixup under one mask, with per-pixel provenance.
pub fn mix(
    x_source: &Tensor<f32>,
    y_source: &LabelMap,
    x_night: &Tensor<f32>,
    y_night: &LabelMap,
    mask: &CompositeMask,
) -> Result<MixedSample> {
    let image = image_mixup(x_source, x_night, &mask.mask)?;
    let label = label_mixup(y_source, y_night, &mask.mask)?;
    let origin = mask
        .mask
        .data()
        .iter()
        .map(|&m| {
            if m != 0 {
                Origin::Source
            } else {
                Origin::Night
            }
        })
        .collect();
    Ok(MixedSample {
        image,
        label,
        origin,
    })
}

/// One long-tailed instance: `B_i`, `B_m`, `B_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub image: Tensor<f32>,
    pub mask: Tensor<u8>,
    pub label: LabelMap,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    /// Entries kept per long-tailed class.
    pub capacity: usize,
    /// Minimum class pixels for admission.
    pub min_pixels: usize,
    /// Probability of pasting an entry into a mixed sample.
    pub apply_prob: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            capacity: 16,
            min_pixels: 32,
            apply_prob: 0.5,
        }
    }
}

/// Per-class FIFO queues of long-tailed source instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailedBank {
    pub config: BankConfig,
    queues: BTreeMap<u8, VecDeque<BankEntry>>,
}

impl LongTailedBank {
    pub fn new(config: BankConfig) -> Self {
        LongTailedBank {
            config,
            queues: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self, class: u8) -> impl Iterator<Item = &BankEntry> {
        self.queues.get(&class).into_iter().flatten()
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.queues.values().flatten()
    }

    /// Enqueues an entry, evicting the oldest of its class beyond capacity.
    /// Entries below the admission threshold are dropped.
    pub fn insert(&mut self, entry: BankEntry) -> bool {
        let count = entry.mask.data().iter().filter(|&&m| m != 0).count();
        if count < self.config.min_pixels || self.config.capacity == 0 {
            return false;
        }
        let q = self.queues.entry(entry.class).or_default();
        q.push_back(entry);
        while q.len() > self.config.capacity {
            q.pop_front();
        }
        true
    }

    /// Admits every long-tailed class of the source sample that covers at
    /// least `min_pixels` pixels. Returns how many entries were added.
    pub fn push(&mut self, image: &Tensor<f32>, label: &LabelMap, taxonomy: &Taxonomy) -> usize {
        let mut added = 0;
        for class in taxonomy.long_tailed_ids() {
            let m = class_mask(label, &BTreeSet::from([class]));
            if m.count() >= self.config.min_pixels {
                added += usize::from(self.insert(BankEntry {
                    image: image.clone(),
                    mask: m.mask,
                    label: label.clone(),
                    class,
                }));
            }
        }
        added
    }

    /// With probability `apply_prob` (and a non-empty bank) pastes one
    /// uniformly drawn entry: `X' = B_m⊙B_i + (1−B_m)⊙X`, likewise labels.
    pub fn apply(&self, mixed: MixedSample, rng: &mut Rng) -> Result<MixedSample> {
        let total = self.len();
        if total == 0 || !rng.random_bool(self.config.apply_prob.clamp(0.0, 1.0)) {
            return Ok(mixed);
        }
        let pick = rng.random_range(0..total);
        let entry = self.all_entries().nth(pick).expect("index below total");
        paste(mixed, entry)
    }
}

/// Pastes a bank entry through its mask.
pub fn paste(mixed: MixedSample, entry: &BankEntry) -> Result<MixedSample> {
    let image = image_mixup(&entry.image, &mixed.image, &entry.mask)?;
    let label = label_mixup(&entry.label, &mixed.label, &entry.mask)?;
    let origin = mixed
        .origin
        .iter()
        .zip(entry.mask.data())
        .map(|(&o, &m)| if m != 0 { Origin::Bank } else { o })
        .collect();
    Ok(MixedSample {
        image,
        label,
        origin,
    })
}

/// Pixel-averaged cross-entropy of student logits on the mixed image
/// against the mixed label. Zero when every pixel is ignored.
pub fn mix_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    y_mixed: &LabelMap,
) -> Result<PixelLoss> {
    let r = loss::cross_entropy(tape, logits, y_mixed.data())?;
    if r.valid == 0 {
        log::warn!("mix_loss: every pixel ignored, contributing 0");
    }
    Ok(r)
}
