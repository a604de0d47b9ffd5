//! Objective assembly, optimisation schedule and the training loop.

mod optim;
mod run;
mod state;

pub use optim::{adamw_step, AdamConfig, AdamState};
pub use run::{run, RunOptions, RunSummary, EVAL_LOG, METRICS_LOG, STATE_FILE};
pub use state::{load_state, load_student, save_state, TrainState};

use crate::dsr::{self, BankConfig, CompositeMask, FixedClasses};
use crate::error::{Error, Result};
use crate::fpa::{self, DomainFeatures, FpaConfig, FEATURE_STRIDE};
use crate::loss::{self, PixelLoss};
use crate::model::ModelConfig;
use crate::pseudo::{refine_night_pseudo, RefineConfig};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::synth::{Domain, Taxonomy};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{LabelMap, Tensor};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Fraction of `total_iters` spent in linear warmup.
    pub warmup_frac: f64,
    pub poly_power: f64,
    /// Even; half source samples, half target pairs.
    pub batch_size: usize,
    pub total_iters: usize,
    pub ema_lambda: f64,
    /// Use `min(1 - 1/(t+1), ema_lambda)` so the teacher forgets its
    /// random initialisation quickly.
    pub ema_warmup: bool,
    pub seed: u64,
    pub dsr: bool,
    pub bank: bool,
    pub fpa: bool,
    pub mix_classes: FixedClasses,
    pub random_class_fraction: f64,
    pub bank_config: BankConfig,
    pub fpa_config: FpaConfig,
    pub pseudo: RefineConfig,
    pub model: ModelConfig,
    /// Evaluate on the night test split every this many steps (0: end only).
    pub eval_every: usize,
    /// Write the training state every this many steps (0: end only).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            base_lr: 6e-4,
            weight_decay: 1e-2,
            warmup_ratio: 1e-6,
            warmup_frac: 0.05,
            poly_power: 0.9,
            batch_size: 2,
            total_iters: 2000,
            ema_lambda: 0.999,
            ema_warmup: true,
            seed: 0,
            dsr: true,
            bank: true,
            fpa: true,
            mix_classes: FixedClasses::DynamicSmall,
            random_class_fraction: 0.5,
            bank_config: BankConfig::default(),
            fpa_config: FpaConfig::default(),
            pseudo: RefineConfig::default(),
            model: ModelConfig::default(),
            eval_every: 500,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            ));
        }
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("warmup_ratio", self.warmup_ratio),
            ("poly_power", self.poly_power),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!(
                "warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return bad(format!(
                "ema_lambda must lie in [0, 1], got {}",
                self.ema_lambda
            ));
        }
        if !(self.random_class_fraction > 0.0 && self.random_class_fraction <= 1.0) {
            return bad(format!(
                "random_class_fraction must lie in (0, 1], got {}",
                self.random_class_fraction
            ));
        }
        if self.fpa_config.tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!(
                "fpa tau must be positive, got {}",
                self.fpa_config.tau
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.total_iters as f64).round() as usize
    }

    /// Samples of each kind per step.
    pub fn pairs_per_step(&self) -> usize {
        self.batch_size / 2
    }

    /// Whether the teacher, mixup and night branches run at all.
    pub fn uses_target(&self) -> bool {
        self.alpha != 0.0 || self.fpa
    }

    pub fn ema_lambda_at(&self, iter: usize) -> f64 {
        if self.ema_warmup {
            (1.0 - 1.0 / (iter as f64 + 1.0)).min(self.ema_lambda)
        } else {
            self.ema_lambda
        }
    }
}

/// Named ablation variants, applied on top of a base config.
pub const VARIANTS: &[&str] = &[
    "baseline",
    "dsr",
    "dsr_full",
    "dsr_fpa_nw",
    "full",
    "fpa_only",
    "random",
    "random_small",
    "random_dynamic",
    "self_training",
];

pub fn apply_variant(cfg: &mut TrainConfig, name: &str) -> Result<()> {
    let set = |cfg: &mut TrainConfig,
               dsr: bool,
               bank: bool,
               fpa: bool,
               reweight: bool,
               mix: FixedClasses| {
        cfg.dsr = dsr;
        cfg.bank = bank;
        cfg.fpa = fpa;
        cfg.fpa_config.enable_reweight = reweight;
        cfg.mix_classes = mix;
    };
    match name {
        "baseline" => {
            set(cfg, false, false, false, false, FixedClasses::DynamicSmall);
            cfg.alpha = 0.0;
            cfg.beta = 0.0;
        }
        "dsr" => set(cfg, true, false, false, false, FixedClasses::DynamicSmall),
        "dsr_full" => set(cfg, true, true, false, false, FixedClasses::DynamicSmall),
        "dsr_fpa_nw" => set(cfg, true, true, true, false, FixedClasses::DynamicSmall),
        "full" => set(cfg, true, true, true, true, FixedClasses::DynamicSmall),
        "fpa_only" => set(cfg, false, false, true, true, FixedClasses::DynamicSmall),
        "random" => set(cfg, true, true, true, true, FixedClasses::None),
        "random_small" => set(cfg, true, true, true, true, FixedClasses::Small),
        "random_dynamic" => set(cfg, true, true, true, true, FixedClasses::Dynamic),
        "self_training" => {
            set(cfg, false, false, false, false, FixedClasses::DynamicSmall);
            cfg.beta = 0.0;
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown variant {name:?}; expected one of {}",
                VARIANTS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Linear warmup from `base_lr * warmup_ratio`, then polynomial decay to 0.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_iters();
    let base = cfg.base_lr;
    if iter < warm {
        let r = cfg.warmup_ratio;
        return base * (r + (1.0 - r) * iter as f64 / warm as f64);
    }
    if cfg.total_iters <= warm {
        return base;
    }
    let progress = ((iter - warm) as f64 / (cfg.total_iters - warm) as f64).min(1.0);
    base * (1.0 - progress).powf(cfg.poly_power)
}

/// Pixel-averaged cross-entropy against the source ground truth.
pub fn sup_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
) -> Result<PixelLoss> {
    loss::cross_entropy(tape, logits, labels.data())
}

/// `L_sup + α·L_mix + β·L_proto`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    sup: Var,
    mix: Var,
    proto: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let m = tape.scale(mix, T::c(alpha));
    let p = tape.scale(proto, T::c(beta));
    let l = tape.add(sup, m)?;
    tape.add(l, p)
}

/// One source sample and one coarsely aligned target pair.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub source_image: &'a Tensor<f32>,
    pub source_label: &'a LabelMap,
    pub target_day: &'a Tensor<f32>,
    pub target_night: &'a Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_mix: f64,
    pub loss_proto: f64,
    pub lr: f64,
    /// Fraction of night pixels left unlabelled by pseudo refinement.
    pub pseudo_ignored: f64,
    pub seconds: f64,
}

/// Timing is excluded from equality.
impl PartialEq for StepReport {
    fn eq(&self, o: &Self) -> bool {
        self.iteration == o.iteration
            && self.loss_total.to_bits() == o.loss_total.to_bits()
            && self.loss_sup.to_bits() == o.loss_sup.to_bits()
            && self.loss_mix.to_bits() == o.loss_mix.to_bits()
            && self.loss_proto.to_bits() == o.loss_proto.to_bits()
            && self.lr.to_bits() == o.lr.to_bits()
            && self.pseudo_ignored.to_bits() == o.pseudo_ignored.to_bits()
    }
}

impl StepReport {
    /// `|total − (sup + α·mix + β·proto)|`.
    pub fn identity_gap(&self, alpha: f64, beta: f64) -> f64 {
        (self.loss_total - (self.loss_sup + alpha * self.loss_mix + beta * self.loss_proto)).abs()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.loss_total, self.loss_sup, self.loss_mix, self.loss_proto, self.lr
        )
    }
}

fn mean_var(tape: &mut Tape<f32>, vars: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(if vars.len() == 1 {
        acc
    } else {
        tape.scale(acc, 1.0 / vars.len() as f32)
    })
}

/// Forward, backward, AdamW and EMA for one batch.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    taxonomy: &Taxonomy,
    batch: &[BatchItem],
) -> Result<StepReport> {
    let started = Instant::now();
    let t = state.iteration;
    let lr = lr_schedule(t, cfg);
    let mut tape = Tape::<f32>::new();
    let student = state.student.register(&mut tape, true);
    let (mut sups, mut mixes, mut protos) = (Vec::new(), Vec::new(), Vec::new());
    let mut ignored = 0.0;
    for (j, item) in batch.iter().enumerate() {
        if cfg.bank {
            state
                .bank
                .push(item.source_image, item.source_label, taxonomy);
        }
        let xs = tape.constant(item.source_image.clone());
        let out_s = student.forward(&mut tape, xs)?;
        sups.push(sup_loss(&mut tape, out_s.logits, item.source_label)?.loss);
        if !cfg.uses_target() {
            continue;
        }

        let day = state.teacher.forward(item.target_day)?.probs();
        let night = state.teacher.forward(item.target_night)?.probs();
        let pseudo = refine_night_pseudo(&day, &night, taxonomy, &cfg.pseudo)?;
        ignored += pseudo.ignored_fraction() / batch.len() as f64;

        let (h, w) = (item.source_label.shape()[0], item.source_label.shape()[1]);
        let path = [t as u64, j as u64];
        let mask = if cfg.dsr {
            let mut rng = rng_for(cfg.seed, &[stream::MIX_CLASSES, path[0], path[1]]);
            dsr::composite_mask(
                item.source_label,
                &mut rng,
                taxonomy,
                cfg.mix_classes,
                cfg.random_class_fraction,
            )
        } else {
            CompositeMask::empty(h, w)
        };
        let mut mixed = dsr::mix(
            item.source_image,
            item.source_label,
            item.target_night,
            &pseudo.label,
            &mask,
        )?;
        if cfg.bank {
            let mut rng = rng_for(cfg.seed, &[stream::BANK, path[0], path[1]]);
            mixed = state.bank.apply(mixed, &mut rng)?;
        }
        let xm = tape.constant(mixed.image);
        let out_m = student.forward(&mut tape, xm)?;
        let lm = dsr::mix_loss(&mut tape, out_m.logits, &mixed.label)?;
        if lm.valid == 0 {
            state.empty_mix += 1;
        }
        mixes.push(lm.loss);

        if cfg.fpa {
            let xn = tape.constant(item.target_night.clone());
            let f_n = student.features(&mut tape, xn)?;
            let ys = fpa::downsample_labels(item.source_label, FEATURE_STRIDE)?;
            let ym = fpa::downsample_labels(&mixed.label, FEATURE_STRIDE)?;
            let yn = fpa::downsample_labels(&pseudo.label, FEATURE_STRIDE)?;
            let d = |features, label, domain| DomainFeatures {
                features,
                label,
                domain,
            };
            let pl = fpa::proto_loss(
                &mut tape,
                &d(out_s.features, &ys, Domain::SourceDay),
                &d(out_m.features, &ym, Domain::Mixed),
                &d(f_n, &yn, Domain::TargetNight),
                taxonomy,
                &cfg.fpa_config,
            )?;
            state.empty_proto += pl
                .terms
                .iter()
                .filter(|t| t.skipped || t.valid == 0)
                .count() as u64;
            protos.push(pl.total);
        }
    }
    let l_sup = mean_var(&mut tape, &sups)?;
    let l_mix = mean_var(&mut tape, &mixes)?;
    let l_proto = mean_var(&mut tape, &protos)?;
    let total = total_loss(&mut tape, l_sup, l_mix, l_proto, cfg.alpha, cfg.beta)?;
    let scalar = |v: Var| tape.value(v).data()[0] as f64;
    let (vs, vm, vp, vt) = (scalar(l_sup), scalar(l_mix), scalar(l_proto), scalar(total));
    if !vt.is_finite() {
        return Err(Error::NonFinite {
            op: "train_step",
            detail: format!(
                "iteration {t}: loss_sup={vs} loss_mix={vm} loss_proto={vp} total={vt}"
            ),
        });
    }
    tape.backward(total)?;
    let grads: Vec<Tensor<f32>> = student
        .vars()
        .iter()
        .zip(state.student.entries())
        .map(|(&v, (_, p))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);
    adamw_step(
        state.student.entries_mut(),
        &grads,
        &mut state.adam,
        lr,
        &cfg.adam(),
    )?;
    state
        .teacher
        .ema_update(&state.student, cfg.ema_lambda_at(t) as f32)?;
    state.iteration += 1;
    Ok(StepReport {
        iteration: t,
        loss_total: vt,
        loss_sup: vs,
        loss_mix: vm,
        loss_proto: vp,
        lr,
        pseudo_ignored: ignored,
        seconds: started.elapsed().as_secs_f64(),
    })
}
