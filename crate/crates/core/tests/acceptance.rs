//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line to stderr (outside the harness capture) before asserting.

use nightseg::dsr::{self, BankConfig, FixedClasses, LongTailedBank, Origin};
use nightseg::evalkit::EvalReport;
use nightseg::fpa::{self, class_weights, Direction, DomainFeatures, FpaConfig};
use nightseg::gradcheck::{self, GradcheckOptions};
use nightseg::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use nightseg::pseudo::{refine_night_pseudo, RefineConfig};
use nightseg::rng::rng_for;
use nightseg::synth::dataset::{source_sample, target_pair};
use nightseg::synth::taxonomy::{BUS, CAR, PERSON, ROAD, SKY, VEGETATION};
use nightseg::synth::{build_dataset, dir_digest, Dataset, DatasetConfig, Domain, Taxonomy};
use nightseg::trainer::{
    self, apply_variant, RunOptions, StepReport, TrainConfig, METRICS_LOG, STATE_FILE,
};
use nightseg::{LabelMap, Tape, Tensor, IGNORE};
use rand::Rng;
use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn verdict(n: u32, pass: bool, detail: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "criterion {n}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn check(n: u32, pass: bool, detail: String) {
    verdict(n, pass, &detail);
    assert!(pass, "criterion {n}: {detail}");
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let outcomes = gradcheck::run_gradcheck(&GradcheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} ({:.2e} > {:.0e})", o.name, o.max_rel_err, o.tol))
        .collect();
    let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let names: BTreeSet<&str> = outcomes.iter().map(|o| o.name).collect();
    let required = [
        "sup_loss",
        "mix_loss",
        "proto_mixed_to_source",
        "proto_source_to_mixed",
        "proto_night_to_source",
        "proto_source_to_night",
    ];
    let covered = required.iter().all(|r| names.contains(r));
    check(
        1,
        failed.is_empty() && covered && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x {} seeds, worst rel err {worst:.2e}, {:.1}s{}",
            outcomes.len(),
            gradcheck::DEFAULT_SEEDS,
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    );
}

fn random_labels(rng: &mut impl Rng, h: usize, w: usize, pool: &[u8]) -> LabelMap {
    Tensor::from_fn(&[h, w], |_| pool[rng.random_range(0..pool.len())])
}

fn term_value(
    fa: &Tensor<f64>,
    ya: &LabelMap,
    fb: &Tensor<f64>,
    yb: &LabelMap,
) -> (f64, Tensor<f64>, Tensor<f64>) {
    let tax = Taxonomy::street();
    let mut tape = Tape::<f64>::new();
    let va = tape.param(fa.clone());
    let vb = tape.param(fb.clone());
    let protos =
        fpa::compute_prototypes(&mut tape, vb, yb, tax.num_classes(), Domain::SourceDay).unwrap();
    let a = DomainFeatures {
        features: va,
        label: ya,
        domain: Domain::Mixed,
    };
    let term = fpa::directed_term(
        &mut tape,
        &a,
        &protos,
        &tax,
        &FpaConfig::default(),
        Direction::MixedToSource,
    )
    .unwrap();
    let loss = tape.value(term.loss).data()[0];
    if term.skipped {
        return (loss, Tensor::zeros(fa.shape()), Tensor::zeros(fb.shape()));
    }
    tape.backward(term.loss).unwrap();
    let ga = tape.grad(va).unwrap_or_else(|| Tensor::zeros(fa.shape()));
    let gb = tape.grad(vb).unwrap_or_else(|| Tensor::zeros(fb.shape()));
    (loss, ga, gb)
}

#[test]
fn criterion_02_prototypes_match_brute_force() {
    let tax = Taxonomy::street();
    let k = tax.num_classes();
    let mut rng = rng_for(2, &[]);
    let mut worst_diff = 0.0f64;
    let mut flag_errors = 0;
    let mut worst_perturb = 0.0f64;
    let pool = [ROAD, SKY, VEGETATION, PERSON, CAR, BUS, IGNORE];
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let feats = Tensor::from_fn(&[d, h, w], |_| rng.random_range(-2.0..2.0));
        let labels = random_labels(&mut rng, h, w, &pool);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(feats.clone());
        let protos = fpa::compute_prototypes(&mut tape, v, &labels, k, Domain::SourceDay).unwrap();
        let got = tape.value(protos.vectors);
        for c in 0..k {
            let pix: Vec<usize> = (0..h * w)
                .filter(|&p| labels.data()[p] == c as u8)
                .collect();
            if protos.present[c] == pix.is_empty() {
                flag_errors += 1;
            }
            for j in 0..d {
                let expect = if pix.is_empty() {
                    0.0
                } else {
                    pix.iter()
                        .map(|&p| feats.data()[j * h * w + p])
                        .sum::<f64>()
                        / pix.len() as f64
                };
                worst_diff = worst_diff.max((got.at(&[c, j]) - expect).abs());
            }
        }

        // Perturbing pixels that cannot reach the loss: anchor pixels whose
        // class has no prototype, and ignored prototype-side pixels.
        let fa = Tensor::from_fn(&[d, h, w], |_| rng.random_range(-2.0..2.0));
        let ya = random_labels(&mut rng, h, w, &pool);
        let (base, ga, gb) = term_value(&fa, &ya, &feats, &labels);
        let mut fa2 = fa.clone();
        let mut fb2 = feats.clone();
        for p in 0..h * w {
            let ca = ya.data()[p];
            let unreachable_a = ca == IGNORE || !protos.present[ca as usize];
            for j in 0..d {
                if unreachable_a {
                    fa2.data_mut()[j * h * w + p] += rng.random_range(-5.0..5.0);
                    worst_perturb = worst_perturb.max(ga.data()[j * h * w + p].abs());
                }
                if labels.data()[p] == IGNORE {
                    fb2.data_mut()[j * h * w + p] += rng.random_range(-5.0..5.0);
                    worst_perturb = worst_perturb.max(gb.data()[j * h * w + p].abs());
                }
            }
        }
        let (moved, _, _) = term_value(&fa2, &ya, &fb2, &labels);
        worst_perturb = worst_perturb.max((moved - base).abs());
    }
    check(
        2,
        worst_diff <= 1e-6 && flag_errors == 0 && worst_perturb <= 1e-10,
        format!(
            "50 instances: max |proto - brute force| {worst_diff:.1e}, {flag_errors} presence errors, \
             max effect of excluded pixels {worst_perturb:.1e}"
        ),
    );
}

#[test]
fn criterion_03_mixup_provenance() {
    let tax = Taxonomy::street();
    let data_cfg = DatasetConfig::default();
    let teacher = ModelParams::<f32>::init(ModelConfig::default(), 7).unwrap();
    let mut bank = LongTailedBank::new(BankConfig::default());
    let px = 64 * 64;
    let (mut violations, mut bank_pastes, mut pixels) = (0usize, 0usize, 0usize);
    for i in 0..100 {
        let s = source_sample(&data_cfg, &tax, i).unwrap();
        let (day, night) = target_pair(&data_cfg, &tax, i).unwrap();
        bank.push(&s.image, &s.label, &tax);
        let pd = teacher.forward(&day.image).unwrap().probs();
        let pn = teacher.forward(&night.image).unwrap().probs();
        let pseudo = refine_night_pseudo(&pd, &pn, &tax, &RefineConfig::default()).unwrap();
        let mut rng = rng_for(3, &[i as u64]);
        let mask = dsr::composite_mask(&s.label, &mut rng, &tax, FixedClasses::DynamicSmall, 0.5);
        let mixed = dsr::mix(&s.image, &s.label, &night.image, &pseudo.label, &mask).unwrap();
        let mixed = bank.apply(mixed, &mut rng).unwrap();

        let bank_px: Vec<usize> = (0..px)
            .filter(|&p| mixed.origin[p] == Origin::Bank)
            .collect();
        let entry = if bank_px.is_empty() {
            None
        } else {
            bank_pastes += 1;
            // The pasted entry is the one whose mask is exactly the bank pixels.
            bank.all_entries().find(|e| {
                (0..px).all(|p| (e.mask.data()[p] == 1) == bank_px.binary_search(&p).is_ok())
            })
        };
        if !bank_px.is_empty() && entry.is_none() {
            violations += bank_px.len();
        }
        for p in 0..px {
            pixels += 1;
            let (img, lbl): (&Tensor<f32>, u8) = match (mixed.origin[p], entry) {
                (Origin::Source, _) if mask.mask.data()[p] == 1 => (&s.image, s.label.data()[p]),
                (Origin::Night, _) if mask.mask.data()[p] == 0 => {
                    (&night.image, pseudo.label.data()[p])
                }
                (Origin::Bank, Some(e)) => (&e.image, e.label.data()[p]),
                _ => {
                    violations += 1;
                    continue;
                }
            };
            let same_img = (0..3).all(|c| mixed.image.data()[c * px + p] == img.data()[c * px + p]);
            if !same_img || mixed.label.data()[p] != lbl {
                violations += 1;
            }
        }
    }
    check(
        3,
        violations == 0 && bank_pastes > 0,
        format!("100 triples, {pixels} pixels ({bank_pastes} with a bank paste): {violations} violations"),
    );
}

#[test]
fn criterion_04_bank_fifo_and_admission() {
    let tax = Taxonomy::street();
    let mut rng = rng_for(4, &[]);
    let (h, w) = (8, 8);
    let mut violations = 0usize;
    let mut pushes = 0usize;
    for _ in 0..1000 {
        let cfg = BankConfig {
            capacity: rng.random_range(1..6),
            min_pixels: rng.random_range(1..20),
            apply_prob: 0.5,
        };
        let mut bank = LongTailedBank::new(cfg.clone());
        let mut model: VecDeque<u32> = VecDeque::new();
        for id in 0..rng.random_range(1..30u32) {
            pushes += 1;
            let bus_px = rng.random_range(0..=h * w);
            let label: LabelMap = Tensor::from_fn(&[h, w], |i| if i < bus_px { BUS } else { ROAD });
            let image = Tensor::filled(&[3, h, w], id as f32);
            let added = bank.push(&image, &label, &tax);
            let admit = bus_px >= cfg.min_pixels;
            if added != usize::from(admit) {
                violations += 1;
            }
            if admit {
                model.push_back(id);
                if model.len() > cfg.capacity {
                    model.pop_front();
                }
            }
            let ids: Vec<u32> = bank
                .entries(BUS)
                .map(|e| e.image.data()[0] as u32)
                .collect();
            if ids != model.iter().copied().collect::<Vec<_>>() || bank.len() > cfg.capacity {
                violations += 1;
            }
            if bank
                .all_entries()
                .any(|e| e.mask.data().iter().filter(|&&m| m == 1).count() < cfg.min_pixels)
            {
                violations += 1;
            }
        }
    }
    check(
        4,
        violations == 0,
        format!("1000 sequences, {pushes} pushes: {violations} violations"),
    );
}

#[test]
fn criterion_05_ema_geometric_decay() {
    let cfg = ModelConfig::default();
    let student = ModelParams::<f32>::init(cfg, 1).unwrap();
    let mut teacher = ModelParams::<f32>::init(cfg, 2).unwrap();
    let lambda = 0.999f32;
    let d0 = teacher.distance(&student) as f64;
    for _ in 0..50 {
        teacher.ema_update(&student, lambda).unwrap();
    }
    let d50 = teacher.distance(&student) as f64;
    let expect = 0.999f64.powi(50) * d0;
    let rel = (d50 - expect).abs() / expect;
    check(
        5,
        rel <= 1e-5,
        format!(
            "t=50, lambda=0.999: |teacher - student| {d50:.6} vs {expect:.6}, rel err {rel:.1e}"
        ),
    );
}

#[test]
fn criterion_06_reweighting() {
    let tax = Taxonomy::street();
    let a = BTreeSet::from([ROAD, BUS, SKY]);
    let b = BTreeSet::from([ROAD, BUS, CAR]);
    let w = class_weights(&a, &b, &tax);
    let weights_ok = w.overlap_count == 2
        && w.w[ROAD as usize] == 1.0
        && w.w[BUS as usize] == 1.5
        && (0..tax.num_classes() as u8)
            .filter(|c| *c != ROAD && *c != BUS)
            .all(|c| w.w[c as usize] == 0.0);

    // CAR is present only on the prototype side, so its weight is 0 and its
    // pixels must receive no gradient.
    let mut rng = rng_for(6, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (d, h, wd) = (4, 4, 4);
        let fa = Tensor::from_fn(&[d, h, wd], |_| rng.random_range(-1.0..1.0));
        let fb = Tensor::from_fn(&[d, h, wd], |_| rng.random_range(-1.0..1.0));
        let mut ya = random_labels(&mut rng, h, wd, &[ROAD, BUS, SKY]);
        let mut yb = random_labels(&mut rng, h, wd, &[ROAD, BUS, CAR]);
        ya.data_mut()[..2].copy_from_slice(&[ROAD, BUS]);
        yb.data_mut()[..3].copy_from_slice(&[ROAD, BUS, CAR]);
        let (_, _, gb) = term_value(&fa, &ya, &fb, &yb);
        for p in 0..h * wd {
            if yb.data()[p] == CAR {
                for j in 0..d {
                    worst = worst.max(gb.data()[j * h * wd + p].abs());
                }
            }
        }
    }
    check(
        6,
        weights_ok && worst <= 1e-10,
        format!(
            "weights road {} bus {} others 0: {weights_ok}; max |grad| on zero-weight class {worst:.1e}",
            w.w[ROAD as usize], w.w[BUS as usize]
        ),
    );
}

fn small_data() -> Dataset {
    let cfg = DatasetConfig {
        num_source: 8,
        num_target: 8,
        num_test: 4,
        ..DatasetConfig::default()
    };
    Dataset::generate(&cfg, &Taxonomy::street()).unwrap()
}

#[test]
fn criterion_07_loss_identity() {
    let data = small_data();
    let cfg = TrainConfig {
        total_iters: 40,
        eval_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    assert_eq!((cfg.alpha, cfg.beta), (1.0, 0.1));
    let dir = tempfile::tempdir().unwrap();
    let s = trainer::run(
        &cfg,
        &data,
        &Taxonomy::street(),
        dir.path(),
        &RunOptions::default(),
    )
    .unwrap();
    let worst = s
        .reports
        .iter()
        .map(|r| r.identity_gap(1.0, 0.1))
        .fold(0.0, f64::max);
    let with_proto = s.reports.iter().filter(|r| r.loss_proto > 0.0).count();
    check(
        7,
        worst <= 1e-6 && s.reports.len() == 40,
        format!("40 steps at alpha=1, beta=0.1 ({with_proto} with L_proto > 0): max identity gap {worst:.1e}"),
    );
}

const SEEDS: u64 = 3;
const EXPERIMENT_VARIANTS: [&str; 3] = ["baseline", "dsr_full", "full"];

struct Experiment {
    /// `[variant][seed]`
    reports: Vec<Vec<EvalReport>>,
    longest_run: Duration,
}

impl Experiment {
    fn mean(&self, v: usize, f: impl Fn(&EvalReport) -> f64) -> f64 {
        100.0 * self.reports[v].iter().map(f).sum::<f64>() / self.reports[v].len() as f64
    }

    fn miou(&self, v: usize) -> f64 {
        self.mean(v, |r| r.miou)
    }
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let tax = Taxonomy::street();
        let data = Dataset::generate(&DatasetConfig::default(), &tax).unwrap();
        let mut reports = Vec::new();
        let mut longest_run = Duration::ZERO;
        for variant in EXPERIMENT_VARIANTS {
            let mut row = Vec::new();
            for seed in 0..SEEDS {
                let mut cfg = TrainConfig {
                    seed,
                    eval_every: 0,
                    log_every: 0,
                    ..TrainConfig::default()
                };
                apply_variant(&mut cfg, variant).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let start = Instant::now();
                let s = trainer::run(&cfg, &data, &tax, dir.path(), &RunOptions::default()).unwrap();
                let took = start.elapsed();
                longest_run = longest_run.max(took);
                let r = s.final_eval.unwrap();
                let _ = writeln!(
                    std::io::stderr().lock(),
                    "  {variant} seed {seed}: night mIoU {:.2} (static {:.2}, dynamic+small {:.2}) in {:.0}s",
                    100.0 * r.miou,
                    100.0 * r.static_miou,
                    100.0 * r.dynamic_miou,
                    took.as_secs_f64()
                );
                row.push(r);
            }
            reports.push(row);
        }
        Experiment { reports, longest_run }
    })
}

#[test]
fn criterion_08_full_beats_baseline() {
    let e = experiment();
    let (base, full) = (e.miou(0), e.miou(2));
    check(
        8,
        full - base >= 5.0 && e.longest_run < Duration::from_secs(30 * 60),
        format!(
            "mean night mIoU baseline {base:.2}, full {full:.2} (+{:.2}); longest run {:.0}s",
            full - base,
            e.longest_run.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_ablation_ordering() {
    let e = experiment();
    let (base, dsr, full) = (e.miou(0), e.miou(1), e.miou(2));
    let pass = dsr >= base - 1.0 && full >= dsr - 1.0 && full >= base && full >= dsr;
    check(
        9,
        pass,
        format!("mean night mIoU baseline {base:.2} <= +DSR {dsr:.2} <= full {full:.2}"),
    );
}

#[test]
fn criterion_10_dynamic_and_small_emphasis() {
    let e = experiment();
    let d_static = e.mean(2, |r| r.static_miou) - e.mean(0, |r| r.static_miou);
    let d_dyn = e.mean(2, |r| r.dynamic_miou) - e.mean(0, |r| r.dynamic_miou);
    check(
        10,
        d_dyn > d_static,
        format!("full minus baseline: dynamic+small {d_dyn:+.2}, static {d_static:+.2}"),
    );
}

fn run_logs(
    cfg: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions,
    dir: &std::path::Path,
) -> (Vec<StepReport>, Vec<u8>) {
    let s = trainer::run(cfg, data, &Taxonomy::street(), dir, opts).unwrap();
    (s.reports, std::fs::read(dir.join(METRICS_LOG)).unwrap())
}

#[test]
fn criterion_11_determinism_and_persistence() {
    let tax = Taxonomy::street();
    let mut notes = Vec::new();

    let data_cfg = DatasetConfig {
        num_source: 6,
        num_target: 6,
        num_test: 3,
        ..DatasetConfig::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&data_cfg, &tax, d1.path()).unwrap();
    build_dataset(&data_cfg, &tax, d2.path()).unwrap();
    let same_digest = dir_digest(d1.path()).unwrap() == dir_digest(d2.path()).unwrap();
    let loaded = Dataset::load(d1.path()).unwrap();
    let generated = Dataset::generate(&data_cfg, &tax).unwrap();
    let dataset_exact = loaded.source == generated.source
        && loaded.target == generated.target
        && loaded.test == generated.test;
    notes.push(format!(
        "dataset digests equal {same_digest}, disk == memory {dataset_exact}"
    ));

    let cfg = TrainConfig {
        total_iters: 16,
        eval_every: 5,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (r1, r2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (rep1, log1) = run_logs(&cfg, &loaded, &RunOptions::default(), r1.path());
    let (rep2, log2) = run_logs(&cfg, &loaded, &RunOptions::default(), r2.path());
    let logs_identical = log1 == log2 && rep1 == rep2;
    notes.push(format!("repeat run metrics identical {logs_identical}"));

    let state = trainer::load_state(&r1.path().join(STATE_FILE), &cfg).unwrap();
    let ckpt = r1.path().join("student.bin");
    save_checkpoint(&state.student, &ckpt).unwrap();
    let ckpt_exact = load_checkpoint(&ckpt).unwrap() == state.student;
    notes.push(format!("checkpoint round trip exact {ckpt_exact}"));

    let r3 = tempfile::tempdir().unwrap();
    let stop = RunOptions {
        stop_after: Some(7),
        ..RunOptions::default()
    };
    let (mut rep3, _) = run_logs(&cfg, &loaded, &stop, r3.path());
    let resume = RunOptions {
        resume_from: Some(r3.path().join(STATE_FILE)),
        ..RunOptions::default()
    };
    let (rest, log3) = run_logs(&cfg, &loaded, &resume, r3.path());
    rep3.extend(rest);
    let resumed_state = trainer::load_state(&r3.path().join(STATE_FILE), &cfg).unwrap();
    let resume_exact = rep3 == rep1 && log3 == log1 && resumed_state == state;
    notes.push(format!(
        "resume after 7 of 16 steps reproduces trajectory {resume_exact}"
    ));

    check(
        11,
        same_digest && dataset_exact && logs_identical && ckpt_exact && resume_exact,
        notes.join("; "),
    );
}
