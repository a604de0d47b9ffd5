//! Central finite-difference verification, in f64, of every differentiable
//! tape operation and of the supervised, mixup and prototype objectives.
//!
//! Each check builds a small random instance per seed, reduces a
//! non-scalar output to a scalar through a fixed random weighting, and
//! compares the tape gradient of every input element with
//! `(L(x+h) - L(x-h)) / 2h`.

use crate::dsr;
use crate::error::{Error, Result};
use crate::fpa::{self, DomainFeatures, FpaConfig};
use crate::model::{ModelConfig, ParamVars};
use crate::rng::{rng_for, Rng};
use crate::synth::taxonomy::{BUILDING, BUS, CAR, PERSON, ROAD, SKY, VEGETATION};
use crate::synth::{Domain, Taxonomy};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{LabelMap, Tensor, IGNORE};
use crate::trainer::sup_loss;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;

pub const STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 10;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

struct Check {
    name: &'static str,
    tol: f64,
    make: fn(&mut Rng) -> Case,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub tol: f64,
    pub max_rel_err: f64,
    /// Seed index at which `max_rel_err` occurred.
    pub worst_seed: u64,
    /// Input elements compared, over all seeds.
    pub elements: usize,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub master_seed: u64,
    /// Test hook: perturb the analytic gradient of the named check.
    pub corrupt: Option<String>,
    /// Run only checks whose name contains this string.
    pub filter: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: DEFAULT_SEEDS,
            master_seed: 0,
            corrupt: None,
            filter: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Magnitudes in `[lo, hi]` with random sign, keeping kinks and poles out
/// of reach of the finite-difference step.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn labels(rng: &mut Rng, shape: &[usize], pool: &[u8]) -> LabelMap {
    Tensor::from_fn(shape, |_| pool[rng.random_range(0..pool.len())])
}

fn case(
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

fn unary(x: Tensor<f64>, f: fn(&mut Tape<f64>, Var) -> Var) -> Case {
    case(vec![x], move |t, v| Ok(f(t, v[0])))
}

fn binary(a: Tensor<f64>, b: Tensor<f64>, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    case(vec![a, b], move |t, v| f(t, v[0], v[1]))
}

fn conv_case(rng: &mut Rng, k: usize, stride: usize) -> Case {
    let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let x = normal(rng, &[1, c, h, w]);
    let kern = normal(rng, &[o, c, k, k]);
    let bias = normal(rng, &[o]);
    case(vec![x, kern, bias], move |t, v| {
        t.conv2d(v[0], v[1], v[2], stride)
    })
}

const TAXONOMY_POOL: [u8; 6] = [ROAD, SKY, BUILDING, PERSON, CAR, BUS];

fn proto_case(rng: &mut Rng, direction: fpa::Direction) -> Case {
    let taxonomy = Taxonomy::street();
    let (d, h, w) = (4, 4, 4);
    let mut with_ignore = TAXONOMY_POOL.to_vec();
    with_ignore.push(IGNORE);
    let mut ys = labels(rng, &[h, w], &TAXONOMY_POOL[..5]);
    let mut ym = labels(rng, &[h, w], &with_ignore);
    let mut yn = labels(rng, &[h, w], &with_ignore);
    // Guarantee a long-tailed class in every overlap so the re-weighting
    // path is exercised, and a class only the anchor domain has.
    ys.data_mut()[0] = BUS;
    ym.data_mut()[0] = BUS;
    yn.data_mut()[0] = BUS;
    ys.data_mut()[1] = ROAD;
    ym.data_mut()[1] = ROAD;
    yn.data_mut()[1] = ROAD;
    ys.data_mut()[2] = VEGETATION;
    let inputs = vec![
        normal(rng, &[d, h, w]),
        normal(rng, &[d, h, w]),
        normal(rng, &[d, h, w]),
    ];
    case(inputs, move |t, v| {
        let dom = |features, label, domain| DomainFeatures {
            features,
            label,
            domain,
        };
        let loss = fpa::proto_loss(
            t,
            &dom(v[0], &ys, Domain::SourceDay),
            &dom(v[1], &ym, Domain::Mixed),
            &dom(v[2], &yn, Domain::TargetNight),
            &taxonomy,
            &FpaConfig::default(),
        )?;
        let term = loss
            .terms
            .iter()
            .find(|term| term.direction == direction)
            .expect("every direction is evaluated");
        if term.skipped {
            return Err(Error::invalid(
                "gradcheck",
                format!("{} term was skipped", direction.name()),
            ));
        }
        Ok(term.loss)
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 2,
        feature_dim: 3,
        num_classes: 4,
    }
}

fn checks() -> Vec<Check> {
    let p = PRIMITIVE_TOL;
    let c = COMPOSITE_TOL;
    vec![
        Check {
            name: "add",
            tol: p,
            make: |r| binary(normal(r, &[3, 4]), normal(r, &[3, 4]), Tape::add),
        },
        Check {
            name: "add_scalar_broadcast",
            tol: p,
            make: |r| binary(normal(r, &[3, 4]), normal(r, &[1]), Tape::add),
        },
        Check {
            name: "sub",
            tol: p,
            make: |r| binary(normal(r, &[5]), normal(r, &[5]), Tape::sub),
        },
        Check {
            name: "mul",
            tol: p,
            make: |r| binary(normal(r, &[2, 3]), normal(r, &[2, 3]), Tape::mul),
        },
        Check {
            name: "mul_scalar_broadcast",
            tol: p,
            make: |r| binary(normal(r, &[1]), normal(r, &[2, 3]), Tape::mul),
        },
        Check {
            name: "div",
            tol: p,
            make: |r| {
                binary(
                    normal(r, &[6]),
                    away_from_zero(r, &[6], 0.5, 2.0),
                    Tape::div,
                )
            },
        },
        Check {
            name: "relu",
            tol: p,
            make: |r| unary(away_from_zero(r, &[8], 0.05, 2.0), Tape::relu),
        },
        Check {
            name: "log",
            tol: p,
            make: |r| unary(positive(r, &[6], 0.5, 2.0), Tape::log),
        },
        Check {
            name: "exp",
            tol: p,
            make: |r| unary(normal(r, &[6]), Tape::exp),
        },
        Check {
            name: "neg",
            tol: p,
            make: |r| unary(normal(r, &[6]), Tape::neg),
        },
        Check {
            name: "scale",
            tol: p,
            make: |r| {
                let k: f64 = StandardNormal.sample(r);
                case(vec![normal(r, &[2, 3])], move |t, v| Ok(t.scale(v[0], k)))
            },
        },
        Check {
            name: "sum",
            tol: p,
            make: |r| unary(normal(r, &[3, 3]), Tape::sum),
        },
        Check {
            name: "mean",
            tol: p,
            make: |r| unary(normal(r, &[3, 3]), Tape::mean),
        },
        Check {
            name: "reshape",
            tol: p,
            make: |r| case(vec![normal(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        },
        Check {
            name: "transpose",
            tol: p,
            make: |r| case(vec![normal(r, &[2, 5])], |t, v| t.transpose(v[0])),
        },
        Check {
            name: "matmul",
            tol: p,
            make: |r| binary(normal(r, &[3, 4]), normal(r, &[4, 2]), Tape::matmul),
        },
        Check {
            name: "conv2d_3x3",
            tol: p,
            make: |r| conv_case(r, 3, 1),
        },
        Check {
            name: "conv2d_3x3_stride2",
            tol: p,
            make: |r| conv_case(r, 3, 2),
        },
        Check {
            name: "conv2d_1x1",
            tol: p,
            make: |r| conv_case(r, 1, 1),
        },
        Check {
            name: "upsample_nearest2x",
            tol: p,
            make: |r| {
                case(vec![normal(r, &[2, 3, 2])], |t, v| {
                    t.upsample_nearest2x(v[0])
                })
            },
        },
        Check {
            name: "avg_pool2x",
            tol: p,
            make: |r| case(vec![normal(r, &[2, 4, 6])], |t, v| t.avg_pool2x(v[0])),
        },
        Check {
            name: "log_softmax",
            tol: p,
            make: |r| case(vec![normal(r, &[5, 3, 2])], |t, v| t.log_softmax(v[0], 0)),
        },
        Check {
            name: "log_softmax_inner_axis",
            tol: p,
            make: |r| case(vec![normal(r, &[3, 4])], |t, v| t.log_softmax(v[0], 1)),
        },
        Check {
            name: "l2_normalize",
            tol: p,
            make: |r| {
                case(vec![normal(r, &[4, 3, 3])], |t, v| {
                    t.l2_normalize(v[0], 0, 1e-12)
                })
            },
        },
        Check {
            name: "masked_mean",
            tol: p,
            make: |r| {
                let mut mask: Vec<bool> = (0..12).map(|_| r.random_bool(0.5)).collect();
                mask[r.random_range(0..12)] = true;
                case(vec![normal(r, &[3, 3, 4])], move |t, v| {
                    t.masked_mean(v[0], &mask)?
                        .ok_or_else(|| Error::invalid("gradcheck", "mask selected nothing"))
                })
            },
        },
        Check {
            name: "pick_mean_neg",
            tol: p,
            make: |r| {
                let picks: Vec<usize> = (0..7).map(|_| r.random_range(0..12)).collect();
                case(vec![normal(r, &[3, 4])], move |t, v| {
                    t.pick_mean_neg(v[0], picks.clone())
                })
            },
        },
        Check {
            name: "stack_rows",
            tol: p,
            make: |r| {
                let missing = r.random_range(0..3);
                case(
                    vec![normal(r, &[3]), normal(r, &[3]), normal(r, &[3])],
                    move |t, v| {
                        let rows: Vec<Option<Var>> =
                            (0..3).map(|i| (i != missing).then_some(v[i])).collect();
                        t.stack_rows(&rows, 3)
                    },
                )
            },
        },
        Check {
            name: "conv_relu_log_softmax_ce",
            tol: c,
            make: |r| {
                let y = labels(r, &[5, 5], &[0, 1, 2, IGNORE]);
                let inputs = vec![
                    normal(r, &[1, 2, 5, 5]),
                    normal(r, &[3, 2, 3, 3]),
                    normal(r, &[3]),
                ];
                case(inputs, move |t, v| {
                    let h = t.conv2d(v[0], v[1], v[2], 1)?;
                    let h = t.relu(h);
                    let h = t.reshape(h, &[3, 5, 5])?;
                    Ok(crate::loss::cross_entropy(t, h, y.data())?.loss)
                })
            },
        },
        Check {
            name: "model_sup_loss",
            tol: c,
            make: |r| {
                let cfg = tiny_model();
                let image = normal(r, &[3, 8, 8]);
                let y = labels(r, &[8, 8], &[0, 1, 2, 3]);
                let inputs: Vec<Tensor<f64>> = cfg
                    .layout()
                    .iter()
                    .map(|(_, shape)| normal(r, shape).map(|x| 0.5 * x))
                    .collect();
                case(inputs, move |t, v| {
                    let params = ParamVars::from_vars(t, cfg, v.to_vec())?;
                    let x = t.constant(image.clone());
                    let out = params.forward(t, x)?;
                    Ok(sup_loss(t, out.logits, &y)?.loss)
                })
            },
        },
        Check {
            name: "sup_loss",
            tol: c,
            make: |r| {
                let y = labels(r, &[4, 5], &(0..10).collect::<Vec<u8>>());
                case(
                    vec![normal(r, &[10, 4, 5]).map(|x| 3.0 * x)],
                    move |t, v| Ok(sup_loss(t, v[0], &y)?.loss),
                )
            },
        },
        Check {
            name: "mix_loss",
            tol: c,
            make: |r| {
                let mut y = labels(r, &[4, 5], &[0, 1, 4, 7, 8, 9, IGNORE, IGNORE]);
                y.data_mut()[0] = 9;
                case(
                    vec![normal(r, &[10, 4, 5]).map(|x| 3.0 * x)],
                    move |t, v| Ok(dsr::mix_loss(t, v[0], &y)?.loss),
                )
            },
        },
        Check {
            name: "proto_mixed_to_source",
            tol: c,
            make: |r| proto_case(r, fpa::Direction::MixedToSource),
        },
        Check {
            name: "proto_source_to_mixed",
            tol: c,
            make: |r| proto_case(r, fpa::Direction::SourceToMixed),
        },
        Check {
            name: "proto_night_to_source",
            tol: c,
            make: |r| proto_case(r, fpa::Direction::NightToSource),
        },
        Check {
            name: "proto_source_to_night",
            tol: c,
            make: |r| proto_case(r, fpa::Direction::SourceToNight),
        },
    ]
}

/// Names of every check, in execution order.
pub fn check_names() -> Vec<&'static str> {
    checks().iter().map(|c| c.name).collect()
}

/// Scalar loss for `inputs`: the output itself when scalar, otherwise its
/// inner product with `weights`.
fn forward(
    build: &Build,
    inputs: &[Tensor<f64>],
    weights: Option<&Tensor<f64>>,
    grad: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            if grad {
                tape.param(x.clone())
            } else {
                tape.constant(x.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = match weights {
        Some(w) => {
            let w = tape.constant(w.clone());
            let p = tape.mul(out, w)?;
            tape.sum(p)
        }
        None => out,
    };
    Ok((tape, vars, loss))
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn run_case(check: &Check, rng: &mut Rng, corrupt: bool) -> Result<(f64, usize)> {
    let Case { mut inputs, build } = (check.make)(rng);
    let (probe, _, out) = forward(&build, &inputs, None, false)?;
    let weights = (probe.value(out).numel() != 1).then(|| normal(rng, probe.shape(out)));
    let (mut tape, vars, loss) = forward(&build, &inputs, weights.as_ref(), true)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    if corrupt {
        analytic[0].data_mut()[0] += 1e-2;
    }
    let mut worst = 0.0f64;
    let mut count = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + STEP;
            let (t, _, l) = forward(&build, &inputs, weights.as_ref(), false)?;
            let up = scalar(&t, l);
            inputs[i].data_mut()[j] = x0 - STEP;
            let (t, _, l) = forward(&build, &inputs, weights.as_ref(), false)?;
            let down = scalar(&t, l);
            inputs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Runs every selected check over `opts.seeds` random instances.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    if opts.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let all = checks();
    if let Some(name) = &opts.corrupt {
        if !all.iter().any(|c| c.name == name) {
            return Err(Error::Config(format!("no gradient check named {name:?}")));
        }
    }
    let mut out = Vec::new();
    for (k, check) in all.iter().enumerate() {
        if opts
            .filter
            .as_deref()
            .is_some_and(|f| !check.name.contains(f))
        {
            continue;
        }
        let start = Instant::now();
        let corrupt = opts.corrupt.as_deref() == Some(check.name);
        let mut outcome = CheckOutcome {
            name: check.name,
            tol: check.tol,
            max_rel_err: 0.0,
            worst_seed: 0,
            elements: 0,
            seconds: 0.0,
        };
        for seed in 0..opts.seeds {
            let mut rng = rng_for(opts.master_seed, &[k as u64, seed]);
            let (err, n) = run_case(check, &mut rng, corrupt).map_err(|e| {
                Error::invalid("gradcheck", format!("{} (seed {seed}): {e}", check.name))
            })?;
            if err > outcome.max_rel_err || seed == 0 {
                outcome.max_rel_err = err;
                outcome.worst_seed = seed;
            }
            outcome.elements += n;
        }
        outcome.seconds = start.elapsed().as_secs_f64();
        out.push(outcome);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_denominator_at_one() {
        assert_eq!(relative_error(1e-3, 0.0), 1e-3);
        assert_eq!(relative_error(200.0, 202.0), 2.0 / 202.0);
    }

    #[test]
    fn names_are_unique() {
        let names = check_names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn corruption_is_detected() {
        let opts = GradcheckOptions {
            seeds: 2,
            corrupt: Some("matmul".into()),
            filter: Some("matmul".into()),
            ..GradcheckOptions::default()
        };
        let r = run_gradcheck(&opts).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed(), "{r:?}");
    }

    #[test]
    fn unknown_corruption_target_is_rejected() {
        let opts = GradcheckOptions {
            corrupt: Some("nope".into()),
            ..GradcheckOptions::default()
        };
        assert!(run_gradcheck(&opts).is_err());
    }
}
