//! Tiny encoder-decoder used as both student and EMA teacher.
//!
//! ```text
//! image [3,H,W]
//!   enc1 3x3 s1 -> C      relu            [C,H,W]     --- skip 1x1 -> classes
//!   enc2 3x3 s2 -> 2C     relu            [2C,H/2,W/2]
//!   enc3 3x3 s2 -> 2C     relu            [2C,H/4,W/4]
//!   enc4 3x3 s1 -> 2C     relu            [2C,H/4,W/4]
//!   feat 3x3 s1 -> D                      features [D,H/4,W/4]
//!   cls  1x1 on relu(features), nearest x4 upsample, plus skip -> logits [K,H,W]
//! ```

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::dsrt::{self, AnyTensor};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of the first stage; later stages use twice this.
    pub channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            feature_dim: 16,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    /// `(name, shape)` of every parameter, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, c2, d, k) = (
            self.channels,
            2 * self.channels,
            self.feature_dim,
            self.num_classes,
        );
        let conv = |name: &str, out: usize, inp: usize, ks: usize| {
            [
                (format!("{name}.weight"), vec![out, inp, ks, ks]),
                (format!("{name}.bias"), vec![out]),
            ]
        };
        [
            conv("enc1", c, 3, 3),
            conv("enc2", c2, c, 3),
            conv("enc3", c2, c2, 3),
            conv("enc4", c2, c2, 3),
            conv("feat", d, c2, 3),
            conv("cls", k, d, 1),
            conv("skip", k, c, 1),
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub init_seed: u64,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// He (fan-in) normal initialisation for weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::invalid("model init", "need at least 2 classes"));
        }
        let entries = config
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = rng::rng_for(seed, &[stream::MODEL_INIT, i as u64]);
                    Tensor::from_fn(&shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::c(z * std)
                    })
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams {
            config,
            init_seed: seed,
            entries,
        })
    }

    pub fn from_entries(
        config: ModelConfig,
        init_seed: u64,
        entries: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != entries.len()
            || layout
                .iter()
                .zip(&entries)
                .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
        {
            return Err(Error::invalid(
                "model params",
                "names or shapes do not match the architecture",
            ));
        }
        Ok(ModelParams {
            config,
            init_seed,
            entries,
        })
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            init_seed: self.init_seed,
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Euclidean distance between two parameter sets over all tensors.
    pub fn distance(&self, other: &Self) -> T {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
            })
            .sum::<T>()
            .sqrt()
    }

    /// `self <- lambda * self + (1 - lambda) * student`, elementwise.
    pub fn ema_update(&mut self, student: &ModelParams<T>, lambda: T) -> Result<()> {
        if !(T::zero()..=T::one()).contains(&lambda) {
            return Err(Error::invalid(
                "ema_update",
                format!("lambda {lambda} outside [0, 1]"),
            ));
        }
        let same = self.entries.len() == student.entries.len()
            && self
                .entries
                .iter()
                .zip(&student.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::invalid(
                "ema_update",
                "teacher and student parameter sets differ",
            ));
        }
        let keep = T::one() - lambda;
        for ((_, t), (_, s)) in self.entries.iter_mut().zip(&student.entries) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = lambda * *tv + keep * sv;
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, trainable or constant.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            config: self.config,
            vars,
        }
    }

    /// Tape-free inference.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = vars.forward(&mut tape, x)?;
        Ok(ForwardOutput {
            features: tape.value(out.features).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }
}

/// Parameter handles on one tape, in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    config: ModelConfig,
    vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[D, H/4, W/4]`
    pub features: Var,
    /// `[K, H, W]`
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Per-pixel softmax of the logits, `[K, H, W]`.
    pub fn probs(&self) -> Tensor<T> {
        softmax_channels(&self.logits)
    }

    pub fn argmax(&self) -> Tensor<u8> {
        argmax_channels(&self.logits)
    }
}

pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let inner = s[1..].iter().product();
    let lp = crate::tensor::kernels::log_softmax(logits.data(), 1, s[0], inner);
    Tensor::new(s.to_vec(), lp.into_iter().map(|v| v.exp()).collect()).expect("same shape")
}

pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Tensor<u8> {
    let s = scores.shape();
    let px: usize = s[1..].iter().product();
    let d = scores.data();
    let data = (0..px)
        .map(|p| {
            let mut best = 0;
            for c in 1..s[0] {
                if d[c * px + p] > d[best * px + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Tensor::new(s[1..].to_vec(), data).expect("label shape")
}

impl ParamVars {
    /// Wraps tape variables laid out as [`ModelConfig::layout`].
    pub fn from_vars<T: Scalar>(
        tape: &Tape<T>,
        config: ModelConfig,
        vars: Vec<Var>,
    ) -> Result<Self> {
        let layout = config.layout();
        if vars.len() != layout.len() {
            return Err(Error::invalid(
                "ParamVars::from_vars",
                format!("expected {} variables, got {}", layout.len(), vars.len()),
            ));
        }
        for ((name, shape), &v) in layout.iter().zip(&vars) {
            if tape.shape(v) != shape.as_slice() {
                return Err(Error::invalid(
                    "ParamVars::from_vars",
                    format!("{name}: expected {shape:?}, got {:?}", tape.shape(v)),
                ));
            }
        }
        Ok(ParamVars { config, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: usize,
        stride: usize,
    ) -> Result<Var> {
        tape.conv2d(x, self.vars[2 * layer], self.vars[2 * layer + 1], stride)
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, image: Var) -> Result<(usize, usize)> {
        let s = tape.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(
                "forward",
                format!("expected image [3,H,W], got {s:?}"),
            ));
        }
        let (h, w) = (s[1], s[2]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "forward",
                format!("spatial size {h}x{w} must be positive and divisible by 4"),
            ));
        }
        Ok((h, w))
    }

    /// Encoder and feature head only. Returns `(features [D,h,w], enc1 activations)`.
    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<(Var, Var)> {
        let (h, w) = self.check_input(tape, image)?;
        let x = tape.reshape(image, &[1, 3, h, w])?;
        let h1 = self.conv(tape, x, 0, 1)?;
        let h1 = tape.relu(h1);
        let h2 = self.conv(tape, h1, 1, 2)?;
        let h2 = tape.relu(h2);
        let h3 = self.conv(tape, h2, 2, 2)?;
        let h3 = tape.relu(h3);
        let h4 = self.conv(tape, h3, 3, 1)?;
        let h4 = tape.relu(h4);
        let f = self.conv(tape, h4, 4, 1)?;
        Ok((f, h1))
    }

    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let (h, w) = self.check_input(tape, image)?;
        let (f, _) = self.encode(tape, image)?;
        tape.reshape(f, &[self.config.feature_dim, h / 4, w / 4])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardVars> {
        let (h, w) = self.check_input(tape, image)?;
        let (f, h1) = self.encode(tape, image)?;
        let fr = tape.relu(f);
        let coarse = self.conv(tape, fr, 5, 1)?;
        let up = tape.upsample_nearest2x(coarse)?;
        let up = tape.upsample_nearest2x(up)?;
        let skip = self.conv(tape, h1, 6, 1)?;
        let logits = tape.add(up, skip)?;
        let k = self.config.num_classes;
        Ok(ForwardVars {
            features: tape.reshape(f, &[self.config.feature_dim, h / 4, w / 4])?,
            logits: tape.reshape(logits, &[k, h, w])?,
        })
    }
}

// ---- checkpoints ------------------------------------------------------

/// Appends one `(u32 name length, name, DSRT record)` entry.
pub fn write_named<E: crate::scalar::Element>(
    out: &mut Vec<u8>,
    name: &str,
    t: &Tensor<E>,
) -> Result<()> {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    dsrt::encode(t, out)
}

/// Parses a whole named-record file. Fails without partial results.
pub fn read_named(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = dsrt::Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_empty() {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at + 4,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        out.push((name, r.record()?));
    }
    Ok(out)
}

const META_CONFIG: &str = "meta/config";

/// Model config and init seed as a small `f64` record.
pub(crate) fn config_record(config: &ModelConfig, init_seed: u64) -> Tensor<f64> {
    Tensor::new(
        vec![5],
        vec![
            config.channels as f64,
            config.feature_dim as f64,
            config.num_classes as f64,
            (init_seed >> 32) as f64,
            (init_seed & 0xFFFF_FFFF) as f64,
        ],
    )
    .expect("five values")
}

pub(crate) fn parse_config_record(t: &Tensor<f64>) -> Result<(ModelConfig, u64)> {
    let d = t.data();
    if d.len() != 5 {
        return Err(Error::invalid("checkpoint", "malformed config record"));
    }
    Ok((
        ModelConfig {
            channels: d[0] as usize,
            feature_dim: d[1] as usize,
            num_classes: d[2] as usize,
        },
        ((d[3] as u64) << 32) | d[4] as u64,
    ))
}

pub fn encode_params(params: &ModelParams<f32>, prefix: &str, out: &mut Vec<u8>) -> Result<()> {
    write_named(
        out,
        &format!("{prefix}{META_CONFIG}"),
        &config_record(&params.config, params.init_seed),
    )?;
    for (name, t) in params.entries() {
        write_named(out, &format!("{prefix}{name}"), t)?;
    }
    Ok(())
}

/// Extracts the parameters stored under `prefix` from parsed records.
pub fn decode_params(records: &[(String, AnyTensor)], prefix: &str) -> Result<ModelParams<f32>> {
    let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let cfg_name = format!("{prefix}{META_CONFIG}");
    let (config, seed) = match find(&cfg_name) {
        Some(AnyTensor::F64(t)) => parse_config_record(t)?,
        _ => return Err(Error::invalid("checkpoint", format!("missing {cfg_name}"))),
    };
    let entries = config
        .layout()
        .into_iter()
        .map(|(name, _)| match find(&format!("{prefix}{name}")) {
            Some(AnyTensor::F32(t)) => Ok((name, t.clone())),
            _ => Err(Error::invalid(
                "checkpoint",
                format!("missing or mistyped {prefix}{name}"),
            )),
        })
        .collect::<Result<_>>()?;
    ModelParams::from_entries(config, seed, entries)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    encode_params(params, "", &mut out)?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = read_named(&bytes)?;
    // Training-state checkpoints keep the student under "student/".
    if records.iter().any(|(n, _)| n == META_CONFIG) {
        decode_params(&records, "")
    } else {
        decode_params(&records, "student/")
    }
}
