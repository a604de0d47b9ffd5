//! Flat `section.key = value` configuration files with command-line
//! overrides. Every key maps onto one [`TrainConfig`] field; unknown keys
//! are rejected.

use crate::dsr::FixedClasses;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

struct Field {
    key: &'static str,
    get: fn(&TrainConfig) -> String,
    set: fn(&mut TrainConfig, &str) -> Result<()>,
}

fn parse_value<V: FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

macro_rules! field {
    ($key:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, v| {
                c.$($path).+ = parse_value($key, v)?;
                Ok(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("trainer.alpha", alpha),
    field!("trainer.beta", beta),
    field!("trainer.base_lr", base_lr),
    field!("trainer.weight_decay", weight_decay),
    field!("trainer.warmup_ratio", warmup_ratio),
    field!("trainer.warmup_frac", warmup_frac),
    field!("trainer.poly_power", poly_power),
    field!("trainer.batch_size", batch_size),
    field!("trainer.total_iters", total_iters),
    field!("trainer.ema_lambda", ema_lambda),
    field!("trainer.ema_warmup", ema_warmup),
    field!("trainer.seed", seed),
    field!("trainer.eval_every", eval_every),
    field!("trainer.checkpoint_every", checkpoint_every),
    field!("trainer.log_every", log_every),
    field!("dsr.enable", dsr),
    field!("dsr.bank", bank),
    Field {
        key: "dsr.mix_classes",
        get: |c| c.mix_classes.name().to_string(),
        set: |c, v| {
            c.mix_classes = FixedClasses::parse(v).ok_or_else(|| {
                Error::Config(format!(
                    "dsr.mix_classes: expected none, small, dynamic or dynamic_small, got {v:?}"
                ))
            })?;
            Ok(())
        },
    },
    field!("dsr.random_class_fraction", random_class_fraction),
    field!("dsr.bank_capacity", bank_config.capacity),
    field!("dsr.bank_min_pixels", bank_config.min_pixels),
    field!("dsr.bank_prob", bank_config.apply_prob),
    field!("fpa.enable", fpa),
    field!("fpa.tau", fpa_config.tau),
    field!("fpa.stop_grad_protos", fpa_config.stop_grad_protos),
    field!("fpa.reweight", fpa_config.enable_reweight),
    field!("pseudo.theta_day", pseudo.theta_day),
    field!("pseudo.theta_night", pseudo.theta_night),
    field!("model.channels", model.channels),
    field!("model.feature_dim", model.feature_dim),
];

/// Every recognised key, in rendering order.
pub fn keys() -> impl Iterator<Item = &'static str> {
    FIELDS.iter().map(|f| f.key)
}

fn field(key: &str) -> Result<&'static Field> {
    FIELDS.iter().find(|f| f.key == key).ok_or_else(|| {
        let section = key.split('.').next().unwrap_or("");
        let near: Vec<&str> = keys()
            .filter(|k| k.starts_with(&format!("{section}.")))
            .collect();
        let hint = if near.is_empty() {
            String::from("sections are trainer, dsr, fpa, pseudo and model")
        } else {
            format!("known keys in this section: {}", near.join(", "))
        };
        Error::Config(format!("unknown key {key:?} ({hint})"))
    })
}

/// Ordered `key -> value` assignments; later assignments win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn split_assignment(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl Config {
    /// Parses a config file body. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                ))
            })?;
            cfg.insert(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_assignment(assignment).ok_or_else(|| {
            Error::Config(format!("override must be key=value, got {assignment:?}"))
        })?;
        self.insert(k, v)
    }

    fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        let f = field(key)?;
        // Reject bad values early, naming the key.
        (f.set)(&mut TrainConfig::default(), value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Defaults overlaid with every assignment, validated.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for f in FIELDS {
            if let Some(v) = self.values.get(f.key) {
                (f.set)(cfg, v)?;
            }
        }
        Ok(())
    }
}

/// Every key with its value in `cfg`, one assignment per line. Parsing the
/// result yields `cfg` again.
pub fn render(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for f in FIELDS {
        let s = f.key.split('.').next().unwrap_or("");
        if s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("# {s}\n"));
            section = s;
        }
        out.push_str(&format!("{} = {}\n", f.key, (f.get)(cfg)));
    }
    out
}
