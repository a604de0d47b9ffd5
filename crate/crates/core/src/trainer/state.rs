use super::{AdamState, TrainConfig};
use crate::dsr::{BankEntry, LongTailedBank};
use crate::error::{Error, Result};
use crate::model::{decode_params, encode_params, read_named, write_named, ModelParams};
use crate::tensor::dsrt::AnyTensor;
use crate::tensor::Tensor;
use std::path::Path;

/// Everything needed to continue training bit-exactly. Per-step
/// randomness is derived from the seed and iteration, so no generator
/// state is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub iteration: usize,
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub bank: LongTailedBank,
    /// Mixed samples whose every pixel was ignored.
    pub empty_mix: u64,
    /// Prototype terms skipped for lack of shared classes or valid pixels.
    pub empty_proto: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let student = ModelParams::init(cfg.model, cfg.seed)?;
        Ok(TrainState {
            iteration: 0,
            teacher: student.clone(),
            adam: AdamState::for_params(student.entries()),
            student,
            bank: LongTailedBank::new(cfg.bank_config.clone()),
            empty_mix: 0,
            empty_proto: 0,
        })
    }
}

fn counter(v: u64) -> Tensor<f64> {
    // Split so values above 2^53 survive the f64 record.
    Tensor::new(vec![2], vec![(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64]).expect("two values")
}

fn uncounter(t: &Tensor<f64>) -> Result<u64> {
    match t.data() {
        [hi, lo] => Ok(((*hi as u64) << 32) | *lo as u64),
        _ => Err(Error::invalid("training state", "malformed counter record")),
    }
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    encode_params(&state.student, "student/", &mut out)?;
    encode_params(&state.teacher, "teacher/", &mut out)?;
    write_named(
        &mut out,
        "state/iteration",
        &counter(state.iteration as u64),
    )?;
    write_named(&mut out, "state/empty_mix", &counter(state.empty_mix))?;
    write_named(&mut out, "state/empty_proto", &counter(state.empty_proto))?;
    write_named(&mut out, "adam/step", &counter(state.adam.step))?;
    for (i, (name, _)) in state.student.entries().iter().enumerate() {
        write_named(&mut out, &format!("adam/m/{name}"), &state.adam.m[i])?;
        write_named(&mut out, &format!("adam/v/{name}"), &state.adam.v[i])?;
    }
    for (i, e) in state.bank.all_entries().enumerate() {
        write_named(
            &mut out,
            &format!("bank/{i}/class"),
            &Tensor::new(vec![1], vec![e.class])?,
        )?;
        write_named(&mut out, &format!("bank/{i}/image"), &e.image)?;
        write_named(&mut out, &format!("bank/{i}/mask"), &e.mask)?;
        write_named(&mut out, &format!("bank/{i}/label"), &e.label)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restores a state written by [`save_state`]; the bank keeps the
/// capacity and thresholds of `cfg`.
pub fn load_state(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = read_named(&bytes)?;
    let find = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                Error::invalid(
                    "training state",
                    format!("{}: missing {name}", path.display()),
                )
            })
    };
    let f64_rec = |name: &str| match find(name)? {
        AnyTensor::F64(t) => uncounter(t),
        _ => Err(Error::invalid(
            "training state",
            format!("{name} has the wrong dtype"),
        )),
    };
    let f32_rec = |name: &str| match find(name)? {
        AnyTensor::F32(t) => Ok(t.clone()),
        _ => Err(Error::invalid(
            "training state",
            format!("{name} has the wrong dtype"),
        )),
    };
    let u8_rec = |name: &str| match find(name)? {
        AnyTensor::U8(t) => Ok(t.clone()),
        _ => Err(Error::invalid(
            "training state",
            format!("{name} has the wrong dtype"),
        )),
    };

    let student = decode_params(&records, "student/")?;
    let teacher = decode_params(&records, "teacher/")?;
    if student.config != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match configured {:?}",
            student.config, cfg.model
        )));
    }
    let mut adam = AdamState::for_params(student.entries());
    adam.step = f64_rec("adam/step")?;
    for (i, (name, _)) in student.entries().iter().enumerate() {
        adam.m[i] = f32_rec(&format!("adam/m/{name}"))?;
        adam.v[i] = f32_rec(&format!("adam/v/{name}"))?;
    }
    let mut bank = LongTailedBank::new(cfg.bank_config.clone());
    for i in 0.. {
        let key = format!("bank/{i}/class");
        if !records.iter().any(|(n, _)| *n == key) {
            break;
        }
        let entry = BankEntry {
            class: u8_rec(&key)?.data()[0],
            image: f32_rec(&format!("bank/{i}/image"))?,
            mask: u8_rec(&format!("bank/{i}/mask"))?,
            label: u8_rec(&format!("bank/{i}/label"))?,
        };
        if !bank.insert(entry) {
            return Err(Error::Config(format!(
                "bank entry {i} violates the configured admission threshold"
            )));
        }
    }
    Ok(TrainState {
        iteration: f64_rec("state/iteration")? as usize,
        student,
        teacher,
        adam,
        bank,
        empty_mix: f64_rec("state/empty_mix")?,
        empty_proto: f64_rec("state/empty_proto")?,
    })
}

/// Student weights from either a training state or a bare model checkpoint.
pub fn load_student(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = read_named(&bytes)?;
    let prefix = if records.iter().any(|(n, _)| n.starts_with("student/")) {
        "student/"
    } else {
        ""
    };
    decode_params(&records, prefix)
        .map_err(|e| Error::invalid("checkpoint", format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::taxonomy::BUS;
    use crate::synth::Taxonomy;

    #[test]
    fn state_roundtrip_is_exact() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(&cfg).unwrap();
        s.iteration = 17;
        s.adam.step = 17;
        s.adam.m[3].data_mut()[5] = 0.25;
        s.teacher.entries_mut()[0].1.data_mut()[0] = -3.5;
        s.empty_mix = 3;
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f32 / 7.0);
        s.bank
            .push(&img, &Tensor::filled(&[8, 8], BUS), &Taxonomy::street());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.bin");
        save_state(&s, &p).unwrap();
        assert_eq!(load_state(&p, &cfg).unwrap(), s);
        assert_eq!(load_student(&p).unwrap(), s.student);
        let bare = dir.path().join("model.bin");
        crate::model::save_checkpoint(&s.teacher, &bare).unwrap();
        assert_eq!(load_student(&bare).unwrap(), s.teacher);
    }
}
