//! Binary checkpoints holding the complete training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VPAD" | u32 version | u32 len, config TOML | u64 step
//! | [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! | u64 generator Adam step | u64 instructor Adam step
//! | u32 count, then per tensor:
//!     u16 len, name | u8 dtype tag | u8 rank | u64 × rank dims | payload
//! ```
//!
//! Tensor names are prefixed `generator.`, `buffer.`, `instructor.`,
//! `adam.generator.{m,v}.` or `adam.instructor.{m,v}.`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::VapaadModel;
use crate::optim::{Adam, Optimizer};
use crate::scalar::DType;
use crate::tensor::Tensor;
use crate::training::Trainer;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"VPAD";
pub const VERSION: u32 = 1;

struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn entry<T: Scalar>(t: &Tensor<T>) -> Entry {
    let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    Entry {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
        payload,
    }
}

fn adam_state<T: Scalar>(opt: Option<&Optimizer<T>>) -> Option<&Adam<T>> {
    match opt {
        Some(Optimizer::Adam(a)) => Some(a),
        _ => None,
    }
}

fn adam_state_mut<T: Scalar>(opt: Option<&mut Optimizer<T>>) -> Option<&mut Adam<T>> {
    match opt {
        Some(Optimizer::Adam(a)) => Some(a),
        _ => None,
    }
}

/// Serializes `trainer` with the configuration that built it.
pub fn encode_checkpoint<T: Scalar>(config: &RunConfig, trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Entry)> = Vec::new();
    let gen_names: Vec<String> = trainer
        .model
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for (n, t) in trainer.model.named_params() {
        tensors.push((format!("generator.{n}"), entry(t)));
    }
    for (n, t) in trainer.model.named_buffers() {
        tensors.push((format!("buffer.{n}"), entry(t)));
    }
    let mut inst_names = Vec::new();
    if let Some(inst) = &trainer.instructor {
        for (n, t) in inst.named_params() {
            tensors.push((format!("instructor.{n}"), entry(t)));
            inst_names.push(n);
        }
    }
    let mut adam_steps = [0u64; 2];
    for (slot, (label, opt, names)) in [
        ("generator", Some(&trainer.optimizer), &gen_names),
        (
            "instructor",
            trainer.instructor_optimizer.as_ref(),
            &inst_names,
        ),
    ]
    .into_iter()
    .enumerate()
    {
        let Some(adam) = adam_state(opt) else {
            continue;
        };
        adam_steps[slot] = adam.t;
        for (moment, states) in [("m", &adam.m), ("v", &adam.v)] {
            for (n, t) in names.iter().zip(states) {
                tensors.push((format!("adam.{label}.{moment}.{n}"), entry(t)));
            }
        }
    }

    let config_text = config.to_toml()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&trainer.step.to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_seed());
    out.extend_from_slice(&trainer.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    for s in adam_steps {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, e) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(e.dtype.tag());
        out.push(e.shape.len() as u8);
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&e.payload);
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &RunConfig,
    trainer: &Trainer<T>,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, trainer)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("text field is not UTF-8".into()))
    }
}

/// A parsed checkpoint whose tensors have not yet been bound to a model.
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    adam_steps: [u64; 2],
    tensors: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let config = RunConfig::parse(&r.string(len)?)?;
        let step = r.u64()?;
        let rng_seed = r.array()?;
        let rng_stream = r.u64()?;
        let rng_word_pos = r.u128()?;
        let adam_steps = [r.u64()?, r.u64()?];
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| {
                Error::Checkpoint(format!("`{name}` has unknown dtype tag {tag}"))
            })?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
            let payload = r.take(size)?.to_vec();
            if tensors
                .insert(
                    name.clone(),
                    Entry {
                        dtype,
                        shape,
                        payload,
                    },
                )
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(
                "trailing bytes after the tensor table".into(),
            ));
        }
        Ok(Self {
            config,
            step,
            rng_seed,
            rng_stream,
            rng_word_pos,
            adam_steps,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Moves the tensor called `name` into `dst`, which fixes the expected
    /// shape and scalar type.
    fn fill<T: Scalar>(&mut self, name: &str, dst: &mut Tensor<T>) -> Result<()> {
        let e = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{name}` is {:?}, expected {:?}",
                e.dtype,
                T::DTYPE
            )));
        }
        if e.shape != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, the configuration implies {:?}",
                e.shape,
                dst.shape()
            )));
        }
        for (v, chunk) in dst
            .data_mut()
            .iter_mut()
            .zip(e.payload.chunks_exact(T::DTYPE.size()))
        {
            *v = T::read_le(chunk);
        }
        Ok(())
    }

    /// Rebuilds the trainer exactly as it was saved. The tensor names must be
    /// exactly those the embedded configuration implies.
    pub fn into_trainer<T: Scalar>(mut self) -> Result<Trainer<T>> {
        let model = VapaadModel::build(
            self.config.model.clone(),
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        let mut tr = Trainer::new(model, self.config.train)?;
        let mut gen_names = Vec::new();
        for (n, t) in tr.model.named_params_mut() {
            self.fill(&format!("generator.{n}"), t)?;
            gen_names.push(n);
        }
        let buffers: Vec<(String, Tensor<T>)> = tr
            .model
            .named_buffers()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (n, mut t) in buffers {
            self.fill(&format!("buffer.{n}"), &mut t)?;
            tr.model.set_buffer(&n, t)?;
        }
        let mut inst_names = Vec::new();
        if let Some(inst) = &mut tr.instructor {
            for (n, t) in inst.named_params_mut() {
                self.fill(&format!("instructor.{n}"), t)?;
                inst_names.push(n);
            }
        }
        let gen_shapes: Vec<Vec<usize>> = tr
            .model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let inst_shapes: Vec<Vec<usize>> = tr
            .instructor
            .iter()
            .flat_map(|i| i.named_params())
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let adam_steps = self.adam_steps;
        for (slot, (label, opt, names, shapes)) in [
            (
                "generator",
                Some(&mut tr.optimizer),
                &gen_names,
                &gen_shapes,
            ),
            (
                "instructor",
                tr.instructor_optimizer.as_mut(),
                &inst_names,
                &inst_shapes,
            ),
        ]
        .into_iter()
        .enumerate()
        {
            let Some(adam) = adam_state_mut(opt) else {
                continue;
            };
            adam.t = adam_steps[slot];
            if adam.t == 0 {
                continue;
            }
            for moment in ["m", "v"] {
                let mut states = Vec::with_capacity(names.len());
                for (n, s) in names.iter().zip(shapes) {
                    let mut t = Tensor::zeros(s.clone());
                    self.fill(&format!("adam.{label}.{moment}.{n}"), &mut t)?;
                    states.push(t);
                }
                if moment == "m" {
                    adam.m = states;
                } else {
                    adam.v = states;
                }
            }
        }
        if let Some(name) = self.tensors.keys().next() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` does not belong to the configured model"
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        tr.rng = rng;
        tr.step = self.step;
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceDataset;
    use crate::training::LossMode;

    fn tiny(mode: LossMode) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.frame_size = [6, 6];
        cfg.model.blocks = 1;
        cfg.model.filters = vec![2];
        cfg.model.kernels = vec![3];
        cfg.train.batch_size = 2;
        cfg.train.loss_mode = mode;
        cfg.precision = super::super::config::Precision::F64;
        cfg
    }

    fn trained(cfg: &RunConfig, steps: u64) -> Trainer<f64> {
        let model =
            VapaadModel::build(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tr = Trainer::new(model, cfg.train).unwrap();
        let frames = Tensor::from_fn([3, 4, 1, 6, 6], |i| ((i * 31) % 11) as f64 / 10.0);
        let ds = SequenceDataset::from_frames(frames).unwrap();
        tr.run(&ds, steps, |_, _| Ok(())).unwrap();
        tr
    }

    #[test]
    fn round_trip_is_bitwise() {
        for mode in [LossMode::Reconstruction, LossMode::Combined] {
            let cfg = tiny(mode);
            let tr = trained(&cfg, 2);
            let bytes = encode_checkpoint(&cfg, &tr).unwrap();
            let ck = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(ck.config, cfg);
            let back: Trainer<f64> = ck.into_trainer().unwrap();
            assert_eq!(back.model, tr.model);
            assert_eq!(back.instructor, tr.instructor);
            assert_eq!(back.optimizer, tr.optimizer);
            assert_eq!(back.instructor_optimizer, tr.instructor_optimizer);
            assert_eq!(back.rng, tr.rng);
            assert_eq!(back.step, 2);
            assert_eq!(encode_checkpoint(&cfg, &back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny(LossMode::Reconstruction);
        let bytes = encode_checkpoint(&cfg, &trained(&cfg, 1)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            Checkpoint::decode(&bytes[..10]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn name_set_must_match_the_config() {
        let cfg = tiny(LossMode::Reconstruction);
        let bytes = encode_checkpoint(&cfg, &trained(&cfg, 1)).unwrap();
        let mut ck = Checkpoint::decode(&bytes).unwrap();
        ck.config.model.attention = false;
        assert!(matches!(
            ck.into_trainer::<f64>(),
            Err(Error::Checkpoint(_))
        ));
        let mut ck = Checkpoint::decode(&bytes).unwrap();
        ck.config.model.filters = vec![3];
        assert!(matches!(
            ck.into_trainer::<f64>(),
            Err(Error::Checkpoint(_))
        ));
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert!(matches!(
            ck.into_trainer::<f32>(),
            Err(Error::Checkpoint(_))
        ));
    }
}
