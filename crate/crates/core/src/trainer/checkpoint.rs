//! `.tctc` checkpoints.
//!
//! ```text
//! "TCTC" | u32 version=1 | u64 meta_len | meta (JSON, UTF-8)
//! then until EOF: u16 name_len | name | u8 ndim | u32 × ndim dims | f32 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLog, TrainConfig};
use crate::data::format::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::UNetModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name of the uncertainty log-variance tensor.
pub const LOG_VARS_NAME: &str = "uncertainty.log_vars";

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Config(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub num_classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    /// The most recent epoch rows, oldest first.
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Contract(format!("checkpoint metadata: {e}")))?;
        let body: usize = self.tensors.iter().map(|(n, t)| 7 + n.len() + 4 * (t.shape().len() + t.numel())).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + body);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("{name} has too many dims")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("{name} dim {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let meta_len = r.u64()?;
        let meta_len = usize::try_from(meta_len).map_err(|_| r.error("metadata length overflows"))?;
        let meta_bytes = r.take(meta_len)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| r.error(format!("bad metadata: {e}")))?;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        while r.remaining() > 0 {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_owned();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(r.error(format!("duplicate tensor {name}")));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error(format!("{name}: dims {shape:?} overflow")))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| r.error(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tctc.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Copies every model parameter from the checkpoint. Fails without
    /// modifying `model` if any parameter is missing or has another shape,
    /// listing all offenders.
    pub fn load_model_params(&self, model: &mut UNetModel<f32>) -> Result<()> {
        let mut offenders = Vec::new();
        for (name, p) in model.params() {
            match self.tensor(name) {
                None => offenders.push(format!("{name}: missing")),
                Some(t) if t.shape() != p.shape() => {
                    offenders.push(format!("{name}: checkpoint {:?}, model {:?}", t.shape(), p.shape()))
                }
                Some(_) => {}
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Shape(format!(
                "checkpoint does not fit the model ({} parameters): {}",
                offenders.len(),
                offenders.join("; ")
            )));
        }
        for (name, p) in model.params_mut() {
            *p = self.tensor(name).expect("checked above").clone();
        }
        Ok(())
    }

    /// The network described by the stored config, with the stored parameters.
    pub fn model(&self) -> Result<UNetModel<f32>> {
        let config = &self.meta.config;
        let mut model = UNetModel::build(config.unet_config(self.meta.num_classes), config.seed)?;
        self.load_model_params(&mut model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;
    use crate::unet::UNetConfig;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        Checkpoint {
            meta: CheckpointMeta {
                config: TrainConfig::default(),
                num_classes: 2,
                epoch: 3,
                adam_step: 17,
                rng: RngState::capture(&rng),
                history: vec![EpochLog {
                    epoch: 3,
                    l_main: 0.1 + 0.2,
                    l_aux: 1.0 / 3.0,
                    l_con: 0.0,
                    w: 1e-3,
                    theta: 0.25,
                    retained: 1.5,
                    total: 0.7,
                    dsc: Some(vec![0.5, 0.9]),
                }],
            },
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 1], vec![1.5, -0.0]).unwrap()),
                (LOG_VARS_NAME.into(), Tensor::new(vec![0], vec![]).unwrap()),
                ("s".into(), Tensor::new(vec![], vec![f32::MIN_POSITIVE]).unwrap()),
            ],
        }
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("x.tctc")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(
            (0..5).map(|_| rng.next_u64()).collect::<Vec<_>>(),
            (0..5).map(|_| restored.next_u64()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().encode().unwrap();
        let p = Path::new("c.tctc");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_architecture_lists_offenders() {
        let small = UNetModel::<f32>::build(
            UNetConfig {
                num_classes: 2,
                base_width: 2,
                patch_size: [16; 3],
                ..UNetConfig::default()
            },
            0,
        )
        .unwrap();
        let mut c = sample();
        c.tensors = small.params().to_vec();
        let mut wide = UNetModel::<f32>::build(
            UNetConfig {
                num_classes: 2,
                base_width: 4,
                patch_size: [16; 3],
                ..UNetConfig::default()
            },
            0,
        )
        .unwrap();
        let before = wide.clone();
        let err = c.load_model_params(&mut wide).unwrap_err().to_string();
        assert!(err.contains("enc1.conv1.weight") && err.contains("ath2.weight"), "{err}");
        assert_eq!(wide, before);

        let mut same = UNetModel::<f32>::build(small.config().clone(), 9).unwrap();
        c.load_model_params(&mut same).unwrap();
        assert_eq!(same.params(), small.params());
    }
}
