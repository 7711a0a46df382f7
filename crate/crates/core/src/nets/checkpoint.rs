//! Checkpoint files.
//!
//! Layout: magic `QBCK`, format version (u32), stage id (u32), then the
//! array count and named arrays in the shared container encoding. All
//! numeric state is stored as 64-bit floats or integers so a reload is
//! bit-exact.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::codec::{self, ArrayData, Container, NamedArray};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::GradNormState;
use crate::tensor::Tensor;

use super::optim::AdamState;
use super::{ModelConfig, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    Pretrain,
    Warmup,
    E2e,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::Pretrain, StageId::Warmup, StageId::E2e];

    pub fn number(self) -> u32 {
        match self {
            StageId::Pretrain => 1,
            StageId::Warmup => 2,
            StageId::E2e => 3,
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage id {n}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::Pretrain => "pretrain",
            StageId::Warmup => "warmup",
            StageId::E2e => "e2e",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seed and stream position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub stage: StageId,
    pub epoch: u64,
    pub step: u64,
    /// Selection score of these weights within their stage.
    pub best_score: f64,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub gradnorm: Option<GradNormState>,
    pub rng: RngState,
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_kv().into_bytes();
        let mut arrays = vec![
            NamedArray::new("config", &[text.len()], ArrayData::U8(text)),
            NamedArray::u64_vec("meta.counters", vec![self.epoch, self.step]),
            NamedArray::f64_vec("meta.best_score", &[1], vec![self.best_score]),
        ];
        for p in &self.params.params {
            arrays.push(NamedArray::f64_from(format!("param.{}", p.name), &p.value));
        }
        arrays.push(NamedArray::u64_vec("adam.steps", self.adam.steps.clone()));
        for (i, p) in self.params.params.iter().enumerate() {
            arrays.push(NamedArray::f64_from(format!("adam.m.{}", p.name), &self.adam.m[i]));
            arrays.push(NamedArray::f64_from(format!("adam.v.{}", p.name), &self.adam.v[i]));
        }
        if let Some(g) = &self.gradnorm {
            let n = g.weights.len();
            arrays.push(NamedArray::f64_vec("gradnorm.weights", &[n], g.weights.clone()));
            let hyper = vec![g.alpha, g.lr, f64::from(u8::from(g.fallback_warning))];
            arrays.push(NamedArray::f64_vec("gradnorm.hyper", &[3], hyper));
            if let Some(l0) = &g.initial_losses {
                arrays.push(NamedArray::f64_vec("gradnorm.initial", &[l0.len()], l0.clone()));
            }
        }
        arrays.push(NamedArray::new("rng.seed", &[32], ArrayData::U8(self.rng.seed.to_vec())));
        let wp = self.rng.word_pos;
        arrays.push(NamedArray::u64_vec("rng.position", vec![self.rng.stream, (wp >> 64) as u64, wp as u64]));

        let body = codec::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &arrays);
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&body[..8]);
        out.extend_from_slice(&self.stage.number().to_le_bytes());
        out.extend_from_slice(&body[8..]);
        out
    }

    pub fn from_bytes(bytes: &[u8], record: &str) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated { record: record.into() });
        }
        let stage = StageId::from_number(u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")))?;
        let mut body = Vec::with_capacity(bytes.len() - 4);
        body.extend_from_slice(&bytes[..8]);
        body.extend_from_slice(&bytes[12..]);
        let c = codec::decode(&body, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, record)?;
        Self::from_container(stage, &c, record)
    }

    fn from_container(stage: StageId, c: &Container, record: &str) -> Result<Self> {
        let (_, text) = c.u8s("config", record)?;
        let text = String::from_utf8(text).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = ModelConfig::from_kv(&KvMap::parse(&text)?)?;
        let counters = c.u64s("meta.counters", record)?;
        if counters.len() != 2 {
            return Err(Error::Checkpoint("meta.counters needs two values".into()));
        }
        let best_score = c.f64s("meta.best_score", record)?.1.first().copied().unwrap_or(f64::NEG_INFINITY);

        let mut params = ParamStore::init(&config)?;
        let n = params.len();
        let shaped = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = c.tensor(name, record)?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t)
        };
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for p in params.params.iter_mut() {
            p.value = shaped(&format!("param.{}", p.name), &p.value)?;
            m.push(shaped(&format!("adam.m.{}", p.name), &p.value)?);
            v.push(shaped(&format!("adam.v.{}", p.name), &p.value)?);
        }
        let steps = c.u64s("adam.steps", record)?;
        if steps.len() != n {
            return Err(Error::Checkpoint(format!("adam.steps has {} entries for {n} parameters", steps.len())));
        }

        let gradnorm = if c.has("gradnorm.weights") {
            let weights = c.f64s("gradnorm.weights", record)?.1;
            let hyper = c.f64s("gradnorm.hyper", record)?.1;
            if hyper.len() != 3 {
                return Err(Error::Checkpoint("gradnorm.hyper needs three values".into()));
            }
            let initial_losses =
                if c.has("gradnorm.initial") { Some(c.f64s("gradnorm.initial", record)?.1) } else { None };
            Some(GradNormState { weights, initial_losses, alpha: hyper[0], lr: hyper[1], fallback_warning: hyper[2] != 0.0 })
        } else {
            None
        };

        let (_, seed) = c.u8s("rng.seed", record)?;
        let pos = c.u64s("rng.position", record)?;
        if seed.len() != 32 || pos.len() != 3 {
            return Err(Error::Checkpoint("malformed rng state".into()));
        }
        let rng = RngState {
            seed: seed.try_into().expect("32 bytes"),
            stream: pos[0],
            word_pos: (u128::from(pos[1]) << 64) | u128::from(pos[2]),
        };
        Ok(CheckpointBundle {
            stage,
            epoch: counters[0],
            step: counters[1],
            best_score,
            config,
            params,
            adam: AdamState { steps, m, v },
            gradnorm,
            rng,
        })
    }
}

/// Writes the bundle and returns the SHA-256 of the file contents.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<String> {
    let bytes = bundle.to_bytes();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads a bundle. When `expected_sha` is given the file hash must match.
pub fn load_checkpoint(path: &Path, expected_sha: Option<&str>) -> Result<CheckpointBundle> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let bytes = fs::read(path)?;
    let record = path.display().to_string();
    if let Some(want) = expected_sha {
        let got = hex::encode(Sha256::digest(&bytes));
        if got != want {
            return Err(Error::Checkpoint(format!("{record}: hash {got} does not match recorded {want}")));
        }
    }
    CheckpointBundle::from_bytes(&bytes, &record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::model::tests::{tiny_config, tiny_input};
    use crate::nets::model::forward;
    use rand::{Rng, SeedableRng};

    fn bundle() -> CheckpointBundle {
        let config = tiny_config();
        let mut params = ParamStore::init(&config).unwrap();
        // perturb so the file does not just mirror the seeded init
        for (i, p) in params.params.iter_mut().enumerate() {
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                *x += ((i * 31 + j) % 17) as f64 * 1e-3 + 1e-17;
            }
        }
        let mut adam = AdamState::new(&params);
        adam.steps[0] = 5;
        adam.m[1].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.next_u64();
        CheckpointBundle {
            stage: StageId::Warmup,
            epoch: 3,
            step: 41,
            best_score: 0.5,
            config,
            params,
            adam,
            gradnorm: Some(GradNormState { initial_losses: Some(vec![1.0, 2.0, 3.0, 4.0, 0.5]), ..GradNormState::new(5) }),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_preserves_forward_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.qbck");
        let b = bundle();
        let sha = save_checkpoint(&b, &path).unwrap();
        let back = load_checkpoint(&path, Some(&sha)).unwrap();
        assert_eq!(back, b);
        let input = tiny_input(&b.config, 2);
        let before = forward(&b.params, &b.config, &input, &[]).unwrap();
        let after = forward(&back.params, &back.config, &input, &[]).unwrap();
        assert_eq!(before, after);
        let mut r1 = b.rng.restore();
        let mut r2 = back.rng.restore();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn header_carries_stage_and_damage_is_reported() {
        let b = bundle();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"QBCK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = load_checkpoint(&dir.path().join("nope"), None).unwrap_err();
        assert_eq!(missing.code(), "E_MISSING_CHECKPOINT");
        let path = dir.path().join("c");
        save_checkpoint(&b, &path).unwrap();
        assert_eq!(load_checkpoint(&path, Some("00")).unwrap_err().code(), "E_CHECKPOINT");
        let truncated = CheckpointBundle::from_bytes(&bytes[..bytes.len() - 9], "c").unwrap_err();
        assert_eq!(truncated.code(), "E_TRUNCATED");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(CheckpointBundle::from_bytes(&bad, "c").unwrap_err().code(), "E_BAD_MAGIC");
    }
}
