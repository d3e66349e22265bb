//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout): magic `HVC1`, format version, the
//! SHA-256 digest of the resolved config, the resolved config text itself,
//! step counters, EMA state, RNG state, Adam state with both moment maps,
//! then the online / target / pseudo parameter stores as named tensor
//! records (name, dtype tag, shape, raw f64 values). `save -> load ->
//! save` is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::{EncoderNet, EncoderRole, PseudoDynamicNet};
use crate::error::{Error, Result};
use crate::imgio::write_bytes_atomic;
use crate::store::{Param, ParameterStore};
use crate::trainer::{AdamConfig, AdamState, EmaState, MomentumSchedule, Trainer};

const MAGIC: &[u8; 4] = b"HVC1";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: [u8; 32],
    pub config_toml: String,
    pub step_count: u64,
    pub total_steps: u64,
    pub ema: EmaState,
    pub rng: RngState,
    pub adam_cfg: AdamConfig,
    pub adam_step_count: u64,
    pub adam_first: IndexMap<String, ArrayD<f64>>,
    pub adam_second: IndexMap<String, ArrayD<f64>>,
    pub online: ParameterStore,
    pub target: ParameterStore,
    pub pseudo: ParameterStore,
}

// --- primitive writers/readers ---------------------------------------------

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn w_tensor(w: &mut impl Write, name: &str, t: &ArrayD<f64>) -> Result<()> {
    w_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    w_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        w_u64(w, d as u64)?;
    }
    for &v in t.iter() {
        w_f64(w, v)?;
    }
    Ok(())
}

fn r_tensor(r: &mut impl Read) -> Result<(String, ArrayD<f64>)> {
    let name_len = r_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
    let dtype = r_u8(r)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype tag {dtype} for '{name}'"
        )));
    }
    let ndim = r_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r_f64(r)?);
    }
    let tensor = ArrayD::from_shape_vec(shape, data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape for '{name}': {e}")))?;
    Ok((name, tensor))
}

fn w_store(w: &mut impl Write, store: &ParameterStore) -> Result<()> {
    w_u32(w, store.len() as u32)?;
    for (name, p) in store.iter() {
        w_tensor(w, name, &p.value)?;
        w.write_all(&[u8::from(p.trainable)])?;
    }
    Ok(())
}

fn r_store(r: &mut impl Read) -> Result<ParameterStore> {
    let count = r_u32(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let (name, value) = r_tensor(r)?;
        let trainable = r_u8(r)? != 0;
        store.insert(name, Param::new(value, trainable))?;
    }
    Ok(store)
}

fn w_tensor_map(w: &mut impl Write, map: &IndexMap<String, ArrayD<f64>>) -> Result<()> {
    w_u32(w, map.len() as u32)?;
    for (name, t) in map {
        w_tensor(w, name, t)?;
    }
    Ok(())
}

fn r_tensor_map(r: &mut impl Read) -> Result<IndexMap<String, ArrayD<f64>>> {
    let count = r_u32(r)?;
    let mut map = IndexMap::new();
    for _ in 0..count {
        let (name, t) = r_tensor(r)?;
        map.insert(name, t);
    }
    Ok(map)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w_u32(w, self.version)?;
        w.write_all(&self.config_digest)?;
        w_u64(w, self.config_toml.len() as u64)?;
        w.write_all(self.config_toml.as_bytes())?;
        w_u64(w, self.step_count)?;
        w_u64(w, self.total_steps)?;
        w_f64(w, self.ema.m0)?;
        w_f64(w, self.ema.current_m)?;
        w.write_all(&[match self.ema.schedule {
            MomentumSchedule::Cosine => 0u8,
            MomentumSchedule::Linear => 1u8,
        }])?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w_u64(w, self.rng.stream)?;
        w_f64(w, self.adam_cfg.lr)?;
        w_f64(w, self.adam_cfg.beta1)?;
        w_f64(w, self.adam_cfg.beta2)?;
        w_f64(w, self.adam_cfg.eps)?;
        w_f64(w, self.adam_cfg.weight_decay)?;
        w_u64(w, self.adam_step_count)?;
        w_tensor_map(w, &self.adam_first)?;
        w_tensor_map(w, &self.adam_second)?;
        w_store(w, &self.online)?;
        w_store(w, &self.target)?;
        w_store(w, &self.pseudo)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest)?;
        let config_len = r_u64(r)? as usize;
        let mut config = vec![0u8; config_len];
        r.read_exact(&mut config)?;
        let config_toml = String::from_utf8(config)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let step_count = r_u64(r)?;
        let total_steps = r_u64(r)?;
        let m0 = r_f64(r)?;
        let current_m = r_f64(r)?;
        let schedule = match r_u8(r)? {
            0 => MomentumSchedule::Cosine,
            1 => MomentumSchedule::Linear,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown momentum schedule tag {other}"
                )))
            }
        };
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let word_pos = u128::from_le_bytes(wp);
        let stream = r_u64(r)?;
        let adam_cfg = AdamConfig {
            lr: r_f64(r)?,
            beta1: r_f64(r)?,
            beta2: r_f64(r)?,
            eps: r_f64(r)?,
            weight_decay: r_f64(r)?,
        };
        let adam_step_count = r_u64(r)?;
        let adam_first = r_tensor_map(r)?;
        let adam_second = r_tensor_map(r)?;
        let online = r_store(r)?;
        let target = r_store(r)?;
        let pseudo = r_store(r)?;
        Ok(Self {
            version,
            config_digest,
            config_toml,
            step_count,
            total_steps,
            ema: EmaState {
                m0,
                schedule,
                current_m,
            },
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            adam_cfg,
            adam_step_count,
            adam_first,
            adam_second,
            online,
            target,
            pseudo,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read '{}': {e}", path.display())))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config_toml)
    }
}

impl Trainer {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            config_digest: self.cfg.digest(),
            config_toml: self.cfg.to_toml(),
            step_count: self.step_count,
            total_steps: self.total_steps,
            ema: self.ema.clone(),
            rng: RngState::capture(&self.rng),
            adam_cfg: self.adam.cfg,
            adam_step_count: self.adam.step_count,
            adam_first: self.adam.first.clone(),
            adam_second: self.adam.second.clone(),
            online: self.online_store.clone(),
            target: self.target_store.clone(),
            pseudo: self.pseudo_store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt.run_config()?;
        let net_cfg = cfg.network.to_net_config();
        let online_net = EncoderNet::new(&net_cfg, EncoderRole::Online);
        let target_net = EncoderNet::new(&net_cfg, EncoderRole::Target);
        let pseudo_net = PseudoDynamicNet::new(&net_cfg);
        for name in online_net.param_names() {
            if ckpt.online.try_get(&name).is_none() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is missing online parameter '{name}'"
                )));
            }
        }
        let adam = AdamState {
            cfg: ckpt.adam_cfg,
            step_count: ckpt.adam_step_count,
            first: ckpt.adam_first,
            second: ckpt.adam_second,
        };
        Ok(Self {
            cfg,
            online_net,
            target_net,
            pseudo_net,
            online_store: ckpt.online,
            target_store: ckpt.target,
            pseudo_store: ckpt.pseudo,
            adam,
            ema: ckpt.ema,
            step_count: ckpt.step_count,
            total_steps: ckpt.total_steps,
            rng: ckpt.rng.restore(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageBuffer;
    use crate::synth;

    fn tiny_trainer(seed: u64) -> (Trainer, Vec<ImageBuffer>) {
        let mut cfg = RunConfig::default();
        cfg.run.seed = seed;
        cfg.crop.view_size = 16;
        cfg.crop.min_side = 16;
        cfg.network.backbone_channels = vec![6, 8];
        cfg.network.hidden_channels = 6;
        cfg.network.embed_channels = 6;
        cfg.network.pseudo_hidden = 6;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.synth.canvas = 16;
        cfg.synth.min_shape_size = 5;
        cfg.synth.max_shape_size = 8;
        let data: Vec<ImageBuffer> = synth::generate_training_images(&cfg.synth, seed, 8)
            .into_iter()
            .map(|(img, _)| img)
            .collect();
        (Trainer::new(cfg).unwrap(), data)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (mut tr, data) = tiny_trainer(21);
        tr.total_steps = 4;
        let imgs: Vec<&ImageBuffer> = data.iter().collect();
        tr.step(&imgs).unwrap();
        tr.step(&imgs).unwrap();

        let bytes1 = tr.to_checkpoint().to_bytes().unwrap();
        let loaded = Checkpoint::read_from(&mut bytes1.as_slice()).unwrap();
        let bytes2 = loaded.to_bytes().unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn resume_reproduces_the_next_step_bit_identically() {
        let (mut a, data) = tiny_trainer(22);
        a.total_steps = 6;
        let imgs: Vec<&ImageBuffer> = data.iter().collect();
        a.step(&imgs).unwrap();
        a.step(&imgs).unwrap();

        let mut b = Trainer::from_checkpoint(a.to_checkpoint()).unwrap();
        let ra = a.step(&imgs).unwrap().unwrap();
        let rb = b.step(&imgs).unwrap().unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        for (name, p) in a.online_store.iter() {
            let q = b.online_store.get(name);
            assert_eq!(p.value, q.value, "online diverged at {name}");
        }
        for (name, p) in a.target_store.iter() {
            let q = b.target_store.get(name);
            assert_eq!(p.value, q.value, "target diverged at {name}");
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (tr, _) = tiny_trainer(23);
        let mut bytes = tr.to_checkpoint().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn config_digest_matches_stored_config() {
        let (tr, _) = tiny_trainer(24);
        let ckpt = tr.to_checkpoint();
        let cfg = ckpt.run_config().unwrap();
        assert_eq!(cfg.digest(), ckpt.config_digest);
    }
}
