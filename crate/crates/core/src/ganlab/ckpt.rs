//! The `ACKP` training checkpoint.
//!
//! Layout (little-endian): magic `ACKP`, `u32` version, `u32` length and
//! JSON text of the run configuration, `u64` step, RNG seed (32 bytes),
//! `u64` stream and `u128` word position, two `f64` decode scales, the head
//! and tail as length-prefixed `APLY` blobs, the critic tensors
//! (`u32` count, then per tensor `u32` rank, `u32` dims and `f64` data) and
//! both Adam states (`u64` t, `u32` blocks, then per block `u32` length and
//! the first and second moments).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{ApolloError, Result};
use crate::graddiff::Tensor;
use crate::polyexpand::{aply_bytes, read_aply_from, AplyModel};
use crate::util::write_atomic;

use super::{gen_sizes, Adam, Critic, GanConfig, Generator, TrainState};

const MAGIC: &[u8; 4] = b"ACKP";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> ApolloError {
    ApolloError::Format(msg.into())
}

fn trunc(what: &str) -> impl Fn(std::io::Error) -> ApolloError + '_ {
    move |_| fmt_err(format!("truncated checkpoint at {what}"))
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>().map_err(trunc(what))).collect()
}

fn write_adam<W: Write>(w: &mut W, a: &Adam) -> Result<()> {
    w.write_u64::<LE>(a.t)?;
    w.write_u32::<LE>(a.m.len() as u32)?;
    for (m, v) in a.m.iter().zip(&a.v) {
        w.write_u32::<LE>(m.len() as u32)?;
        write_f64s(w, m)?;
        write_f64s(w, v)?;
    }
    Ok(())
}

fn read_adam<R: Read>(r: &mut R, sizes: &[usize], what: &str) -> Result<Adam> {
    let t = r.read_u64::<LE>().map_err(trunc(what))?;
    let n = r.read_u32::<LE>().map_err(trunc(what))? as usize;
    if n != sizes.len() {
        return Err(fmt_err(format!("{what} has {n} blocks, the model needs {}", sizes.len())));
    }
    let mut a = Adam { t, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    for &want in sizes {
        let len = r.read_u32::<LE>().map_err(trunc(what))? as usize;
        if len != want {
            return Err(fmt_err(format!("{what} block of {len} values, expected {want}")));
        }
        a.m.push(read_f64s(r, len, what)?);
        a.v.push(read_f64s(r, len, what)?);
    }
    Ok(a)
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LE>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_model<R: Read>(r: &mut R, what: &str) -> Result<AplyModel> {
    let len = r.read_u64::<LE>().map_err(trunc(what))? as usize;
    if len > 1 << 32 {
        return Err(fmt_err(format!("{what} claims {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc(what))?;
    read_aply_from(&mut buf.as_slice()).map_err(|e| fmt_err(format!("{what}: {e}")))
}

/// A training state with the configuration that produced it and the scale
/// used to decode generated grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GanConfig,
    pub state: TrainState,
    pub decode_scale: (f64, f64),
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let json = serde_json::to_vec(&ck.config).map_err(|e| ApolloError::Config(e.to_string()))?;
    w.write_u32::<LE>(json.len() as u32)?;
    w.write_all(&json)?;
    let s = &ck.state;
    w.write_u64::<LE>(s.step)?;
    w.write_all(&s.rng.get_seed())?;
    w.write_u64::<LE>(s.rng.get_stream())?;
    w.write_u128::<LE>(s.rng.get_word_pos())?;
    w.write_f64::<LE>(ck.decode_scale.0)?;
    w.write_f64::<LE>(ck.decode_scale.1)?;
    let head = AplyModel::Dense { spec: s.gen.head_spec.clone(), params: s.gen.head.clone() };
    write_blob(&mut w, &aply_bytes(&head)?)?;
    write_blob(&mut w, &aply_bytes(&AplyModel::Conv(s.gen.tail.clone()))?)?;
    w.write_u32::<LE>(s.critic.params.len() as u32)?;
    for t in &s.critic.params {
        w.write_u32::<LE>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u32::<LE>(d as u32)?;
        }
        write_f64s(&mut w, &t.data)?;
    }
    write_adam(&mut w, &s.adam_g)?;
    write_adam(&mut w, &s.adam_d)?;
    Ok(w)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let r = &mut &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc("magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {:?}, expected ACKP", String::from_utf8_lossy(&magic))));
    }
    let version = r.read_u32::<LE>().map_err(trunc("version"))?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let jlen = r.read_u32::<LE>().map_err(trunc("config length"))? as usize;
    if jlen > r.len() {
        return Err(fmt_err("truncated checkpoint at config"));
    }
    let mut json = vec![0u8; jlen];
    r.read_exact(&mut json).map_err(trunc("config"))?;
    let config: GanConfig = serde_json::from_slice(&json).map_err(|e| fmt_err(format!("config: {e}")))?;
    config.check()?;
    let step = r.read_u64::<LE>().map_err(trunc("step"))?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(trunc("rng seed"))?;
    let stream = r.read_u64::<LE>().map_err(trunc("rng stream"))?;
    let pos = r.read_u128::<LE>().map_err(trunc("rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    let decode_scale = (r.read_f64::<LE>().map_err(trunc("scale"))?, r.read_f64::<LE>().map_err(trunc("scale"))?);
    let (head_spec, head) = match read_model(r, "generator head")? {
        AplyModel::Dense { spec, params } => (spec, params),
        AplyModel::Conv(_) => return Err(fmt_err("generator head is convolutional")),
    };
    let tail = match read_model(r, "generator tail")? {
        AplyModel::Conv(c) => c,
        AplyModel::Dense { .. } => return Err(fmt_err("generator tail is not convolutional")),
    };
    let gen = Generator { head_spec, head, tail };
    gen.validate()?;
    if gen.latent_dim() != config.latent_dim || gen.conditional() != config.conditional {
        return Err(fmt_err("generator does not match the stored configuration"));
    }

    let mut rng_shape = ChaCha8Rng::seed_from_u64(0);
    let classes = config.conditional.then_some(config.data.n_classes);
    let template = Critic::init(&config.arch.critic_widths, config.arch.leaky_slope, classes, &mut rng_shape)?;
    let count = r.read_u32::<LE>().map_err(trunc("critic"))? as usize;
    if count != template.params.len() {
        return Err(fmt_err(format!("critic has {count} tensors, expected {}", template.params.len())));
    }
    let mut params = Vec::with_capacity(count);
    for want in &template.params {
        let rank = r.read_u32::<LE>().map_err(trunc("critic"))? as usize;
        let shape: Vec<usize> =
            (0..rank).map(|_| r.read_u32::<LE>().map(|d| d as usize).map_err(trunc("critic"))).collect::<Result<_>>()?;
        if shape != want.shape {
            return Err(fmt_err(format!("critic tensor {shape:?}, expected {:?}", want.shape)));
        }
        let data = read_f64s(r, want.len(), "critic")?;
        params.push(Tensor::new(shape, data)?);
    }
    let critic = Critic { params, ..template };
    let adam_g = read_adam(r, &gen_sizes(&gen), "generator optimizer")?;
    let sizes: Vec<usize> = critic.params.iter().map(Tensor::len).collect();
    let adam_d = read_adam(r, &sizes, "critic optimizer")?;
    if !r.is_empty() {
        return Err(fmt_err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { config, state: TrainState { gen, critic, adam_g, adam_d, step, rng }, decode_scale })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    state_from_bytes(&std::fs::read(path)?)
}

/// Lowercase hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(ck: &Checkpoint) -> Result<String> {
    let digest = Sha256::digest(checkpoint_bytes(ck)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ganlab::{train_step, ArchConfig, DataConfig, SynthDataset};

    #[test]
    fn round_trip_and_resume() {
        let cfg = GanConfig {
            batch: 2,
            d_steps_per_g: 1,
            latent_dim: 4,
            conditional: true,
            arch: ArchConfig { head_hidden: 4, tail_channels: 2, critic_widths: vec![2, 2, 2, 2], ..ArchConfig::default() },
            data: DataConfig { clips_per_class: 4, ..DataConfig::default() },
            ..GanConfig::default()
        };
        let data = SynthDataset::generate(&cfg.data).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        train_step(&mut s, &cfg, &data).unwrap();
        let ck = Checkpoint { config: cfg.clone(), state: s.clone(), decode_scale: data.mean_scale };
        let bytes = checkpoint_bytes(&ck).unwrap();
        let back = state_from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(checkpoint_hash(&back).unwrap(), checkpoint_hash(&ck).unwrap());
        let mut resumed = back.state;
        train_step(&mut s, &cfg, &data).unwrap();
        train_step(&mut resumed, &cfg, &data).unwrap();
        assert_eq!(resumed, s);

        assert!(matches!(state_from_bytes(&bytes[..bytes.len() - 3]), Err(ApolloError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(state_from_bytes(&bad), Err(ApolloError::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(state_from_bytes(&long), Err(ApolloError::Format(_))));
    }
}
