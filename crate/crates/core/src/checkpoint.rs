//! Bit-exact binary checkpoints.
//!
//! Layout (little-endian): magic "ROMC", u32 version, u64 train step,
//! length-prefixed canonical config text, u32 tensor count, then per-tensor
//! records (u32 name length, name bytes, u8 trainable flag, u32 rank, u32
//! extents, raw f64 data). An optional optimizer section carries the moment
//! tensors for every trainable parameter in census order.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::OptimState;
use crate::rng::RngHub;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const ROMC_MAGIC: &[u8; 4] = b"ROMC";
pub const ROMC_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub model: Model,
    pub optim: Option<OptimState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: Model, optim: Option<OptimState>, step: u64) -> Self {
        Checkpoint {
            version: ROMC_VERSION,
            config,
            model,
            optim,
            step,
        }
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, trainable: bool, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(trainable as u8);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(format!(
                "truncated payload at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, bool, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::checkpoint("tensor name is not utf-8".to_string()))?;
        let trainable = self.u8()? != 0;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, trainable, Tensor::new(shape, data)?))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(ROMC_MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let cfg_text = ckpt.config.to_text();
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());

    let entries = ckpt.model.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        write_tensor(&mut out, &e.name, e.trainable, &e.tensor);
    }

    match &ckpt.optim {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            for v in [st.lr, st.weight_decay, st.beta1, st.beta2, st.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
            for (i, m) in st.m.iter().enumerate() {
                write_tensor(&mut out, &format!("m.{i}"), false, m);
            }
            for (i, v) in st.v.iter().enumerate() {
                write_tensor(&mut out, &format!("v.{i}"), false, v);
            }
        }
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != ROMC_MAGIC {
        return Err(Error::checkpoint(format!("bad magic in {path:?}")));
    }
    let version = r.u32()?;
    if version != ROMC_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported version {version} (expected {ROMC_VERSION})"
        )));
    }
    let step = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::checkpoint("config snapshot is not utf-8".to_string()))?;
    let config = RunConfig::from_text(&cfg_text)?;

    // rebuild the census and validate the payload against it
    let mut model = Model::init(config.model.clone(), &RngHub::new(config.seed))?;
    let n_tensors = r.u32()? as usize;
    if n_tensors != model.params.entries().len() {
        return Err(Error::checkpoint(format!(
            "census mismatch: payload has {n_tensors} tensors, model declares {}",
            model.params.entries().len()
        )));
    }
    for i in 0..n_tensors {
        let (name, trainable, tensor) = r.tensor()?;
        let e = &mut model.params.entries_mut()[i];
        if e.name != name || e.trainable != trainable {
            return Err(Error::checkpoint(format!(
                "census mismatch at slot {i}: payload '{name}' vs declared '{}'",
                e.name
            )));
        }
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::checkpoint(format!(
                "census mismatch: '{name}' has extents {:?}, model declares {:?}",
                tensor.shape(),
                e.tensor.shape()
            )));
        }
        e.tensor = tensor;
    }

    let optim = match r.u8()? {
        0 => None,
        1 => {
            let ostep = r.u64()?;
            let lr = r.f64()?;
            let weight_decay = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let n = r.u32()? as usize;
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(r.tensor()?.2);
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.tensor()?.2);
            }
            Some(OptimState {
                m,
                v,
                step: ostep,
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
            })
        }
        other => {
            return Err(Error::checkpoint(format!(
                "bad optimizer flag {other} in {path:?}"
            )))
        }
    };

    if r.pos != buf.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after payload",
            buf.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        version,
        config,
        model,
        optim,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            template_size: 16,
            search_size: 32,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: 2,
            head_channels: 16,
            ..ModelConfig::default()
        };
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(cfg.seed)).unwrap();
        let ckpt = Checkpoint::new(cfg, model, None, 17);
        let p1 = dir.path().join("a.romc");
        let p2 = dir.path().join("b.romc");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 17);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn reload_reproduces_parameters_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(99)).unwrap();
        let ckpt = Checkpoint::new(cfg, model.clone(), None, 0);
        let p = dir.path().join("c.romc");
        save_checkpoint(&p, &ckpt).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        for (a, b) in model.params.entries().iter().zip(loaded.model.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor, "tensor {} changed", a.name);
        }
    }

    #[test]
    fn forward_output_bit_exact_across_reload() {
        use crate::model::BatchTokens;
        use crate::tape::Tape;
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(21)).unwrap();
        let cols = cfg.model.patch_cols();
        let mk = |n: usize, seed: usize| {
            Tensor::new(
                vec![1, n, cols],
                (0..n * cols)
                    .map(|i| ((i * 131 + seed) % 29) as f64 / 29.0 - 0.5)
                    .collect(),
            )
            .unwrap()
        };
        let tokens = BatchTokens {
            it: Some(mk(cfg.model.n_t(), 1)),
            ht: Some(mk(cfg.model.n_t(), 2)),
            sr: mk(cfg.model.n_sr(), 3),
        };
        let run = |m: &Model| -> Tensor {
            let mut tape = Tape::new();
            let staged = m.stage(&mut tape, false).unwrap();
            let out = m.forward(&mut tape, &staged, &tokens, None, false).unwrap();
            tape.value(out.heads.c).clone()
        };
        let before = run(&model);
        let p = dir.path().join("fw.romc");
        save_checkpoint(&p, &Checkpoint::new(cfg, model, None, 0)).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let after = run(&loaded.model);
        assert_eq!(before, after, "forward outputs must be bit-identical after reload");
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(1)).unwrap();
        let shapes: Vec<Vec<usize>> = model
            .params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.shape().to_vec())
            .collect();
        let mut st = OptimState::new(&shapes, 1e-3, 1e-4);
        st.step = 42;
        st.m[0].data_mut()[0] = 0.5;
        let ckpt = Checkpoint::new(cfg, model, Some(st), 42);
        let p = dir.path().join("opt.romc");
        save_checkpoint(&p, &ckpt).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        let lo = loaded.optim.unwrap();
        assert_eq!(lo.step, 42);
        assert_eq!(lo.m[0].data()[0], 0.5);
        assert_eq!(lo.m.len(), shapes.len());
    }

    #[test]
    fn tampered_extent_fails_census() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(5)).unwrap();
        let ckpt = Checkpoint::new(cfg, model, None, 0);
        let p = dir.path().join("t.romc");
        save_checkpoint(&p, &ckpt).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // first tensor record's rank-extent field lives after the header,
        // config text, count, name; find "embed.proj" and corrupt an extent.
        let name = b"embed.proj";
        let idx = bytes
            .windows(name.len())
            .position(|w| w == name)
            .unwrap();
        let extent_pos = idx + name.len() + 1 + 4; // trainable flag + rank
        bytes[extent_pos] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn bad_magic_and_truncation_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.romc");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        let cfg = small_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(5)).unwrap();
        let ckpt = Checkpoint::new(cfg, model, None, 0);
        let p2 = dir.path().join("trunc.romc");
        save_checkpoint(&p2, &ckpt).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p2), Err(Error::Checkpoint(_))));
    }
}
