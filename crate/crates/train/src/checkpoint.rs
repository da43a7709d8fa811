//! Binary checkpoints (`MQCK`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MQCK" u32 version  u64 config_hash  u64 step
//! str config_toml  str vocab_text  str train_config_json      (str = u64 len + UTF-8)
//! u64 n  { str name  u8 trainable  u32 rank  u64 dims[rank] } * n
//! f64 payload of every tensor, in manifest order
//! u64 n  { u8 present [u64 steps  f64 v  u64 len  f64 m[len]] } * n
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use mqnet_core::{Model, ModelConfig, Tensor};
use mqnet_decoder::Vocabulary;

use crate::error::{Result, TrainError};
use crate::optim::{Novograd, ParamState};
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: String,
    pub train: TrainConfig,
    pub step: u64,
    pub model: Model,
    pub optimizer: Novograd,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.0.write_all(b)
    }
    fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> io::Result<()> {
        self.u64(s.len() as u64)?;
        self.bytes(s.as_bytes())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // Every length is bounded by what a 64-bit host could address.
        usize::try_from(n)
            .ok()
            .filter(|&n| n < 1 << 40)
            .ok_or_else(|| bad(format!("implausible {what} length {n}")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let mut b = Vec::new();
        (&mut self.0).take(n as u64).read_to_end(&mut b).map_err(|e| bad(e.to_string()))?;
        if b.len() != n {
            return Err(bad(format!("truncated {what}")));
        }
        String::from_utf8(b).map_err(|_| bad(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocabulary) -> Self {
        Self {
            config: trainer.model.config.clone(),
            vocab: vocab.to_text(),
            train: trainer.config.clone(),
            step: trainer.step,
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::parse(&self.vocab)?)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.write_inner(&mut Writer(w)).map_err(|e| TrainError::io("checkpoint", e))
    }

    fn write_inner<W: Write>(&self, w: &mut Writer<W>) -> io::Result<()> {
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.config.hash())?;
        w.u64(self.step)?;
        w.str(&self.config.to_toml())?;
        w.str(&self.vocab)?;
        w.str(&serde_json::to_string(&self.train)?)?;
        let store = &self.model.store;
        w.u64(store.len() as u64)?;
        for (_, p) in store.iter() {
            w.str(&p.name)?;
            w.u8(p.trainable as u8)?;
            w.u32(p.value.rank() as u32)?;
            for &d in p.value.shape() {
                w.u64(d as u64)?;
            }
        }
        for (_, p) in store.iter() {
            for &v in p.value.data() {
                w.f64(v)?;
            }
        }
        w.u64(store.len() as u64)?;
        for i in 0..store.len() {
            match self.optimizer.state.get(i).and_then(Option::as_ref) {
                None => w.u8(0)?,
                Some(s) => {
                    w.u8(1)?;
                    w.u64(s.steps)?;
                    w.f64(s.v)?;
                    w.u64(s.m.len() as u64)?;
                    for &m in &s.m {
                        w.f64(m)?;
                    }
                }
            }
        }
        w.0.flush()
    }

    /// Reads a checkpoint and checks it against a model freshly built from
    /// its own configuration: same names, order, shapes and trainability.
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader(r);
        if &r.array::<4>()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hash = r.u64()?;
        let step = r.u64()?;
        let config = ModelConfig::from_toml(&r.str("config")?)?;
        if config.hash() != hash {
            return Err(bad("config hash does not match the embedded config"));
        }
        let vocab = r.str("vocabulary")?;
        let train: TrainConfig =
            serde_json::from_str(&r.str("train config")?).map_err(|e| bad(format!("train config: {e}")))?;
        let mut model = Model::build(&config, 0)?;
        let n = r.len("manifest")?;
        if n != model.store.len() {
            return Err(bad(format!("{n} tensors stored, model has {}", model.store.len())));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let name = r.str("name")?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len("dim")).collect::<Result<Vec<_>>>()?;
            let p = model.store.param(id);
            if p.name != name || p.trainable != trainable || p.value.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "manifest entry {name} {shape:?} does not match model tensor {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for &id in &ids {
            let t = model.store.get_mut(id);
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        let mut optimizer = Novograd::new(train.weight_decay);
        let k = r.len("optimizer")?;
        if k != ids.len() {
            return Err(bad("optimizer section does not match the manifest"));
        }
        optimizer.state = Vec::with_capacity(k);
        for &id in &ids {
            let state = match r.u8()? {
                0 => None,
                1 => {
                    let steps = r.u64()?;
                    let v = r.f64()?;
                    let len = r.len("moment")?;
                    if len != model.store.get(id).numel() {
                        return Err(bad(format!("moment of {} has wrong length", model.store.param(id).name)));
                    }
                    let m = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Some(ParamState { m, v, steps })
                }
                b => return Err(bad(format!("bad optimizer flag {b}"))),
            };
            optimizer.state.push(state);
        }
        let mut rest = [0u8; 1];
        match r.0.read(&mut rest) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes")),
            Err(e) => return Err(bad(e.to_string())),
        }
        Ok(Self {
            config,
            vocab,
            train,
            step,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let f = File::create(&tmp).map_err(|e| TrainError::io(&tmp, e))?;
        self.write_to(BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| TrainError::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Tensors by name, for comparisons in tests and tools.
pub fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}
