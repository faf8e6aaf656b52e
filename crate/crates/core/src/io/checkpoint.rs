//! Binary checkpoints of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEGCKPT1" | u32 version (1) | u32 config length | config text (UTF-8)
//! | u32 tensor count | per tensor:
//!     u32 name length | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim
//!     | ndim × u64 dims | payload (f32 LE)
//! ```
//!
//! The config text is the model's resolved configuration in the config-file
//! syntax, so a checkpoint is self-describing. Training-state sidecars use
//! the same container with training keys as the text and optimizer buffers
//! as tensors.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::config::{
    model_config_text, parse_model_config_str, read_train_config, train_config_text,
};
use crate::io::kv::KvReader;
use crate::model::{ModelConfig, SegmenterModel};
use crate::tensor::{ParamStore, Tensor};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"SEGCKPT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Decoded checkpoint container.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| n.len() + 10 + 8 * t.ndim() + 4 * t.numel())
            .sum();
        let mut out = Vec::with_capacity(20 + self.config_text.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Archive> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(
                8,
                format!("unsupported checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config_text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|e| r.error(at, format!("config text is not UTF-8: {e}")))?
            .to_string();
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|e| r.error(at, format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(r.error(at, format!("tensor {name}: unsupported dtype code {dtype}")));
            }
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8, "dimension")?.try_into().expect("8 bytes"));
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| r.error(r.pos - 8, format!("dimension {d} too large")))?,
                );
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.error(at, format!("tensor {name}: shape {shape:?} too large")))?;
            let data = r
                .take(numel, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive {
            config_text,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Archive> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::decode(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(self.bytes.len(), format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn model_archive(model: &SegmenterModel<f32>) -> Archive {
    Archive {
        config_text: model_config_text(&model.config),
        tensors: model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect(),
    }
}

pub fn save_checkpoint(model: &SegmenterModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    model_archive(model).write(path)
}

/// Mismatches between archive tensors and the layout of `config`, one line each.
fn layout_offenders(config: &ModelConfig, archive: &Archive) -> Result<Vec<String>> {
    let template = SegmenterModel::<f32>::zeros(config.clone())?;
    let mut offenders = Vec::new();
    for (_, p) in template.store.iter() {
        match archive.tensors.iter().find(|(n, _)| *n == p.name) {
            None => offenders.push(format!("{}: missing from checkpoint", p.name)),
            Some((_, t)) if t.shape() != p.value.shape() => offenders.push(format!(
                "{}: checkpoint shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )),
            Some(_) => {}
        }
    }
    for (name, _) in &archive.tensors {
        if template.store.position(name).is_none() {
            offenders.push(format!("{name}: not a parameter of this model"));
        }
    }
    Ok(offenders)
}

fn model_from_archive(config: ModelConfig, archive: Archive) -> Result<SegmenterModel<f32>> {
    let template = SegmenterModel::<f32>::zeros(config.clone())?;
    let mut store = ParamStore::new();
    let mut tensors = archive.tensors;
    for name in template.store.names() {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .expect("layout checked");
        store.add(name, tensors.swap_remove(i).1);
    }
    SegmenterModel::from_store(config, store)
}

/// Loads a checkpoint using the configuration stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegmenterModel<f32>> {
    let path = path.as_ref();
    let archive = Archive::read(path)?;
    let config = parse_model_config_str(
        &archive.config_text,
        &format!("{} (embedded config)", path.display()),
    )?;
    load_for(path, config, archive)
}

/// Loads a checkpoint into the layout of `config`, failing with every
/// mismatching tensor listed (first offender first).
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    config: &ModelConfig,
) -> Result<SegmenterModel<f32>> {
    let path = path.as_ref();
    let archive = Archive::read(path)?;
    load_for(path, config.clone(), archive)
}

fn load_for(path: &Path, config: ModelConfig, archive: Archive) -> Result<SegmenterModel<f32>> {
    let offenders = layout_offenders(&config, &archive)?;
    if !offenders.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} does not match the model: {}",
            path.display(),
            offenders.join("; ")
        )));
    }
    model_from_archive(config, archive)
}

/// Loads a checkpoint for a new input size, resampling position embeddings.
pub fn load_checkpoint_resized(
    path: impl AsRef<Path>,
    size: (usize, usize),
) -> Result<SegmenterModel<f32>> {
    let model = load_checkpoint(path)?;
    if model.config.crop_size() == size {
        return Ok(model);
    }
    model.resized(size)
}

/// Sidecar path holding optimizer state for a checkpoint.
pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

/// Writes the model checkpoint and its training-state sidecar.
pub fn save_trainer(trainer: &Trainer<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_checkpoint(&trainer.model, path)?;
    let mut text = train_config_text(&trainer.config);
    text.push_str(&format!("iteration = {}\n", trainer.iteration));
    let tensors = trainer
        .optimizer
        .velocity
        .iter()
        .zip(trainer.model.store.names())
        .filter_map(|(v, name)| v.as_ref().map(|v| (name.to_string(), v.clone())))
        .collect();
    Archive {
        config_text: text,
        tensors,
    }
    .write(state_path(path))
}

/// Restores a trainer written by [`save_trainer`].
pub fn load_trainer(path: impl AsRef<Path>) -> Result<Trainer<f32>> {
    let path = path.as_ref();
    let model = load_checkpoint(path)?;
    let state_file = state_path(path);
    let archive = Archive::read(&state_file)?;
    let mut kv = KvReader::parse(&archive.config_text, state_file.display().to_string())?;
    let config = read_train_config(&mut kv)?;
    let iteration: usize = kv.require("iteration")?;
    kv.finish()?;
    if iteration > config.iterations {
        return Err(Error::Checkpoint(format!(
            "{}: iteration {iteration} beyond schedule length {}",
            state_file.display(),
            config.iterations
        )));
    }
    let mut trainer = Trainer::new(model, config)?;
    trainer.iteration = iteration;
    if !archive.tensors.is_empty() {
        let mut velocity = vec![None; trainer.model.store.len()];
        for (name, t) in archive.tensors {
            let id = trainer.model.store.position(&name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: unknown parameter {name}",
                    state_file.display()
                ))
            })?;
            if t.shape() != trainer.model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: velocity for {name} has shape {:?}",
                    state_file.display(),
                    t.shape()
                )));
            }
            velocity[id.index()] = Some(t);
        }
        trainer.optimizer.velocity = velocity;
    }
    Ok(trainer)
}
