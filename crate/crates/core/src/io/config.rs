//! Run configuration files.
//!
//! One `key = value` per line, `#` starts a comment, an empty value means the
//! default. Unknown keys are rejected.
//!
//! Model keys: `variant` (Ti, S, B, L), `depth`, `token_size`, `heads`
//! (mandatory without a variant, otherwise overriding it), `mlp_hidden`
//! (default 4·token_size), `patch_size` (16), `crop_size` (512, or `HxW`),
//! `num_classes` (mandatory), `decoder` (mask or linear; mask),
//! `decoder_layers` (2), `decoder_norm` (true), `normalize_classes` (false),
//! `dropout` (0), `stochastic_depth` (0.1), `mean` and `std` (ImageNet RGB
//! statistics, comma separated).
//!
//! Training keys: `base_lr` (1e-3), `iterations` (1000), `batch_size` (8),
//! `poly_power` (0.9), `weight_decay` (0, anything else is rejected),
//! `momentum` (0), `seed` (0), `eval_every` (0), `augment` (true),
//! `scale_min` (0.5), `scale_max` (2.0), `flip_prob` (0.5).

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::DecoderKind;
use crate::error::{Error, Result};
use crate::io::kv::{Flag, KvReader};
use crate::model::{ModelConfig, Variant, DEFAULT_MEAN, DEFAULT_STD};
use crate::train::TrainConfig;

fn parse_size(text: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    match text.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(text).map(|s| (s, s)),
    }
}

/// Reads the model keys from `kv`.
pub fn read_model_config(kv: &mut KvReader) -> Result<ModelConfig> {
    let variant: Option<Variant> = kv.get("variant")?;
    let (depth, token_size, heads) = match variant {
        Some(v) => {
            let (l, d, h) = v.dims();
            (
                kv.get_or("depth", l)?,
                kv.get_or("token_size", d)?,
                kv.get_or("heads", h)?,
            )
        }
        None => (
            kv.require("depth")?,
            kv.require("token_size")?,
            kv.require("heads")?,
        ),
    };
    let patch: usize = kv.get_or("patch_size", 16)?;
    let crop = match kv.raw("crop_size")? {
        None => (512, 512),
        Some((v, line)) => parse_size(&v).map_err(|e| {
            Error::config(format!("{}:{line}: bad crop_size {v:?}: {e}", kv.origin()))
        })?,
    };
    let num_classes: usize = kv.require("num_classes")?;
    let kind: DecoderKind = kv.get_or("decoder", DecoderKind::Mask)?;
    let mut cfg = ModelConfig::custom(depth, token_size, heads, patch, crop.0, kind, num_classes);
    cfg.variant = variant;
    cfg.encoder.image_size = crop;
    cfg.encoder.mlp_hidden = kv.get_or("mlp_hidden", 4 * token_size)?;
    cfg.encoder.dropout = kv.get_or("dropout", 0.0)?;
    cfg.encoder.stochastic_depth = kv.get_or("stochastic_depth", 0.1)?;
    cfg.decoder.layers = kv.get_or("decoder_layers", 2)?;
    cfg.decoder.final_norm = kv.get_or("decoder_norm", Flag(true))?.0;
    cfg.decoder.normalize_classes = kv.get_or("normalize_classes", Flag(false))?.0;
    cfg.mean = kv.triple("mean")?.unwrap_or(DEFAULT_MEAN);
    cfg.std = kv.triple("std")?.unwrap_or(DEFAULT_STD);
    cfg.validate()
        .map_err(|e| Error::config(format!("{}: {}", kv.origin(), strip_prefix(&e))))?;
    Ok(cfg)
}

/// Reads the training keys from `kv`.
pub fn read_train_config(kv: &mut KvReader) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        base_lr: kv.get_or("base_lr", d.base_lr)?,
        iterations: kv.get_or("iterations", d.iterations)?,
        batch_size: kv.get_or("batch_size", d.batch_size)?,
        poly_power: kv.get_or("poly_power", d.poly_power)?,
        weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
        momentum: kv.get_or("momentum", d.momentum)?,
        seed: kv.get_or("seed", d.seed)?,
        eval_every: kv.get_or("eval_every", d.eval_every)?,
        augment: kv.get_or("augment", Flag(d.augment))?.0,
        scale_range: (
            kv.get_or("scale_min", d.scale_range.0)?,
            kv.get_or("scale_max", d.scale_range.1)?,
        ),
        flip_prob: kv.get_or("flip_prob", d.flip_prob)?,
    };
    cfg.validate()
        .map_err(|e| Error::config(format!("{}: {}", kv.origin(), strip_prefix(&e))))?;
    Ok(cfg)
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = KvReader::parse(text, origin)?;
    let model = read_model_config(&mut kv)?;
    let train = read_train_config(&mut kv)?;
    kv.finish()?;
    Ok((model, train))
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<(ModelConfig, TrainConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Parses model keys only, as embedded in checkpoints.
pub fn parse_model_config_str(text: &str, origin: &str) -> Result<ModelConfig> {
    let mut kv = KvReader::parse(text, origin)?;
    let model = read_model_config(&mut kv)?;
    kv.finish()?;
    Ok(model)
}

fn triple(v: [f64; 3]) -> String {
    format!("{}, {}, {}", v[0], v[1], v[2])
}

/// Fully resolved model keys; parses back to an equal configuration.
pub fn model_config_text(cfg: &ModelConfig) -> String {
    let e = &cfg.encoder;
    let mut s = String::new();
    if let Some(v) = cfg.variant {
        let _ = writeln!(s, "variant = {v}");
    }
    let _ = writeln!(s, "depth = {}", e.depth);
    let _ = writeln!(s, "token_size = {}", e.token_size);
    let _ = writeln!(s, "heads = {}", e.heads);
    let _ = writeln!(s, "mlp_hidden = {}", e.mlp_hidden);
    let _ = writeln!(s, "patch_size = {}", e.patch_size);
    let _ = writeln!(s, "crop_size = {}x{}", e.image_size.0, e.image_size.1);
    let _ = writeln!(s, "num_classes = {}", cfg.decoder.num_classes);
    let _ = writeln!(s, "decoder = {}", cfg.decoder.kind);
    let _ = writeln!(s, "decoder_layers = {}", cfg.decoder.layers);
    let _ = writeln!(s, "decoder_norm = {}", cfg.decoder.final_norm);
    let _ = writeln!(s, "normalize_classes = {}", cfg.decoder.normalize_classes);
    let _ = writeln!(s, "dropout = {}", e.dropout);
    let _ = writeln!(s, "stochastic_depth = {}", e.stochastic_depth);
    let _ = writeln!(s, "mean = {}", triple(cfg.mean));
    let _ = writeln!(s, "std = {}", triple(cfg.std));
    s
}

/// Fully resolved training keys; parses back to an equal configuration.
pub fn train_config_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "base_lr = {:e}", cfg.base_lr);
    let _ = writeln!(s, "iterations = {}", cfg.iterations);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "poly_power = {}", cfg.poly_power);
    let _ = writeln!(s, "weight_decay = {}", cfg.weight_decay);
    let _ = writeln!(s, "momentum = {}", cfg.momentum);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "eval_every = {}", cfg.eval_every);
    let _ = writeln!(s, "augment = {}", cfg.augment);
    let _ = writeln!(s, "scale_min = {}", cfg.scale_range.0);
    let _ = writeln!(s, "scale_max = {}", cfg.scale_range.1);
    let _ = writeln!(s, "flip_prob = {}", cfg.flip_prob);
    s
}
