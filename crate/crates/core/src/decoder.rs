//! Decoders mapping patch encodings to patch-level class logits: a point-wise
//! linear head and the mask transformer with learnable class embeddings.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{
    add_linear, add_norm, block_forward, layer_norm, linear, BlockParams, Init, LayerTrace,
    LinearIds, Mode, NormIds, Regularization,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Norm floor used when L2-normalizing mask-transformer outputs.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderKind {
    #[default]
    Linear,
    Mask,
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DecoderKind::Linear),
            "mask" => Ok(DecoderKind::Mask),
            other => Err(Error::config(format!(
                "unknown decoder kind {other:?} (expected \"linear\" or \"mask\")"
            ))),
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Mask => "mask",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub num_classes: usize,
    /// Transformer layers in the mask decoder.
    pub layers: usize,
    /// Layer norm over the joint sequence before splitting patches from classes.
    pub final_norm: bool,
    /// Also L2-normalize the class embeddings before the scalar product.
    pub normalize_classes: bool,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, num_classes: usize) -> Self {
        DecoderConfig {
            kind,
            num_classes,
            layers: 2,
            final_norm: true,
            normalize_classes: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoderParams {
    pub cls_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: Option<NormIds>,
}

#[derive(Clone, Debug)]
pub enum DecoderParams {
    Linear(LinearIds),
    Mask(MaskDecoderParams),
}

impl DecoderParams {
    /// Registers decoder parameters for tokens of width `width` with MLP width `hidden`.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &DecoderConfig,
        width: usize,
        hidden: usize,
        init: &mut Init<'_>,
    ) -> Self {
        let k = cfg.num_classes;
        match cfg.kind {
            DecoderKind::Linear => {
                DecoderParams::Linear(add_linear(store, init, "decoder.head", width, k))
            }
            DecoderKind::Mask => {
                let cls_emb = store.add("decoder.cls_emb", init.weight(&[k, width]));
                let blocks = (0..cfg.layers)
                    .map(|i| {
                        BlockParams::build(
                            store,
                            init,
                            &format!("decoder.blocks.{i}"),
                            width,
                            hidden,
                        )
                    })
                    .collect();
                let norm = cfg
                    .final_norm
                    .then(|| add_norm(store, "decoder.norm", width));
                DecoderParams::Mask(MaskDecoderParams {
                    cls_emb,
                    blocks,
                    norm,
                })
            }
        }
    }

    pub fn param_count(cfg: &DecoderConfig, width: usize, hidden: usize) -> usize {
        let k = cfg.num_classes;
        match cfg.kind {
            DecoderKind::Linear => k * width + k,
            DecoderKind::Mask => {
                k * width
                    + cfg.layers * BlockParams::param_count(width, hidden)
                    + if cfg.final_norm { 2 * width } else { 0 }
            }
        }
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            DecoderParams::Linear(_) => DecoderKind::Linear,
            DecoderParams::Mask(_) => DecoderKind::Mask,
        }
    }
}

/// `z·Wᵀ + b` applied to every patch encoding.
pub fn linear_decode<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    head: LinearIds,
    z: Var,
) -> Result<Var> {
    let d = g.shape(z)[1];
    let expected = store.value(head.weight).shape()[1];
    if d != expected {
        return Err(Error::contract(format!(
            "encodings have width {d}, head expects {expected}"
        )));
    }
    linear(g, store, head, z)
}

/// Runs the class embeddings jointly with the patch encodings through the
/// decoder layers, then scores each normalized patch against each class.
#[allow(clippy::too_many_arguments)]
pub fn mask_decode<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    params: &MaskDecoderParams,
    cfg: &DecoderConfig,
    z: Var,
    heads: usize,
    reg: Regularization,
    mode: &mut Mode<'_>,
    trace: &mut LayerTrace,
) -> Result<Var> {
    let n = g.shape(z)[0];
    let d = g.shape(z)[1];
    let cls_shape = store.value(params.cls_emb).shape();
    let k = cls_shape[0];
    if k == 0 {
        return Err(Error::contract("mask decoder needs at least one class"));
    }
    if cls_shape[1] != d {
        return Err(Error::contract(format!(
            "encodings have width {d}, class embeddings {}",
            cls_shape[1]
        )));
    }
    let cls = g.param(store, params.cls_emb);
    let mut x = g.concat(&[z, cls], 0)?;
    for block in &params.blocks {
        x = block_forward(g, store, block, x, heads, reg, mode, trace)?;
    }
    if let Some(norm) = params.norm {
        x = layer_norm(g, store, norm, x)?;
    }
    let patches = g.slice(x, 0, 0, n)?;
    let classes = g.slice(x, 0, n, k)?;
    let patches = g.l2_normalize(patches, 1, L2_EPS)?;
    let classes = if cfg.normalize_classes {
        g.l2_normalize(classes, 1, L2_EPS)?
    } else {
        classes
    };
    g.matmul_nt(patches, classes)
}

/// Dispatches to the decoder matching `params`.
#[allow(clippy::too_many_arguments)]
pub fn decode<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    z: Var,
    heads: usize,
    reg: Regularization,
    mode: &mut Mode<'_>,
    trace: &mut LayerTrace,
) -> Result<Var> {
    if params.kind() != cfg.kind {
        return Err(Error::config(format!(
            "decoder configured as {} but parameters are {}",
            cfg.kind,
            params.kind()
        )));
    }
    match params {
        DecoderParams::Linear(head) => linear_decode(g, store, *head, z),
        DecoderParams::Mask(mask) => mask_decode(g, store, mask, cfg, z, heads, reg, mode, trace),
    }
}
