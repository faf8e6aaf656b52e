//! End-to-end segmentation model: image in, per-pixel class logits out.

use std::fmt;
use std::str::FromStr;

use crate::decoder::{decode, DecoderConfig, DecoderKind, DecoderParams};
use crate::encoder::{
    embed, encoder_forward, interpolate_pos, patchify, EncoderConfig, EncoderParams, Init,
    LayerTrace, Mode, Regularization,
};
use crate::error::{Error, Result};
use crate::image::{normalize_image, LabelMap, RgbImage, IGNORE_LABEL};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, LossOutput, ParamStore, Scalar, Tensor, Var};

/// Per-channel RGB mean used when a configuration does not set one.
pub const DEFAULT_MEAN: [f64; 3] = [123.675, 116.28, 103.53];
/// Per-channel RGB standard deviation used when a configuration does not set one.
pub const DEFAULT_STD: [f64; 3] = [58.395, 57.12, 57.375];

/// Encoder size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tiny, Variant::Small, Variant::Base, Variant::Large];

    /// `(depth, token_size, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Variant::Tiny => (12, 192, 3),
            Variant::Small => (12, 384, 6),
            Variant::Base => (12, 768, 12),
            Variant::Large => (24, 1024, 16),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ti" | "tiny" => Ok(Variant::Tiny),
            "s" | "small" => Ok(Variant::Small),
            "b" | "base" => Ok(Variant::Base),
            "l" | "large" => Ok(Variant::Large),
            _ => Err(Error::config(format!(
                "unknown variant {s:?} (expected Ti, S, B or L)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tiny => "Ti",
            Variant::Small => "S",
            Variant::Base => "B",
            Variant::Large => "L",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Option<Variant>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ModelConfig {
    /// A preset encoder at square crop `crop` with patch size `patch`.
    pub fn preset(
        variant: Variant,
        patch: usize,
        crop: usize,
        kind: DecoderKind,
        num_classes: usize,
    ) -> Self {
        let (depth, d, heads) = variant.dims();
        let mut cfg = Self::custom(depth, d, heads, patch, crop, kind, num_classes);
        cfg.variant = Some(variant);
        cfg
    }

    /// An encoder of arbitrary size; MLP width is `4·D`.
    pub fn custom(
        depth: usize,
        token_size: usize,
        heads: usize,
        patch: usize,
        crop: usize,
        kind: DecoderKind,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            variant: None,
            encoder: EncoderConfig {
                image_size: (crop, crop),
                patch_size: patch,
                channels: 3,
                depth,
                token_size,
                heads,
                mlp_hidden: 4 * token_size,
                dropout: 0.0,
                stochastic_depth: 0.0,
            },
            decoder: DecoderConfig::new(kind, num_classes),
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn crop_size(&self) -> (usize, usize) {
        self.encoder.image_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.channels != 3 {
            return Err(Error::config("only 3-channel images are supported"));
        }
        let k = self.decoder.num_classes;
        if k == 0 || k > IGNORE_LABEL as usize {
            return Err(Error::config(format!(
                "num_classes must be in 1..={}, got {k}",
                IGNORE_LABEL
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::config(
                "normalization std must be positive and mean finite",
            ));
        }
        Ok(())
    }

    /// Closed-form count of scalar parameters.
    pub fn param_count(&self) -> usize {
        EncoderParams::param_count(&self.encoder)
            + DecoderParams::param_count(
                &self.decoder,
                self.encoder.token_size,
                self.encoder.mlp_hidden,
            )
    }

    fn regularization(&self) -> Regularization {
        Regularization {
            dropout: self.encoder.dropout,
            stochastic_depth: self.encoder.stochastic_depth,
        }
    }
}

/// Parameter partition used for reporting and selective freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("encoder.patch_embed")
            || name.starts_with("encoder.pos_embed")
            || name == "decoder.cls_emb"
        {
            ParamGroup::Embedding
        } else if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Decoder
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Upsampled logits, `H×W×K`.
    pub logits: Var,
    /// Patch-level logits on the patch grid, `(H/P)×(W/P)×K`.
    pub patch_logits: Var,
    pub trace: LayerTrace,
}

#[derive(Clone, Debug)]
pub struct SegmenterModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl<T: Scalar> SegmenterModel<T> {
    /// Fresh model with truncated-normal weights drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        Self::build(config, &mut Init::TruncNormal(&mut rng))
    }

    /// Model with all weights zero (layer-norm gains one).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, &mut Init::Zeros)
    }

    fn build(config: ModelConfig, init: &mut Init<'_>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderParams::build(&mut store, &config.encoder, init);
        let decoder = DecoderParams::build(
            &mut store,
            &config.decoder,
            config.encoder.token_size,
            config.encoder.mlp_hidden,
            init,
        );
        Ok(SegmenterModel {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the parameter layout for `config` and fills it from `store` by name.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let template = Self::zeros(config)?;
        let expected: Vec<&str> = template.store.names().collect();
        let found: Vec<&str> = store.names().collect();
        if expected != found {
            let first = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a}, found {b}"))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", expected.len(), found.len())
                });
            return Err(Error::Checkpoint(format!(
                "parameter names differ: {first}"
            )));
        }
        for ((_, want), (_, have)) in template.store.iter().zip(store.iter()) {
            if want.value.shape() != have.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    have.name,
                    have.value.shape(),
                    want.value.shape()
                )));
            }
        }
        Ok(SegmenterModel { store, ..template })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn group_sizes(&self) -> [(ParamGroup, usize); 3] {
        let mut sizes = [
            (ParamGroup::Embedding, 0),
            (ParamGroup::Encoder, 0),
            (ParamGroup::Decoder, 0),
        ];
        for (_, p) in self.store.iter() {
            let g = ParamGroup::of(&p.name);
            let slot = sizes
                .iter_mut()
                .find(|(k, _)| *k == g)
                .expect("all groups listed");
            slot.1 += p.value.numel();
        }
        sizes
    }

    pub fn cast<U: Scalar>(&self) -> SegmenterModel<U> {
        SegmenterModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Per-channel `(v − mean) / std` into an `H×W×3` tensor.
    pub fn normalize(&self, image: &RgbImage) -> Tensor<T> {
        normalize_image(image, self.config.mean, self.config.std)
    }

    /// Records a forward pass on a normalized crop-sized image.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        image: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardOutput> {
        let (h, w, _) = image.dims3()?;
        let expected = self.config.crop_size();
        if (h, w) != expected || image.shape()[2] != self.config.encoder.channels {
            return Err(Error::contract(format!(
                "model expects {}x{}x{} input, got {:?}",
                expected.0,
                expected.1,
                self.config.encoder.channels,
                image.shape()
            )));
        }
        let cfg = &self.config;
        let p = cfg.encoder.patch_size;
        let patches = g.constant(patchify(image, p)?);
        let z0 = embed(g, &self.store, &self.encoder, patches)?;
        let enc = encoder_forward(g, &self.store, &self.encoder, &cfg.encoder, z0, mode)?;
        let mut trace = enc.trace;
        let scores = decode(
            g,
            &self.store,
            &self.decoder,
            &cfg.decoder,
            enc.z,
            cfg.encoder.heads,
            cfg.regularization(),
            mode,
            &mut trace,
        )?;
        let k = cfg.num_classes();
        let patch_logits = g.reshape(scores, &[h / p, w / p, k])?;
        let logits = g.bilinear_resize(patch_logits, h, w)?;
        Ok(ForwardOutput {
            logits,
            patch_logits,
            trace,
        })
    }

    /// Eval-mode logits `H×W×K` for a normalized image.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, &mut Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode attention probabilities per encoder layer and head, each `N×N`.
    pub fn encoder_attention(&self, image: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, &mut Mode::Eval)?;
        let layers = self.config.encoder.depth;
        Ok(out.trace.attention[..layers]
            .iter()
            .map(|heads| heads.iter().map(|a| g.value(*a).clone()).collect())
            .collect())
    }

    /// Eval-mode hard labels for a normalized crop-sized image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<LabelMap> {
        argmax_labels(&self.logits(image)?)
    }

    /// Mean pixel cross-entropy of `H×W×K` logits against a label map, ignoring 255.
    pub fn loss(&self, g: &mut Graph<'_, T>, logits: Var, labels: &LabelMap) -> Result<LossOutput> {
        pixel_loss(g, logits, labels)
    }

    /// Same parameters with position embeddings resampled for a new crop size.
    pub fn resized(&self, crop: (usize, usize)) -> Result<Self> {
        let mut config = self.config.clone();
        config.encoder.image_size = crop;
        config.validate()?;
        let pos = interpolate_pos(
            self.store.value(self.encoder.pos_embed),
            self.config.encoder.grid(),
            config.encoder.grid(),
        )?;
        let mut store = self.store.clone();
        *store.value_mut(self.encoder.pos_embed) = pos;
        Self::from_store(config, store)
    }
}

/// Cross-entropy over every pixel of `H×W×K` logits.
pub fn pixel_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    labels: &LabelMap,
) -> Result<LossOutput> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != labels.height || shape[1] != labels.width {
        return Err(Error::Shape {
            op: "pixel_loss",
            lhs: shape,
            rhs: vec![labels.height, labels.width],
        });
    }
    let flat = g.reshape(logits, &[shape[0] * shape[1], shape[2]])?;
    g.cross_entropy(flat, &labels.data, IGNORE_LABEL)
}

/// Per-pixel argmax of `H×W×K` scores; ties go to the lowest class id.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMap> {
    let (h, w, k) = scores.dims3()?;
    if k == 0 || k > IGNORE_LABEL as usize {
        return Err(Error::contract(format!(
            "cannot take argmax over {k} classes"
        )));
    }
    let data = scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(w, h, data)
}
