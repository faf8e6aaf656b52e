//! Patch encoder: patchification, patch and position embeddings, and a stack
//! of pre-norm transformer layers with dropout and stochastic depth.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Per-head width of the model presets.
pub const HEAD_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Training resolution `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    /// Token width `D`.
    pub token_size: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub stochastic_depth: f64,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.token_size / self.heads.max(1)
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    /// Sequence length `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let p = self.patch_size;
        if p == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(format!(
                "image size {h}x{w} is not a positive multiple of patch size {p}"
            )));
        }
        if self.channels == 0 || self.token_size == 0 || self.mlp_hidden == 0 {
            return Err(Error::config(
                "channels, token_size and mlp_hidden must be positive",
            ));
        }
        if self.heads == 0 || self.token_size % self.heads != 0 {
            return Err(Error::config(format!(
                "token_size {} is not divisible by heads {}",
                self.token_size, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.stochastic_depth) {
            return Err(Error::config(format!(
                "stochastic_depth {} outside [0, 1]",
                self.stochastic_depth
            )));
        }
        Ok(())
    }
}

/// Weight and bias of a dense layer; the weight is stored `out × in`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// One pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: NormIds,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub proj: LinearIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch_embed: LinearIds,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: NormIds,
}

/// How fresh parameters are filled.
pub enum Init<'a> {
    /// Weights from a normal with std 0.02 truncated at ±2 std, biases 0, norm gains 1.
    TruncNormal(&'a mut dyn RngCore),
    /// Everything zero (norm gains still 1). Cheap; used for shape and count checks.
    Zeros,
}

impl Init<'_> {
    pub(crate) fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::TruncNormal(rng) => {
                Tensor::from_fn(shape, |_| T::of(trunc_normal(&mut **rng, 0.02)))
            }
        }
    }
}

fn trunc_normal(rng: &mut dyn RngCore, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    inputs: usize,
    outputs: usize,
) -> LinearIds {
    LinearIds {
        weight: store.add(format!("{name}.weight"), init.weight(&[outputs, inputs])),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
    }
}

pub(crate) fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> NormIds {
    NormIds {
        gain: store.add(format!("{name}.weight"), Tensor::full(&[width], T::one())),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
    }
}

impl BlockParams {
    pub(crate) fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        BlockParams {
            norm1: add_norm(store, &format!("{name}.norm1"), width),
            query: add_linear(store, init, &format!("{name}.attn.query"), width, width),
            key: add_linear(store, init, &format!("{name}.attn.key"), width, width),
            value: add_linear(store, init, &format!("{name}.attn.value"), width, width),
            proj: add_linear(store, init, &format!("{name}.attn.proj"), width, width),
            norm2: add_norm(store, &format!("{name}.norm2"), width),
            fc1: add_linear(store, init, &format!("{name}.mlp.fc1"), width, hidden),
            fc2: add_linear(store, init, &format!("{name}.mlp.fc2"), hidden, width),
        }
    }

    pub fn param_count(width: usize, hidden: usize) -> usize {
        2 * 2 * width
            + 4 * (width * width + width)
            + (width * hidden + hidden)
            + (hidden * width + width)
    }
}

impl EncoderParams {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        init: &mut Init<'_>,
    ) -> Self {
        let d = cfg.token_size;
        let patch_embed = add_linear(store, init, "encoder.patch_embed", cfg.patch_dim(), d);
        let pos_embed = store.add("encoder.pos_embed", init.weight(&[cfg.num_patches(), d]));
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::build(
                    store,
                    init,
                    &format!("encoder.blocks.{i}"),
                    d,
                    cfg.mlp_hidden,
                )
            })
            .collect();
        let norm = add_norm(store, "encoder.norm", d);
        EncoderParams {
            patch_embed,
            pos_embed,
            blocks,
            norm,
        }
    }

    /// Closed-form parameter count for a configuration.
    pub fn param_count(cfg: &EncoderConfig) -> usize {
        let d = cfg.token_size;
        (cfg.patch_dim() * d + d)
            + cfg.num_patches() * d
            + cfg.depth * BlockParams::param_count(d, cfg.mlp_hidden)
            + 2 * d
    }
}

/// Forward-pass mode. Training draws dropout masks and stochastic-depth
/// decisions from the supplied generator; evaluation is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Draws a branch-drop decision. Never touches the generator when `rate == 0`.
    fn drop_branch(&mut self, rate: f64) -> bool {
        match self {
            Mode::Train(rng) if rate > 0.0 => rng.random::<f64>() < rate,
            _ => false,
        }
    }

    fn dropout<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate));
                let n = g.value(x).numel();
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Regularization rates applied by transformer layers in training mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularization {
    pub dropout: f64,
    pub stochastic_depth: f64,
}

/// Per-pass bookkeeping from a stack of transformer layers.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Attention probabilities per layer, per head (`N×N` each). A layer whose
    /// attention branch was dropped has no entry for that pass.
    pub attention: Vec<Vec<Var>>,
    /// Residual branches considered and dropped by stochastic depth.
    pub branches: usize,
    pub dropped: usize,
}

/// Splits an `H×W×C` image into `N × (P²·C)` rows. Patches are ordered
/// row-major over the grid; each is flattened as `(y, x, channel)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "image {h}x{w} is not divisible by patch size {patch}; pad it first"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = patch * c;
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * w + px * patch) * c;
                out.extend_from_slice(&image.data()[start..start + row]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (n, dim) = patches.dims2()?;
    if patch == 0
        || height % patch != 0
        || width % patch != 0
        || n != (height / patch) * (width / patch)
        || dim != patch * patch * channels
    {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![height, width, channels],
        });
    }
    let gw = width / patch;
    let row = patch * channels;
    let mut out = vec![T::zero(); height * width * channels];
    for (i, p) in patches.data().chunks(dim).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..patch {
            let start = ((py * patch + y) * width + px * patch) * channels;
            out[start..start + row].copy_from_slice(&p[y * row..(y + 1) * row]);
        }
    }
    Tensor::new(&[height, width, channels], out)
}

/// Bilinearly resamples position embeddings laid out on `old_grid` onto `new_grid`.
pub fn interpolate_pos<T: Scalar>(
    pos: &Tensor<T>,
    old_grid: (usize, usize),
    new_grid: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, d) = pos.dims2()?;
    if n != old_grid.0 * old_grid.1 {
        return Err(Error::contract(format!(
            "{n} position embeddings do not fill a {}x{} grid",
            old_grid.0, old_grid.1
        )));
    }
    if old_grid == new_grid {
        return Ok(pos.clone());
    }
    if new_grid.0 == 0 || new_grid.1 == 0 {
        return Err(Error::contract("target grid must be non-empty"));
    }
    let data = kernels::bilinear_resize(
        pos.data(),
        old_grid.0,
        old_grid.1,
        d,
        new_grid.0,
        new_grid.1,
    );
    Tensor::new(&[new_grid.0 * new_grid.1, d], data)
}

/// `x · Wᵀ + b`.
pub(crate) fn linear<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    ids: LinearIds,
    x: Var,
) -> Result<Var> {
    let w = g.param(store, ids.weight);
    let b = g.param(store, ids.bias);
    let y = g.matmul_nt(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    ids: NormIds,
    x: Var,
) -> Result<Var> {
    let gain = g.param(store, ids.gain);
    let bias = g.param(store, ids.bias);
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Patch embedding plus position embedding: `z0 = x·Eᵀ + b + pos`.
pub fn embed<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    params: &EncoderParams,
    patches: Var,
) -> Result<Var> {
    let n = g.shape(patches)[0];
    let pos_rows = store.value(params.pos_embed).shape()[0];
    if n != pos_rows {
        return Err(Error::contract(format!(
            "{n} patches but {pos_rows} position embeddings; resample them with interpolate_pos"
        )));
    }
    let x0 = linear(g, store, params.patch_embed, patches)?;
    let pos = g.param(store, params.pos_embed);
    g.add(x0, pos)
}

/// Multi-head self-attention on already-normalized tokens. Returns the
/// projected output and the per-head attention probabilities.
pub fn msa<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    block: &BlockParams,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::contract(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    let q = linear(g, store, block.query, x)?;
    let k = linear(g, store, block.key, x)?;
    let v = linear(g, store, block.value, x)?;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * hd, hd)?;
        let kh = g.slice(k, 1, h * hd, hd)?;
        let vh = g.slice(v, 1, h * hd, hd)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores, 1)?;
        attention.push(a);
        outputs.push(g.matmul(a, vh)?);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        g.concat(&outputs, 1)?
    };
    Ok((linear(g, store, block.proj, joined)?, attention))
}

/// One layer: `a = MSA(LN(z)) + z`, `z' = MLP(LN(a)) + a`. In training each
/// residual branch is skipped whole with probability `stochastic_depth`; kept
/// branches are scaled by `1 / (1 − stochastic_depth)` so evaluation can use
/// the full branch unscaled.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    block: &BlockParams,
    z: Var,
    heads: usize,
    reg: Regularization,
    mode: &mut Mode<'_>,
    trace: &mut LayerTrace,
) -> Result<Var> {
    let keep_scale = |g: &mut Graph<'p, T>, branch: Var, mode: &Mode<'_>| -> Result<Var> {
        if mode.is_train() && reg.stochastic_depth > 0.0 && reg.stochastic_depth < 1.0 {
            g.scale(branch, T::of(1.0 / (1.0 - reg.stochastic_depth)))
        } else {
            Ok(branch)
        }
    };

    trace.branches += 1;
    let a = if mode.drop_branch(reg.stochastic_depth) {
        trace.dropped += 1;
        trace.attention.push(Vec::new());
        z
    } else {
        let h = layer_norm(g, store, block.norm1, z)?;
        let (attn, probs) = msa(g, store, block, h, heads)?;
        trace.attention.push(probs);
        let attn = mode.dropout(g, attn, reg.dropout)?;
        let attn = keep_scale(g, attn, mode)?;
        g.add(attn, z)?
    };

    trace.branches += 1;
    if mode.drop_branch(reg.stochastic_depth) {
        trace.dropped += 1;
        return Ok(a);
    }
    let h = layer_norm(g, store, block.norm2, a)?;
    let h = linear(g, store, block.fc1, h)?;
    let h = g.gelu(h)?;
    let h = mode.dropout(g, h, reg.dropout)?;
    let h = linear(g, store, block.fc2, h)?;
    let h = mode.dropout(g, h, reg.dropout)?;
    let h = keep_scale(g, h, mode)?;
    g.add(h, a)
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `z_L` after the final layer norm, `N×D`.
    pub z: Var,
    pub trace: LayerTrace,
}

/// Runs the layer stack and the terminal layer norm on `z0`.
pub fn encoder_forward<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    store: &'p ParamStore<T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    z0: Var,
    mode: &mut Mode<'_>,
) -> Result<EncoderOutput> {
    let reg = Regularization {
        dropout: cfg.dropout,
        stochastic_depth: cfg.stochastic_depth,
    };
    let mut trace = LayerTrace::default();
    let mut z = z0;
    for block in &params.blocks {
        z = block_forward(g, store, block, z, cfg.heads, reg, mode, &mut trace)?;
    }
    let z = layer_norm(g, store, params.norm, z)?;
    Ok(EncoderOutput { z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: (16, 16),
            patch_size: 8,
            channels: 3,
            depth: 2,
            token_size: 16,
            heads: 2,
            mlp_hidden: 64,
            dropout: 0.0,
            stochastic_depth: 0.0,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::build(&mut store, cfg, &mut Init::TruncNormal(&mut rng));
        (store, params)
    }

    #[test]
    fn patchify_shapes_and_round_trip() {
        let img = Tensor::<f64>::from_fn(&[32, 32, 3], |i| i as f64);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[4, 768]);
        assert_eq!(unpatchify(&p, 32, 32, 3, 16).unwrap(), img);
        let single = patchify(&img, 32).unwrap();
        assert_eq!(single.data(), img.data());
        assert!(patchify(&img, 5).is_err());
    }

    #[test]
    fn patch_order_is_row_major_over_grid() {
        // 4x4 single-channel image, 2x2 patches: the second patch is the top-right block.
        let img = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = cfg();
        let (store, _) = build(&c, 0);
        assert_eq!(store.num_elements(), EncoderParams::param_count(&c));
    }

    #[test]
    fn weights_are_truncated() {
        let (store, _) = build(&cfg(), 1);
        for (_, p) in store.iter() {
            assert!(p
                .value
                .data()
                .iter()
                .all(|v| v.abs() <= 0.04 + 1e-12 || p.name.contains("norm")));
        }
    }

    #[test]
    fn embed_of_zero_image_is_pos() {
        let c = cfg();
        let (store, params) = build(&c, 2);
        let mut g = Graph::new();
        let patches = g.constant(Tensor::zeros(&[c.num_patches(), c.patch_dim()]));
        let z0 = embed(&mut g, &store, &params, patches).unwrap();
        assert_eq!(g.value(z0), store.value(params.pos_embed));
    }

    #[test]
    fn embed_is_linear_in_projection() {
        let c = cfg();
        let (store, params) = build(&c, 3);
        let mut doubled = store.clone();
        for v in doubled.value_mut(params.patch_embed.weight).data_mut() {
            *v *= 2.0;
        }
        let patches = Tensor::<f64>::from_fn(&[c.num_patches(), c.patch_dim()], |i| {
            (i as f64 * 0.37).sin()
        });
        let diff = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let p = g.constant(patches.clone());
            let z0 = embed(&mut g, s, &params, p).unwrap();
            let pos = s.value(params.pos_embed);
            g.value(z0)
                .data()
                .iter()
                .zip(pos.data())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
        };
        for (a, b) in diff(&store).iter().zip(diff(&doubled)) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_mismatched_sequence() {
        let c = cfg();
        let (store, params) = build(&c, 4);
        let mut g = Graph::new();
        let patches = g.constant(Tensor::zeros(&[9, c.patch_dim()]));
        assert!(embed(&mut g, &store, &params, patches).is_err());
    }

    #[test]
    fn interpolate_pos_identity_and_constant() {
        let pos = Tensor::<f64>::from_fn(&[6, 5], |i| i as f64 * 0.1);
        assert_eq!(interpolate_pos(&pos, (2, 3), (2, 3)).unwrap(), pos);
        let constant = Tensor::<f64>::full(&[4, 3], 0.7);
        let up = interpolate_pos(&constant, (2, 2), (5, 3)).unwrap();
        assert_eq!(up.shape(), &[15, 3]);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(interpolate_pos(&pos, (2, 2), (4, 4)).is_err());
    }

    #[test]
    fn interpolate_pos_corner_values_follow_half_pixel_convention() {
        // Channel 0 holds the 2x2 ramp [[0,1],[2,3]]; channel 1 its negation.
        let pos =
            Tensor::<f64>::new(&[4, 2], vec![0.0, -0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        let up = interpolate_pos(&pos, (2, 2), (4, 4)).unwrap();
        let ch0: Vec<f64> = up.data().iter().step_by(2).copied().collect();
        let weights = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(ch0[y * 4 + x], 2.0 * weights[y] + weights[x]);
            }
        }
        assert_eq!(up.data()[1], -0.0);
    }

    #[test]
    fn msa_with_zero_query_attends_uniformly() {
        let c = cfg();
        let (mut store, params) = build(&c, 5);
        let block = params.blocks[0].clone();
        for v in store.value_mut(block.query.weight).data_mut() {
            *v = 0.0;
        }
        let x = Tensor::<f64>::from_fn(&[4, 16], |i| ((i * 7) % 11) as f64 * 0.1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (_, attn) = msa(&mut g, &store, &block, xv, 2).unwrap();
        for a in &attn {
            assert!(g.value(*a).data().iter().all(|p| (p - 0.25).abs() < 1e-15));
        }
        // Pre-projection output of each row is the mean of the value rows.
        let v = linear(&mut g, &store, block.value, xv).unwrap();
        let head0 = g.slice(v, 1, 0, 8).unwrap();
        let out0 = g.matmul(attn[0], head0).unwrap();
        let vals = g.value(head0).data().to_vec();
        let mean: Vec<f64> = (0..8)
            .map(|j| (0..4).map(|r| vals[r * 8 + j]).sum::<f64>() / 4.0)
            .collect();
        for row in g.value(out0).data().chunks(8) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_single_token_is_value_then_projection() {
        let c = cfg();
        let (store, params) = build(&c, 6);
        let block = &params.blocks[0];
        let x = Tensor::<f64>::from_fn(&[1, 16], |i| i as f64 * 0.05 - 0.3);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, attn) = msa(&mut g, &store, block, xv, 2).unwrap();
        for a in &attn {
            assert_eq!(g.value(*a).data(), &[1.0]);
        }
        let v = linear(&mut g, &store, block.value, xv).unwrap();
        let expected = linear(&mut g, &store, block.proj, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = cfg();
        let (store, params) = build(&c, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::from_fn(&[5, 16], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, attn) = msa(&mut g, &store, &params.blocks[0], xv, 2).unwrap();
        for a in attn {
            for row in g.value(a).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    fn run(
        c: &EncoderConfig,
        store: &ParamStore<f64>,
        params: &EncoderParams,
        z0: &Tensor<f64>,
        mode: &mut Mode<'_>,
    ) -> (Tensor<f64>, LayerTrace) {
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let out = encoder_forward(&mut g, store, params, c, z, mode).unwrap();
        (g.value(out.z).clone(), out.trace)
    }

    #[test]
    fn zero_rates_make_train_equal_eval() {
        let c = cfg();
        let (store, params) = build(&c, 9);
        let z0 = Tensor::<f64>::from_fn(&[4, 16], |i| (i as f64).cos());
        let (eval, _) = run(&c, &store, &params, &z0, &mut Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone().random::<u64>();
        let (train, _) = run(&c, &store, &params, &z0, &mut Mode::Train(&mut rng));
        assert_eq!(eval, train);
        assert_eq!(
            rng.random::<u64>(),
            before,
            "rng must be untouched at zero rates"
        );
    }

    #[test]
    fn full_stochastic_depth_is_final_norm_of_input() {
        let mut c = cfg();
        c.stochastic_depth = 1.0;
        let (store, params) = build(&c, 10);
        let z0 = Tensor::<f64>::from_fn(&[4, 16], |i| (i as f64 * 0.3).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, trace) = run(&c, &store, &params, &z0, &mut Mode::Train(&mut rng));
        assert_eq!(trace.dropped, 4);
        let mut g = Graph::new();
        let z = g.constant(z0);
        let expected = layer_norm(&mut g, &store, params.norm, z).unwrap();
        assert_eq!(&out, g.value(expected));
    }

    #[test]
    fn kept_branches_are_rescaled_in_training() {
        let mut c = cfg();
        c.depth = 1;
        c.stochastic_depth = 0.5;
        let (store, params) = build(&c, 11);
        let z0 = Tensor::<f64>::from_fn(&[4, 16], |i| (i as f64 * 0.21).cos());
        // Find a seed where both branches survive.
        let seed = (0..100u64)
            .find(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(*s);
                r.random::<f64>() >= 0.5 && r.random::<f64>() >= 0.5
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let mut mode = Mode::Train(&mut rng);
        let mut trace = LayerTrace::default();
        let reg = Regularization {
            dropout: 0.0,
            stochastic_depth: 0.5,
        };
        let train = block_forward(
            &mut g,
            &store,
            &params.blocks[0],
            z,
            2,
            reg,
            &mut mode,
            &mut trace,
        )
        .unwrap();
        assert_eq!(trace.dropped, 0);
        // Rebuild by hand: a = 2·MSA(LN z) + z, out = 2·MLP(LN a) + a.
        let b = &params.blocks[0];
        let h = layer_norm(&mut g, &store, b.norm1, z).unwrap();
        let (attn, _) = msa(&mut g, &store, b, h, 2).unwrap();
        let attn = g.scale(attn, 2.0).unwrap();
        let a = g.add(attn, z).unwrap();
        let h = layer_norm(&mut g, &store, b.norm2, a).unwrap();
        let h = linear(&mut g, &store, b.fc1, h).unwrap();
        let h = g.gelu(h).unwrap();
        let h = linear(&mut g, &store, b.fc2, h).unwrap();
        let h = g.scale(h, 2.0).unwrap();
        let expected = g.add(h, a).unwrap();
        assert!(g.value(train).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut c = cfg();
        c.stochastic_depth = 0.1;
        c.dropout = 0.1;
        let (store, params) = build(&c, 12);
        let z0 = Tensor::<f64>::from_fn(&[4, 16], |i| (i as f64 * 0.5).sin());
        let (a, _) = run(&c, &store, &params, &z0, &mut Mode::Eval);
        let (b, _) = run(&c, &store, &params, &z0, &mut Mode::Eval);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, _) = run(&c, &store, &params, &z0, &mut Mode::Train(&mut rng));
        assert_eq!(t.shape(), &[4, 16]);
    }

    #[test]
    fn branch_drop_frequency_matches_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut mode = Mode::Train(&mut rng);
        let dropped = (0..10_000).filter(|_| mode.drop_branch(0.1)).count();
        let freq = dropped as f64 / 10_000.0;
        assert!((freq - 0.1).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn permuting_patches_and_pos_permutes_output() {
        let c = cfg();
        let (store, params) = build(&c, 13);
        let n = c.num_patches();
        let patches = Tensor::<f64>::from_fn(&[n, c.patch_dim()], |i| ((i * 13) % 17) as f64 * 0.1);
        let perm = [2usize, 0, 3, 1];
        let permute_rows = |t: &Tensor<f64>| {
            let w = t.shape()[1];
            let data = perm
                .iter()
                .flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec())
                .collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let forward = |s: &ParamStore<f64>, p: &Tensor<f64>| {
            let mut g = Graph::new();
            let pv = g.constant(p.clone());
            let z0 = embed(&mut g, s, &params, pv).unwrap();
            let out = encoder_forward(&mut g, s, &params, &c, z0, &mut Mode::Eval).unwrap();
            g.value(out.z).clone()
        };
        let base = forward(&store, &patches);
        let mut permuted = store.clone();
        let pos = permute_rows(store.value(params.pos_embed));
        *permuted.value_mut(params.pos_embed) = pos;
        let out = forward(&permuted, &permute_rows(&patches));
        assert!(out.max_abs_diff(&permute_rows(&base)) < 1e-12);
    }
}
