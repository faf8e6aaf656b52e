//! Inference over arbitrary image sizes, segmentation metrics, and analyses
//! of trained models.

use std::collections::VecDeque;

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::image::{normalize_image, LabelMap, IGNORE_LABEL};
use crate::model::{argmax_labels, SegmenterModel};
use crate::tensor::{kernels, Scalar, Tensor};

/// Anything that maps a normalized window of fixed size to `h×w×K` logits.
pub trait WindowModel<T: Scalar> {
    /// `(height, width)` of the window the model accepts.
    fn window(&self) -> (usize, usize);
    fn num_classes(&self) -> usize;
    fn window_logits(&self, window: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> WindowModel<T> for SegmenterModel<T> {
    fn window(&self) -> (usize, usize) {
        self.config.crop_size()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    fn window_logits(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(window)
    }
}

/// Window origins along one axis: every `stride`, with the last window
/// clamped so it ends exactly at the border.
fn window_starts(size: usize, window: usize, stride: usize) -> Vec<usize> {
    if size <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + window < size)
        .collect();
    starts.push(size - window);
    starts
}

/// Tiles a normalized `H×W×3` image with model-sized windows, averages the
/// overlapping logits, and returns `H×W×K`. Images smaller than the window
/// are zero-padded (the normalized mean) at the bottom/right, then cropped back.
pub fn sliding_window_logits<T: Scalar, M: WindowModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    let (wh, ww) = model.window();
    if stride.0 == 0 || stride.1 == 0 || stride.0 > wh || stride.1 > ww {
        return Err(Error::contract(format!(
            "stride {stride:?} must be positive and no larger than the window {wh}x{ww}"
        )));
    }
    let (ph, pw) = (h.max(wh), w.max(ww));
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        let mut data = vec![T::zero(); ph * pw * c];
        for y in 0..h {
            data[y * pw * c..(y * pw + w) * c]
                .copy_from_slice(&image.data()[y * w * c..(y + 1) * w * c]);
        }
        Tensor::new(&[ph, pw, c], data)?
    };
    let k = model.num_classes();
    let mut acc = vec![T::zero(); ph * pw * k];
    let mut coverage = vec![0u32; ph * pw];
    let mut window = vec![T::zero(); wh * ww * c];
    for &y0 in &window_starts(ph, wh, stride.0) {
        for &x0 in &window_starts(pw, ww, stride.1) {
            for y in 0..wh {
                let src = ((y0 + y) * pw + x0) * c;
                window[y * ww * c..(y + 1) * ww * c]
                    .copy_from_slice(&padded.data()[src..src + ww * c]);
            }
            let logits = model.window_logits(&Tensor::new(&[wh, ww, c], window.clone())?)?;
            if logits.shape() != [wh, ww, k] {
                return Err(Error::contract(format!(
                    "window model returned {:?}, expected {:?}",
                    logits.shape(),
                    [wh, ww, k]
                )));
            }
            for y in 0..wh {
                for x in 0..ww {
                    let dst = (y0 + y) * pw + x0 + x;
                    coverage[dst] += 1;
                    let src = &logits.data()[(y * ww + x) * k..(y * ww + x + 1) * k];
                    for (a, v) in acc[dst * k..(dst + 1) * k].iter_mut().zip(src) {
                        *a += *v;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * k);
    for y in 0..h {
        for x in 0..w {
            let i = y * pw + x;
            debug_assert!(coverage[i] > 0);
            let inv = T::one() / T::of(coverage[i] as f64);
            out.extend(acc[i * k..(i + 1) * k].iter().map(|v| *v * inv));
        }
    }
    Tensor::new(&[h, w, k], out)
}

/// What is averaged across scales and flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Window stride; `None` means half the window.
    pub stride: Option<(usize, usize)>,
    pub averaging: Averaging,
}

impl InferenceConfig {
    pub fn single_scale() -> Self {
        InferenceConfig {
            scales: vec![1.0],
            flip: false,
            stride: None,
            averaging: Averaging::Probabilities,
        }
    }

    pub fn multi_scale() -> Self {
        InferenceConfig {
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            flip: true,
            stride: None,
            averaging: Averaging::Probabilities,
        }
    }

    fn stride_for(&self, window: (usize, usize)) -> (usize, usize) {
        self.stride
            .unwrap_or(((window.0 / 2).max(1), (window.1 / 2).max(1)))
    }
}

fn flip_map<T: Copy>(data: &[T], w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(w * c) {
        for px in row.chunks(c).rev() {
            out.extend_from_slice(px);
        }
    }
    out
}

/// Averaged class scores over scales and flips, `H×W×K` at the input size.
pub fn multiscale_scores<T: Scalar, M: WindowModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    cfg: &InferenceConfig,
) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if cfg.scales.is_empty() || cfg.scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config(
            "inference scales must be a non-empty list of positive numbers",
        ));
    }
    let k = model.num_classes();
    let stride = cfg.stride_for(model.window());
    let mut total = vec![T::zero(); h * w * k];
    let mut count = 0usize;
    let flips: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
    for &s in &cfg.scales {
        let (sh, sw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        let scaled = if (sh, sw) == (h, w) {
            image.data().to_vec()
        } else {
            kernels::bilinear_resize(image.data(), h, w, c, sh, sw)
        };
        for &flip in flips {
            let input = if flip {
                flip_map(&scaled, sw, c)
            } else {
                scaled.clone()
            };
            let logits = sliding_window_logits(model, &Tensor::new(&[sh, sw, c], input)?, stride)?;
            let mut scores = match cfg.averaging {
                Averaging::Probabilities => kernels::softmax(logits.data(), sh * sw, k, 1),
                Averaging::Logits => logits.into_data(),
            };
            if flip {
                scores = flip_map(&scores, sw, k);
            }
            if (sh, sw) != (h, w) {
                scores = kernels::bilinear_resize(&scores, sh, sw, k, h, w);
            }
            for (t, v) in total.iter_mut().zip(&scores) {
                *t += *v;
            }
            count += 1;
        }
    }
    let inv = T::one() / T::of(count as f64);
    total.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[h, w, k], total)
}

/// Label map from averaged multi-scale scores.
pub fn multiscale_predict<T: Scalar, M: WindowModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    cfg: &InferenceConfig,
) -> Result<LabelMap> {
    argmax_labels(&multiscale_scores(model, image, cfg)?)
}

/// Single-scale sliding-window prediction at half-window stride.
pub fn predict_sliding<T: Scalar, M: WindowModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
) -> Result<LabelMap> {
    let stride = InferenceConfig::single_scale().stride_for(model.window());
    argmax_labels(&sliding_window_logits(model, image, stride)?)
}

/// `K×K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

/// Per-class IoU and their mean over classes present in ground truth or prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// NaN when no class is present at all.
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel; ignored ground truth is skipped.
    pub fn record(&mut self, truth: u8, pred: u8) -> Result<()> {
        if truth == IGNORE_LABEL {
            return Ok(());
        }
        let k = self.num_classes;
        if truth as usize >= k || pred as usize >= k {
            return Err(Error::contract(format!(
                "label pair ({truth}, {pred}) outside {k} classes"
            )));
        }
        self.counts[truth as usize * k + pred as usize] += 1;
        Ok(())
    }

    /// Accumulates a whole prediction against its ground truth.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.width, pred.height) != (truth.width, truth.height) {
            return Err(Error::Shape {
                op: "confusion",
                lhs: vec![pred.height, pred.width],
                rhs: vec![truth.height, truth.width],
            });
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            self.record(t, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::contract(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { miou, per_class }
    }
}

/// Mean IoU of a confusion matrix; see [`ConfusionMatrix::iou`].
pub fn miou(confusion: &ConfusionMatrix) -> IouReport {
    confusion.iou()
}

/// Area thresholds (pixels) splitting ground-truth components into small,
/// medium and large.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeBands {
    /// Components with area below this are small.
    pub small_below: usize,
    /// Components with area below this (and not small) are medium; the rest large.
    pub medium_below: usize,
}

impl Default for SizeBands {
    fn default() -> Self {
        SizeBands {
            small_below: 32 * 32,
            medium_below: 96 * 96,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        }
    }
}

impl SizeBands {
    pub fn validate(&self) -> Result<()> {
        if self.small_below == 0 || self.small_below > self.medium_below {
            return Err(Error::config(format!(
                "size bands need 0 < small ({}) <= medium ({})",
                self.small_below, self.medium_below
            )));
        }
        Ok(())
    }

    pub fn band(&self, area: usize) -> SizeBand {
        if area < self.small_below {
            SizeBand::Small
        } else if area < self.medium_below {
            SizeBand::Medium
        } else {
            SizeBand::Large
        }
    }
}

/// 4-connected components of equal, non-ignored labels. Returns a component
/// id per pixel (`usize::MAX` for ignored pixels) and each component's area.
pub fn connected_components(labels: &LabelMap) -> (Vec<usize>, Vec<usize>) {
    let (w, h) = (labels.width, labels.height);
    let mut comp = vec![usize::MAX; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if comp[start] != usize::MAX || labels.data[start] == IGNORE_LABEL {
            continue;
        }
        let id = areas.len();
        let class = labels.data[start];
        let mut area = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if comp[j] == usize::MAX && labels.data[j] == class {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
    }
    (comp, areas)
}

/// Confusion restricted to pixels of ground-truth components in each size
/// band, accumulated into `out` (small, medium, large).
pub fn accumulate_size_bands(
    pred: &LabelMap,
    truth: &LabelMap,
    bands: &SizeBands,
    out: &mut [ConfusionMatrix; 3],
) -> Result<()> {
    bands.validate()?;
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::Shape {
            op: "size_bands",
            lhs: vec![pred.height, pred.width],
            rhs: vec![truth.height, truth.width],
        });
    }
    let (comp, areas) = connected_components(truth);
    for (i, &c) in comp.iter().enumerate() {
        if c == usize::MAX {
            continue;
        }
        let band = bands.band(areas[c]) as usize;
        out[band].record(truth.data[i], pred.data[i])?;
    }
    Ok(())
}

/// Per-band mIoU (small, medium, large) of one prediction; `None` for empty bands.
pub fn size_stratified_iou(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: usize,
    bands: &SizeBands,
) -> Result<[Option<f64>; 3]> {
    let mut cms = [0; 3].map(|_| ConfusionMatrix::new(num_classes));
    accumulate_size_bands(pred, truth, bands, &mut cms)?;
    Ok(cms.map(|cm| (cm.total() > 0).then(|| cm.iou().miou)))
}

/// Mean attention distance in pixels for one layer/head attention matrix
/// over a `grid` of patches of side `patch`: the attention-weighted distance
/// between patch centers, averaged over queries.
pub fn mean_attention_distance<T: Scalar>(
    attention: &Tensor<T>,
    grid: (usize, usize),
    patch: usize,
) -> Result<f64> {
    let n = grid.0 * grid.1;
    if attention.shape() != [n, n] {
        return Err(Error::Shape {
            op: "attention_distance",
            lhs: attention.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let center = |i: usize| {
        (
            ((i / grid.1) as f64 + 0.5) * patch as f64,
            ((i % grid.1) as f64 + 0.5) * patch as f64,
        )
    };
    let mut total = 0.0;
    for q in 0..n {
        let (qy, qx) = center(q);
        let row = &attention.data()[q * n..(q + 1) * n];
        for (kk, a) in row.iter().enumerate() {
            let (ky, kx) = center(kk);
            total += a.f64() * ((qy - ky).powi(2) + (qx - kx).powi(2)).sqrt();
        }
    }
    Ok(total / n as f64)
}

/// Mean attention distance per encoder layer and head, averaged over images
/// (each normalized and crop-sized).
pub fn attention_distance<T: Scalar>(
    model: &SegmenterModel<T>,
    images: &[Tensor<T>],
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::contract(
            "attention distance needs at least one image",
        ));
    }
    let cfg = &model.config.encoder;
    let mut sums = vec![vec![0.0; cfg.heads]; cfg.depth];
    for img in images {
        for (layer, heads) in model.encoder_attention(img)?.iter().enumerate() {
            for (head, a) in heads.iter().enumerate() {
                sums[layer][head] += mean_attention_distance(a, cfg.grid(), cfg.patch_size)?;
            }
        }
    }
    let n = images.len() as f64;
    Ok(sums
        .into_iter()
        .map(|l| l.into_iter().map(|v| v / n).collect())
        .collect())
}

/// Two-dimensional projection of a set of row vectors onto their top two
/// principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// One `[x, y]` per input row.
    pub coords: Vec<[f64; 2]>,
    pub singular_values: [f64; 2],
    /// Right singular vectors of the centered rows.
    pub directions: [Vec<f64>; 2],
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 100_000;

/// Centers `rows`, finds the top two right singular vectors by power
/// iteration on the Gram matrix with deflation, and projects. Each direction
/// is signed so its first non-zero coordinate is positive.
pub fn top2_projection(rows: &[Vec<f64>]) -> Result<Projection> {
    let k = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if k == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract(
            "projection needs a non-empty matrix with equal-length rows",
        ));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut gram = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += r[i] * r[j];
            }
        }
    }
    let mut directions: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut singular_values = [0.0; 2];
    for slot in 0..2 {
        // Deterministic start with weight on every coordinate.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
        normalize(&mut v);
        let mut eigen = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            let mut next: Vec<f64> = (0..d)
                .map(|i| kernels::dot(&gram[i * d..(i + 1) * d], &v))
                .collect();
            let norm = normalize(&mut next);
            if norm == 0.0 {
                eigen = 0.0;
                break;
            }
            let delta = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            eigen = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-15) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] -= eigen * v[i] * v[j];
            }
        }
        singular_values[slot] = eigen.max(0.0).sqrt();
        directions[slot] = v;
    }
    let coords = centered
        .iter()
        .map(|r| {
            [
                kernels::dot(r, &directions[0]),
                kernels::dot(r, &directions[1]),
            ]
        })
        .collect();
    Ok(Projection {
        coords,
        singular_values,
        directions,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Projects the mask decoder's learned class embeddings to two dimensions.
pub fn class_embedding_projection<T: Scalar>(model: &SegmenterModel<T>) -> Result<Projection> {
    let DecoderParams::Mask(mask) = &model.decoder else {
        return Err(Error::Unsupported(
            "class embedding projection needs a mask-transformer decoder".into(),
        ));
    };
    let cls = model.store.value(mask.cls_emb);
    let d = cls.shape()[1];
    let rows: Vec<Vec<f64>> = cls
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect();
    top2_projection(&rows)
}

/// Single-scale or multi-scale evaluation of 8-bit samples, returning the
/// overall confusion and, when `bands` is given, per-band confusions.
pub fn evaluate<T: Scalar>(
    model: &SegmenterModel<T>,
    samples: &[crate::image::Sample],
    cfg: &InferenceConfig,
    bands: Option<&SizeBands>,
) -> Result<(ConfusionMatrix, Option<[ConfusionMatrix; 3]>)> {
    let k = model.config.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    let mut banded = bands.map(|_| [0; 3].map(|_| ConfusionMatrix::new(k)));
    for s in samples {
        s.labels.validate(k)?;
        let img = normalize_image(&s.image, model.config.mean, model.config.std);
        let pred = multiscale_predict(model, &img, cfg)?;
        cm.add(&pred, &s.labels)?;
        if let (Some(b), Some(out)) = (bands, banded.as_mut()) {
            accumulate_size_bands(&pred, &s.labels, b, out)?;
        }
    }
    Ok((cm, banded))
}

/// Timing of repeated forward passes at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub resolution: (usize, usize),
    pub workers: usize,
    /// Wall-clock seconds per timed repetition, in run order.
    pub seconds: Vec<f64>,
    /// Images per second at the median repetition.
    pub images_per_sec: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repeat` eval forward passes at `resolution` after one warm-up pass.
/// With `workers > 1` every repetition runs one image per worker concurrently
/// and counts `workers` images.
pub fn benchmark<T: Scalar>(
    model: &SegmenterModel<T>,
    resolution: (usize, usize),
    repeat: usize,
    workers: usize,
) -> Result<Throughput> {
    if repeat == 0 || workers == 0 {
        return Err(Error::config(
            "bench needs at least one repetition and one worker",
        ));
    }
    let resized;
    let model = if model.config.crop_size() == resolution {
        model
    } else {
        resized = model.resized(resolution)?;
        &resized
    };
    let (h, w) = resolution;
    let image = Tensor::from_fn(&[h, w, 3], |i| {
        T::of(((i * 7919) % 255) as f64 / 127.5 - 1.0)
    });
    model.logits(&image)?;
    let mut seconds = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let start = std::time::Instant::now();
        if workers == 1 {
            model.logits(&image)?;
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|_| s.spawn(|| model.logits(&image)))
                    .collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().expect("bench worker panicked").map(drop))
            })?;
        }
        seconds.push(start.elapsed().as_secs_f64());
    }
    let images_per_sec = workers as f64 / median(&seconds).max(1e-12);
    Ok(Throughput {
        resolution,
        workers,
        seconds,
        images_per_sec,
    })
}
