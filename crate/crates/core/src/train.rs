//! Optimization: poly learning-rate schedule, SGD, data augmentation and the
//! training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::image::{normalize_image, LabelMap, Sample, IGNORE_LABEL};
use crate::model::SegmenterModel;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{kernels, Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    /// Must be zero; kept so configurations can state it explicitly.
    pub weight_decay: f64,
    /// Heavy-ball momentum. Zero gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Random resize, flip and crop. When off, samples are only normalized and cropped/padded.
    pub augment: bool,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            iterations: 1000,
            batch_size: 8,
            poly_power: 0.9,
            weight_decay: 0.0,
            momentum: 0.0,
            seed: 0,
            eval_every: 0,
            augment: true,
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::config("weight_decay must be 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::config("poly_power must be non-negative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("invalid scale range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// `base · (1 − n/total)^power`.
pub fn poly_lr(base: f64, n: usize, total: usize, power: f64) -> Result<f64> {
    if n > total {
        return Err(Error::contract(format!(
            "iteration {n} is past the schedule end {total}"
        )));
    }
    if total == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - n as f64 / total as f64).powf(power))
}

/// `p ← p − lr·grad` for every trainable parameter, then zeroes the gradients.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    Sgd::new(0.0).step(store, lr)
}

/// SGD with optional heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    /// One buffer per parameter, allocated on first use when momentum is on.
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store
            .iter()
            .map(|(_, p)| p)
            .find(|p| p.requires_grad && p.grad.is_none())
        {
            return Err(Error::contract(format!(
                "parameter {} has no gradient",
                p.name
            )));
        }
        if self.momentum > 0.0 && self.velocity.len() != store.len() {
            self.velocity.resize(store.len(), None);
        }
        let lr = T::of(lr);
        let mu = T::of(self.momentum);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_mut().expect("checked above");
            if self.momentum > 0.0 {
                let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                for ((w, vi), g) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(v.data_mut())
                    .zip(grad.data())
                {
                    *vi = mu * *vi + *g;
                    *w -= lr * *vi;
                }
            } else {
                for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * *g;
                }
            }
            grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        Ok(())
    }
}

/// Geometric choices of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Crop origin `(x, y)` in the resized image; ignored along an axis that is padded.
    pub offset: (usize, usize),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        flip: false,
        offset: (0, 0),
    };

    /// Draws scale, flip, then crop offsets, in that order.
    pub fn sample(
        rng: &mut impl Rng,
        size: (usize, usize),
        crop: (usize, usize),
        cfg: &TrainConfig,
    ) -> AugmentParams {
        let (lo, hi) = cfg.scale_range;
        let scale = if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        };
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let (w, h) = scaled_size(size, scale);
        let ox = if w > crop.1 {
            rng.random_range(0..=w - crop.1)
        } else {
            0
        };
        let oy = if h > crop.0 {
            rng.random_range(0..=h - crop.0)
        } else {
            0
        };
        AugmentParams {
            scale,
            flip,
            offset: (ox, oy),
        }
    }
}

/// `(width, height)` after scaling `(width, height)` by `scale`, at least 1 px.
fn scaled_size(size: (usize, usize), scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (f(size.0), f(size.1))
}

/// A normalized `H×W×3` image with its label map, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub image: Tensor<T>,
    pub labels: LabelMap,
}

/// Applies one augmentation: normalize, resize (bilinear image, nearest labels),
/// optional horizontal flip, then crop or pad to `crop = (height, width)`.
/// Padding is bottom/right with 0 in normalized space and the ignore label.
pub fn augment_with<T: Scalar>(
    sample: &Sample,
    mean: [f64; 3],
    std: [f64; 3],
    crop: (usize, usize),
    params: AugmentParams,
) -> TrainSample<T> {
    let (w0, h0) = (sample.image.width, sample.image.height);
    let normalized = normalize_image::<T>(&sample.image, mean, std).into_data();
    let (w, h) = scaled_size((w0, h0), params.scale);
    let (mut image, mut labels) = if (w, h) == (w0, h0) {
        (normalized, sample.labels.clone())
    } else {
        (
            kernels::bilinear_resize(&normalized, h0, w0, 3, h, w),
            sample.labels.resize_nearest(w, h),
        )
    };
    if params.flip {
        let mut flipped = Vec::with_capacity(image.len());
        for row in image.chunks(w * 3) {
            for px in row.chunks(3).rev() {
                flipped.extend_from_slice(px);
            }
        }
        image = flipped;
        labels = labels.flip_horizontal();
    }
    let (ch, cw) = crop;
    let ox = if w > cw {
        params.offset.0.min(w - cw)
    } else {
        0
    };
    let oy = if h > ch {
        params.offset.1.min(h - ch)
    } else {
        0
    };
    let mut out = vec![T::zero(); ch * cw * 3];
    let mut out_labels = LabelMap::filled(cw, ch, IGNORE_LABEL);
    for y in 0..ch.min(h - oy) {
        for x in 0..cw.min(w - ox) {
            let src = (y + oy) * w + x + ox;
            out[(y * cw + x) * 3..(y * cw + x) * 3 + 3]
                .copy_from_slice(&image[src * 3..src * 3 + 3]);
            out_labels.set(x, y, labels.data[src]);
        }
    }
    TrainSample {
        image: Tensor::new(&[ch, cw, 3], out).expect("crop buffer"),
        labels: out_labels,
    }
}

/// Draws augmentation parameters from `rng` (or uses identity geometry when
/// augmentation is off) and applies them.
pub fn augment<T: Scalar>(
    sample: &Sample,
    mean: [f64; 3],
    std: [f64; 3],
    crop: (usize, usize),
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> TrainSample<T> {
    let params = if cfg.augment {
        AugmentParams::sample(rng, (sample.image.width, sample.image.height), crop, cfg)
    } else {
        AugmentParams::IDENTITY
    };
    augment_with(sample, mean, std, crop, params)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:.6e} loss={:.6}",
            self.iteration, self.lr, self.loss
        )?;
        if let Some(m) = self.miou {
            write!(f, " miou={m:.4}")?;
        }
        Ok(())
    }
}

/// Resumable training state. Every random choice is derived from
/// `(seed, stream, sample position)`, so the iteration counter and the
/// optimizer buffers are all that is needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    pub model: SegmenterModel<T>,
    pub config: TrainConfig,
    pub optimizer: Sgd<T>,
    pub iteration: usize,
    /// Mean batch loss of the last completed iteration.
    pub last_loss: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SegmenterModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let momentum = config.momentum;
        Ok(Trainer {
            model,
            config,
            optimizer: Sgd::new(momentum),
            iteration: 0,
            last_loss: f64::NAN,
        })
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Dataset index visited at sample position `cursor`: a fresh permutation per epoch.
    fn sample_index(&self, cursor: usize, n: usize) -> usize {
        let epoch = cursor / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(
            self.config.seed,
            Stream::Shuffle,
            epoch as u64,
        ));
        order[cursor % n]
    }

    /// Runs one iteration: forward/backward over a batch, then an SGD step at the
    /// scheduled rate. A non-finite loss aborts before any parameter changes.
    pub fn step(&mut self, dataset: &[Sample]) -> Result<LogLine> {
        if dataset.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if self.finished() {
            return Err(Error::contract("schedule already complete"));
        }
        let cfg = &self.config;
        let lr = poly_lr(cfg.base_lr, self.iteration, cfg.iterations, cfg.poly_power)?;
        let crop = self.model.config.crop_size();
        let (mean, std) = (self.model.config.mean, self.model.config.std);
        self.model.store.zero_grad();
        let mut total = 0.0;
        let mut counted = 0usize;
        for b in 0..cfg.batch_size {
            let cursor = self.iteration * cfg.batch_size + b;
            let idx = self.sample_index(cursor, dataset.len());
            let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, cursor as u64);
            let s: TrainSample<T> = augment(&dataset[idx], mean, std, crop, cfg, &mut aug_rng);
            let mut drop_rng = stream_rng(cfg.seed, Stream::StochasticDepth, cursor as u64);
            let mut g = Graph::new();
            let out = self
                .model
                .forward(&mut g, &s.image, &mut Mode::Train(&mut drop_rng))?;
            let loss = self.model.loss(&mut g, out.logits, &s.labels)?;
            if loss.all_ignored() {
                continue;
            }
            let value = g.value(loss.loss).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    loss: value,
                });
            }
            total += value;
            counted += 1;
            let grads = g.backward(loss.loss)?;
            self.model.store.accumulate(&grads)?;
        }
        if counted > 0 {
            self.model.store.scale_grads(T::of(1.0 / counted as f64));
            self.optimizer.step(&mut self.model.store, lr)?;
        }
        self.model.store.clear_grad();
        self.last_loss = if counted > 0 {
            total / counted as f64
        } else {
            0.0
        };
        self.iteration += 1;
        Ok(LogLine {
            iteration: self.iteration,
            lr,
            loss: self.last_loss,
            miou: None,
        })
    }

    /// Trains to the end of the schedule. `on_step` sees every log line and may
    /// attach an evaluation score (called with the model after the step).
    pub fn run(
        &mut self,
        dataset: &[Sample],
        mut on_step: impl FnMut(&SegmenterModel<T>, &mut LogLine) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            let mut line = self.step(dataset)?;
            on_step(&self.model, &mut line)?;
        }
        Ok(())
    }
}

/// Trains `model` for the full schedule and returns it with its log.
pub fn train_loop<T: Scalar>(
    model: SegmenterModel<T>,
    dataset: &[Sample],
    config: TrainConfig,
) -> Result<(SegmenterModel<T>, Vec<LogLine>)> {
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut trainer = Trainer::new(model, config)?;
    let mut log = Vec::new();
    trainer.run(dataset, |_, line| {
        log.push(*line);
        Ok(())
    })?;
    Ok((trainer.model, log))
}
