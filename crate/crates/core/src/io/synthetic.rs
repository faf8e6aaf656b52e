//! Procedural segmentation datasets: flat-colored shapes on a background,
//! with exact labels and a stored shape list that reproduces them.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage, Sample};
use crate::io::kv::KvReader;
use crate::io::manifest::DatasetManifest;
use crate::io::netpbm::{write_image_ppm, write_labels_pgm};
use crate::model::{DEFAULT_MEAN, DEFAULT_STD};
use crate::rng::{stream_rng, Stream};

/// Mean color per class id; class 0 is the background.
pub const COLOR_TABLE: [[u8; 3]; 16] = [
    [40, 40, 40],
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 220],
    [230, 210, 40],
    [200, 60, 200],
    [40, 200, 210],
    [240, 140, 30],
    [140, 90, 40],
    [240, 240, 240],
    [120, 120, 120],
    [130, 200, 120],
    [110, 40, 160],
    [250, 160, 180],
    [20, 100, 100],
    [180, 180, 90],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disk,
    Stripe,
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" | "rectangle" => Ok(ShapeKind::Rect),
            "disk" => Ok(ShapeKind::Disk),
            "stripe" => Ok(ShapeKind::Stripe),
            _ => Err(Error::config(format!(
                "unknown shape kind {s:?} (rect, disk, stripe)"
            ))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Disk => "disk",
            ShapeKind::Stripe => "stripe",
        })
    }
}

/// One drawn object. Rectangles and stripes cover `x0 ≤ x < x1`, `y0 ≤ y < y1`;
/// a disk covers pixels whose center lies within `radius` of `(cx, cy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect {
        class: u8,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    Stripe {
        class: u8,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    Disk {
        class: u8,
        cx: f64,
        cy: f64,
        radius: f64,
    },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match *self {
            Shape::Rect { class, .. } | Shape::Stripe { class, .. } | Shape::Disk { class, .. } => {
                class
            }
        }
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1, .. } | Shape::Stripe { x0, y0, x1, y1, .. } => {
                x >= x0 && x < x1 && y >= y0 && y < y1
            }
            Shape::Disk { cx, cy, radius, .. } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= radius * radius
            }
        }
    }

    fn to_line(self) -> String {
        match self {
            Shape::Rect {
                class,
                x0,
                y0,
                x1,
                y1,
            } => format!("rect {class} {x0} {y0} {x1} {y1}"),
            Shape::Stripe {
                class,
                x0,
                y0,
                x1,
                y1,
            } => format!("stripe {class} {x0} {y0} {x1} {y1}"),
            Shape::Disk {
                class,
                cx,
                cy,
                radius,
            } => format!("disk {class} {cx} {cy} {radius}"),
        }
    }

    fn from_line(line: &str) -> Option<Shape> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let class = f.get(1)?.parse().ok()?;
        let n = |i: usize| f.get(i).and_then(|v| v.parse::<usize>().ok());
        let r = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
        match (f.first()?, f.len()) {
            (&"rect", 6) => Some(Shape::Rect {
                class,
                x0: n(2)?,
                y0: n(3)?,
                x1: n(4)?,
                y1: n(5)?,
            }),
            (&"stripe", 6) => Some(Shape::Stripe {
                class,
                x0: n(2)?,
                y0: n(3)?,
                x1: n(4)?,
                y1: n(5)?,
            }),
            (&"disk", 5) => Some(Shape::Disk {
                class,
                cx: r(2)?,
                cy: r(3)?,
                radius: r(4)?,
            }),
            _ => None,
        }
    }
}

/// Draws shapes back to front onto a background-0 map.
pub fn rasterize(width: usize, height: usize, shapes: &[Shape]) -> LabelMap {
    let mut labels = LabelMap::filled(width, height, 0);
    for s in shapes {
        for y in 0..height {
            for x in 0..width {
                if s.covers(x, y) {
                    labels.set(x, y, s.class());
                }
            }
        }
    }
    labels
}

/// Text form of a shape list, one shape per line.
pub fn shapes_to_text(shapes: &[Shape]) -> String {
    shapes.iter().map(|s| s.to_line() + "\n").collect()
}

pub fn shapes_from_text(text: &str) -> Result<Vec<Shape>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            Shape::from_line(l).ok_or_else(|| {
                Error::config(format!("shape list line {}: cannot parse {l:?}", i + 1))
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Class count including the background.
    pub num_classes: usize,
    pub shapes: Vec<ShapeKind>,
    pub noise_std: f64,
    /// Object extent range in pixels (side length or diameter).
    pub min_size: usize,
    pub max_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Thickness of stripes in pixels.
    pub stripe_width: usize,
    /// Snap rectangle and stripe corners to multiples of this many pixels (1 = off).
    pub snap: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 16,
            height: 64,
            width: 64,
            num_classes: 4,
            shapes: vec![ShapeKind::Rect, ShapeKind::Disk],
            noise_std: 8.0,
            min_size: 8,
            max_size: 32,
            min_objects: 1,
            max_objects: 4,
            stripe_width: 2,
            snap: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(
                "synthetic data needs at least 2 classes (background + one shape)",
            ));
        }
        if self.num_classes > COLOR_TABLE.len() {
            return Err(Error::config(format!(
                "num_classes {} exceeds the {}-entry color table",
                self.num_classes,
                COLOR_TABLE.len()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("synthetic image size must be positive"));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("at least one shape kind is required"));
        }
        if self.min_size == 0
            || self.min_size > self.max_size
            || self.max_size > self.width.min(self.height)
        {
            return Err(Error::config(format!(
                "object size range {}..{} invalid for {}x{} images",
                self.min_size, self.max_size, self.width, self.height
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if self.stripe_width == 0 || self.snap == 0 {
            return Err(Error::config("stripe_width and snap must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }

    /// Reads a spec file in `key = value` form; keys match the field names,
    /// `shapes` is a comma-separated list.
    pub fn parse(text: &str, origin: &str) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let mut kv = KvReader::parse(text, origin)?;
        let spec = SyntheticSpec {
            n_images: kv.get_or("n_images", d.n_images)?,
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            shapes: kv.list::<ShapeKind>("shapes")?.unwrap_or(d.shapes),
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            min_size: kv.get_or("min_size", d.min_size)?,
            max_size: kv.get_or("max_size", d.max_size)?,
            min_objects: kv.get_or("min_objects", d.min_objects)?,
            max_objects: kv.get_or("max_objects", d.max_objects)?,
            stripe_width: kv.get_or("stripe_width", d.stripe_width)?,
            snap: kv.get_or("snap", d.snap)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<SyntheticSpec> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn snap_down(v: usize, s: usize) -> usize {
    v / s * s
}

fn random_shape(spec: &SyntheticSpec, rng: &mut impl Rng) -> Shape {
    let class = rng.random_range(1..spec.num_classes) as u8;
    let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
    let (w, h, s) = (spec.width, spec.height, spec.snap);
    let mut extent = || {
        let e = rng.random_range(spec.min_size..=spec.max_size);
        snap_down(e, s).max(s.min(spec.max_size))
    };
    match kind {
        ShapeKind::Rect => {
            let (sw, sh) = (extent(), extent());
            let x0 = snap_down(rng.random_range(0..=w - sw), s);
            let y0 = snap_down(rng.random_range(0..=h - sh), s);
            Shape::Rect {
                class,
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            }
        }
        ShapeKind::Stripe => {
            let len = extent();
            let t = spec.stripe_width.min(w).min(h);
            let (sw, sh) = if rng.random::<bool>() {
                (len, t)
            } else {
                (t, len)
            };
            let x0 = snap_down(rng.random_range(0..=w - sw), s);
            let y0 = snap_down(rng.random_range(0..=h - sh), s);
            Shape::Stripe {
                class,
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            }
        }
        ShapeKind::Disk => {
            let radius = rng.random_range(spec.min_size..=spec.max_size) as f64 / 2.0;
            let cx = rng.random_range(radius..=w as f64 - radius);
            let cy = rng.random_range(radius..=h as f64 - radius);
            Shape::Disk {
                class,
                cx,
                cy,
                radius,
            }
        }
    }
}

/// Generates image `index` of the dataset along with its shape list.
pub fn synthesize_one(spec: &SyntheticSpec, index: usize) -> (Sample, Vec<Shape>) {
    let mut rng = stream_rng(spec.seed, Stream::Synthetic, index as u64);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let shapes: Vec<Shape> = (0..count).map(|_| random_shape(spec, &mut rng)).collect();
    let labels = rasterize(spec.width, spec.height, &shapes);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
    let mut data = Vec::with_capacity(spec.width * spec.height * 3);
    for &l in &labels.data {
        for c in COLOR_TABLE[l as usize] {
            let v = if spec.noise_std > 0.0 {
                c as f64 + noise.sample(&mut rng)
            } else {
                c as f64
            };
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let image = RgbImage::new(spec.width, spec.height, data).expect("sized buffer");
    (Sample::new(image, labels).expect("matching sizes"), shapes)
}

/// Generates the whole dataset in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.n_images)
        .map(|i| synthesize_one(spec, i).0)
        .collect())
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| {
            if k == 0 {
                "background".to_string()
            } else {
                format!("class{k}")
            }
        })
        .collect()
}

/// Writes `images/NNNN.ppm`, `labels/NNNN.pgm`, `shapes/NNNN.txt` and
/// `manifest.txt` under `out`, returning the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out.as_ref();
    for sub in ["images", "labels", "shapes"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut pairs = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let (sample, shapes) = synthesize_one(spec, i);
        let image = format!("images/{i:04}.ppm");
        let labels = format!("labels/{i:04}.pgm");
        write_image_ppm(out.join(&image), &sample.image)?;
        write_labels_pgm(out.join(&labels), &sample.labels)?;
        let shape_path = out.join(format!("shapes/{i:04}.txt"));
        fs::write(&shape_path, shapes_to_text(&shapes)).map_err(|e| Error::io(&shape_path, e))?;
        pairs.push((image.into(), labels.into()));
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        pairs,
        num_classes: spec.num_classes,
        class_names: class_names(spec.num_classes),
        mean: DEFAULT_MEAN,
        std: DEFAULT_STD,
    };
    manifest.write(out.join("manifest.txt"))?;
    Ok(manifest)
}
