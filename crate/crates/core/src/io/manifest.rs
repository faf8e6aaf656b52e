//! Dataset manifests.
//!
//! ```text
//! num_classes = 4
//! class_names = background, class1, class2, class3
//! mean = 123.675, 116.28, 103.53
//! std = 58.395, 57.12, 57.375
//! root = .                      # optional
//! pair = images/0000.ppm labels/0000.pgm
//! ```
//!
//! Relative pair paths resolve against `root`, which itself defaults to the
//! manifest's directory. When `SEGMENTER_DATA` is set, a relative `root` (or
//! the absent one) resolves against that directory instead.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Sample;
use crate::io::kv::KvReader;
use crate::io::netpbm::{read_image_ppm, read_labels_pgm};
use crate::model::{DEFAULT_MEAN, DEFAULT_STD};

pub const DATA_ENV: &str = "SEGMENTER_DATA";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// `(image, labels)` paths relative to `root` (or absolute).
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Dataset statistics, informational; the model's own constants normalize inputs.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DatasetManifest {
    pub fn parse(
        text: &str,
        origin: &str,
        manifest_dir: &Path,
        data_env: Option<&Path>,
    ) -> Result<Self> {
        let mut kv = KvReader::parse(text, origin)?;
        let num_classes: usize = kv.require("num_classes")?;
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::config(format!(
                "{origin}: num_classes must be in 1..=255"
            )));
        }
        let class_names = kv
            .list::<String>("class_names")?
            .unwrap_or_else(|| (0..num_classes).map(|k| format!("class{k}")).collect());
        if class_names.len() != num_classes {
            return Err(Error::config(format!(
                "{origin}: {} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        let mean = kv.triple("mean")?.unwrap_or(DEFAULT_MEAN);
        let std = kv.triple("std")?.unwrap_or(DEFAULT_STD);
        let root_key: Option<PathBuf> = kv.get("root")?;
        let base = data_env.unwrap_or(manifest_dir);
        let root = match root_key {
            Some(r) if r.is_absolute() => r,
            Some(r) => base.join(r),
            None => base.to_path_buf(),
        };
        let mut pairs = Vec::new();
        for e in kv.all("pair") {
            let parts: Vec<&str> = e.value.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::config(format!(
                    "{origin}:{}: pair needs an image path and a label path",
                    e.line
                )));
            }
            pairs.push((PathBuf::from(parts[0]), PathBuf::from(parts[1])));
        }
        kv.finish()?;
        if pairs.is_empty() {
            return Err(Error::config(format!("{origin}: manifest lists no pairs")));
        }
        Ok(DatasetManifest {
            root,
            pairs,
            num_classes,
            class_names,
            mean,
            std,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let env = std::env::var_os(DATA_ENV).map(PathBuf::from);
        Self::parse(&text, &path.display().to_string(), dir, env.as_deref())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# segmentation dataset manifest\n");
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "class_names = {}", self.class_names.join(", "));
        let _ = writeln!(
            s,
            "mean = {}, {}, {}",
            self.mean[0], self.mean[1], self.mean[2]
        );
        let _ = writeln!(s, "std = {}, {}, {}", self.std[0], self.std[1], self.std[2]);
        for (img, lab) in &self.pairs {
            let _ = writeln!(s, "pair = {} {}", img.display(), lab.display());
        }
        s
    }

    /// Writes the manifest; pair paths are written as stored, so they stay
    /// relative to the manifest's directory.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads pair `i`, checking matching sizes and label range.
    pub fn load(&self, i: usize) -> Result<Sample> {
        let (img, lab) = &self.pairs[i];
        let image = read_image_ppm(self.resolve(img))?;
        let labels = read_labels_pgm(self.resolve(lab))?;
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::config(format!(
                "{}: image is {}x{} but labels are {}x{}",
                img.display(),
                image.width,
                image.height,
                labels.width,
                labels.height
            )));
        }
        labels
            .validate(self.num_classes)
            .map_err(|e| Error::config(format!("{}: {e}", lab.display())))?;
        Sample::new(image, labels)
    }

    /// Reads and validates every pair.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
