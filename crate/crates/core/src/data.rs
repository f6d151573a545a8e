//! Dataset ingestion, preprocessing, splitting and a synthetic blob dataset.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_image, read_mask, write_image_png, write_mask_png};
use crate::schedule::seeded_rng;
use crate::types::{Mask, RasterImage, Sample};

pub const STD_FLOOR: f64 = 1e-8;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Suffix used by challenge-style ground-truth files (`<stem>_segmentation.png`).
const MASK_SUFFIX: &str = "_segmentation";

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            files.insert(stem.to_string(), path);
        }
    }
    Ok(files)
}

/// One sample per image, ordered by file stem. With `mask_dir` every image
/// needs a mask named `<stem>.png` or `<stem>_segmentation.png`.
pub fn load_dataset(image_dir: &Path, mask_dir: Option<&Path>) -> Result<Vec<Sample>> {
    let images = list_files(image_dir)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(image_dir.to_path_buf()));
    }
    let masks = match mask_dir {
        Some(dir) => {
            let mut found = HashMap::new();
            for (stem, path) in list_files(dir)? {
                let key = stem.strip_suffix(MASK_SUFFIX).unwrap_or(&stem).to_string();
                found.insert(key, path);
            }
            let missing: Vec<String> = images.keys().filter(|s| !found.contains_key(*s)).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::Pairing(missing));
            }
            Some(found)
        }
        None => None,
    };
    images
        .iter()
        .map(|(stem, path)| {
            let image = read_image(path)?;
            let mask = match &masks {
                Some(m) => {
                    let mask = read_mask(&m[stem])?;
                    if (mask.width(), mask.height()) != (image.width(), image.height()) {
                        return Err(Error::invalid(format!(
                            "mask for {stem} is {}x{}, image is {}x{}",
                            mask.width(),
                            mask.height(),
                            image.width(),
                            image.height()
                        )));
                    }
                    Some(mask)
                }
                None => None,
            };
            Ok(Sample {
                id: stem.clone(),
                image,
                mask,
                pseudo: None,
            })
        })
        .collect()
}

/// Bilinear resampling with pixel-centre alignment; an identity at equal size.
pub fn resize_bilinear(image: &RasterImage, width: usize, height: usize) -> RasterImage {
    let (sw, sh) = (image.width(), image.height());
    if (sw, sh) == (width, height) {
        return image.clone();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let xs = axis(width, sw);
    let ys = axis(height, sh);
    let mut values = Vec::with_capacity(width * height * image.channels());
    for c in 0..image.channels() {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
                let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    RasterImage::new(width, height, image.channels(), values).expect("resize keeps a valid shape")
}

/// Nearest-neighbour resampling; labels stay in {0, 1}.
pub fn resize_nearest(mask: &Mask, width: usize, height: usize) -> Mask {
    let (sw, sh) = (mask.width(), mask.height());
    let pick = |d: usize, dst: usize, src: usize| (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = pick(y, height, sh);
        for x in 0..width {
            labels.push(mask.labels()[sy * sw + pick(x, width, sw)]);
        }
    }
    Mask::new(width, height, labels).expect("resize keeps a valid shape")
}

/// Per-image, per-channel zero mean and unit (population) standard deviation.
pub fn normalize(image: &RasterImage) -> RasterImage {
    let plane = image.width() * image.height();
    let mut values = Vec::with_capacity(image.values().len());
    for c in 0..image.channels() {
        let ch = image.channel(c);
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        let mut std = var.sqrt();
        if std < STD_FLOOR {
            log::warn!("channel {c} has (near) zero variance; using std floor {STD_FLOOR}");
            std = STD_FLOOR;
        }
        values.extend(ch.iter().map(|v| (v - mean) / std));
    }
    RasterImage::new(image.width(), image.height(), image.channels(), values).expect("same shape")
}

/// Resize to `target_size` x `target_size`, then normalize the image.
pub fn preprocess(image: &RasterImage, mask: Option<&Mask>, target_size: usize) -> (RasterImage, Option<Mask>) {
    let resized = resize_bilinear(image, target_size, target_size);
    (
        normalize(&resized),
        mask.map(|m| resize_nearest(m, target_size, target_size)),
    )
}

pub fn preprocess_sample(sample: &Sample, target_size: usize) -> Sample {
    let (image, mask) = preprocess(&sample.image, sample.mask.as_ref(), target_size);
    Sample {
        id: sample.id.clone(),
        image,
        mask,
        pseudo: sample.pseudo.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub labeled_count: usize,
    pub validation_count: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 500.0 / 2594.0,
            labeled_count: 100,
            validation_count: 50,
            seed: 0,
        }
    }
}

/// Ground truth of the unlabeled pool lives in `withheld_masks`, not on the samples.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    withheld_masks: BTreeMap<String, Mask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn withheld_mask(&self, id: &str) -> Option<&Mask> {
        self.withheld_masks.get(id)
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect();
        SplitManifest {
            labeled: ids(&self.labeled),
            unlabeled: ids(&self.unlabeled),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    pub fn map_samples(self, f: impl Fn(&Sample) -> Sample) -> Self {
        let apply = |v: Vec<Sample>| v.iter().map(&f).collect();
        Self {
            labeled: apply(self.labeled),
            unlabeled: apply(self.unlabeled),
            validation: apply(self.validation),
            test: apply(self.test),
            withheld_masks: self.withheld_masks,
        }
    }
}

pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<DatasetSplit> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must lie in (0, 1)"));
    }
    let total = samples.len();
    let test_count = (total as f64 * spec.test_fraction).round() as usize;
    let train_count = total - test_count;
    let required = spec.labeled_count + spec.validation_count;
    if required > train_count {
        return Err(Error::Unsatisfiable {
            required: required + test_count,
            available: total,
        });
    }
    let mut samples = samples;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    samples.shuffle(&mut seeded_rng(spec.seed));
    let mut rest = samples.into_iter();
    let test: Vec<Sample> = rest.by_ref().take(test_count).collect();
    let labeled: Vec<Sample> = rest.by_ref().take(spec.labeled_count).collect();
    let validation: Vec<Sample> = rest.by_ref().take(spec.validation_count).collect();
    let mut withheld_masks = BTreeMap::new();
    let unlabeled = rest
        .map(|mut s| {
            if let Some(m) = s.mask.take() {
                withheld_masks.insert(s.id.clone(), m);
            }
            s
        })
        .collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        validation,
        test,
        withheld_masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Brightness of a blob centre above the background (0..255 scale).
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 260,
            image_size: 64,
            channels: 3,
            min_blobs: 1,
            max_blobs: 3,
            contrast: 60.0,
            noise: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.image_size < 8 || self.image_size % size_multiple != 0 {
            return Err(Error::Config(format!(
                "synthetic image_size {} must be at least 8 and divisible by {size_multiple}",
                self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("synthetic channels must be 1 or 3".into()));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::Config("need 1 <= min_blobs <= max_blobs".into()));
        }
        if !(self.contrast > 0.0) || self.noise < 0.0 {
            return Err(Error::Config("contrast must be positive and noise nonnegative".into()));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random<R: Rng>(size: f64, rng: &mut R) -> Self {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Self {
            cx: rng.gen_range(0.2..0.8) * size,
            cy: rng.gen_range(0.2..0.8) * size,
            a: rng.gen_range(0.08..0.22) * size,
            b: rng.gen_range(0.08..0.22) * size,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Squared normalised radius; the support is `r2 <= 1`.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v
    }
}

/// Images with bright elliptical blobs over a shaded background. Intensity
/// inside a blob falls from `contrast` at the centre to `0.6 * contrast` at
/// the rim; masks are exactly the blob supports. Pixel values are rounded
/// to whole 0..=255 levels so that a PNG round trip is lossless.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate(1)?;
    let mut rng = seeded_rng(spec.seed);
    let size = spec.image_size;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut samples = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let blobs: Vec<Ellipse> = (0..rng.gen_range(spec.min_blobs..=spec.max_blobs))
            .map(|_| Ellipse::random(size as f64, &mut rng))
            .collect();
        let base = rng.gen_range(60.0..100.0);
        let shade_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let shade = 0.2 * spec.contrast;
        let tint: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.85..1.15)).collect();

        let mut labels = vec![0u8; size * size];
        let mut clean = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let along = ((px / size as f64 - 0.5) * shade_angle.cos()
                    + (py / size as f64 - 0.5) * shade_angle.sin())
                    + 0.5;
                let mut value = base + shade * along.clamp(0.0, 1.0);
                let lift = blobs
                    .iter()
                    .map(|e| e.r2(px, py))
                    .filter(|&r2| r2 <= 1.0)
                    .map(|r2| spec.contrast * (0.6 + 0.4 * (1.0 - r2)))
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
                if let Some(l) = lift {
                    labels[y * size + x] = 1;
                    value += l;
                }
                clean[y * size + x] = value;
            }
        }
        // Guarantee a non-empty mask even for blobs thinner than a pixel.
        if labels.iter().all(|&l| l == 0) {
            let e = &blobs[0];
            let (x, y) = ((e.cx as usize).min(size - 1), (e.cy as usize).min(size - 1));
            labels[y * size + x] = 1;
            clean[y * size + x] += spec.contrast;
        }

        let mut values = Vec::with_capacity(size * size * spec.channels);
        for t in &tint {
            for &v in &clean {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values.push((v * t + n).round().clamp(0.0, 255.0));
            }
        }
        samples.push(Sample::labeled(
            format!("synth_{index:05}"),
            RasterImage::new(size, size, spec.channels, values)?,
            Mask::new(size, size, labels)?,
        ));
    }
    Ok(samples)
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        write_image_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        if let Some(mask) = &s.mask {
            write_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), mask)?;
        }
    }
    Ok(())
}
