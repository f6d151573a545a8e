//! Raster and probability-map types shared across the crate.
//!
//! Layout conventions:
//! - [`RasterImage`] is channel-major (`c, y, x`), which is what the network consumes.
//! - [`ProbMap`] is row-major and class-minor (`y, x, c`), the on-disk `.pmap` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel probability sums must be within this distance of 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "expected {} values for a {width}x{height}x{channels} image, got {}",
                width * height * channels,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.values[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if labels.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} labels for a {width}x{height} mask, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// One-hot target with class 1 as foreground.
    pub fn to_one_hot(&self, classes: usize) -> ProbMap {
        let mut probs = vec![0.0; self.labels.len() * classes];
        for (j, &l) in self.labels.iter().enumerate() {
            probs[j * classes + l as usize] = 1.0;
        }
        ProbMap {
            width: self.width,
            height: self.height,
            classes,
            probs,
        }
    }
}

/// Pixel-wise class probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Shape is checked here; probability validity is left to [`validate_probmap`].
    pub fn new(width: usize, height: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("probability map dimensions must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("probability map needs at least 2 classes"));
        }
        if probs.len() != width * height * classes {
            return Err(Error::invalid(format!(
                "expected {} probabilities for {width}x{height}x{classes}, got {}",
                width * height * classes,
                probs.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            probs,
        })
    }

    /// Two-class map from foreground probabilities; background is `1 - p`.
    pub fn from_foreground(width: usize, height: usize, fg: &[f64]) -> Result<Self> {
        let probs = fg.iter().flat_map(|&p| [1.0 - p, p]).collect();
        Self::new(width, height, 2, probs)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Pixel count `R`.
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        self.probs[pixel * self.classes + class]
    }

    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.probs[pixel * self.classes..(pixel + 1) * self.classes]
    }

    pub fn channel(&self, class: usize) -> impl Iterator<Item = f64> + '_ {
        self.probs.iter().skip(class).step_by(self.classes).copied()
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }

    /// Per-pixel argmax.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .chunks_exact(self.classes)
            .map(|px| {
                px.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| {
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid("binary map size does not match its dimensions"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("binary map entries must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn to_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            labels: self.bits.clone(),
        }
    }
}

/// Per-pixel sum of foreground probabilities over `count` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMap {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) count: usize,
    pub(crate) sums: Vec<f64>,
}

impl ConsensusMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of maps that were summed.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RasterImage,
    pub mask: Option<Mask>,
    pub pseudo: Option<ProbMap>,
}

impl Sample {
    pub fn labeled(id: impl Into<String>, image: RasterImage, mask: Mask) -> Self {
        Self {
            id: id.into(),
            image,
            mask: Some(mask),
            pseudo: None,
        }
    }

    pub fn unlabeled(id: impl Into<String>, image: RasterImage) -> Self {
        Self {
            id: id.into(),
            image,
            mask: None,
            pseudo: None,
        }
    }

    /// The training target: a ground-truth mask wins over a pseudo label.
    pub fn target(&self, classes: usize) -> Option<ProbMap> {
        match (&self.mask, &self.pseudo) {
            (Some(mask), _) => Some(mask.to_one_hot(classes)),
            (None, Some(pseudo)) => Some(pseudo.clone()),
            (None, None) => None,
        }
    }
}

/// Foreground bit is set where `p >= threshold`.
pub fn binarize(map: &ProbMap, foreground_class: usize, threshold: f64) -> Result<BinaryMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if foreground_class >= map.classes {
        return Err(Error::invalid(format!(
            "foreground class {foreground_class} out of range for {} classes",
            map.classes
        )));
    }
    let bits = map
        .channel(foreground_class)
        .map(|p| u8::from(p >= threshold))
        .collect();
    Ok(BinaryMap {
        width: map.width,
        height: map.height,
        bits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbViolation {
    OutOfRange { class: usize, value: f64 },
    BadSum { sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbMapFailure {
    pub pixel: usize,
    pub violation: ProbViolation,
}

/// Checks range and per-pixel sums; reports the first offending pixel.
pub fn validate_probmap(map: &ProbMap) -> Result<(), ProbMapFailure> {
    for (pixel, px) in map.probs.chunks_exact(map.classes).enumerate() {
        for (class, &value) in px.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProbMapFailure {
                    pixel,
                    violation: ProbViolation::OutOfRange { class, value },
                });
            }
        }
        let sum: f64 = px.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(ProbMapFailure {
                pixel,
                violation: ProbViolation::BadSum { sum },
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fg_map(fg: &[f64]) -> ProbMap {
        ProbMap::from_foreground(fg.len(), 1, fg).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let b = binarize(&fg_map(&[0.9, 0.2]), 1, 0.5).unwrap();
        assert_eq!(b.bits(), &[1, 0]);

        let b = binarize(&fg_map(&[0.0; 6]), 1, 0.5).unwrap();
        assert!(b.bits().iter().all(|&x| x == 0));

        let b = binarize(&fg_map(&[0.5, 0.49999]), 1, 0.5).unwrap();
        assert_eq!(b.bits(), &[1, 0]);
    }

    #[test]
    fn binarize_rejects_bad_arguments() {
        let m = fg_map(&[0.3]);
        assert!(binarize(&m, 2, 0.5).is_err());
        assert!(binarize(&m, 1, 0.0).is_err());
        assert!(binarize(&m, 1, 1.0).is_err());
    }

    #[test]
    fn validate_examples() {
        let ok = ProbMap::new(2, 2, 2, [0.3, 0.7].repeat(4)).unwrap();
        assert!(validate_probmap(&ok).is_ok());

        let mut probs = [0.3, 0.7].repeat(4);
        probs[4] = 0.6;
        probs[5] = 0.6;
        let bad = ProbMap::new(2, 2, 2, probs).unwrap();
        let err = validate_probmap(&bad).unwrap_err();
        assert_eq!(err.pixel, 2);
        assert!(matches!(err.violation, ProbViolation::BadSum { .. }));

        let bad = ProbMap::new(1, 1, 2, vec![-0.1, 1.1]).unwrap();
        let err = validate_probmap(&bad).unwrap_err();
        assert!(matches!(
            err.violation,
            ProbViolation::OutOfRange { class: 0, .. }
        ));
    }

    #[test]
    fn mask_rejects_non_binary_labels() {
        assert!(Mask::new(2, 1, vec![0, 2]).is_err());
        assert!(Mask::new(2, 1, vec![0]).is_err());
    }

    #[test]
    fn mask_target_wins_over_pseudo() {
        let img = RasterImage::new(1, 1, 1, vec![0.0]).unwrap();
        let mut s = Sample::labeled("a", img, Mask::new(1, 1, vec![1]).unwrap());
        s.pseudo = Some(fg_map(&[0.2]));
        assert_eq!(s.target(2).unwrap().probs(), &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(fg in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let once = binarize(&fg_map(&fg), 1, 0.5).unwrap();
            let as_probs: Vec<f64> = once.bits().iter().map(|&b| b as f64).collect();
            let twice = binarize(&fg_map(&as_probs), 1, 0.5).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn binarize_ignores_other_channels(
            px in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..30)
        ) {
            // Three classes; the split of the non-foreground mass varies.
            let fg: Vec<f64> = px.iter().map(|p| p.0).collect();
            let a: Vec<f64> = px.iter().flat_map(|&(f, _)| [1.0 - f, f, 0.0]).collect();
            let b: Vec<f64> = px.iter().flat_map(|&(f, s)| [(1.0 - f) * s, f, (1.0 - f) * (1.0 - s)]).collect();
            let ma = ProbMap::new(fg.len(), 1, 3, a).unwrap();
            let mb = ProbMap::new(fg.len(), 1, 3, b).unwrap();
            prop_assert_eq!(binarize(&ma, 1, 0.5).unwrap(), binarize(&mb, 1, 0.5).unwrap());
        }

        #[test]
        fn binarize_matches_argmax_for_two_classes(fg in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            prop_assume!(fg.iter().all(|&p| p != 0.5));
            let m = fg_map(&fg);
            let b = binarize(&m, 1, 0.5).unwrap();
            let am: Vec<u8> = m.argmax().into_iter().map(|c| c as u8).collect();
            prop_assert_eq!(b.bits(), &am[..]);
        }
    }
}
