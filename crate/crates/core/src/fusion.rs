//! Ensemble pseudo-label fusion.
//!
//! For one unlabeled image and `S` sub-model outputs `M_1..M_S`:
//!
//! 1. `C = Σ_i fg(M_i)` per pixel ([`consensus`]).
//! 2. `w_i = Σ_j B_i[j] · C[j]` where `B_i` thresholds `fg(M_i)` ([`raw_weights`]).
//! 3. `w_i` is mapped linearly onto `[0.1, 1]` ([`rescale_weights`]) and then
//!    divided by its sum ([`normalize_weights`]).
//! 4. `P = Σ_i w_i M_i`, channel-wise ([`fuse`]).
//!
//! Weights are computed independently for every image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::types::{binarize, ConsensusMap, ProbMap, Sample};

pub const RESCALE_FLOOR: f64 = 0.1;
pub const NORMALIZED_SUM_TOLERANCE: f64 = 1e-9;

/// One weight per sub-model, indexed like the model list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub map: ProbMap,
    pub source_level: usize,
    pub weights_used: WeightVector,
}

fn check_maps(maps: &[ProbMap], foreground_class: usize) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one probability map"))?;
    if foreground_class >= first.classes() {
        return Err(Error::invalid(format!(
            "foreground class {foreground_class} out of range for {} classes",
            first.classes()
        )));
    }
    if let Some(i) = maps.iter().position(|m| !m.same_shape(first)) {
        return Err(Error::invalid(format!(
            "map {i} is {}x{}x{}, expected {}x{}x{}",
            maps[i].width(),
            maps[i].height(),
            maps[i].classes(),
            first.width(),
            first.height(),
            first.classes()
        )));
    }
    Ok(())
}

pub fn consensus(maps: &[ProbMap], foreground_class: usize) -> Result<ConsensusMap> {
    check_maps(maps, foreground_class)?;
    let first = &maps[0];
    let mut sums = vec![0.0; first.pixels()];
    for map in maps {
        for (s, p) in sums.iter_mut().zip(map.channel(foreground_class)) {
            *s += p;
        }
    }
    Ok(ConsensusMap {
        width: first.width(),
        height: first.height(),
        count: maps.len(),
        sums,
    })
}

/// Agreement of each sub-model with the summed ensemble output.
pub fn raw_weights(maps: &[ProbMap], foreground_class: usize, threshold: f64) -> Result<WeightVector> {
    let c = consensus(maps, foreground_class)?;
    maps.iter()
        .map(|m| {
            let b = binarize(m, foreground_class, threshold)?;
            Ok(b.bits()
                .iter()
                .zip(c.sums())
                .filter(|(&bit, _)| bit == 1)
                .map(|(_, &s)| s)
                .sum())
        })
        .collect::<Result<Vec<f64>>>()
        .map(WeightVector)
}

/// Linear map onto `[0.1, 1]`; equal weights (including a single one) become all ones.
pub fn rescale_weights(w: &WeightVector) -> WeightVector {
    let (lo, hi) = w
        .0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if w.0.is_empty() || hi == lo {
        return WeightVector(vec![1.0; w.0.len()]);
    }
    let span = hi - lo;
    WeightVector(
        w.0.iter()
            .map(|&x| {
                if x == hi {
                    1.0
                } else {
                    (x - lo) / span * (1.0 - RESCALE_FLOOR) + RESCALE_FLOOR
                }
            })
            .collect(),
    )
}

pub fn normalize_weights(w: &WeightVector) -> Result<WeightVector> {
    if w.0.is_empty() {
        return Err(Error::invalid("cannot normalize an empty weight vector"));
    }
    if let Some(bad) = w.0.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!(
            "weights must be positive and finite to normalize, found {bad}"
        )));
    }
    let total = w.sum();
    Ok(WeightVector(w.0.iter().map(|&x| x / total).collect()))
}

/// Channel-wise convex combination of `maps` under normalized weights.
pub fn fuse(maps: &[ProbMap], w: &WeightVector, source_level: usize) -> Result<PseudoLabel> {
    check_maps(maps, 0)?;
    if maps.len() != w.len() {
        return Err(Error::invalid(format!(
            "{} maps but {} weights",
            maps.len(),
            w.len()
        )));
    }
    if (w.sum() - 1.0).abs() > NORMALIZED_SUM_TOLERANCE || w.0.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("fusion weights must be nonnegative and sum to 1"));
    }
    let first = &maps[0];
    let mut probs = vec![0.0; first.probs().len()];
    for (map, &wi) in maps.iter().zip(w.as_slice()) {
        for (acc, &p) in probs.iter_mut().zip(map.probs()) {
            *acc += wi * p;
        }
    }
    // Rounding may nudge a value a hair past 1.
    for p in &mut probs {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(PseudoLabel {
        map: ProbMap::new(first.width(), first.height(), first.classes(), probs)?,
        source_level,
        weights_used: w.clone(),
    })
}

/// Raw weights, rescale, normalize and fuse for one image's sub-model outputs.
pub fn fuse_ensemble(
    maps: &[ProbMap],
    foreground_class: usize,
    threshold: f64,
    source_level: usize,
) -> Result<PseudoLabel> {
    let raw = raw_weights(maps, foreground_class, threshold)?;
    let w = normalize_weights(&rescale_weights(&raw))?;
    fuse(maps, &w, source_level)
}

/// Runs every model on every sample and fuses the outputs per image.
/// Output order follows `unlabeled`.
pub fn generate_pseudo_labels<M: Segmenter>(
    models: &[M],
    unlabeled: &[Sample],
    foreground_class: usize,
    threshold: f64,
    source_level: usize,
) -> Result<Vec<PseudoLabel>> {
    if models.is_empty() {
        return Err(Error::invalid("pseudo-labeling needs at least one model"));
    }
    unlabeled
        .iter()
        .map(|sample| {
            let attach = |e: Error| Error::Inference {
                id: sample.id.clone(),
                source: Box::new(e),
            };
            let maps = models
                .iter()
                .map(|m| m.predict(&sample.image))
                .collect::<Result<Vec<_>>>()
                .map_err(attach)?;
            fuse_ensemble(&maps, foreground_class, threshold, source_level).map_err(attach)
        })
        .collect()
}
