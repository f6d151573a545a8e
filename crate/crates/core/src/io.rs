//! On-disk formats.
//!
//! `.pmap` layout (little endian): `b"PMAP"`, `u32` width, `u32` height,
//! `u32` classes, then `width * height * classes` `f32` values, row-major
//! and class-minor.
//!
//! Masks are 8-bit grayscale PNGs holding 0 (background) or 255 (foreground).

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{Mask, ProbMap, RasterImage};

pub const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_HEADER: usize = 16;

pub fn encode_pmap(map: &ProbMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(PMAP_HEADER + map.probs().len() * 4);
    buf.extend_from_slice(PMAP_MAGIC);
    for dim in [map.width(), map.height(), map.classes()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &p in map.probs() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    buf
}

pub fn decode_pmap(bytes: &[u8]) -> Result<ProbMap> {
    if bytes.len() < PMAP_HEADER || &bytes[..4] != PMAP_MAGIC {
        return Err(Error::Format("missing PMAP header".into()));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (width, height, classes) = (read_u32(4), read_u32(8), read_u32(12));
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(classes))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("PMAP dimensions overflow".into()))?;
    let payload = &bytes[PMAP_HEADER..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "PMAP payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let probs = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ProbMap::new(width, height, classes, probs).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_pmap(path: &Path, map: &ProbMap) -> Result<()> {
    write_bytes(path, &encode_pmap(map))
}

pub fn read_pmap(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pmap(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let pixels = mask.labels().iter().map(|&l| l * 255).collect();
    let img: GrayImage =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, pixels).unwrap();
    ensure_parent(path)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Any nonzero gray level counts as foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let labels = img.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
    Mask::new(img.width() as usize, img.height() as usize, labels)
}

/// Loads an image as 1 channel (grayscale sources) or 3 channels (everything else),
/// keeping raw 0..255 intensities.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if dynamic.color().channel_count() <= 2 {
        let gray = dynamic.to_luma8();
        let values = gray.pixels().map(|p| p.0[0] as f64).collect();
        return RasterImage::new(w, h, 1, values);
    }
    let rgb = dynamic.to_rgb8();
    let mut values = vec![0.0; w * h * 3];
    for (j, p) in rgb.pixels().enumerate() {
        for c in 0..3 {
            values[c * w * h + j] = p.0[c] as f64;
        }
    }
    RasterImage::new(w, h, 3, values)
}

/// Values are rounded and clamped to 0..=255.
pub fn write_image_png(path: &Path, image: &RasterImage) -> Result<()> {
    let (w, h) = (image.width(), image.height());
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    ensure_parent(path)?;
    let result = if image.channels() == 1 {
        let buf: GrayImage =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([q(image.get(0, y as usize, x as usize))]));
        buf.save(path)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(image.get(0, y, x)), q(image.get(1, y, x)), q(image.get(2, y, x))])
        });
        buf.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes through a temporary file so readers never observe a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("partial");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pmap_header_layout() {
        let map = ProbMap::from_foreground(3, 2, &[0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = encode_pmap(&map);
        assert_eq!(&bytes[..4], b"PMAP");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 2 * 4);
        // second pixel, foreground class
        assert_eq!(&bytes[16 + 3 * 4..16 + 4 * 4], &0.25f32.to_le_bytes());
    }

    #[test]
    fn pmap_rejects_garbage() {
        assert!(decode_pmap(b"PMA").is_err());
        assert!(decode_pmap(b"XXXX\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
        let mut bytes = encode_pmap(&ProbMap::from_foreground(2, 1, &[0.5, 0.5]).unwrap());
        bytes.pop();
        assert!(decode_pmap(&bytes).is_err());
    }

    #[test]
    fn mask_png_uses_0_and_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Mask::new(3, 1, vec![0, 1, 1]).unwrap();
        write_mask_png(&path, &mask).unwrap();
        let raw = image::open(&path).unwrap().to_luma8();
        assert_eq!(raw.as_raw(), &vec![0, 255, 255]);
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn image_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let values: Vec<f64> = (0..2 * 2 * 3).map(|v| (v * 20) as f64).collect();
        let img = RasterImage::new(2, 2, 3, values).unwrap();
        write_image_png(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn pmap_round_trip_is_f32_exact(
            w in 1usize..6, h in 1usize..6, seed in prop::collection::vec(0.0f32..=1.0, 36)
        ) {
            let fg: Vec<f64> = seed[..w * h].iter().map(|&v| v as f64).collect();
            let map = ProbMap::from_foreground(w, h, &fg).unwrap();
            let back = decode_pmap(&encode_pmap(&map)).unwrap();
            prop_assert!(back.same_shape(&map));
            for (a, b) in back.probs().iter().zip(map.probs()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
