//! Image classification data: a built-in synthetic shapes task, the on-disk
//! raw-tensor format and train-time augmentation.
//!
//! An image-set directory holds:
//!
//! * `manifest.txt`: format, version, count, channels, size, class count,
//!   payload size and SHA-256, config hash.
//! * `images.f32`: little-endian `f32`, `count × channels × size × size`.
//! * `labels.txt`: one class index per line.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::atomic;
use crate::exec::Exec;
use crate::kv::{sha256_hex, short_hash, KvDoc, KvError};
use crate::rng::{self, Lane};

pub const FORMAT: &str = "procwarm-images";
pub const VERSION: u32 = 1;
pub const SHAPE_CLASSES: usize = 10;

const MANIFEST: &str = "manifest.txt";
const IMAGES: &str = "images.f32";
const LABELS: &str = "labels.txt";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("not an image-set manifest (format `{0}`)")]
    WrongFormat(String),
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("payload size mismatch in {file}: expected {expected}, found {actual}")]
    PayloadSizeMismatch {
        file: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("invalid image set: {0}")]
    Invalid(String),
}

/// Images in channel-major layout with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.channels == 0 || self.size == 0 || self.num_classes == 0 {
            return Err(ImageError::Invalid("zero dimension".into()));
        }
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(ImageError::Invalid(format!(
                "{} pixels for {} images of {} values",
                self.pixels.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(ImageError::Invalid(format!(
                "label {l} >= {}",
                self.num_classes
            )));
        }
        if self.pixels.iter().any(|p| !p.is_finite()) {
            return Err(ImageError::Invalid("non-finite pixel".into()));
        }
        Ok(())
    }

    fn manifest_head(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", FORMAT)
            .push("version", VERSION)
            .push("count", self.len())
            .push("channels", self.channels)
            .push("size", self.size)
            .push("num_classes", self.num_classes);
        d
    }

    fn payload(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    /// Hash of the manifest head and payload.
    pub fn config_hash(&self) -> String {
        let mut bytes = self.manifest_head().render().into_bytes();
        bytes.extend(sha256_hex(&self.payload()).bytes());
        bytes.extend(self.labels.iter().flat_map(|l| (*l as u32).to_le_bytes()));
        short_hash(&bytes)
    }
}

/// Recipe for the built-in shapes task. Images are keyed by `(seed, index)`
/// so any subset can be regenerated independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapesSpec {
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl ShapesSpec {
    pub fn new(seed: u64) -> Self {
        ShapesSpec {
            size: 32,
            noise: 0.15,
            seed,
        }
    }
}

/// Foreground and background share a random tint; the foreground is the
/// brighter of the two by a random contrast.
fn draw_colors<R: Rng>(rng: &mut R) -> ([f32; 3], [f32; 3]) {
    let contrast: f32 = rng.random_range(0.3..0.6);
    let level: f32 = rng.random_range(-0.3..0.3);
    let mut fg = [0.0; 3];
    let mut bg = [0.0; 3];
    for c in 0..3 {
        let tint: f32 = rng.random_range(-0.2..0.2);
        fg[c] = level + tint + contrast;
        bg[c] = level + tint - contrast;
    }
    (fg, bg)
}

/// Whether pixel `(x, y)` (relative to the shape centre, in units of the
/// shape radius) belongs to shape `class`.
fn inside(class: usize, x: f32, y: f32) -> bool {
    let r = (x * x + y * y).sqrt();
    let (ax, ay) = (x.abs(), y.abs());
    match class {
        0 => ax <= 1.0 && ay <= 1.0,
        1 => ax <= 1.0 && ay <= 1.0 && (ax >= 0.6 || ay >= 0.6),
        2 => r <= 1.0,
        3 => (0.6..=1.0).contains(&r),
        4 => (-1.0..=1.0).contains(&y) && ax <= (y + 1.0) * 0.5,
        5 => (ax <= 0.25 && ay <= 1.0) || (ay <= 0.25 && ax <= 1.0),
        6 => ax <= 1.0 && ay <= 1.0 && ((x - y).abs() <= 0.3 || (x + y).abs() <= 0.3),
        7 => ax <= 1.0 && ay <= 1.0 && ((y + 1.0) * 2.5).floor() as i32 % 2 == 0,
        8 => ax <= 1.0 && ay <= 1.0 && ((x + 1.0) * 2.5).floor() as i32 % 2 == 0,
        _ => {
            ax <= 1.0
                && ay <= 1.0
                && (((x + 1.0) * 2.0).floor() as i32 + ((y + 1.0) * 2.0).floor() as i32) % 2 == 0
        }
    }
}

/// One 3-channel shapes image and its label.
pub fn shape_image(spec: &ShapesSpec, index: u64) -> (Vec<f32>, usize) {
    let mut rng = rng::keyed(spec.seed, index, Lane::Dataset);
    let class = rng.random_range(0..SHAPE_CLASSES);
    let s = spec.size as f32;
    let radius = rng.random_range(0.2 * s..0.4 * s);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let (fg, bg) = draw_colors(&mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("valid std");
    let n = spec.size;
    let mut img = vec![0.0f32; 3 * n * n];
    for py in 0..n {
        for px in 0..n {
            let x = (px as f32 + 0.5 - cx) / radius;
            let y = (py as f32 + 0.5 - cy) / radius;
            let color = if inside(class, x, y) { fg } else { bg };
            for c in 0..3 {
                img[c * n * n + py * n + px] = color[c] + noise.sample(&mut rng);
            }
        }
    }
    (img, class)
}

/// Images `start..start + count` of the shapes task.
pub fn shapes(spec: &ShapesSpec, start: u64, count: usize, exec: Exec) -> ImageSet {
    let items = exec.map_indexed(count, |i| shape_image(spec, start + i as u64));
    let mut pixels = Vec::with_capacity(count * 3 * spec.size * spec.size);
    let mut labels = Vec::with_capacity(count);
    for (img, label) in items {
        pixels.extend(img);
        labels.push(label);
    }
    ImageSet {
        channels: 3,
        size: spec.size,
        num_classes: SHAPE_CLASSES,
        pixels,
        labels,
    }
}

/// Horizontal flip with probability 1/2, then a random crop from the image
/// zero-padded by `size / 8` on each side.
pub fn augment<R: Rng>(img: &[f32], channels: usize, size: usize, rng: &mut R, out: &mut [f32]) {
    let pad = (size / 8) as i64;
    let flip = rng.random_bool(0.5);
    let dx = rng.random_range(-pad..=pad);
    let dy = rng.random_range(-pad..=pad);
    let n = size as i64;
    for c in 0..channels {
        for y in 0..n {
            for x in 0..n {
                let sy = y + dy;
                let mut sx = x + dx;
                let v = if (0..n).contains(&sy) && (0..n).contains(&sx) {
                    if flip {
                        sx = n - 1 - sx;
                    }
                    img[c * size * size + (sy * n + sx) as usize]
                } else {
                    0.0
                };
                out[c * size * size + (y * n + x) as usize] = v;
            }
        }
    }
}

pub fn write_images(set: &ImageSet, dir: &Path) -> Result<(), ImageError> {
    set.validate()?;
    let payload = set.payload();
    let mut m = set.manifest_head();
    m.push("images_bytes", payload.len())
        .push("images_sha256", sha256_hex(&payload))
        .push("config_hash", set.config_hash());
    let labels: String = set.labels.iter().map(|l| format!("{l}\n")).collect();
    atomic::write_dir(
        dir,
        &[
            (MANIFEST, m.render().as_bytes()),
            (IMAGES, &payload),
            (LABELS, labels.as_bytes()),
        ],
    )?;
    Ok(())
}

pub fn read_images(dir: &Path) -> Result<ImageSet, ImageError> {
    let m = KvDoc::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let format = m.require("format")?;
    if format != FORMAT {
        return Err(ImageError::WrongFormat(format.to_string()));
    }
    let version: u32 = m.parse_key("version")?;
    if version != VERSION {
        return Err(ImageError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count: usize = m.parse_key("count")?;
    let channels: usize = m.parse_key("channels")?;
    let size: usize = m.parse_key("size")?;
    let num_classes: usize = m.parse_key("num_classes")?;
    let expected = count * channels * size * size * 4;
    let bytes = fs::read(dir.join(IMAGES))?;
    if bytes.len() != expected {
        return Err(ImageError::PayloadSizeMismatch {
            file: IMAGES,
            expected,
            actual: bytes.len(),
        });
    }
    if let Some(sum) = m.get("images_sha256") {
        if sum != sha256_hex(&bytes) {
            return Err(ImageError::Checksum);
        }
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = fs::read_to_string(dir.join(LABELS))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| ImageError::Invalid(format!("bad label `{l}`")))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    if labels.len() != count {
        return Err(ImageError::PayloadSizeMismatch {
            file: LABELS,
            expected: count,
            actual: labels.len(),
        });
    }
    let set = ImageSet {
        channels,
        size,
        num_classes,
        pixels,
        labels,
    };
    set.validate()?;
    Ok(set)
}
