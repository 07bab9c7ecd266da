//! Grayscale image I/O, patching, augmentation and AWGN synthesis.
//!
//! Pixels live in `[0, 1]` as `f32`. Noise is added on that scale with
//! standard deviation `sigma / 255` and is never clipped; only 8-bit export
//! clamps.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, ImageEncoder, Luma};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A clean grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub source: PathBuf,
    pub bit_depth: u8,
}

impl ImageSample {
    pub fn new(pixels: Tensor<f32>, source: impl Into<PathBuf>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "image sample must be [1, H, W], got {:?}",
                pixels.shape()
            )));
        }
        Ok(ImageSample {
            pixels,
            source: source.into(),
            bit_depth: 8,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// File stem of the source, used for naming outputs.
    pub fn name(&self) -> String {
        self.source
            .file_stem()
            .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation in 8-bit units.
    pub sigma: f64,
    pub seed: u64,
}

/// BT.601 luma, rounded to 8 bits.
fn luma601(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)).round() as u8
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads an 8-bit PGM (P5) or PNG. Colour PNGs are converted to BT.601 luma.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes: Vec<u8> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| luma601(p.0[0], p.0[1], p.0[2]))
            .collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| luma601(p.0[0], p.0[1], p.0[2]))
            .collect(),
        other => {
            return Err(image_err(
                path,
                format!(
                    "unsupported pixel format {:?}; expected 8-bit data",
                    other.color()
                ),
            ))
        }
    };
    let pixels = Tensor::new(
        [1, h, w],
        bytes.into_iter().map(|b| f32::from(b) / 255.0).collect(),
    )?;
    ImageSample::new(pixels, path)
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn to_u8(pixels: &Tensor<f32>) -> Vec<u8> {
    pixels
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn spatial_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "expected a single-channel image, got {:?}",
            t.shape()
        ))),
    }
}

/// Writes `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` as 8-bit grayscale; the
/// extension picks PGM (`.pgm`) or PNG (anything else).
pub fn save_grayscale(path: impl AsRef<Path>, pixels: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = spatial_dims(pixels)?;
    let bytes = to_u8(pixels);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, w as u32, h as u32, image::ExtendedColorType::L8)
            .map_err(|e| image_err(path, e))
    } else {
        ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_err(path, e))
    }
}

/// Image files (`.png`, `.pgm`) under `dir` matching `pattern` (relative glob,
/// default `**/*`), sorted by path.
pub fn list_images(dir: impl AsRef<Path>, pattern: Option<&str>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Input(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let full = dir.join(pattern.unwrap_or("**/*"));
    let full = full.to_string_lossy();
    let mut paths: Vec<PathBuf> = glob::glob(&full)
        .map_err(|e| Error::Input(format!("bad glob pattern `{full}`: {e}")))?
        .filter_map(|entry| entry.ok())
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| {
                    let e = e.to_string_lossy().to_ascii_lowercase();
                    e == "png" || e == "pgm"
                })
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_dir(dir: impl AsRef<Path>, pattern: Option<&str>) -> Result<Vec<ImageSample>> {
    list_images(dir, pattern)?
        .iter()
        .map(load_grayscale)
        .collect()
}

fn name_hash(path: &Path) -> [u8; 32] {
    let name = path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    Sha256::digest(name.as_bytes()).into()
}

/// Splits into `(train, held_out)`. The held-out part is the `ceil(fraction·n)`
/// files whose file-name SHA-256 is smallest, always leaving at least one
/// training file.
pub fn heldout_split<T: Clone>(
    items: &[T],
    path_of: impl Fn(&T) -> &Path,
    fraction: f64,
) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| name_hash(path_of(&items[i])));
    let mut held = vec![false; n];
    for &i in &order[..k] {
        held[i] = true;
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if held[i] {
            heldout.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    (train, heldout)
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma / 255.0).expect("sigma is finite and non-negative")
}

/// `clean + N(0, (sigma/255)^2)` per pixel, unclipped, seeded by `spec.seed`.
pub fn add_awgn(clean: &Tensor<f32>, spec: NoiseSpec) -> Tensor<f32> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(spec.seed);
    add_awgn_with(clean, spec.sigma, &mut rng)
}

/// [`add_awgn`] drawing from a caller-owned generator.
pub fn add_awgn_with(clean: &Tensor<f32>, sigma: f64, rng: &mut impl Rng) -> Tensor<f32> {
    if sigma == 0.0 {
        return clean.clone();
    }
    let normal = gaussian(sigma);
    let noisy = clean
        .data()
        .iter()
        .map(|&v| (f64::from(v) + normal.sample(rng)) as f32)
        .collect();
    Tensor::new(clean.shape(), noisy).expect("same element count")
}

/// Top-left corners along one axis: a regular grid plus a final position
/// flush with the edge.
fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Patch corners `(y, x)` in raster order, or `None` if the patch does not fit.
pub fn patch_origins(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Option<Vec<(usize, usize)>> {
    if patch == 0 || patch > height || patch > width {
        return None;
    }
    let ys = axis_origins(height, patch, stride);
    let xs = axis_origins(width, patch, stride);
    Some(
        ys.iter()
            .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
            .collect(),
    )
}

/// Square crop `[1, size, size]` at `(y, x)` of a `[1, H, W]` image.
pub fn crop_square(image: &Tensor<f32>, y: usize, x: usize, size: usize) -> Tensor<f32> {
    let w = image.shape()[2];
    let data = image.data();
    Tensor::from_fn([1, size, size], |i| data[(y + i / size) * w + x + i % size])
}

/// `[1, patch, patch]` crops on a stride grid with edge-anchored last
/// row/column. Images smaller than the patch yield nothing (with a warning).
pub fn extract_patches(image: &ImageSample, patch: usize, stride: usize) -> Vec<Tensor<f32>> {
    match patch_origins(image.height(), image.width(), patch, stride) {
        Some(origins) => origins
            .into_iter()
            .map(|(y, x)| crop_square(&image.pixels, y, x, patch))
            .collect(),
        None => {
            warn!(
                "skipping {}: {}x{} is smaller than patch {patch}",
                image.source.display(),
                image.height(),
                image.width()
            );
            Vec::new()
        }
    }
}

/// Element of the dihedral group of the square: `rot` quarter turns
/// counter-clockwise, after a horizontal flip if `flip`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        rot: 0,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral {
            flip: i >= 4,
            rot: i % 4,
        })
    }

    /// Applies the transform to the last two (equal) axes.
    pub fn apply(self, t: &Tensor<f32>) -> Tensor<f32> {
        let nd = t.ndim();
        let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        assert_eq!(h, w, "dihedral transforms need square planes");
        let n = h;
        let planes = t.numel() / (n * n);
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for p in 0..planes {
            let plane = &src[p * n * n..(p + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    // Invert the rotation, then the flip.
                    let (mut sy, mut sx) = (y, x);
                    for _ in 0..self.rot {
                        (sy, sx) = (sx, n - 1 - sy);
                    }
                    if self.flip {
                        sx = n - 1 - sx;
                    }
                    out.push(plane[sy * n + sx]);
                }
            }
        }
        Tensor::new(t.shape(), out).expect("same element count")
    }
}

/// Zoom factors for rescale augmentation.
pub const RESCALE_FACTORS: [f64; 4] = [1.0, 0.9, 0.8, 0.7];

/// Zooms a `[1, P, P]` patch: takes the centred `round(s·P)` square and
/// resamples it bicubically back to `P`.
pub fn rescale(patch: &Tensor<f32>, s: f64) -> Tensor<f32> {
    let p = patch.shape()[2];
    let side = ((s * p as f64).round() as usize).clamp(1, p);
    if side == p {
        return patch.clone();
    }
    let off = (p - side) / 2;
    let inner = crop_square(patch, off, off, side);
    let buf = ImageBuffer::<Luma<f32>, _>::from_raw(side as u32, side as u32, inner.into_data())
        .expect("buffer matches dimensions");
    let resized = image::imageops::resize(&buf, p as u32, p as u32, FilterType::CatmullRom);
    Tensor::new([1, p, p], resized.into_raw()).expect("resize keeps size")
}

/// Optional random zoom, then one of the 8 dihedral transforms uniformly.
pub fn augment(patch: &Tensor<f32>, rng: &mut impl Rng, with_rescale: bool) -> Tensor<f32> {
    let zoomed = if with_rescale {
        let s = *RESCALE_FACTORS.choose(rng).expect("non-empty");
        rescale(patch, s)
    } else {
        patch.clone()
    };
    let i: u8 = rng.gen_range(0..8);
    Dihedral {
        flip: i >= 4,
        rot: i % 4,
    }
    .apply(&zoomed)
}

/// Square tiles cut from each image on a non-overlapping grid, named
/// `{stem}_r{row}c{col}`, at most `max_tiles` overall, taken round-robin
/// across images so every source contributes.
pub fn tile_images(images: &[ImageSample], tile: usize, max_tiles: usize) -> Vec<ImageSample> {
    let per_image: Vec<Vec<ImageSample>> = images
        .iter()
        .map(|img| {
            let (rows, cols) = (img.height() / tile, img.width() / tile);
            (0..rows * cols)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    let pixels = crop_square(&img.pixels, r * tile, c * tile, tile);
                    let name = format!("{}_r{r}c{c}.png", img.name());
                    ImageSample::new(pixels, img.source.with_file_name(name)).expect("tile shape")
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let longest = per_image.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for tiles in &per_image {
            if out.len() == max_tiles {
                return out;
            }
            if let Some(t) = tiles.get(i) {
                out.push(t.clone());
            }
        }
    }
    out
}

/// Stacks `[1, P, P]` patches into `[N, 1, P, P]`.
pub fn stack(patches: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty batch".to_string()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * patches.len());
    for p in patches {
        p.expect_same_shape(first, "stack")?;
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![patches.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}

/// SHA-256 of a tensor's shape and little-endian element bytes, as hex.
pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
