//! PNG dataset loading, the train/val split, and the synthetic ellipse
//! generator used for desk-scale runs.
//!
//! Layout: a dataset directory holds `images/` and `masks/` with matching
//! file stems. Images are resized bilinearly to the working size; masks are
//! resized nearest-neighbor and thresholded at intensity 128 so they stay
//! strictly binary.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmads_core::metrics::Mask;
use dmads_core::overlay::RgbBuffer;
use dmads_core::{SegmentationSample, Shape, Tensor};

use crate::CliError;

fn open_image(path: &Path) -> Result<DynamicImage, CliError> {
    image::open(path)
        .map_err(|e| CliError::Data(format!("cannot read image '{}': {e}", path.display())))
}

/// RGB tensor `1 x 3 x size x size` in `[0, 1]`. Gray inputs are replicated
/// across the three channels by the RGB conversion.
pub fn load_image_tensor(path: &Path, size: usize) -> Result<Tensor<f32>, CliError> {
    let img = open_image(path)?
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(Shape::new(1, 3, h, w), |at| {
        let c = at / (h * w);
        let y = (at / w) % h;
        let x = at % w;
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Binary mask from a PNG: optional nearest-neighbor resize, then threshold
/// at intensity >= 128.
pub fn load_mask(path: &Path, size: Option<usize>) -> Result<Mask, CliError> {
    let mut img = open_image(path)?;
    if let Some(s) = size {
        img = img.resize_exact(s as u32, s as u32, FilterType::Nearest);
    }
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| p.0[0] >= 128).collect();
    Mask::new(h, w, data).map_err(|e| CliError::Data(e.to_string()))
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<(), CliError> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.at(y as usize, x as usize) { 255u8 } else { 0 }])
    });
    img.save(path)
        .map_err(|e| CliError::Data(format!("cannot write '{}': {e}", path.display())))
}

pub fn save_rgb_png(path: &Path, buf: &RgbBuffer) -> Result<(), CliError> {
    let img = RgbImage::from_fn(buf.width as u32, buf.height as u32, |x, y| {
        image::Rgb(buf.get(y as usize, x as usize))
    });
    img.save(path)
        .map_err(|e| CliError::Data(format!("cannot write '{}': {e}", path.display())))
}

/// RGB buffer for overlay backgrounds, resized to the mask size.
pub fn load_rgb_buffer(path: &Path, dims: (usize, usize)) -> Result<RgbBuffer, CliError> {
    let (h, w) = dims;
    let img = open_image(path)?
        .resize_exact(w as u32, h as u32, FilterType::Triangle)
        .to_rgb8();
    let mut buf = RgbBuffer::new(w, h);
    for y in 0..h {
        for x in 0..w {
            buf.set(y, x, img.get_pixel(x as u32, y as u32).0);
        }
    }
    Ok(buf)
}

/// PNG stems (file names without extension) in a directory, sorted.
pub fn png_stems(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot list '{}': {e}", dir.display())))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Load every image/mask pair under `dir`, resized to `image_size`.
/// Ordering is lexicographic by stem so downstream splits are reproducible.
pub fn load_dataset(dir: &Path, image_size: usize) -> Result<Vec<SegmentationSample>, CliError> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let stems = png_stems(&images_dir)?;
    if stems.is_empty() {
        return Err(CliError::Data(format!(
            "no PNG images under '{}'",
            images_dir.display()
        )));
    }
    let missing: Vec<&String> = stems
        .iter()
        .filter(|stem| !masks_dir.join(format!("{stem}.png")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "missing masks for stems: {}",
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    let mut samples = Vec::with_capacity(stems.len());
    for stem in &stems {
        let image = load_image_tensor(&images_dir.join(format!("{stem}.png")), image_size)?;
        let mask = load_mask(&masks_dir.join(format!("{stem}.png")), Some(image_size))?;
        samples.push(
            SegmentationSample::new(image, mask, stem.clone())
                .map_err(|e| CliError::Data(e.to_string()))?,
        );
    }
    Ok(samples)
}

/// Seeded-shuffle 80/20 split. At least one sample lands in the validation
/// half; membership is a pure function of the seed and the sorted order.
pub fn split_train_val(
    mut samples: Vec<SegmentationSample>,
    seed: u64,
) -> (Vec<SegmentationSample>, Vec<SegmentationSample>) {
    // Domain-separated from the init/shuffle streams.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73_70_6c_69_74); // "split"
    samples.shuffle(&mut rng);
    let n_val = (samples.len() / 5).max(1);
    let val = samples.split_off(samples.len().saturating_sub(n_val));
    (samples, val)
}

/// One synthetic pair: a filled axis-aligned ellipse over a noisy background.
/// The mask is exactly the ellipse-interior predicate; its area stays between
/// roughly 3% and 50% of the frame by the radius bounds.
pub fn synthetic_pair(rng: &mut ChaCha8Rng, size: usize) -> (RgbImage, Mask) {
    let s = size as f64;
    let ra = rng.gen_range(0.10..0.40) * s;
    let rb = rng.gen_range(0.10..0.40) * s;
    let cx = rng.gen_range(ra + 1.0..s - ra - 1.0);
    let cy = rng.gen_range(rb + 1.0..s - rb - 1.0);

    let mask = Mask::new(
        size,
        size,
        (0..size * size)
            .map(|at| {
                let (y, x) = ((at / size) as f64 + 0.5, (at % size) as f64 + 0.5);
                let dx = (x - cx) / ra;
                let dy = (y - cy) / rb;
                dx * dx + dy * dy <= 1.0
            })
            .collect(),
    )
    .expect("mask dims");

    // Channel tints keep the three planes correlated but not identical.
    let tint: [f64; 3] = [
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
    ];
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let inside = mask.at(y, x);
            let base = if inside {
                rng.gen_range(0.65..0.95)
            } else {
                rng.gen_range(0.05..0.35)
            };
            let px = [
                (base * tint[0] * 255.0).round() as u8,
                (base * tint[1] * 255.0).round() as u8,
                (base * tint[2] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    (img, mask)
}

/// Write `n` image/mask pairs under `dir/images` and `dir/masks`.
pub fn generate_synthetic(dir: &Path, n: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if size % 4 != 0 {
        return Err(CliError::Usage(format!(
            "synthetic size {size} must be divisible by 4"
        )));
    }
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(&masks_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (img, mask) = synthetic_pair(&mut rng, size);
        let stem = format!("synth_{i:04}");
        img.save(images_dir.join(format!("{stem}.png")))
            .map_err(|e| CliError::Data(e.to_string()))?;
        save_mask_png(&masks_dir.join(format!("{stem}.png")), &mask)?;
    }
    Ok(())
}

/// Helper shared by `infer`/`eval`/`overlay`: the path exists and is a file.
pub fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("no such file '{}'", path.display())));
    }
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read '{}': {e}", path.display())))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    fs::write(&tmp, bytes).map_err(|e| CliError::Data(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Data(e.to_string()))
}
