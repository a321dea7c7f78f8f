//! Unpaired two-domain image ingestion and the procedural toy benchmark.

mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::networks::ImageBatch;

pub use toy::{
    generate_toy_dataset, load_toy_dataset, write_toy_dataset, ShapeClass, ToyManifest, ToySample, ToyScene,
    ToyShape, PALETTE_A, PALETTE_B,
};

/// Images decoded up front when their total size stays below this many bytes.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
    /// `[width, height]`.
    #[serde(default = "default_resize")]
    pub resize_to: [u32; 2],
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Keep only the first `n` files after shuffling.
    #[serde(default)]
    pub subsample: Option<usize>,
}

fn default_extensions() -> Vec<String> {
    vec!["png".into(), "jpg".into(), "jpeg".into()]
}

fn default_resize() -> [u32; 2] {
    [1024, 512]
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, resize_to: [u32; 2]) -> Self {
        DatasetSpec {
            root: root.into(),
            extensions: default_extensions(),
            resize_to,
            shuffle_seed: 0,
            subsample: None,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let [w, h] = self.resize_to;
        if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
            return Err(Error::Config {
                key: format!("{key}.resize_to"),
                reason: format!("{w}x{h} must be non-zero and divisible by 4"),
            });
        }
        if self.extensions.is_empty() {
            return Err(Error::Config { key: format!("{key}.extensions"), reason: "must not be empty".into() });
        }
        if self.subsample == Some(0) {
            return Err(Error::Config { key: format!("{key}.subsample"), reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Source<T: Float> {
    Memory(Vec<Tensor<T>>),
    Files(Vec<PathBuf>),
}

/// Ordered pool of same-size RGB images from one domain.
#[derive(Clone, Debug)]
pub struct ImageSet<T: Float> {
    ids: Vec<String>,
    size: (u32, u32),
    source: Source<T>,
}

impl<T: Float> ImageSet<T> {
    /// In-memory set of `(3, H, W)` tensors in `[-1, 1]`.
    pub fn from_tensors(ids: Vec<String>, images: Vec<Tensor<T>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Dataset("no images".into()))?;
        if ids.len() != images.len() {
            return Err(contract("one id per image required"));
        }
        let (h, w) = match first.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(contract(format!("images must be (3, H, W), got {s:?}"))),
        };
        for img in &images {
            if img.shape() != [3, h, w] {
                return Err(contract("images in one set must share a size"));
            }
            if img.data().iter().any(|v| !v.is_finite() || v.abs() > T::one()) {
                return Err(contract("image values must be finite and in [-1, 1]"));
            }
        }
        Ok(ImageSet { ids, size: (w as u32, h as u32), source: Source::Memory(images) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `(width, height)`.
    pub fn size(&self) -> (u32, u32) {
        self.size
    }

    /// Image `i` as a `(3, H, W)` tensor.
    pub fn get(&self, i: usize) -> Result<Tensor<T>> {
        match &self.source {
            Source::Memory(v) => Ok(v[i].clone()),
            Source::Files(paths) => Ok(rgb_to_tensor(&read_resized(&paths[i], self.size)?)),
        }
    }

    /// Stacks the listed images, mirroring those flagged in `flip`.
    pub fn batch(&self, indices: &[usize], flip: &[bool]) -> Result<ImageBatch<T>> {
        let (w, h) = (self.size.0 as usize, self.size.1 as usize);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let img = self.get(i)?;
            if flip.get(k).copied().unwrap_or(false) {
                for row in img.data().chunks(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img.data());
            }
        }
        ImageBatch::new(Tensor::from_vec(&[indices.len(), 3, h, w], data))
    }

    /// Every image as one batch.
    pub fn all(&self) -> Result<ImageBatch<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, &[])
    }
}

/// `(3, H, W)` tensor with 8-bit values mapped linearly onto `[-1, 1]`.
pub fn rgb_to_tensor<T: Float>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let scale = T::from_f64_lossy(1.0 / 127.5);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_u8(raw[p * 3 + c]).unwrap() * scale - T::one()
    })
}

/// Image `sample` of a `(B, 3, H, W)` tensor as 8-bit RGB, clamping to `[-1, 1]`.
pub fn tensor_to_rgb<T: Float>(t: &Tensor<T>, sample: usize) -> RgbImage {
    let (_, _, h, w) = t.dims4();
    let plane = h * w;
    let base = sample * 3 * plane;
    let data = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| {
            let v = data[base + c * plane + p].as_f64().clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn read_resized(path: &Path, (w, h): (u32, u32)) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_owned(), source })?.to_rgb8();
    if img.dimensions() == (w, h) {
        return Ok(img);
    }
    // the triangle filter widens its support when shrinking, so downscales are antialiased
    Ok(imageops::resize(&img, w, h, FilterType::Triangle))
}

/// Image files under `root` with a matching extension, in lexicographic order.
pub fn list_images(root: &Path, extensions: &[String]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(&e))) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lists, orders, shuffles, and decodes one domain's directory.
///
/// Undecodable files are skipped with a warning; the load fails when none remain.
pub fn load_dataset<T: Float>(spec: &DatasetSpec) -> Result<ImageSet<T>> {
    spec.validate("dataset")?;
    let mut files = list_images(&spec.root, &spec.extensions)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", spec.root.display())));
    }
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    if let Some(n) = spec.subsample {
        files.truncate(n);
    }
    let size = (spec.resize_to[0], spec.resize_to[1]);
    let per_image = 3 * size.0 as usize * size.1 as usize * T::BYTES;
    let cache = per_image.saturating_mul(files.len()) <= CACHE_LIMIT_BYTES;

    let mut ids = Vec::new();
    let mut kept = Vec::new();
    let mut images = Vec::new();
    for path in files {
        // decode every file once up front so broken ones are dropped before training
        match read_resized(&path, size) {
            Ok(img) => {
                if cache {
                    images.push(rgb_to_tensor(&img));
                }
                ids.push(file_id(&path));
                kept.push(path);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if kept.is_empty() {
        return Err(Error::Dataset(format!("no decodable images in {}", spec.root.display())));
    }
    let source = if cache { Source::Memory(images) } else { Source::Files(kept) };
    Ok(ImageSet { ids, size, source })
}

/// File name used as a sample id.
pub fn file_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_endpoints_map_to_unit_interval() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([0, 0, 0]) } else { image::Rgb([255; 3]) });
        let t = rgb_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
        let back = tensor_to_rgb(&t.clone().reshape(&[1, 3, 1, 2]), 0);
        assert_eq!(back, img);
    }

    #[test]
    fn eight_bit_round_trip() {
        let img = RgbImage::from_fn(16, 3, |x, y| image::Rgb([(x * 16) as u8, (y * 80) as u8, (x * y) as u8]));
        let t = rgb_to_tensor::<f32>(&img).reshape(&[1, 3, 3, 16]);
        assert_eq!(tensor_to_rgb(&t, 0), img);
    }

    #[test]
    fn batch_flips_rows() {
        let t = Tensor::from_fn(&[3, 1, 4], |i| (i % 4) as f64 / 4.0);
        let set = ImageSet::from_tensors(vec!["x".into()], vec![t]).unwrap();
        let b = set.batch(&[0, 0], &[false, true]).unwrap();
        assert_eq!(&b.tensor().data()[..4], &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(&b.tensor().data()[12..16], &[0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn resize_must_be_divisible_by_4() {
        let spec = DatasetSpec::new("x", [30, 32]);
        match spec.validate("data_a") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data_a.resize_to"),
            other => panic!("{other:?}"),
        }
    }
}
