use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::Float;
use serde::{Deserialize, Serialize};

use super::{list_images, rgb_to_tensor, save_png};
use crate::error::{io_err, Error, Result};
use crate::networks::{DomainId, ImageBatch};

/// Fill colors of classes 1..=3 in domain A: red, green, blue.
pub const PALETTE_A: [[f64; 3]; 3] = [[0.85, 0.15, 0.15], [0.15, 0.75, 0.2], [0.2, 0.3, 0.9]];
/// Fill colors of classes 1..=3 in domain B: yellow, magenta, cyan.
pub const PALETTE_B: [[f64; 3]; 3] = [[0.95, 0.85, 0.1], [0.85, 0.15, 0.8], [0.1, 0.8, 0.85]];

/// Domain A background, top row to bottom row.
const BACKGROUND_A: [[f64; 3]; 2] = [[0.3, 0.3, 0.33], [0.55, 0.55, 0.58]];
/// Domain B background, left column to right column.
const BACKGROUND_B: [[f64; 3]; 2] = [[0.42, 0.37, 0.3], [0.22, 0.19, 0.15]];
/// Amplitude of the one-pixel checker added to domain B fills.
const TEXTURE: f64 = 0.15;

const MIN_SIDE: u32 = 32;
const MIN_SHAPES: usize = 2;
const MAX_SHAPES: usize = 5;
/// Required gap between the circumscribed circles of two shapes, in pixels.
const SEPARATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Triangle = 1,
    Quad = 2,
    Disc = 3,
}

impl ShapeClass {
    fn from_label(label: u8) -> ShapeClass {
        match label {
            1 => ShapeClass::Triangle,
            2 => ShapeClass::Quad,
            _ => ShapeClass::Disc,
        }
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    fn sides(self) -> usize {
        match self {
            ShapeClass::Triangle => 3,
            ShapeClass::Quad => 4,
            ShapeClass::Disc => 16,
        }
    }
}

/// Regular convex polygon in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub class: ShapeClass,
    pub center: [f64; 2],
    pub radius: f64,
    pub rotation: f64,
}

impl ToyShape {
    /// Vertices in order of increasing angle.
    pub fn vertices(&self) -> Vec<[f64; 2]> {
        let n = self.class.sides();
        (0..n)
            .map(|k| {
                let a = self.rotation + TAU * k as f64 / n as f64;
                [self.center[0] + self.radius * a.cos(), self.center[1] + self.radius * a.sin()]
            })
            .collect()
    }

    /// Whether the point lies inside or on the boundary.
    fn contains(&self, verts: &[[f64; 2]], p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        if dx * dx + dy * dy > self.radius * self.radius {
            return false;
        }
        (0..verts.len()).all(|i| {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }
}

/// One scene rendered in both domains with its shared label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub id: String,
    pub scene_seed: u64,
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<ToyShape>,
    /// Row-major labels: 0 background, 1..=3 shape class.
    pub mask: Vec<u8>,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
}

/// One domain's rendering of a scene with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample<T: Float> {
    pub image: ImageBatch<T>,
    pub mask: Vec<u8>,
    pub domain: DomainId,
    pub scene_seed: u64,
}

impl ToyScene {
    pub fn image(&self, domain: DomainId) -> &RgbImage {
        match domain {
            DomainId::A => &self.image_a,
            DomainId::B => &self.image_b,
        }
    }

    pub fn sample<T: Float>(&self, domain: DomainId) -> ToySample<T> {
        let t = rgb_to_tensor(self.image(domain)).reshape(&[1, 3, self.height as usize, self.width as usize]);
        ToySample {
            image: ImageBatch::new(t).expect("rendered images are in range"),
            mask: self.mask.clone(),
            domain,
            scene_seed: self.scene_seed,
        }
    }

    pub fn mask_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.mask.clone()).expect("mask matches size")
    }
}

/// Background color of a domain at pixel `(x, y)` of a `w`×`h` image.
pub fn background(domain: DomainId, x: u32, y: u32, w: u32, h: u32) -> [f64; 3] {
    let (ends, t) = match domain {
        DomainId::A => (BACKGROUND_A, y as f64 / (h - 1).max(1) as f64),
        DomainId::B => (BACKGROUND_B, x as f64 / (w - 1).max(1) as f64),
    };
    std::array::from_fn(|c| ends[0][c] + t * (ends[1][c] - ends[0][c]))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn place_shapes(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<ToyShape> {
    let side = w.min(h) as f64;
    loop {
        let want = rng.random_range(MIN_SHAPES..=MAX_SHAPES);
        let mut shapes: Vec<ToyShape> = Vec::with_capacity(want);
        for _ in 0..want {
            let class = ShapeClass::from_label(rng.random_range(1..=3));
            for _attempt in 0..200 {
                let radius = rng.random_range(0.09..0.16) * side;
                let margin = radius + 1.0;
                let center = [rng.random_range(margin..w as f64 - margin), rng.random_range(margin..h as f64 - margin)];
                let rotation = rng.random_range(0.0..TAU);
                let clear = shapes.iter().all(|s| {
                    let d = ((s.center[0] - center[0]).powi(2) + (s.center[1] - center[1]).powi(2)).sqrt();
                    d >= s.radius + radius + SEPARATION
                });
                if clear {
                    shapes.push(ToyShape { class, center, radius, rotation });
                    break;
                }
            }
        }
        if shapes.len() >= MIN_SHAPES {
            return shapes;
        }
    }
}

fn render(shapes: &[ToyShape], w: u32, h: u32) -> (Vec<u8>, RgbImage, RgbImage) {
    let verts: Vec<_> = shapes.iter().map(ToyShape::vertices).collect();
    let mut mask = vec![0u8; (w * h) as usize];
    let mut a = RgbImage::new(w, h);
    let mut b = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let label = shapes
                .iter()
                .zip(&verts)
                .find(|(s, v)| s.contains(v, p))
                .map_or(0, |(s, _)| s.class.label());
            mask[(y * w + x) as usize] = label;
            let (ca, cb) = if label == 0 {
                (background(DomainId::A, x, y, w, h), background(DomainId::B, x, y, w, h))
            } else {
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                let fill_b = PALETTE_B[label as usize - 1].map(|v| v + sign * TEXTURE);
                (PALETTE_A[label as usize - 1], fill_b)
            };
            a.put_pixel(x, y, image::Rgb(ca.map(to_u8)));
            b.put_pixel(x, y, image::Rgb(cb.map(to_u8)));
        }
    }
    (mask, a, b)
}

/// Renders `count` scenes of 2–5 non-overlapping convex shapes.
///
/// Domain A fills flat palette-A colors over a vertical gradient; domain B
/// fills palette-B colors with a one-pixel checker texture over a
/// horizontal gradient. Both share the geometry and the label mask.
pub fn generate_toy_dataset(seed: u64, count: usize, size: (u32, u32)) -> Result<Vec<ToyScene>> {
    let (w, h) = size;
    if count == 0 {
        return Err(Error::Dataset("toy dataset needs at least one scene".into()));
    }
    if w % 4 != 0 || h % 4 != 0 || w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::Dataset(format!(
            "toy size {w}x{h} must be divisible by 4 with sides of at least {MIN_SIDE}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let scene_seed: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let shapes = place_shapes(&mut rng, w, h);
            let (mask, image_a, image_b) = render(&shapes, w, h);
            ToyScene { id: format!("{i:04}"), scene_seed, width: w, height: h, shapes, mask, image_a, image_b }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneRecord {
    pub id: String,
    pub scene_seed: u64,
    pub shapes: Vec<ToyShape>,
}

/// `manifest.json` of a toy dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub seed: u64,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub palette_a: [[f64; 3]; 3],
    pub palette_b: [[f64; 3]; 3],
    pub background_a: [[f64; 3]; 2],
    pub background_b: [[f64; 3]; 2],
    pub texture_amplitude: f64,
    pub scenes: Vec<ToySceneRecord>,
}

/// Writes `{a,b,masks}/NNNN.png` and `manifest.json` under `dir`.
pub fn write_toy_dataset(dir: &Path, seed: u64, scenes: &[ToyScene]) -> Result<ToyManifest> {
    let first = scenes.first().ok_or_else(|| Error::Dataset("no scenes to write".into()))?;
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
    for scene in scenes {
        let name = format!("{}.png", scene.id);
        save_png(&scene.image_a, &dir.join("a").join(&name))?;
        save_png(&scene.image_b, &dir.join("b").join(&name))?;
        let path = mask_dir.join(&name);
        scene.mask_image().save_with_format(&path, image::ImageFormat::Png).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    let manifest = ToyManifest {
        seed,
        count: scenes.len(),
        width: first.width,
        height: first.height,
        palette_a: PALETTE_A,
        palette_b: PALETTE_B,
        background_a: BACKGROUND_A,
        background_b: BACKGROUND_B,
        texture_amplitude: TEXTURE,
        scenes: scenes
            .iter()
            .map(|s| ToySceneRecord { id: s.id.clone(), scene_seed: s.scene_seed, shapes: s.shapes.clone() })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a directory written by [`write_toy_dataset`].
pub fn load_toy_dataset(dir: &Path) -> Result<(ToyManifest, Vec<ToyScene>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: ToyManifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let exts = ["png".to_string()];
    let masks = list_images(&dir.join("masks"), &exts)?;
    if masks.len() != manifest.count {
        return Err(Error::Dataset(format!("manifest lists {} scenes, found {} masks", manifest.count, masks.len())));
    }
    let open = |p: &Path| image::open(p).map_err(|source| Error::Image { path: p.to_owned(), source });
    let mut scenes = Vec::with_capacity(masks.len());
    for (mask_path, rec) in masks.iter().zip(&manifest.scenes) {
        let name = mask_path.file_name().expect("listed file");
        let mask = open(mask_path)?.to_luma8();
        let image_a = open(&dir.join("a").join(name))?.to_rgb8();
        let image_b = open(&dir.join("b").join(name))?.to_rgb8();
        let (w, h) = mask.dimensions();
        if image_a.dimensions() != (w, h) || image_b.dimensions() != (w, h) {
            return Err(Error::Dataset(format!("scene {} has mismatched image sizes", rec.id)));
        }
        scenes.push(ToyScene {
            id: rec.id.clone(),
            scene_seed: rec.scene_seed,
            width: w,
            height: h,
            shapes: rec.shapes.clone(),
            mask: mask.into_raw(),
            image_a,
            image_b,
        });
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_and_shape_contract() {
        let scenes = generate_toy_dataset(1, 8, (64, 64)).unwrap();
        assert_eq!(scenes.len(), 8);
        for s in &scenes {
            assert_eq!(s.image_a.dimensions(), (64, 64));
            assert_eq!(s.image_b.dimensions(), (64, 64));
            assert_eq!(s.mask.len(), 64 * 64);
            assert!((2..=5).contains(&s.shapes.len()));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_toy_dataset(3, 4, (32, 48)).unwrap(), generate_toy_dataset(3, 4, (32, 48)).unwrap());
        assert_ne!(generate_toy_dataset(3, 4, (32, 48)).unwrap(), generate_toy_dataset(4, 4, (32, 48)).unwrap());
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(generate_toy_dataset(1, 0, (64, 64)).is_err());
        assert!(generate_toy_dataset(1, 2, (62, 64)).is_err());
        assert!(generate_toy_dataset(1, 2, (16, 16)).is_err());
    }
}
