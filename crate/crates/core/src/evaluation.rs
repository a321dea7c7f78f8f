//! Content-space matching, content interpolation, and the toy mask-IoU
//! consistency oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use secotrans_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{tensor_to_rgb, ToySample};
use crate::error::{contract, io_err, Result};
use crate::networks::{ContentCode, DomainId, ImageBatch, Model, StyleCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentOrigin {
    SourceA,
    SourceB,
    TranslatedAb,
    TranslatedBa,
}

impl ContentOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentOrigin::SourceA => "source_a",
            ContentOrigin::SourceB => "source_b",
            ContentOrigin::TranslatedAb => "translated_ab",
            ContentOrigin::TranslatedBa => "translated_ba",
        }
    }

    /// Style applied before encoding, if any.
    fn translation_target(self) -> Option<DomainId> {
        match self {
            ContentOrigin::SourceA | ContentOrigin::SourceB => None,
            ContentOrigin::TranslatedAb => Some(DomainId::B),
            ContentOrigin::TranslatedBa => Some(DomainId::A),
        }
    }
}

/// Spatially averaged content code of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentEmbedding {
    pub id: String,
    pub origin: ContentOrigin,
    pub vector: Vec<f64>,
}

/// Embeds image `i` under `origins[i]`; translated origins are encoded after
/// translation into the other domain.
pub fn export_content_codes<T: Float>(
    model: &Model<T>,
    images: &ImageBatch<T>,
    ids: &[String],
    origins: &[ContentOrigin],
) -> Result<Vec<ContentEmbedding>> {
    let n = images.batch();
    if ids.len() != n || origins.len() != n {
        return Err(contract(format!("{n} images need {n} ids and origins, got {} and {}", ids.len(), origins.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = images.sample(i);
        if let Some(target) = origins[i].translation_target() {
            x = model.translate(&x, model.style(target))?;
        }
        let vector = model.pooled_content(&x)?.remove(0);
        out.push(ContentEmbedding { id: ids[i].clone(), origin: origins[i], vector });
    }
    Ok(out)
}

/// Writes `id,origin,v0..v{C-1}` rows.
pub fn write_embeddings_csv(path: &Path, embeddings: &[ContentEmbedding]) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut text = String::from("id,origin");
    for k in 0..dim {
        write!(text, ",v{k}").unwrap();
    }
    text.push('\n');
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(contract("embeddings differ in length"));
        }
        text.push_str(&e.id);
        text.push(',');
        text.push_str(e.origin.as_str());
        for v in &e.vector {
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of `i` whose Euclidean nearest neighbor among all of `src` is `src[i]`.
///
/// Exact ties go to the lower index.
pub fn nn_matching_score(src: &[Vec<f64>], trans: &[Vec<f64>]) -> Result<f64> {
    if src.len() != trans.len() {
        return Err(contract(format!("{} source vs {} translated embeddings", src.len(), trans.len())));
    }
    if src.is_empty() {
        return Err(contract("no embeddings to match"));
    }
    let hits = trans
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let mut best = (0, f64::INFINITY);
            for (j, s) in src.iter().enumerate() {
                let d = sq_dist(t, s);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0 == *i
        })
        .count();
    Ok(hits as f64 / src.len() as f64)
}

/// Decodes `(1 - t)·c1 + t·c2` for `steps` evenly spaced `t` in `[0, 1]`.
///
/// The endpoints decode `c1` and `c2` themselves, not a blend.
pub fn interpolate_content<T: Float>(
    model: &Model<T>,
    c1: &ContentCode<T>,
    c2: &ContentCode<T>,
    steps: usize,
    style: &StyleCode<T>,
) -> Result<Vec<ImageBatch<T>>> {
    if c1.shape() != c2.shape() {
        return Err(contract(format!("content shapes differ: {:?} vs {:?}", c1.shape(), c2.shape())));
    }
    if steps < 2 {
        return Err(contract("interpolation needs at least 2 steps"));
    }
    (0..steps)
        .map(|k| {
            if k == 0 {
                return model.decode(c1, style);
            }
            if k == steps - 1 {
                return model.decode(c2, style);
            }
            let t = T::from_f64_lossy(k as f64 / (steps - 1) as f64);
            let blend = c1.tensor().zip_map(c2.tensor(), |a, b| (T::one() - t) * a + t * b);
            model.decode(&ContentCode::new(blend)?, style)
        })
        .collect()
}

/// Interpolation grid values, `k / (steps - 1)`.
pub fn interpolation_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| k as f64 / (steps - 1).max(1) as f64).collect()
}

/// Horizontally concatenates the first image of each batch.
pub fn image_strip<T: Float>(frames: &[ImageBatch<T>]) -> Result<RgbImage> {
    let first = frames.first().ok_or_else(|| contract("empty strip"))?;
    let (_, _, h, w) = first.shape();
    if frames.iter().any(|f| f.shape().2 != h || f.shape().3 != w) {
        return Err(contract("strip frames differ in size"));
    }
    let mut strip = RgbImage::new((w * frames.len()) as u32, h as u32);
    for (k, f) in frames.iter().enumerate() {
        let img = tensor_to_rgb(f.tensor(), 0);
        image::imageops::replace(&mut strip, &img, (k * w) as i64, 0);
    }
    Ok(strip)
}

/// Mask-IoU of one translated toy image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub id: String,
    pub iou: f64,
    /// Fraction of each class's pixels recovered as foreground, keyed by label.
    pub class_recall: BTreeMap<u8, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub entries: Vec<ConsistencyEntry>,
    pub mean_iou: f64,
    pub mean_class_recall: BTreeMap<u8, f64>,
}

impl ConsistencyReport {
    pub fn from_entries(entries: Vec<ConsistencyEntry>) -> Self {
        let n = entries.len().max(1) as f64;
        let mean_iou = entries.iter().map(|e| e.iou).sum::<f64>() / n;
        let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for e in &entries {
            for (&c, &r) in &e.class_recall {
                let s = sums.entry(c).or_default();
                s.0 += r;
                s.1 += 1;
            }
        }
        let mean_class_recall = sums.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect();
        ConsistencyReport { entries, mean_iou, mean_class_recall }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Background color per row (target A) or per column (target B): the median
/// over that line's mask-0 pixels. Lines without background copy the nearest line that has some.
fn background_lines(img: &[f64], mask: &[u8], (h, w): (usize, usize), target: DomainId) -> Vec<[f64; 3]> {
    let plane = h * w;
    let (lines, len) = match target {
        DomainId::A => (h, w),
        DomainId::B => (w, h),
    };
    let pixel = |line: usize, k: usize| match target {
        DomainId::A => line * w + k,
        DomainId::B => k * w + line,
    };
    let mut found: Vec<Option<[f64; 3]>> = (0..lines)
        .map(|line| {
            let idx: Vec<usize> = (0..len).map(|k| pixel(line, k)).filter(|&p| mask[p] == 0).collect();
            (!idx.is_empty()).then(|| {
                std::array::from_fn(|c| {
                    let mut vals: Vec<f64> = idx.iter().map(|&p| img[c * plane + p]).collect();
                    median(&mut vals)
                })
            })
        })
        .collect();
    for line in 0..lines {
        if found[line].is_none() {
            let nearest = (1..lines).find_map(|d| {
                let lo = line.checked_sub(d).and_then(|l| found[l]);
                lo.or_else(|| found.get(line + d).copied().flatten())
            });
            found[line] = Some(nearest.unwrap_or([0.0; 3]));
        }
    }
    found.into_iter().map(|c| c.expect("filled")).collect()
}

/// Otsu threshold of `values` over a 256-bin histogram on `[0, max]`.
/// `None` when the values are (numerically) constant.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 1e-9) {
        return None;
    }
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v / max * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, None);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, Some(i));
        }
    }
    best.1.map(|i| (i + 1) as f64 / BINS as f64 * max)
}

/// Foreground extracted from an image by distance to the target domain's
/// background model, thresholded with Otsu's method.
pub fn extract_foreground<T: Float>(image: &Tensor<T>, mask: &[u8], target: DomainId) -> Result<Vec<bool>> {
    let (n, _, h, w) = image.dims4();
    if n != 1 || mask.len() != h * w {
        return Err(contract(format!("image {h}x{w} (batch {n}) does not match a mask of {} pixels", mask.len())));
    }
    let img: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let bg = background_lines(&img, mask, (h, w), target);
    let plane = h * w;
    let dist: Vec<f64> = (0..plane)
        .map(|p| {
            let line = match target {
                DomainId::A => p / w,
                DomainId::B => p % w,
            };
            (0..3).map(|c| (img[c * plane + p] - bg[line][c]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(match otsu_threshold(&dist) {
        Some(t) => dist.iter().map(|&d| d >= t).collect(),
        None => vec![false; plane],
    })
}

/// IoU between the oracle foreground of `translated` and the sample's shape mask.
///
/// `translated` is judged against the background model of the domain
/// opposite to the sample's own.
pub fn consistency_iou<T: Float>(
    id: &str,
    sample: &ToySample<T>,
    translated: &ImageBatch<T>,
) -> Result<ConsistencyEntry> {
    let mask = &sample.mask;
    if !mask.iter().any(|&m| m > 0) {
        return Err(contract("ground-truth mask has no foreground"));
    }
    let fg = extract_foreground(translated.tensor(), mask, sample.domain.other())?;
    let (mut inter, mut union) = (0usize, 0usize);
    let mut per_class: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (&m, &f) in mask.iter().zip(&fg) {
        let g = m > 0;
        inter += (g && f) as usize;
        union += (g || f) as usize;
        if g {
            let e = per_class.entry(m).or_default();
            e.0 += f as usize;
            e.1 += 1;
        }
    }
    Ok(ConsistencyEntry {
        id: id.to_string(),
        iou: inter as f64 / union as f64,
        class_recall: per_class.into_iter().map(|(c, (hit, n))| (c, hit as f64 / n as f64)).collect(),
    })
}
