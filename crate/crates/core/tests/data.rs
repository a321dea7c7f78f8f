use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use secotrans::data::{generate_toy_dataset, load_dataset, load_toy_dataset, write_toy_dataset, DatasetSpec, ToyShape};
use secotrans::networks::DomainId;

/// 8-connected components of the nonzero mask pixels.
fn components(mask: &[u8], w: usize, h: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// Even-odd ray casting, independent of the generator's half-plane test.
fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            odd = !odd;
        }
        j = i;
    }
    odd
}

fn rasterized_counts(shapes: &[ToyShape], w: u32, h: u32) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for s in shapes {
        let poly = s.vertices();
        let n = (0..h)
            .flat_map(|y| (0..w).map(move |x| [x as f64 + 0.5, y as f64 + 0.5]))
            .filter(|&p| inside(&poly, p))
            .count();
        *counts.entry(s.class.label()).or_insert(0) += n;
    }
    counts
}

#[test]
fn every_mask_has_two_to_five_regions() {
    let scenes = generate_toy_dataset(7, 40, (64, 64)).unwrap();
    for s in &scenes {
        let n = components(&s.mask, 64, 64);
        assert!((2..=5).contains(&n), "scene {} has {n} regions", s.id);
        assert_eq!(n, s.shapes.len());
    }
}

#[test]
fn class_pixel_counts_match_independent_rasterization() {
    for (w, h) in [(64, 64), (96, 48)] {
        for s in generate_toy_dataset(11, 12, (w, h)).unwrap() {
            let mut counts = BTreeMap::new();
            for &m in s.mask.iter().filter(|&&m| m > 0) {
                *counts.entry(m).or_insert(0usize) += 1;
            }
            assert_eq!(counts, rasterized_counts(&s.shapes, w, h), "scene {}", s.id);
            assert!(counts.values().all(|&n| n > 0));
        }
    }
}

#[test]
fn both_domains_share_the_mask_multiset() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_toy_dataset(5, 6, (32, 32)).unwrap();
    write_toy_dataset(dir.path(), 5, &scenes).unwrap();
    let (manifest, loaded) = load_toy_dataset(dir.path()).unwrap();
    assert_eq!(manifest.count, 6);
    assert_eq!(loaded, scenes);
    let mut masks_a: Vec<Vec<u8>> = loaded.iter().map(|s| s.sample::<f32>(DomainId::A).mask).collect();
    let mut masks_b: Vec<Vec<u8>> = loaded.iter().map(|s| s.sample::<f32>(DomainId::B).mask).collect();
    masks_a.sort();
    masks_b.sort();
    assert_eq!(masks_a, masks_b);
    // appearance differs wherever a shape is
    for s in &loaded {
        let i = s.mask.iter().position(|&m| m > 0).unwrap();
        let (x, y) = ((i % 32) as u32, (i / 32) as u32);
        assert_ne!(s.image_a.get_pixel(x, y), s.image_b.get_pixel(x, y));
    }
}

fn write_pngs(dir: &std::path::Path, names: &[&str], w: u32, h: u32) {
    for (k, name) in names.iter().enumerate() {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, (k * 40) as u8]));
        img.save(dir.join(name)).unwrap();
    }
}

#[test]
fn wide_images_are_resized_to_the_working_resolution() {
    let dir = tempfile::tempdir().unwrap();
    write_pngs(dir.path(), &["c.png", "a.png", "b.png"], 1914, 512);
    let set = load_dataset::<f32>(&DatasetSpec::new(dir.path(), [1024, 512])).unwrap();
    assert_eq!(set.len(), 3);
    for i in 0..3 {
        let t = set.get(i).unwrap();
        assert_eq!(t.shape(), &[3, 512, 1024]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn iteration_order_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["p.png", "q.png", "r.png", "s.png", "t.png", "u.png"];
    write_pngs(dir.path(), &names, 8, 8);
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let spec = |seed| DatasetSpec { shuffle_seed: seed, ..DatasetSpec::new(dir.path(), [8, 8]) };
    let first = load_dataset::<f32>(&spec(3)).unwrap();
    let again = load_dataset::<f32>(&spec(3)).unwrap();
    assert_eq!(first.ids(), again.ids());
    assert_eq!(first.all().unwrap(), again.all().unwrap());
    let mut other = load_dataset::<f32>(&spec(4)).unwrap().ids().to_vec();
    other.sort();
    assert_eq!(other, names.map(String::from));

    let sub = load_dataset::<f32>(&DatasetSpec { subsample: Some(2), ..spec(3) }).unwrap();
    assert_eq!(sub.ids(), &first.ids()[..2]);
}

#[test]
fn undecodable_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_pngs(dir.path(), &["ok.png"], 8, 8);
    std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
    let set = load_dataset::<f32>(&DatasetSpec::new(dir.path(), [8, 8])).unwrap();
    assert_eq!(set.ids(), ["ok.png"]);

    std::fs::remove_file(dir.path().join("ok.png")).unwrap();
    assert!(load_dataset::<f32>(&DatasetSpec::new(dir.path(), [8, 8])).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset::<f32>(&DatasetSpec::new(empty.path(), [8, 8])).is_err());
}
