//! Procedural stand-in dataset: labelled box/cylinder clouds paired with
//! noisy reference images that all carry the affordance's 5×5 glyph.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::data::{
    encode_ppm, save_point_file, split_seen_unseen, DatasetManifest, ManifestEntry,
    PointCloudSample, Setting, Split,
};
use crate::error::{Error, Result};

pub type Glyph = [[bool; 5]; 5];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fixed binary pattern of an affordance id, with at least 9 of 25 cells set.
pub fn glyph_pattern(affordance: usize) -> Glyph {
    let mut h = splitmix64(0xA5A5_0000 + affordance as u64);
    while (h & 0x1FF_FFFF).count_ones() < 9 {
        h = splitmix64(h);
    }
    let mut g = [[false; 5]; 5];
    for (i, cell) in g.iter_mut().flatten().enumerate() {
        *cell = (h >> i) & 1 == 1;
    }
    g
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box { half: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

fn unit_hash(key: u64, k: u64) -> f64 {
    (splitmix64(key.wrapping_mul(31).wrapping_add(k)) >> 11) as f64 / (1u64 << 53) as f64
}

fn class_shape(class: usize) -> Shape {
    let key = 0x5EED_0000 + class as u64;
    let d = |k| 0.35 + 0.65 * unit_hash(key, k);
    if class % 2 == 0 {
        Shape::Box {
            half: [d(0), d(1), d(2)],
        }
    } else {
        Shape::Cylinder {
            radius: 0.3 + 0.5 * unit_hash(key, 3),
            half_height: d(4),
        }
    }
}

/// Unit direction selecting the labelled sub-surface for a class/affordance pair.
fn region_direction(class: usize, affordance: usize) -> [f64; 3] {
    let key = 0xAFF0_0000 + (class as u64) * 101 + affordance as u64;
    let z = 2.0 * unit_hash(key, 0) - 1.0;
    let phi = 2.0 * PI * unit_hash(key, 1);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn sample_surface(shape: Shape, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match shape {
        Shape::Box { half } => {
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    sign * half[k]
                } else {
                    rng.random_range(-half[k]..half[k])
                };
            }
            p
        }
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let side = 2.0 * PI * radius * 2.0 * half_height;
            let caps = 2.0 * PI * radius * radius;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + caps) < side {
                let z = rng.random_range(-half_height..half_height);
                [radius * theta.cos(), radius * theta.sin(), z]
            } else {
                let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                let z = if rng.random_bool(0.5) { half_height } else { -half_height };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural cloud: label 1 on the region facing the class/affordance
/// direction, decaying smoothly to 0 across a band at its edge.
pub fn synth_cloud(
    sample_id: &str,
    object_class: usize,
    affordance: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> PointCloudSample {
    let shape = class_shape(object_class);
    let coords: Vec<[f64; 3]> = (0..n).map(|_| sample_surface(shape, rng)).collect();
    let dir = region_direction(object_class, affordance);
    let proj: Vec<f64> = coords
        .iter()
        .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
        .collect();
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let span = (hi - lo).max(1e-12);
    let labels = proj
        .iter()
        .map(|&s| {
            let t = (s - lo) / span;
            // Rounded to the point-file precision so saved labels match memory.
            (smoothstep((t - 0.6) / 0.15) * 1e6).round() / 1e6
        })
        .collect();
    PointCloudSample {
        coords: coords
            .into_iter()
            .map(|c| c.map(|v| (v * 1e6).round() / 1e6))
            .collect(),
        labels,
        object_class,
        affordance,
        sample_id: sample_id.to_string(),
    }
}

/// RGB bytes of one reference image: uniform noise plus the affordance glyph
/// at a random cell size, position and colour.
pub fn synth_image_bytes(affordance: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut px: Vec<u8> = (0..side * side * 3).map(|_| rng.random_range(0..=150u8)).collect();
    let glyph = glyph_pattern(affordance);
    let max_cell = (side / 5).max(1);
    let min_cell = (side / 16).clamp(1, max_cell);
    let cell = rng.random_range(min_cell..=max_cell);
    let extent = 5 * cell;
    let x0 = rng.random_range(0..=side - extent);
    let y0 = rng.random_range(0..=side - extent);
    let colour = [
        rng.random_range(180..=255u8),
        rng.random_range(180..=255u8),
        rng.random_range(180..=255u8),
    ];
    for (gy, row) in glyph.iter().enumerate() {
        for (gx, &on) in row.iter().enumerate() {
            if !on {
                continue;
            }
            for dy in 0..cell {
                for dx in 0..cell {
                    let (x, y) = (x0 + gx * cell + dx, y0 + gy * cell + dy);
                    let i = (y * side + x) * 3;
                    px[i..i + 3].copy_from_slice(&colour);
                }
            }
        }
    }
    px
}

/// Writes the dataset under `out` and returns its manifest (`manifest.json`).
///
/// Also writes `seen_train.json`/`seen_test.json` and
/// `unseen_train.json`/`unseen_test.json` when the config asks for them.
pub fn make_synthetic_dataset(config: &SynthConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out)?;
    mkdir(&out.join("points"))?;
    mkdir(&out.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::new(Setting::Seen, Split::Train, out);
    for s in 0..config.num_samples {
        let id = format!("s{s:04}");
        let object_class = s % config.num_object_classes;
        let affordance = rng.random_range(0..config.num_affordances);
        let cloud = synth_cloud(&id, object_class, affordance, config.points_per_cloud, &mut rng);
        let point_file = format!("points/{id}.pts");
        save_point_file(&out.join(&point_file), &cloud)?;
        let mut image_files = Vec::with_capacity(config.images_per_sample);
        for k in 0..config.images_per_sample {
            let rel = format!("images/{id}_{k}.ppm");
            let bytes = synth_image_bytes(affordance, config.image_side, &mut rng);
            let path = out.join(&rel);
            fs::write(&path, encode_ppm(config.image_side, config.image_side, &bytes))
                .map_err(|e| Error::io(&path, e))?;
            image_files.push(rel);
        }
        manifest.entries.push(ManifestEntry {
            sample_id: id,
            object_class,
            affordance,
            point_file,
            image_files,
            split: None,
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    if let Some(ratio) = config.seen_train_ratio {
        let (train, test) = split_seen_unseen(&manifest, Setting::Seen, &BTreeSet::new(), ratio, seed)?;
        train.save(&out.join("seen_train.json"))?;
        test.save(&out.join("seen_test.json"))?;
    }
    if !config.unseen_classes.is_empty() {
        let unseen: BTreeSet<usize> = config.unseen_classes.iter().copied().collect();
        let (train, test) = split_seen_unseen(&manifest, Setting::Unseen, &unseen, 1.0, seed)?;
        train.save(&out.join("unseen_train.json"))?;
        test.save(&out.join("unseen_test.json"))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_nonempty() {
        let glyphs: Vec<Glyph> = (0..17).map(glyph_pattern).collect();
        for (i, a) in glyphs.iter().enumerate() {
            assert!(a.iter().flatten().filter(|&&b| b).count() >= 9);
            for b in &glyphs[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn cloud_has_positive_and_negative_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in 0..6 {
            let c = synth_cloud("x", class, 2, 256, &mut rng);
            assert_eq!(c.len(), 256);
            assert!(c.labels.iter().all(|l| (0.0..=1.0).contains(l)));
            assert!(c.labels.iter().any(|&l| l == 1.0));
            assert!(c.labels.iter().any(|&l| l == 0.0));
        }
    }

    #[test]
    fn image_contains_glyph() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let side = 32;
        let px = synth_image_bytes(3, side, &mut rng);
        let bright = px.chunks(3).filter(|p| p.iter().all(|&v| v >= 180)).count();
        let set = glyph_pattern(3).iter().flatten().filter(|&&b| b).count();
        assert!(bright >= set, "{bright} bright pixels for {set} glyph cells");
    }
}
