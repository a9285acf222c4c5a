//! Procedural three-class image generator used by the acceptance harness:
//! colored blobs, stripes and checkers with per-image jitter. Classes are
//! visually distinct by both dominant color and texture, so a linear probe
//! on pooled features separates them by construction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    split_manifest, BBox, DataError, ImageBuffer, LoadedDataset, Manifest, SampleRecord, Split,
};
use crate::runtime;

pub const CLASS_NAMES: [&str; 3] = ["blobs", "checkers", "stripes"];

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i16) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &b) in out.iter_mut().zip(&base) {
        let d = rng.random_range(-amount..=amount);
        *o = (b as i16 + d).clamp(0, 255) as u8;
    }
    out
}

fn noisy(rng: &mut ChaCha8Rng, img: &mut ImageBuffer, sigma: i16) {
    for v in img.data.iter_mut() {
        let d = rng.random_range(-sigma..=sigma);
        *v = (*v as i16 + d).clamp(0, 255) as u8;
    }
}

/// Renders one sample of the given class; returns the image and its bbox.
pub fn render_sample(class: usize, resolution: usize, seed: u64) -> (ImageBuffer, BBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = resolution;
    let mut img = ImageBuffer::new(res, res);
    let full = BBox {
        x: 0,
        y: 0,
        width: res as u32,
        height: res as u32,
    };
    // Patterns are smooth on purpose: hard-edged textures alias through the
    // stride-2 stages, which makes pooled features swing with pattern phase.
    let lerp = |a: [u8; 3], b: [u8; 3], t: f32| -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        [
            (a[0] as f32 + (b[0] as f32 - a[0] as f32) * t) as u8,
            (a[1] as f32 + (b[1] as f32 - a[1] as f32) * t) as u8,
            (a[2] as f32 + (b[2] as f32 - a[2] as f32) * t) as u8,
        ]
    };
    match class % 3 {
        0 => {
            // red blobs on a dark warm background: red-dominant, dark
            let bg = jitter(&mut rng, [95, 24, 18], 6);
            let fg = jitter(&mut rng, [215, 52, 38], 8);
            let count = rng.random_range(6..=7);
            let discs: Vec<(f32, f32, f32)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..res as f32),
                        rng.random_range(0.0..res as f32),
                        rng.random_range(res as f32 / 7.0..res as f32 / 5.0),
                    )
                })
                .collect();
            let (mut x0, mut y0, mut x1, mut y1) = (res, res, 0usize, 0usize);
            for y in 0..res {
                for x in 0..res {
                    // soft-edged union of discs
                    let mut t = 0.0f32;
                    for &(cy, cx, r) in &discs {
                        let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                        t = t.max(((r - d) / 3.0 + 0.5).clamp(0.0, 1.0));
                    }
                    if t > 0.5 {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                    img.set_pixel(y, x, lerp(bg, fg, t));
                }
            }
            noisy(&mut rng, &mut img, 4);
            let bbox = if x1 > x0 && y1 > y0 {
                BBox {
                    x: x0 as u32,
                    y: y0 as u32,
                    width: (x1 - x0 + 1) as u32,
                    height: (y1 - y0 + 1) as u32,
                }
            } else {
                full
            };
            (img, bbox)
        }
        1 => {
            // soft blue-and-white checker field: blue-dominant, bright
            let cell = res as f32 / 6.0;
            let a = jitter(&mut rng, [50, 90, 235], 8);
            let b = jitter(&mut rng, [205, 215, 240], 6);
            let phase_x: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let phase_y: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for y in 0..res {
                for x in 0..res {
                    let wave = (std::f32::consts::TAU * x as f32 / cell + phase_x).sin()
                        * (std::f32::consts::TAU * y as f32 / cell + phase_y).sin();
                    img.set_pixel(y, x, lerp(a, b, 0.5 + 0.5 * wave));
                }
            }
            noisy(&mut rng, &mut img, 4);
            (img, full)
        }
        _ => {
            // sinusoidal diagonal green stripes: green-dominant, mid tones
            let period = res as f32 / 4.0;
            let a = jitter(&mut rng, [22, 115, 38], 6);
            let b = jitter(&mut rng, [72, 235, 88], 8);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for y in 0..res {
                for x in 0..res {
                    let wave = (std::f32::consts::TAU * (x + y) as f32 / period + phase).sin();
                    img.set_pixel(y, x, lerp(a, b, 0.5 + 0.5 * wave));
                }
            }
            noisy(&mut rng, &mut img, 4);
            (img, full)
        }
    }
}

/// Generates the dataset in memory: images at `resolution` with labels,
/// ordered class-major. Class names follow [`CLASS_NAMES`].
pub fn generate_in_memory(
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> LoadedDataset {
    assert!((2..=3).contains(&classes), "2 or 3 synthetic classes");
    let total = classes * per_class;
    let images = runtime::par_map(total, |i| {
        let class = i / per_class;
        let idx = i % per_class;
        render_sample(
            class,
            resolution,
            runtime::derive_seed(seed, &[class as u64, idx as u64]),
        )
        .0
    });
    let labels = (0..total).map(|i| i / per_class).collect();
    LoadedDataset {
        images,
        labels,
        classes: CLASS_NAMES[..classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

/// Writes PNG images plus a JSON-lines manifest with a 60/20/20 stratified
/// split under `dir`. Returns the manifest.
pub fn generate_dataset(
    dir: &Path,
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<Manifest, DataError> {
    assert!((2..=3).contains(&classes), "2 or 3 synthetic classes");
    let total = classes * per_class;
    let rendered = runtime::par_map(total, |i| {
        let class = i / per_class;
        let idx = i % per_class;
        render_sample(
            class,
            resolution,
            runtime::derive_seed(seed, &[class as u64, idx as u64]),
        )
    });
    let mut records = Vec::with_capacity(total);
    for (i, (img, bbox)) in rendered.iter().enumerate() {
        let class = i / per_class;
        let idx = i % per_class;
        let name = CLASS_NAMES[class];
        let rel = format!("images/{name}/{idx:05}.png");
        img.save(&dir.join(&rel))?;
        records.push(SampleRecord {
            path: rel,
            label: name.to_string(),
            bbox: Some(*bbox),
            split: Split::Train,
        });
    }
    let manifest = split_manifest(records, (0.6, 0.2, 0.2), seed)?;
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
