//! Procedural fundus-like images for desk-scale experiments.
//!
//! Every image is a noisy orange disc on black with an optic disc on the
//! right; each class adds one large motif (pigment ring, detached upper
//! band, peripapillary crescent, macular blob, enlarged cup, swollen disc,
//! lesion lattice, central blister).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::image::{write_ppm, RgbImage};
use crate::data::manifest::{split, LabelMap, Manifest, Record, MANIFEST_FILE};
use crate::error::{Error, Result};

pub const MIN_SYNTH_SIZE: usize = 16;

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Leave-one-out nearest-centroid accuracy on raw pixels.
    pub centroid_accuracy: f64,
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// 1 inside radius `r`, 0 outside, linear over `soft` pixels.
fn disc(x: f64, y: f64, cx: f64, cy: f64, r: f64, soft: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    ((r - d) / soft + 0.5).clamp(0.0, 1.0)
}

struct Spot {
    x: f64,
    y: f64,
    r: f64,
    color: [f64; 3],
}

/// Draw one image of class `label`.
pub fn render(label: usize, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let j = |rng: &mut ChaCha8Rng, amp: f64| (rng.random::<f64>() * 2.0 - 1.0) * amp;
    let cx = s * 0.5 + j(rng, 0.03 * s);
    let cy = s * 0.5 + j(rng, 0.03 * s);
    let radius = s * (0.46 + j(rng, 0.02));
    let bright = 1.0 + j(rng, 0.08);
    let od = (cx + 0.22 * s + j(rng, 0.02 * s), cy + j(rng, 0.02 * s));
    let scale = 1.0 + j(rng, 0.12);

    let mut spots = Vec::new();
    match label {
        1 => {
            for k in 0..24 {
                let a = k as f64 / 24.0 * std::f64::consts::TAU + j(rng, 0.08);
                let rr = s * (0.34 + j(rng, 0.03));
                spots.push(Spot {
                    x: cx + rr * a.cos(),
                    y: cy + rr * a.sin(),
                    r: s * 0.035 * scale,
                    color: [45.0, 28.0, 22.0],
                });
            }
        }
        7 => {
            for gy in 0..5 {
                for gx in 0..5 {
                    let red = (gx + gy) % 2 == 0;
                    spots.push(Spot {
                        x: cx + (gx as f64 - 2.0) * 0.12 * s + j(rng, 0.015 * s),
                        y: cy + (gy as f64 - 2.0) * 0.12 * s + j(rng, 0.015 * s),
                        r: s * 0.03 * scale,
                        color: if red {
                            [110.0, 12.0, 12.0]
                        } else {
                            [240.0, 220.0, 90.0]
                        },
                    });
                }
            }
        }
        _ => {}
    }
    let detach_edge = cy - 0.05 * s + j(rng, 0.04 * s);

    let mut img = RgbImage::filled(size, size, [0, 0, 0]);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let inside = disc(x, y, cx, cy, radius, 1.5);
            let rho = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / radius;
            let mut c = mix([190.0, 85.0, 40.0], [120.0, 45.0, 20.0], rho * rho);
            c = mix(
                c,
                [235.0, 205.0, 140.0],
                disc(x, y, od.0, od.1, 0.07 * s, 2.0),
            );
            match label {
                2 => {
                    c = mix(
                        c,
                        [175.0, 165.0, 155.0],
                        0.75 * ((detach_edge - y) / 2.0 + 0.5),
                    )
                }
                3 => {
                    let crescent = disc(x, y, od.0 - 0.05 * s, od.1, 0.2 * s * scale, 2.0)
                        * (1.0 - disc(x, y, od.0, od.1, 0.08 * s, 2.0));
                    c = mix(c, [230.0, 200.0, 160.0], crescent);
                }
                4 => {
                    let (mx, my) = (cx - 0.05 * s, cy);
                    c = mix(
                        c,
                        [60.0, 35.0, 25.0],
                        disc(x, y, mx, my, 0.18 * s * scale, 2.0),
                    );
                    c = mix(
                        c,
                        [235.0, 230.0, 210.0],
                        disc(x, y, mx, my, 0.15 * s * scale, 2.0),
                    );
                }
                5 => {
                    c = mix(
                        c,
                        [250.0, 242.0, 205.0],
                        disc(x, y, od.0, od.1, 0.15 * s * scale, 2.0),
                    )
                }
                6 => {
                    let swell = disc(x, y, od.0, od.1, 0.2 * s * scale, 0.12 * s);
                    c = mix(c, [230.0, 165.0, 70.0], swell);
                }
                8 => {
                    c = mix(
                        c,
                        [110.0, 45.0, 28.0],
                        0.85 * disc(x, y, cx - 0.05 * s, cy, 0.17 * s * scale, 3.0),
                    )
                }
                _ => {}
            }
            for sp in &spots {
                c = mix(c, sp.color, disc(x, y, sp.x, sp.y, sp.r, 1.0));
            }
            let px = c.map(|v| {
                (v * bright * inside + j(rng, 14.0))
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            img.set(xi, yi, px);
        }
    }
    img
}

fn image_rng(seed: u64, label: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng
}

/// Leave-one-out nearest-centroid accuracy over flattened pixel vectors.
pub fn centroid_accuracy(images: &[(usize, RgbImage)], classes: usize) -> f64 {
    let dim = images.first().map_or(0, |(_, i)| i.pixels.len());
    let mut sums = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (label, img) in images {
        counts[*label] += 1;
        for (s, &p) in sums[*label].iter_mut().zip(&img.pixels) {
            *s += p as f64;
        }
    }
    let correct = images
        .par_iter()
        .filter(|(label, img)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..classes {
                let n = counts[c] - usize::from(c == *label);
                if n == 0 {
                    continue;
                }
                let d: f64 = sums[c]
                    .iter()
                    .zip(&img.pixels)
                    .map(|(&s, &p)| {
                        let own = if c == *label { p as f64 } else { 0.0 };
                        let mean = (s - own) / n as f64;
                        (mean - p as f64).powi(2)
                    })
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 == *label
        })
        .count();
    correct as f64 / images.len().max(1) as f64
}

/// Write `per_class` images for every class under `out_dir/<class name>/`,
/// plus a split manifest.
pub fn synth_generate(
    out_dir: &Path,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<SynthOutput> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if image_size < MIN_SYNTH_SIZE {
        return Err(Error::Config(format!(
            "synthetic image size must be at least {MIN_SYNTH_SIZE}"
        )));
    }
    let labels = LabelMap::default();
    for name in labels.names() {
        let d = out_dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|l| (0..per_class).map(move |i| (l, i)))
        .collect();
    let images: Vec<(usize, RgbImage)> = jobs
        .par_iter()
        .map(|&(l, i)| (l, render(l, image_size, &mut image_rng(seed, l, i))))
        .collect();
    let mut records = Vec::with_capacity(images.len());
    for (&(l, i), (_, img)) in jobs.iter().zip(&images) {
        let rel = PathBuf::from(labels.name(l).expect("label")).join(format!("{i:05}.ppm"));
        write_ppm(&out_dir.join(&rel), img)?;
        records.push(Record {
            path: rel,
            label: l,
            split: None,
        });
    }
    let manifest = split(&Manifest::new(out_dir, records), seed);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        centroid_accuracy: centroid_accuracy(&images, labels.len()),
    })
}
