//! Procedural handwritten-glyph dataset with the Omniglot layout.
//!
//! Each class is a random multi-stroke character belonging to one of a set of
//! "alphabets" that share stroke statistics. Each of the class's drawings is
//! rendered by a different simulated drawer: control points are jittered, the
//! whole glyph goes through a random affine map, and the pen width varies.
//! Images are written as 105x105 grayscale PNGs (ink dark on white) under
//! `root/<split>/<class>/`, with split manifests in `root/splits/`.

use std::fs;
use std::path::Path;

use ::image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_manifest, DataError, Split, SplitSizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub split_sizes: SplitSizes,
    pub drawings_per_class: usize,
    pub alphabets: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for GlyphConfig {
    /// Same class counts and drawings per character as Omniglot.
    fn default() -> Self {
        Self {
            split_sizes: SplitSizes {
                train: 1028,
                val: 172,
                test: 423,
            },
            drawings_per_class: 20,
            alphabets: 50,
            canvas: 105,
            seed: 1623,
        }
    }
}

#[derive(Debug, Clone)]
struct AlphabetStyle {
    mean_strokes: f64,
    segment_len: (f64, f64),
    turn_sigma: f64,
}

#[derive(Debug, Clone)]
struct Glyph {
    strokes: Vec<Vec<(f64, f64)>>,
}

fn sample_style(rng: &mut ChaCha8Rng) -> AlphabetStyle {
    let lo = rng.random_range(10.0..18.0);
    AlphabetStyle {
        mean_strokes: rng.random_range(1.5..3.2),
        segment_len: (lo, lo + rng.random_range(8.0..20.0)),
        turn_sigma: rng.random_range(0.4..1.4),
    }
}

fn sample_glyph(style: &AlphabetStyle, canvas: f64, rng: &mut ChaCha8Rng) -> Glyph {
    let extra = Normal::new(style.mean_strokes - 1.0, 0.8).expect("valid sigma");
    let n_strokes = 1 + (extra.sample(rng).round().max(0.0) as usize).min(4);
    let turn = Normal::new(0.0, style.turn_sigma).expect("valid sigma");
    let margin = canvas * 0.2;
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let n_points = rng.random_range(3..=5);
        let mut p = (
            rng.random_range(margin..canvas - margin),
            rng.random_range(margin..canvas - margin),
        );
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut pts = vec![p];
        for _ in 1..n_points {
            heading += turn.sample(rng);
            let len = rng.random_range(style.segment_len.0..style.segment_len.1);
            let mut next = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
            // reflect back into the drawing area
            for (coord, h) in [(&mut next.0, 0), (&mut next.1, 1)] {
                if *coord < margin || *coord > canvas - margin {
                    *coord = coord.clamp(margin, canvas - margin);
                    heading = if h == 0 {
                        std::f64::consts::PI - heading
                    } else {
                        -heading
                    };
                }
            }
            pts.push(next);
            p = next;
        }
        strokes.push(pts);
    }
    Glyph { strokes }
}

/// Catmull-Rom interpolation through the control points.
fn smooth(points: &[(f64, f64)], per_segment: usize) -> Vec<(f64, f64)> {
    if points.len() < 2 {
        return points.to_vec();
    }
    let mut out = Vec::new();
    let get = |i: isize| points[i.clamp(0, points.len() as isize - 1) as usize];
    for i in 0..points.len() - 1 {
        let (p0, p1, p2, p3) = (get(i as isize - 1), get(i as isize), get(i as isize + 1), get(i as isize + 2));
        for s in 0..per_segment {
            let t = s as f64 / per_segment as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(*points.last().expect("non-empty"));
    out
}

fn render_drawing(glyph: &Glyph, canvas: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let c = canvas as f64;
    let jitter = Normal::new(0.0, 2.5).expect("valid sigma");
    let small = Normal::new(0.0, 0.07).expect("valid sigma");
    let shift = Normal::new(0.0, 3.0).expect("valid sigma");

    let angle: f64 = small.sample(rng);
    let (sx, sy) = (1.0 + small.sample(rng), 1.0 + small.sample(rng));
    let shear = small.sample(rng);
    let (tx, ty) = (shift.sample(rng), shift.sample(rng));
    let (cos, sin) = (angle.cos(), angle.sin());
    let center = c / 2.0;
    let affine = |(x, y): (f64, f64)| {
        let (x, y) = (x - center, y - center);
        let (x, y) = (sx * (x + shear * y), sy * y);
        (cos * x - sin * y + center + tx, sin * x + cos * y + center + ty)
    };
    let width = rng.random_range(2.5..4.0);

    let mut ink = vec![0.0f64; canvas * canvas];
    for stroke in &glyph.strokes {
        let jittered: Vec<(f64, f64)> = stroke
            .iter()
            .map(|&(x, y)| affine((x + jitter.sample(rng), y + jitter.sample(rng))))
            .collect();
        let path = smooth(&jittered, 8);
        for seg in path.windows(2) {
            stamp_segment(&mut ink, canvas, seg[0], seg[1], width);
        }
    }

    let mut img = GrayImage::new(canvas as u32, canvas as u32);
    for (i, v) in ink.iter().enumerate() {
        let px = ((1.0 - v) * 255.0).round().clamp(0.0, 255.0) as u8;
        img.put_pixel((i % canvas) as u32, (i / canvas) as u32, Luma([px]));
    }
    img
}

fn stamp_segment(ink: &mut [f64], canvas: usize, a: (f64, f64), b: (f64, f64), width: f64) {
    let r = width / 2.0 + 1.0;
    let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + r).ceil() as usize).min(canvas - 1);
    let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + r).ceil() as usize).min(canvas - 1);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let dist = (qx * qx + qy * qy).sqrt();
            let cover = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            let cell = &mut ink[y * canvas + x];
            if cover > *cell {
                *cell = cover;
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the dataset under `root`. Output is a pure function of `cfg`.
pub fn write_glyph_dataset(root: &Path, cfg: &GlyphConfig) -> Result<(), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let styles: Vec<AlphabetStyle> = (0..cfg.alphabets).map(|_| sample_style(&mut rng)).collect();

    fs::create_dir_all(root.join("splits")).map_err(io_err(root))?;
    let mut class_counter = 0usize;
    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        let n = cfg.split_sizes.get(split);
        let jobs: Vec<(String, u64, usize)> = (0..n)
            .map(|_| {
                let alphabet = rng.random_range(0..cfg.alphabets);
                let name = format!("alphabet{alphabet:02}_char{class_counter:04}");
                class_counter += 1;
                (name, rng.random::<u64>(), alphabet)
            })
            .collect();
        jobs.par_iter().try_for_each(|(name, class_seed, alphabet)| {
            let dir = split_dir.join(name);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut crng = ChaCha8Rng::seed_from_u64(*class_seed);
            let glyph = sample_glyph(&styles[*alphabet], cfg.canvas as f64, &mut crng);
            for d in 0..cfg.drawings_per_class {
                let img = render_drawing(&glyph, cfg.canvas, &mut crng);
                let path = dir.join(format!("{name}_{d:02}.png"));
                img.save(&path).map_err(|source| DataError::Decode {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(())
        })?;
        let names: Vec<String> = jobs.into_iter().map(|(n, _, _)| n).collect();
        write_manifest(&root.join("splits").join(format!("{}.txt", split.dir_name())), &names)?;
    }
    let stamp = serde_json::to_string_pretty(cfg).expect("config serializes");
    let stamp_path = root.join("glyphs.json");
    fs::write(&stamp_path, stamp).map_err(io_err(&stamp_path))?;
    Ok(())
}

/// Generates the dataset unless `root` already holds one made from `cfg`.
pub fn ensure_glyph_dataset(root: &Path, cfg: &GlyphConfig) -> Result<(), DataError> {
    let stamp = root.join("glyphs.json");
    if let Ok(text) = fs::read_to_string(&stamp) {
        if serde_json::from_str::<GlyphConfig>(&text).ok().as_ref() == Some(cfg) {
            return Ok(());
        }
    }
    if root.exists() {
        fs::remove_dir_all(root).map_err(io_err(root))?;
    }
    write_glyph_dataset(root, cfg)
}
