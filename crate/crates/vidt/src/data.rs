//! Synthetic scene generation: flat-shaded rectangles, disks, and triangles
//! on a noisy dark background, each tightly bounded by its ground-truth box.
//!
//! Pixels render to 8-bit and convert to `f64` by `/256`, so every image
//! value is exactly representable in `f32` and datasets survive the
//! container format bit-for-bit; box coordinates are snapped to `f32` for
//! the same reason.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::{read_container, write_container, Entry};
use crate::losses::BoxSet;
use crate::tensor::{Result, TensorError};

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "disk", "triangle"];

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `[size, size, 3]` row-major RGB in `[0, 1]`
    pub image: Vec<f64>,
    pub size: usize,
    pub gt: BoxSet,
}

/// Per-class base colors with per-instance jitter; classification stays
/// learnable at tiny scale while boxes still require localization.
const BASE_COLORS: [[f64; 3]; 3] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.9],
];

fn put_pixel(img: &mut [u8], size: usize, x: usize, y: usize, rgb: [u8; 3]) {
    let base = (y * size + x) * 3;
    img[base] = rgb[0];
    img[base + 1] = rgb[1];
    img[base + 2] = rgb[2];
}

fn jittered_color(rng: &mut ChaCha20Rng, class: usize) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = BASE_COLORS[class][c] + rng.gen_range(-0.08..0.08);
        rgb[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    rgb
}

/// One scene with `n_objects` shapes; boxes are normalized (cx, cy, w, h).
fn render_scene(rng: &mut ChaCha20Rng, size: usize, n_objects: usize) -> SyntheticScene {
    let mut img = vec![0u8; size * size * 3];
    for px in img.chunks_mut(3) {
        let v = rng.gen_range(20..40u8);
        px[0] = v;
        px[1] = v;
        px[2] = v;
    }
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    let s = size as f64;
    for _ in 0..n_objects {
        let class = rng.gen_range(0..3usize);
        let color = jittered_color(rng, class);
        let (x0, y0, x1, y1) = match class {
            0 => {
                // axis-aligned rectangle on integer pixel bounds
                let w = rng.gen_range(8..=size / 2);
                let h = rng.gen_range(8..=size / 2);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        put_pixel(&mut img, size, x, y, color);
                    }
                }
                (x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
            }
            1 => {
                // disk: pixel centers within radius of the center
                let r = rng.gen_range(4.0..size as f64 / 4.0);
                let cx = rng.gen_range(r..s - r);
                let cy = rng.gen_range(r..s - r);
                for y in 0..size {
                    for x in 0..size {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            put_pixel(&mut img, size, x, y, color);
                        }
                    }
                }
                (cx - r, cy - r, cx + r, cy + r)
            }
            _ => {
                // triangle with a guaranteed non-degenerate area
                loop {
                    let w = rng.gen_range(10.0..s / 2.0);
                    let h = rng.gen_range(10.0..s / 2.0);
                    let x0 = rng.gen_range(0.0..s - w);
                    let y0 = rng.gen_range(0.0..s - h);
                    // one vertex on each bounding edge keeps the box tight
                    let ax = x0 + rng.gen_range(0.0..w);
                    let bx = x0;
                    let by = y0 + rng.gen_range(0.0..h);
                    let cx = x0 + w;
                    let cy = y0 + rng.gen_range(0.0..h);
                    let (ay, bx2) = (y0, bx);
                    let area = ((bx2 - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs() / 2.0;
                    if area < 30.0 {
                        continue;
                    }
                    let tri = [(ax, ay), (bx2, by), (cx, cy)];
                    let edge = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
                    };
                    for y in y0 as usize..(y0 + h).ceil() as usize {
                        for x in x0 as usize..(x0 + w).ceil() as usize {
                            let p = (x as f64 + 0.5, y as f64 + 0.5);
                            let d0 = edge(p, tri[0], tri[1]);
                            let d1 = edge(p, tri[1], tri[2]);
                            let d2 = edge(p, tri[2], tri[0]);
                            let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                            let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                            if !(neg && pos) && x < size && y < size {
                                put_pixel(&mut img, size, x, y, color);
                            }
                        }
                    }
                    let min_y = ay.min(by).min(cy);
                    let max_y = ay.max(by).max(cy);
                    break (ax.min(bx2).min(cx), min_y, ax.max(bx2).max(cx), max_y);
                }
            }
        };
        boxes.extend_from_slice(&[
            ((x0 + x1) / 2.0 / s) as f32 as f64,
            ((y0 + y1) / 2.0 / s) as f32 as f64,
            ((x1 - x0) / s) as f32 as f64,
            ((y1 - y0) / s) as f32 as f64,
        ]);
        labels.push(class);
    }
    SyntheticScene {
        image: img.iter().map(|&v| v as f64 / 256.0).collect(),
        size,
        gt: BoxSet { boxes, labels },
    }
}

/// Deterministic dataset from a seed; object counts are uniform over 0..=4
/// so a fifth of the scenes are empty.
pub fn generate_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(TensorError::Parameter("need at least one scene".to_string()));
    }
    if size < 16 {
        return Err(TensorError::Parameter(format!(
            "scene size {size} below the minimum of 16"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let count = rng.gen_range(0..=4usize);
            render_scene(&mut rng, size, count)
        })
        .collect())
}

pub fn save_dataset(path: &Path, scenes: &[SyntheticScene]) -> std::io::Result<()> {
    let mut entries = Vec::with_capacity(scenes.len() * 3 + 1);
    entries.push(Entry::scalar("meta.count", scenes.len() as f64));
    for (i, s) in scenes.iter().enumerate() {
        entries.push(Entry::from_f64(
            format!("scene{i}.image"),
            &[s.size, s.size, 3],
            &s.image,
        ));
        entries.push(Entry::from_f64(
            format!("scene{i}.boxes"),
            &[s.gt.len(), 4],
            &s.gt.boxes,
        ));
        let labels: Vec<f64> = s.gt.labels.iter().map(|&l| l as f64).collect();
        entries.push(Entry::from_f64(format!("scene{i}.labels"), &[s.gt.len()], &labels));
    }
    write_container(path, &entries)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SyntheticScene>> {
    let entries = read_container(path)
        .map_err(|e| TensorError::Parameter(format!("cannot read dataset: {e}")))?;
    let lookup = |name: &str| -> Result<&Entry> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| TensorError::Parameter(format!("dataset missing entry {name}")))
    };
    let count = lookup("meta.count")?.data[0] as usize;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let img = lookup(&format!("scene{i}.image"))?;
        let boxes = lookup(&format!("scene{i}.boxes"))?;
        let labels = lookup(&format!("scene{i}.labels"))?;
        scenes.push(SyntheticScene {
            image: img.to_f64(),
            size: img.dims[0],
            gt: BoxSet {
                boxes: boxes.to_f64(),
                labels: labels.data.iter().map(|&v| v as usize).collect(),
            },
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cxcywh_to_corners;

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let a = generate_dataset(20, 7, 32).unwrap();
        let b = generate_dataset(20, 7, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.gt.boxes, y.gt.boxes);
            assert_eq!(x.gt.labels, y.gt.labels);
        }
        let c = generate_dataset(20, 8, 32).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn dataset_has_exact_count_and_valid_boxes() {
        let scenes = generate_dataset(100, 1, 64).unwrap();
        assert_eq!(scenes.len(), 100);
        for s in &scenes {
            s.gt.validate().unwrap();
            assert!(s.gt.len() <= 4);
        }
        let empty = scenes.iter().filter(|s| s.gt.is_empty()).count();
        assert!(empty * 20 >= scenes.len(), "expected at least 5% empty scenes");
    }

    #[test]
    fn boxes_tightly_bound_rendered_shapes() {
        let scenes = generate_dataset(40, 3, 64).unwrap();
        let background = 40.0 / 256.0;
        for s in scenes.iter().filter(|s| s.gt.len() == 1) {
            // single-object scenes: the rendered extent must match the box
            // within one pixel on every side
            let size = s.size;
            let (mut min_x, mut min_y, mut max_x, mut max_y) = (size, size, 0usize, 0usize);
            for y in 0..size {
                for x in 0..size {
                    let px = &s.image[(y * size + x) * 3..(y * size + x) * 3 + 3];
                    let colored = px.iter().any(|&v| v > background + 0.1)
                        && (px[0] - px[1]).abs() + (px[1] - px[2]).abs() > 0.05;
                    if colored {
                        min_x = min_x.min(x);
                        min_y = min_y.min(y);
                        max_x = max_x.max(x + 1);
                        max_y = max_y.max(y + 1);
                    }
                }
            }
            if max_x == 0 {
                continue; // shape blended into background, nothing to check
            }
            let c = cxcywh_to_corners(&s.gt.boxes[0..4]);
            let tol = 1.5 / size as f64;
            assert!((c[0] - min_x as f64 / size as f64).abs() <= tol);
            assert!((c[1] - min_y as f64 / size as f64).abs() <= tol);
            assert!((c[2] - max_x as f64 / size as f64).abs() <= tol);
            assert!((c[3] - max_y as f64 / size as f64).abs() <= tol);
        }
    }

    #[test]
    fn rejects_tiny_scenes() {
        assert!(generate_dataset(5, 1, 8).is_err());
    }

    #[test]
    fn dataset_roundtrips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.vidt");
        let scenes = generate_dataset(5, 11, 32).unwrap();
        save_dataset(&p, &scenes).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image, b.image, "f32-exact image values");
            assert_eq!(a.gt.labels, b.gt.labels);
            assert_eq!(a.gt.boxes, b.gt.boxes, "f32-snapped box coords");
        }
    }
}
