//! Procedural test imagery: multi-scale value noise plus simple shapes.
//! Used by the toy training runs and the slide-routing fixtures.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;
use crate::tensor::Tensor;

/// Bilinearly-interpolated random grid at one cell size, values in [-1, 1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let gy = y / cell;
        let fy = (y % cell) as f32 / cell as f32;
        for x in 0..w {
            let gx = x / cell;
            let fx = (x % cell) as f32 / cell as f32;
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            out[y * w + x] =
                v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx;
        }
    }
    out
}

fn draw_shapes(rng: &mut ChaCha8Rng, rgb: &mut [f32], h: usize, w: usize, count: usize) {
    for _ in 0..count {
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let alpha = 0.5 + 0.45 * rng.gen::<f32>();
        let circle = rng.gen::<bool>();
        if circle {
            let cy = rng.gen_range(0..h) as f32;
            let cx = rng.gen_range(0..w) as f32;
            let r = rng.gen_range(4..(h / 3).max(5)) as f32;
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    if d < r {
                        for (c, &col) in color.iter().enumerate() {
                            let i = c * h * w + y * w + x;
                            rgb[i] = rgb[i] * (1.0 - alpha) + col * alpha;
                        }
                    }
                }
            }
        } else {
            let y0 = rng.gen_range(0..h);
            let x0 = rng.gen_range(0..w);
            let rh = rng.gen_range(4..h.max(5) / 2);
            let rw = rng.gen_range(4..w.max(5) / 2);
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    for (c, &col) in color.iter().enumerate() {
                        let i = c * h * w + y * w + x;
                        rgb[i] = rgb[i] * (1.0 - alpha) + col * alpha;
                    }
                }
            }
        }
    }
}

fn draw_lines(rng: &mut ChaCha8Rng, rgb: &mut [f32], h: usize, w: usize, count: usize) {
    for _ in 0..count {
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let (x0, y0) = (rng.gen_range(0..w) as f32, rng.gen_range(0..h) as f32);
        let angle = rng.gen::<f32>() * std::f32::consts::PI;
        let len = rng.gen_range((h / 4).max(2)..h.max(3)) as f32;
        let (dx, dy) = (angle.cos(), angle.sin());
        let half_width = 0.5 + 1.5 * rng.gen::<f32>();
        let (x1, y1) = (x0 + dx * len, y0 + dy * len);
        let (lo_y, hi_y) = ((y0.min(y1) - 2.0).max(0.0) as usize, ((y0.max(y1) + 2.0) as usize).min(h - 1));
        let (lo_x, hi_x) = ((x0.min(x1) - 2.0).max(0.0) as usize, ((x0.max(x1) + 2.0) as usize).min(w - 1));
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                // distance from (x, y) to the segment
                let (px, py) = (x as f32 - x0, y as f32 - y0);
                let t = (px * dx + py * dy).clamp(0.0, len);
                let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
                if d <= half_width {
                    for (c, &col) in color.iter().enumerate() {
                        rgb[c * h * w + y * w + x] = col;
                    }
                }
            }
        }
    }
}

/// One textured image: layered value noise at cell sizes 32/16/8/4 under a
/// per-image strength factor, a mild per-channel tint, plus overlaid shapes
/// and line strokes for sharp edges. The strength factor varies difficulty
/// across the dataset.
pub fn textured_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let strength = 0.4 + rng.gen::<f32>() * 0.9;
    let octaves: [(usize, f32); 4] = [(32, 0.22), (16, 0.20), (8, 0.22), (4, 0.25)];
    let mut luma = vec![0.0f32; h * w];
    for &(cell, amp) in &octaves {
        let n = value_noise(rng, h, w, cell.min(h.max(2) - 1).max(1));
        for (o, v) in luma.iter_mut().zip(&n) {
            *o += amp * strength * v;
        }
    }
    let tint = [rng.gen::<f32>() * 0.25, rng.gen::<f32>() * 0.25, rng.gen::<f32>() * 0.25];
    let chroma = value_noise(rng, h, w, 16.max(2));
    let mut rgb = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        let base = 0.5 + luma[p] * 0.9;
        for c in 0..3 {
            rgb[c * h * w + p] = base + tint[c] * chroma[p];
        }
    }
    let shapes = rng.gen_range(4..12);
    draw_shapes(rng, &mut rgb, h, w, shapes);
    let lines = rng.gen_range(2..7);
    draw_lines(rng, &mut rgb, h, w, lines);
    Image::new(Tensor::new(vec![3, h, w], rgb).expect("sized")).expect("valid image")
}

/// A smooth, nearly flat image (easy to super-resolve): one low-frequency
/// noise layer around a mid-gray base.
pub fn smooth_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let n = value_noise(rng, h, w, (h / 2).max(2));
    let base = 0.35 + 0.2 * rng.gen::<f32>();
    let rgb: Vec<f32> = (0..3 * h * w).map(|i| base + 0.06 * n[i % (h * w)]).collect();
    Image::new(Tensor::new(vec![3, h, w], rgb).expect("sized")).expect("valid image")
}

/// A flat near-white tile (background under the tissue rule).
pub fn white_tile(h: usize, w: usize) -> Image {
    Image::new(Tensor::full(&[3, h, w], 0.98)).expect("valid image")
}

/// Deterministic dataset of textured images.
pub fn textured_dataset(seed: u64, count: usize, h: usize, w: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| textured_image(&mut rng, h, w)).collect()
}
