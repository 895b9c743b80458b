//! Procedural scene content: multi-octave value noise with geometric shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::image::Image;

fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = y / cell;
        let ty = smooth((y % cell) as f64 / cell as f64);
        for x in 0..w {
            let gx = x / cell;
            let tx = smooth((x % cell) as f64 / cell as f64);
            let l = |i: usize, j: usize| lattice[j * gw + i];
            let top = l(gx, gy) * (1.0 - tx) + l(gx + 1, gy) * tx;
            let bot = l(gx, gy + 1) * (1.0 - tx) + l(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn octaves(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let mut acc = vec![0.0; w * h];
    let mut amp = 0.5;
    let mut norm = 0.0;
    for cell in [64, 32, 16, 8, 4] {
        for (a, v) in acc.iter_mut().zip(value_noise(rng, w, h, cell)) {
            *a += amp * v;
        }
        norm += amp;
        amp *= 0.55;
    }
    acc.iter().map(|v| v / norm).collect()
}

/// A colourful synthetic scene, deterministic in `seed`.
pub fn procedural_image(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width, height);
    let lum = octaves(&mut rng, w, h);
    let tint: Vec<Vec<f64>> = (0..3).map(|_| octaves(&mut rng, w, h)).collect();
    let mut rgb = vec![0.0f64; w * h * 3];
    for i in 0..w * h {
        for c in 0..3 {
            rgb[i * 3 + c] = 0.15 + 0.55 * lum[i] + 0.3 * (tint[c][i] - 0.5);
        }
    }

    let shapes = rng.gen_range(3..=8);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let size = rng.gen_range(0.05..0.25) * w.min(h) as f64;
        let circle = rng.gen_bool(0.5);
        let soft = rng.gen_range(0.5..4.0);
        let alpha = rng.gen_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let dist = if circle {
                    (dx * dx + dy * dy).sqrt() - size
                } else {
                    dx.abs().max(dy.abs()) - size
                };
                let cover = alpha * (0.5 - dist / soft).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        let v = &mut rgb[(y * w + x) * 3 + c];
                        *v = *v * (1.0 - cover) + colour[c] * cover;
                    }
                }
            }
        }
    }
    Image::new(
        w,
        h,
        3,
        rgb.into_iter()
            .map(|v| v.clamp(0.02, 0.98) as f32)
            .collect(),
    )
}
