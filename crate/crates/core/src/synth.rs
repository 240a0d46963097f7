//! Seeded synthetic gray images: a smooth ramp background, piecewise-constant
//! rectangles and disks, and patches of sinusoidal texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imgcore::Image;

const SHAPES: usize = 6;
const TEXTURES: usize = 2;

pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);

    let base = rng.random_range(0.2..0.6);
    let gx = rng.random_range(-0.3..0.3);
    let gy = rng.random_range(-0.3..0.3);
    let mut img = Image::from_fn(width, height, |x, y| {
        base + gx * (x as f64 / wf - 0.5) + gy * (y as f64 / hf - 0.5)
    });

    for _ in 0..SHAPES {
        let value = rng.random_range(0.05..0.95);
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let rx = rng.random_range(0.08..0.3) * wf;
        let ry = rng.random_range(0.08..0.3) * hf;
        let disk = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = if disk {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    img.set(x, y, value);
                }
            }
        }
    }

    for _ in 0..TEXTURES {
        let amp = rng.random_range(0.03..0.12);
        let freq = rng.random_range(0.15..0.6);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (angle.cos(), angle.sin());
        let x0 = rng.random_range(0.0..wf * 0.6);
        let y0 = rng.random_range(0.0..hf * 0.6);
        let (w, h) = (wf * rng.random_range(0.2..0.4), hf * rng.random_range(0.2..0.4));
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                if xf >= x0 && xf < x0 + w && yf >= y0 && yf < y0 + h {
                    let v = img.get(x, y) + amp * (freq * (c * xf + s * yf)).sin();
                    img.set(x, y, v);
                }
            }
        }
    }
    img.clamped(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_range_and_varied() {
        let a = synthetic_image(64, 48, 3);
        assert_eq!(a, synthetic_image(64, 48, 3));
        assert_ne!(a, synthetic_image(64, 48, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let m = a.mean();
        let var = a.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-3);
    }
}
