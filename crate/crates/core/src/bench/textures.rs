//! Procedural base images for the synthetic benchmark.
//!
//! All generators are pure functions of the supplied counter RNG, so the
//! repository ships no image assets. Value noise uses a smoothstep-blended
//! random lattice, which keeps image gradients continuous for the
//! photometric aligner.

use super::TextureKind;
use crate::exec;
use crate::geometry::GrayImage;
use crate::rng::CounterRng;

/// Dispatches on the texture family.
pub fn generate(kind: TextureKind, width: usize, height: usize, rng: CounterRng) -> GrayImage {
    match kind {
        TextureKind::Noise => value_noise(width, height, rng, 16, 4, 0.55),
        TextureKind::LowFreq => value_noise(width, height, rng, 64, 2, 0.4),
        TextureKind::Checker => checker(width, height, rng, 16),
        TextureKind::Ramp => ramp(width, height),
    }
}

/// Smoothstep-interpolated lattice value in [-1, 1] at octave `octave`.
/// Lattice draws are counter-addressed: `(octave, iy, ix)` maps to one draw,
/// so any pixel can be evaluated independently and in parallel.
fn lattice(rng: CounterRng, octave: u64, cols: u64, ix: u64, iy: u64) -> f64 {
    let mut r = rng.at((octave << 40) ^ (iy * cols + ix));
    2.0 * r.next_f64() - 1.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise mapped into [0.02, 0.98].
pub fn value_noise(
    width: usize,
    height: usize,
    rng: CounterRng,
    base_cell: usize,
    octaves: usize,
    persistence: f64,
) -> GrayImage {
    let mut px = vec![0.0; width * height];
    let mut max_amp = 0.0;
    let mut amp = 1.0;
    for _ in 0..octaves {
        max_amp += amp;
        amp *= persistence;
    }
    exec::for_each_row_mut(&mut px, width, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            let mut total = 0.0;
            let mut amp = 1.0;
            let mut cell = base_cell.max(2) as f64;
            for o in 0..octaves {
                let fx = j as f64 / cell;
                let fy = i as f64 / cell;
                let x0 = fx.floor();
                let y0 = fy.floor();
                let tx = smoothstep(fx - x0);
                let ty = smoothstep(fy - y0);
                let cols = (width as f64 / cell).ceil() as u64 + 2;
                let (ix, iy) = (x0 as u64, y0 as u64);
                let v00 = lattice(rng, o as u64, cols, ix, iy);
                let v01 = lattice(rng, o as u64, cols, ix + 1, iy);
                let v10 = lattice(rng, o as u64, cols, ix, iy + 1);
                let v11 = lattice(rng, o as u64, cols, ix + 1, iy + 1);
                let val = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
                total += amp * val;
                amp *= persistence;
                cell = (cell / 2.0).max(2.0);
            }
            *v = 0.5 + 0.48 * (total / max_amp);
        }
    });
    GrayImage::from_fn(width, height, |i, j| px[i * width + j])
}

/// Checkerboard with a touch of noise so flat cells still carry gradient.
pub fn checker(width: usize, height: usize, rng: CounterRng, cell: usize) -> GrayImage {
    let noise = value_noise(width, height, rng, 8, 2, 0.5);
    GrayImage::from_fn(width, height, |i, j| {
        let base = if (i / cell + j / cell) % 2 == 0 {
            0.3
        } else {
            0.7
        };
        base + 0.1 * (noise.get(i, j) - 0.5)
    })
}

/// Diagonal intensity ramp.
pub fn ramp(width: usize, height: usize) -> GrayImage {
    GrayImage::from_fn(width, height, |i, j| {
        0.15 + 0.7 * (j as f64 / (width.max(2) - 1) as f64 + i as f64 / (height.max(2) - 1) as f64)
            / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_in_range() {
        let rng = CounterRng::substream(5, 0);
        let a = value_noise(40, 30, rng, 16, 4, 0.55);
        let b = value_noise(40, 30, rng, 16, 4, 0.55);
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Not constant.
        let first = a.pixels()[0];
        assert!(a.pixels().iter().any(|&v| (v - first).abs() > 0.05));
    }

    #[test]
    fn families_differ() {
        let rng = CounterRng::substream(5, 0);
        let noise = generate(TextureKind::Noise, 32, 32, rng);
        let low = generate(TextureKind::LowFreq, 32, 32, rng);
        assert_ne!(noise, low);
    }
}
