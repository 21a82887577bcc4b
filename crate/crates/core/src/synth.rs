//! Procedural HR textures for the oracle testbed: piecewise-constant scenes
//! (flat background, rectangles, discs, a striped patch) so that both flat
//! regions and sharp high-frequency content are present.

use rand::Rng;
use stochsr_tensor::Tensor;

use crate::error::Result;
use crate::image::ImageBatch;
use crate::rng;

fn color<R: Rng>(rng: &mut R, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.2..0.8)).collect()
}

/// One `(1, channels, size, size)` texture, a pure function of `seed`.
pub fn texture(seed: u64, size: usize, channels: usize) -> Result<ImageBatch> {
    let mut rng = rng::stream(seed, &[rng::TEXTURE]);
    let mut canvas: Vec<Vec<f64>> = vec![color(&mut rng, channels); size * size];
    let s = size as f64;

    let rects = rng.random_range(2..=4);
    for _ in 0..rects {
        let w = rng.random_range(0.12 * s..0.35 * s);
        let h = rng.random_range(0.12 * s..0.35 * s);
        let x0 = rng.random_range(0.0..s - w);
        let y0 = rng.random_range(0.0..s - h);
        let c = color(&mut rng, channels);
        for y in y0 as usize..(y0 + h) as usize {
            for x in x0 as usize..(x0 + w) as usize {
                canvas[y * size + x] = c.clone();
            }
        }
    }

    let discs = rng.random_range(1..=2);
    for _ in 0..discs {
        let r = rng.random_range(0.06 * s..0.16 * s);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let c = color(&mut rng, channels);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    canvas[y * size + x] = c.clone();
                }
            }
        }
    }

    // Striped patch: the part a restorer has to work for.
    let w = rng.random_range(0.15 * s..0.3 * s);
    let x0 = rng.random_range(0.0..s - w);
    let y0 = rng.random_range(0.0..s - w);
    let period = rng.random_range(3..=8);
    let vertical = rng.random_bool(0.5);
    let (a, b) = (color(&mut rng, channels), color(&mut rng, channels));
    for y in y0 as usize..(y0 + w) as usize {
        for x in x0 as usize..(x0 + w) as usize {
            let t = if vertical { x } else { y };
            canvas[y * size + x] = if (t / period) % 2 == 0 { a.clone() } else { b.clone() };
        }
    }

    let mut data = vec![0.0; channels * size * size];
    for (i, px) in canvas.iter().enumerate() {
        for c in 0..channels {
            data[c * size * size + i] = px[c];
        }
    }
    ImageBatch::new(Tensor::new(vec![1, channels, size, size], data)?)
}
