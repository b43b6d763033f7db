//! Synthetic dataset generator: simple gradient-plus-disc images with a
//! shared structure, enough for smoke training and metric checks without
//! shipping real data.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::ppm::PpmImage;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One synthetic image: a two-color linear gradient background with a
/// filled disc of random center, radius, and color.
pub fn synthetic_image(resolution: usize, rng: &mut Rng) -> Tensor<f32> {
    let r = resolution;
    let c0: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
    let c1: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
    let disc: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
    let vertical = rng.uniform() < 0.5;
    let cx = 0.2 + 0.6 * rng.uniform();
    let cy = 0.2 + 0.6 * rng.uniform();
    let rad = 0.15 + 0.2 * rng.uniform();

    let mut data = vec![0.0f32; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let (u, v) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
            let t = if vertical { v } else { u };
            let inside = (u - cx) * (u - cx) + (v - cy) * (v - cy) <= rad * rad;
            for c in 0..3 {
                let val = if inside {
                    disc[c]
                } else {
                    c0[c] * (1.0 - t) + c1[c] * t
                };
                data[(c * r + y) * r + x] = (2.0 * val - 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, r, r], data).expect("dims consistent")
}

/// Writes `n` deterministic synthetic PPM images into `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = Rng::stream(seed, "synthetic", 0);
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let t = synthetic_image(resolution, &mut rng);
        let p = dir.join(format!("synth_{i:04}.ppm"));
        std::fs::write(&p, PpmImage::from_tensor(&t)?.encode())?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    #[test]
    fn deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_synthetic_dataset(&a, 4, 16, 99).unwrap();
        write_synthetic_dataset(&b, 4, 16, 99).unwrap();
        for i in 0..4 {
            let fa = std::fs::read(a.join(format!("synth_{i:04}.ppm"))).unwrap();
            let fb = std::fs::read(b.join(format!("synth_{i:04}.ppm"))).unwrap();
            assert_eq!(fa, fb);
        }
        let ds = load_dataset(&a, 16, 0).unwrap();
        assert_eq!(ds.len(), 4);
        let all = ds.all().unwrap();
        assert_eq!(all.dims(), &[4, 3, 16, 16]);
        assert!(all.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
