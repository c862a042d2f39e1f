//! Deterministic fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rectisplat::gaussian::{Gaussian, GaussianCloud};
use rectisplat::render::Camera;

/// `n` Gaussians scattered in a unit ball with small random extents.
pub fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let p = loop {
                let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break p;
                }
            };
            let s = [rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05)];
            let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let q = q.map(|v| v / norm);
            let rgb = [rng.gen(), rng.gen(), rng.gen()];
            Gaussian::new(p, s, q, rng.gen_range(0.2..0.9), rgb).expect("valid fixture point")
        })
        .collect();
    GaussianCloud::from_points(points)
}

pub fn camera(size: usize) -> Camera {
    Camera::look_at([0.0, 0.0, -2.5], [0.0; 3], [0.0, 1.0, 0.0], size as f64 * 1.37, size, size).expect("valid camera")
}
