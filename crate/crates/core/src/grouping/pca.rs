use nalgebra::DMatrix;

/// Project `points` onto their top two principal components.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let coord = |i: usize, k: usize| order.get(k).map_or(0.0, |&c| u[(i, c)] * svd.singular_values[c]);
    (0..n).map(|i| [coord(i, 0), coord(i, 1)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_two_data_keeps_its_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 12;
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let pts: Vec<Vec<f64>> = (0..9)
            .map(|_| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                (0..d).map(|j| offset[j] + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let proj = pca_2d(&pts);
        let base = dist(&pts[0], &pts[1]) / dist(&proj[0], &proj[1]);
        for i in 0..9 {
            for j in (i + 1)..9 {
                let ratio = dist(&pts[i], &pts[j]) / dist(&proj[i], &proj[j]);
                assert!((ratio / base - 1.0).abs() <= 1e-9, "pair ({i},{j}) ratio {ratio}");
            }
        }
    }
}
