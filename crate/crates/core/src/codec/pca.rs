use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear compression onto the leading principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `d_e x d_raw`, orthonormal rows sorted by explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
    pub explained_variance_ratio: f64,
}

impl PcaModel {
    pub fn raw_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// `components · (x − mean)`
    pub fn project(&self, raw: ArrayView1<f64>) -> Result<Array1<f64>> {
        if raw.len() != self.raw_dim() {
            return Err(Error::invalid(format!(
                "expected a {}-d vector, got {}",
                self.raw_dim(),
                raw.len()
            )));
        }
        Ok(self.components.dot(&(&raw - &self.mean)))
    }

    /// `componentsᵀ · z + mean`
    pub fn lift(&self, compressed: ArrayView1<f64>) -> Result<Array1<f64>> {
        if compressed.len() != self.dim() {
            return Err(Error::invalid(format!(
                "expected a {}-d vector, got {}",
                self.dim(),
                compressed.len()
            )));
        }
        Ok(self.components.t().dot(&compressed) + &self.mean)
    }
}

/// Fits a PCA with `d_e` components.
///
/// The covariance is normalized by the sample count, so the mean squared
/// reconstruction error over the fit set equals the sum of discarded eigenvalues.
pub fn fit_pca(samples: &[Array1<f64>], d_e: usize) -> Result<PcaModel> {
    let n = samples.len();
    let d_raw = samples.first().map_or(0, |s| s.len());
    if d_e == 0 {
        return Err(Error::invalid("PCA needs at least one component"));
    }
    if n < d_e {
        return Err(Error::invalid(format!(
            "PCA with {d_e} components needs at least {d_e} samples, got {n}"
        )));
    }
    if d_e > d_raw {
        return Err(Error::invalid(format!(
            "cannot keep {d_e} components of {d_raw}-d data"
        )));
    }
    if samples.iter().any(|s| s.len() != d_raw) {
        return Err(Error::invalid("PCA samples differ in width"));
    }

    let mut mean = Array1::<f64>::zeros(d_raw);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(d_raw, d_raw);
    let mut centered = vec![0.0; d_raw];
    for s in samples {
        for (c, (v, m)) in centered.iter_mut().zip(s.iter().zip(mean.iter())) {
            *c = v - m;
        }
        for i in 0..d_raw {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d_raw {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d_raw {
        for j in i..d_raw {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = (0..d_raw).map(|i| cov[(i, i)]).sum();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_raw).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = Array2::<f64>::zeros((d_e, d_raw));
    let mut explained = Array1::<f64>::zeros(d_e);
    for (row, &k) in order.iter().take(d_e).enumerate() {
        let v = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, *x) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d_raw {
            components[[row, j]] = sign * v[j];
        }
        explained[row] = eig.eigenvalues[k].max(0.0);
    }
    let kept: f64 = explained.sum();
    let explained_variance_ratio = if total > 0.0 { (kept / total).clamp(0.0, 1.0) } else { 1.0 };
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        explained_variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, scales: &[f64]) -> Vec<Array1<f64>> {
        (0..n)
            .map(|_| {
                Array1::from_iter((0..d).map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scales[j % scales.len()]
                }))
            })
            .collect()
    }

    fn mean_reconstruction_error(pca: &PcaModel, data: &[Array1<f64>]) -> f64 {
        data.iter()
            .map(|x| {
                let r = pca.lift(pca.project(x.view()).unwrap().view()).unwrap();
                (x - &r).mapv(|v| v * v).sum()
            })
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn components_are_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = gaussian(&mut rng, 300, 12, &[3.0, 2.0, 1.0, 0.5]);
        let pca = fit_pca(&data, 6).unwrap();
        let gram = pca.components.dot(&pca.components.t());
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - e).abs() < 1e-6);
            }
        }
        assert!(pca.explained_variance.windows(2).into_iter().all(|w| w[0] >= w[1]));
    }

    #[test]
    fn affine_subspace_is_fully_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = gaussian(&mut rng, 3, 10, &[1.0]);
        let offset = gaussian(&mut rng, 1, 10, &[5.0]).remove(0);
        let data: Vec<_> = (0..50)
            .map(|_| {
                let mut x = offset.clone();
                for b in &basis {
                    let c: f64 = StandardNormal.sample(&mut rng);
                    x = x + b * c;
                }
                x
            })
            .collect();
        let pca = fit_pca(&data, 3).unwrap();
        assert!((pca.explained_variance_ratio - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_error_equals_discarded_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (200, 16);
        let data = gaussian(&mut rng, n, d, &[4.0, 2.0, 1.0, 0.7, 0.3]);
        let pca = fit_pca(&data, 5).unwrap();
        // independent route: singular values of the centered data matrix
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let m = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let mut ev: Vec<f64> = m.svd(false, false).singular_values.iter().map(|s| s * s / n as f64).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let discarded: f64 = ev[5..].iter().sum();
        let err = mean_reconstruction_error(&pca, &data);
        assert!((err - discarded).abs() < 1e-6, "{err} vs {discarded}");
        for (a, b) in pca.explained_variance.iter().zip(&ev) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn full_rank_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gaussian(&mut rng, 40, 8, &[1.0, 2.0]);
        let pca = fit_pca(&data, 8).unwrap();
        for x in &data {
            let back = pca.lift(pca.project(x.view()).unwrap().view()).unwrap();
            assert!((x - &back).iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn project_of_mean_is_zero_and_lift_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = gaussian(&mut rng, 60, 10, &[1.0]);
        let pca = fit_pca(&data, 4).unwrap();
        assert!(pca.project(pca.mean.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
        let z = Array1::from(vec![0.3, -1.2, 2.0, 0.5]);
        let back = pca.project(pca.lift(z.view()).unwrap().view()).unwrap();
        assert!((&z - &back).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn pca_beats_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian(&mut rng, 150, 12, &[3.0, 1.5, 1.0, 0.2]);
        let pca = fit_pca(&data, 4).unwrap();
        let best = mean_reconstruction_error(&pca, &data);
        for _ in 0..20 {
            let g = DMatrix::from_fn(12, 4, |_, _| StandardNormal.sample(&mut rng));
            let q = g.qr().q();
            let comps = Array2::from_shape_fn((4, 12), |(i, j)| q[(j, i)]);
            let random = PcaModel { components: comps, ..pca.clone() };
            assert!(best <= mean_reconstruction_error(&random, &data) + 1e-9);
        }
    }

    #[test]
    fn ratio_grows_with_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = gaussian(&mut rng, 400, 32, &[2.0, 1.0, 0.5, 0.25, 0.1]);
        let mut last = 0.0;
        for d_e in [2, 4, 8, 16, 32] {
            let r = fit_pca(&data, d_e).unwrap().explained_variance_ratio;
            assert!(r >= last - 1e-12);
            last = r;
        }
        assert!((last - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = gaussian(&mut rng, 3, 8, &[1.0]);
        assert!(fit_pca(&data, 4).is_err());
        assert!(fit_pca(&data, 0).is_err());
        assert!(fit_pca(&gaussian(&mut rng, 20, 8, &[1.0]), 9).is_err());
    }
}
