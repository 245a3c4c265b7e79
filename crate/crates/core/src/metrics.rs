//! Gaussian feature statistics and the Frechet distance between them.
//!
//! Stands in for Inception-feature FID at desk scale: samples are flattened,
//! optionally pushed through a fixed seeded projection to 64 dimensions, and
//! summarized as `(mean, covariance)`. The distance keeps the full Frechet
//! formula with the matrix square root taken by symmetric eigendecomposition.

use crate::rng::DeskRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Output dimension of the default feature projection.
pub const PROJECTION_DIM: usize = 64;

/// Seed of the shared feature projection used by the benchmark harness.
pub const FEATURE_PROJECTION_SEED: u64 = 0x4649_4e45;

/// Mean and covariance of a feature cloud.
#[derive(Clone, Debug)]
pub struct GaussianStats<S> {
    pub mean: Vec<S>,
    /// Row-major `dim x dim`, symmetric.
    pub cov: Vec<S>,
    pub dim: usize,
}

/// Fixed seeded projection with orthonormal columns. Orthonormality keeps the
/// projected covariance of white noise at the identity.
#[derive(Clone, Debug)]
pub struct Projection<S> {
    /// Row-major `in_dim x out_dim`.
    pub matrix: Vec<S>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<S: Scalar> Projection<S> {
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim > in_dim {
            return Err(Error::Config(format!(
                "projection output {out_dim} exceeds input dimension {in_dim}"
            )));
        }
        let mut rng = DeskRng::seed_from(seed).derive_str("feature-projection");
        let mut m = Tensor::<S>::gaussian(&[in_dim, out_dim], 1.0, &mut rng);
        // Two-pass modified Gram-Schmidt over columns.
        for _ in 0..2 {
            for j in 0..out_dim {
                for k in 0..j {
                    let mut dot = S::zero();
                    for i in 0..in_dim {
                        dot += m.data[i * out_dim + k] * m.data[i * out_dim + j];
                    }
                    for i in 0..in_dim {
                        let d = dot * m.data[i * out_dim + k];
                        m.data[i * out_dim + j] -= d;
                    }
                }
                let mut norm = S::zero();
                for i in 0..in_dim {
                    let v = m.data[i * out_dim + j];
                    norm += v * v;
                }
                let inv = norm.sqrt().recip();
                for i in 0..in_dim {
                    m.data[i * out_dim + j] *= inv;
                }
            }
        }
        Ok(Projection { matrix: m.data, in_dim, out_dim })
    }
}

/// Fit `(mean, covariance)` to `samples [n, ...]`, optionally projected.
/// Covariance is the unbiased estimator; when `n < dim + 1` it is regularized
/// by `1e-6 I` so downstream eigen-solves stay well posed.
pub fn feature_stats<S: Scalar>(
    samples: &Tensor<S>,
    projection: Option<&Projection<S>>,
) -> Result<GaussianStats<S>> {
    let n = *samples
        .shape
        .first()
        .ok_or_else(|| Error::Contract("feature_stats needs at least one sample".into()))?;
    if n == 0 {
        return Err(Error::Contract("feature_stats needs at least one sample".into()));
    }
    let flat = samples.numel() / n;
    let dim = projection.map(|p| p.out_dim).unwrap_or(flat);
    if let Some(p) = projection {
        if p.in_dim != flat {
            return Err(Error::Contract(format!(
                "projection expects input dim {}, samples have {flat}",
                p.in_dim
            )));
        }
    }

    // Project (or copy) each sample row.
    let mut feats = vec![S::zero(); n * dim];
    for i in 0..n {
        let row = &samples.data[i * flat..(i + 1) * flat];
        let dst = &mut feats[i * dim..(i + 1) * dim];
        match projection {
            None => dst.copy_from_slice(row),
            Some(p) => {
                for (k, &x) in row.iter().enumerate() {
                    let prow = &p.matrix[k * dim..(k + 1) * dim];
                    for j in 0..dim {
                        dst[j] += x * prow[j];
                    }
                }
            }
        }
    }

    let nf = S::from_f64_lossy(n as f64);
    let mut mean = vec![S::zero(); dim];
    for i in 0..n {
        for j in 0..dim {
            mean[j] += feats[i * dim + j];
        }
    }
    for m in mean.iter_mut() {
        *m = *m / nf;
    }

    let mut cov = vec![S::zero(); dim * dim];
    if n > 1 {
        let denom = S::from_f64_lossy((n - 1) as f64);
        let mut centered = vec![S::zero(); dim];
        for i in 0..n {
            for j in 0..dim {
                centered[j] = feats[i * dim + j] - mean[j];
            }
            for a in 0..dim {
                let ca = centered[a];
                let row = &mut cov[a * dim..(a + 1) * dim];
                for b in 0..dim {
                    row[b] += ca * centered[b];
                }
            }
        }
        for c in cov.iter_mut() {
            *c = *c / denom;
        }
    }
    if n < dim + 1 {
        let reg = S::from_f64_lossy(1e-6);
        for j in 0..dim {
            cov[j * dim + j] += reg;
        }
    }
    Ok(GaussianStats { mean, cov, dim })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns `(eigenvalues, eigenvectors)` with eigenvector `j` stored in
/// column `j` of the row-major matrix.
pub fn sym_eigen<S: Scalar>(a: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let tol = S::from_f64_lossy(1e-14);
    for _sweep in 0..100 {
        // Largest off-diagonal magnitude for the stop test.
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q].abs();
                if apq > off {
                    off = apq;
                }
            }
        }
        let mut scale = S::zero();
        for i in 0..n {
            let d = m[i * n + i].abs();
            if d > scale {
                scale = d;
            }
        }
        if off <= tol * (scale + S::one()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (apq + apq);
                let t = {
                    let sign = if theta >= S::zero() { S::one() } else { -S::one() };
                    sign / (theta.abs() + (theta * theta + S::one()).sqrt())
                };
                let c = (t * t + S::one()).sqrt().recip();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[i * n + p], m[i * n + q]);
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[p * n + i], m[q * n + i]);
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig: Vec<S> = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

/// Symmetric PSD square root via eigendecomposition with clipped eigenvalues.
fn sqrtm_psd<S: Scalar>(c: &[S], n: usize) -> Vec<S> {
    let (eig, v) = sym_eigen(c, n);
    let roots: Vec<S> = eig.iter().map(|&l| if l > S::zero() { l.sqrt() } else { S::zero() }).collect();
    // V diag(sqrt) V^T
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = S::zero();
            for k in 0..n {
                acc += v[i * n + k] * roots[k] * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2})`, clamped at zero.
pub fn frechet_distance<S: Scalar>(a: &GaussianStats<S>, b: &GaussianStats<S>) -> Result<S> {
    if a.dim != b.dim {
        return Err(Error::Contract(format!("stat dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let n = a.dim;
    let mut mean_term = S::zero();
    for j in 0..n {
        let d = a.mean[j] - b.mean[j];
        mean_term += d * d;
    }
    let mut trace = S::zero();
    for i in 0..n {
        trace += a.cov[i * n + i] + b.cov[i * n + i];
    }
    // tr((Ca Cb)^{1/2}) = tr((S Cb S)^{1/2}) with S = Ca^{1/2}; symmetrize
    // the product before the eigen-solve.
    let s = sqrtm_psd(&a.cov, n);
    let mut scb = vec![S::zero(); n * n];
    crate::tensor::mm_nn_pub(&s, &b.cov, n, n, n, &mut scb);
    let mut prod = vec![S::zero(); n * n];
    crate::tensor::mm_nn_pub(&scb, &s, n, n, n, &mut prod);
    let half = S::from_f64_lossy(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let sym = (prod[i * n + j] + prod[j * n + i]) * half;
            prod[i * n + j] = sym;
            prod[j * n + i] = sym;
        }
    }
    let (eig, _) = sym_eigen(&prod, n);
    let mut tr_sqrt = S::zero();
    for &l in &eig {
        if l > S::zero() {
            tr_sqrt += l.sqrt();
        }
    }
    let two = S::from_f64_lossy(2.0);
    let d = mean_term + trace - two * tr_sqrt;
    Ok(if d > S::zero() { d } else { S::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats<f64> {
        let dim = mean.len();
        GaussianStats { mean, cov, dim }
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let a = stats(vec![0.3, -1.0], vec![2.0, 0.3, 0.3, 1.0]);
        let d = frechet_distance(&a, &a.clone()).unwrap();
        assert!(d.abs() < 1e-8, "{d}");
    }

    #[test]
    fn unit_gaussians_distance_one() {
        // 1-D N(0,1) vs N(1,1): (mu diff)^2 + (sigma diff)^2 = 1.
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![1.0], vec![1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-10, "{d}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = DeskRng::seed_from(3);
        let (a, b) = random_commuting_pair(&mut rng, 5);
        let d1 = frechet_distance(&a.0, &b.0).unwrap();
        let d2 = frechet_distance(&b.0, &a.0).unwrap();
        assert!((d1 - d2).abs() < 1e-8);
        assert!(d1 >= 0.0);
    }

    /// Construct a pair of Gaussians whose covariances share an eigenbasis,
    /// so the Frechet distance has the scalar closed form
    /// `|dmu|^2 + sum_i (da_i + db_i - 2 sqrt(da_i db_i))`.
    fn random_commuting_pair(
        rng: &mut DeskRng,
        n: usize,
    ) -> ((GaussianStats<f64>, Vec<f64>), (GaussianStats<f64>, Vec<f64>)) {
        // Random orthogonal basis from the projection helper.
        let q = Projection::<f64>::seeded(n, n, rng.next_u64()).unwrap().matrix;
        let build = |rng: &mut DeskRng| {
            let diag: Vec<f64> = (0..n).map(|_| rng.next_range_f64(0.2, 3.0)).collect();
            let mut cov = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += q[i * n + k] * diag[k] * q[j * n + k];
                    }
                    cov[i * n + j] = acc;
                }
            }
            let mean: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
            (stats(mean, cov), diag)
        };
        (build(rng), build(rng))
    }

    #[test]
    fn matches_scalar_eigenvalue_oracle_on_5d() {
        let mut rng = DeskRng::seed_from(8);
        for _ in 0..10 {
            let ((a, da), (b, db)) = random_commuting_pair(&mut rng, 5);
            let mut expect = 0.0;
            for j in 0..5 {
                let dm = a.mean[j] - b.mean[j];
                expect += dm * dm + da[j] + db[j] - 2.0 * (da[j] * db[j]).sqrt();
            }
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - expect).abs() < 1e-6, "got {got}, expect {expect}");
        }
    }

    #[test]
    fn constant_samples_have_regularized_covariance() {
        // n < dim + 1 triggers the 1e-6 I regularization.
        let samples = Tensor::<f64>::full(&[3, 5], 0.7);
        let s = feature_stats(&samples, None).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1e-6 } else { 0.0 };
                assert!((s.cov[i * 5 + j] - expect).abs() < 1e-15);
            }
        }
        // With n >= dim + 1 the covariance of constants is exactly zero
        // (0.5 keeps the mean arithmetic exact in binary floating point).
        let samples = Tensor::<f64>::full(&[8, 5], 0.5);
        let s = feature_stats(&samples, None).unwrap();
        assert!(s.cov.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let mut rng = DeskRng::seed_from(4);
        let t = Tensor::<f64>::gaussian(&[40, 6], 1.0, &mut rng);
        let s1 = feature_stats(&t, None).unwrap();
        // Reverse the sample order.
        let mut rev = Vec::new();
        for i in (0..40).rev() {
            rev.extend_from_slice(&t.data[i * 6..(i + 1) * 6]);
        }
        let t2 = Tensor::new(vec![40, 6], rev).unwrap();
        let s2 = feature_stats(&t2, None).unwrap();
        for (a, b) in s1.mean.iter().zip(&s2.mean) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in s1.cov.iter().zip(&s2.cov) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projected_unit_gaussians_are_white() {
        let mut rng = DeskRng::seed_from(5);
        let n = 10_000;
        let dim_in = 256;
        let t = Tensor::<f64>::gaussian(&[n, dim_in], 1.0, &mut rng);
        let proj = Projection::seeded(dim_in, PROJECTION_DIM, 42).unwrap();
        let s = feature_stats(&t, Some(&proj)).unwrap();
        for j in 0..PROJECTION_DIM {
            assert!(s.mean[j].abs() < 0.05, "mean[{j}] = {}", s.mean[j]);
            for k in 0..PROJECTION_DIM {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!(
                    (s.cov[j * PROJECTION_DIM + k] - expect).abs() < 0.05,
                    "cov[{j},{k}] = {}",
                    s.cov[j * PROJECTION_DIM + k]
                );
            }
        }
    }

    #[test]
    fn eigen_recovers_known_spectrum() {
        // diag(3, 1) rotated by 45 degrees.
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let q = [r, -r, r, r];
        let mut m = [0.0; 4];
        let d = [3.0, 1.0];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    m[i * 2 + j] += q[i * 2 + k] * d[k] * q[j * 2 + k];
                }
            }
        }
        let (mut eig, _) = sym_eigen(&m, 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }
}
