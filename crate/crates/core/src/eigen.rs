//! Eigenanalysis of the feature covariance and the spectral form of the
//! Hotelling SNR.
//!
//! With `K = Σ λ_m u_m u_mᵀ` and `α_m = u_mᵀ Δv̄`, the observer SNR
//! decomposes as `SNR² = Σ α_m² / λ_m`, separating the effect of a processing
//! step on the class-mean difference (through `α`) from its effect on the
//! noise (through `λ`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative eigenvalue floor used when inverting feature covariances.
pub const EIGEN_FLOOR: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

pub type Matrix<T> = Vec<Vec<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Eigen<T> {
    /// Descending.
    pub values: Vec<T>,
    /// `vectors[m]` is the unit eigenvector for `values[m]`.
    pub vectors: Vec<Vec<T>>,
}

fn check_square<T: Real>(k: &[Vec<T>]) -> Result<usize> {
    let n = k.len();
    if n == 0 || k.iter().any(|r| r.len() != n) {
        return Err(Error::Parameter("matrix must be square and non-empty".into()));
    }
    if k.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    Ok(n)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_decompose<T: Real>(k: &[Vec<T>]) -> Result<Eigen<T>> {
    let n = check_square(k)?;
    let scale = k.iter().flatten().fold(T::zero(), |m, x| m.max(x.abs()));
    let tol = T::lit(SYMMETRY_TOL) * scale.max(T::one());
    for i in 0..n {
        for j in 0..i {
            if (k[i][j] - k[j][i]).abs() > tol {
                return Err(Error::Parameter(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    k[i][j], k[j][i]
                )));
            }
        }
    }
    let mut a: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| (k[i][j] + k[j][i]) * T::lit(0.5)).collect())
        .collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let frob2: T = a.iter().flatten().map(|x| *x * *x).sum();
    let stop = T::epsilon() * T::epsilon() * frob2;
    for _ in 0..MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = (t * t + T::one()).sqrt().recip();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r][p], a[r][q]);
                    a[r][p] = c * arp - s * arq;
                    a[r][q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[p][r], a[q][r]);
                    a[p][r] = c * apr - s * aqr;
                    a[q][r] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let (vrp, vrq) = (v[r][p], v[r][q]);
                    v[r][p] = c * vrp - s * vrq;
                    v[r][q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).expect("finite eigenvalues"));
    Ok(Eigen {
        values: order.iter().map(|&m| a[m][m]).collect(),
        vectors: order.iter().map(|&m| (0..n).map(|r| v[r][m]).collect()).collect(),
    })
}

impl<T: Real> Eigen<T> {
    /// `Σ λ_m u_m u_mᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.values.len();
        let mut out = vec![vec![T::zero(); n]; n];
        for (l, u) in self.values.iter().zip(&self.vectors) {
            for i in 0..n {
                for j in 0..n {
                    out[i][j] += *l * u[i] * u[j];
                }
            }
        }
        out
    }

    /// Applies `f(λ)` spectrally: `Σ f(λ_m) u_m u_mᵀ`.
    pub fn spectral_map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let mapped = Eigen {
            values: self.values.iter().map(|&l| f(l)).collect(),
            vectors: self.vectors.clone(),
        };
        mapped.reconstruct()
    }
}

/// `α_m = u_m · Δv̄`.
pub fn alpha_coeffs<T: Real>(delta_mean: &[T], vectors: &[Vec<T>]) -> Result<Vec<T>> {
    if vectors.iter().any(|u| u.len() != delta_mean.len()) {
        return Err(Error::Parameter(format!(
            "eigenvectors do not match the {}-dimensional mean difference",
            delta_mean.len()
        )));
    }
    Ok(vectors.iter().map(|u| dot(u, delta_mean)).collect())
}

/// `sqrt(Σ α_m² / λ_m)`. Every λ must exceed the relative floor.
pub fn snr_from_spectrum<T: Real>(alphas: &[T], lambdas: &[T]) -> Result<T> {
    if alphas.len() != lambdas.len() {
        return Err(Error::Parameter("alpha and eigenvalue lengths differ".into()));
    }
    let lmax = lambdas.iter().copied().fold(T::zero(), T::max);
    let floor = T::lit(EIGEN_FLOOR) * lmax;
    let mut s2 = T::zero();
    for (m, (&a, &l)) in alphas.iter().zip(lambdas).enumerate() {
        if !(l > floor) {
            if a == T::zero() && lmax == T::zero() {
                continue;
            }
            return Err(Error::Numerical(format!("eigenvalue {m} ({l}) is at or below the floor {floor}")));
        }
        s2 += a * a / l;
    }
    Ok(s2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucConvention {
    /// `1/2 + erf(SNR)/2`.
    #[default]
    Paper,
    /// `1/2 + erf(SNR/2)/2`, i.e. `Φ(SNR/√2)`.
    Textbook,
}

impl AucConvention {
    pub fn name(self) -> &'static str {
        match self {
            AucConvention::Paper => "paper",
            AucConvention::Textbook => "textbook",
        }
    }
}

pub fn auc_from_snr(snr: f64, convention: AucConvention) -> Result<f64> {
    if !(snr >= 0.0) {
        return Err(Error::Domain(format!("SNR must be nonnegative, got {snr}")));
    }
    let z = match convention {
        AucConvention::Paper => snr,
        AucConvention::Textbook => snr / 2.0,
    };
    Ok(0.5 + 0.5 * statrs::function::erf::erf(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub snr: f64,
    /// `α_m² / λ_m`.
    pub per_mode_contrib: Vec<f64>,
}

pub fn eigen_report<T: Real>(cov: &[Vec<T>], delta_mean: &[T]) -> Result<EigenReport> {
    let eig = eig_decompose(cov)?;
    let alphas = alpha_coeffs(delta_mean, &eig.vectors)?;
    let snr = snr_from_spectrum(&alphas, &eig.values)?;
    let per_mode_contrib = alphas
        .iter()
        .zip(&eig.values)
        .map(|(&a, &l)| if l > T::zero() { (a * a / l).as_f64() } else { 0.0 })
        .collect();
    Ok(EigenReport {
        eigenvalues: eig.values.iter().map(|x| x.as_f64()).collect(),
        eigenvectors: eig.vectors.iter().map(|u| u.iter().map(|x| x.as_f64()).collect()).collect(),
        alphas: alphas.iter().map(|x| x.as_f64()).collect(),
        snr: snr.as_f64(),
        per_mode_contrib,
    })
}

/// Mean-difference image of two equal-size ROI sets and its center row.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaImage<T> {
    pub size: usize,
    pub pixels: Vec<T>,
    pub profile: Vec<T>,
}

pub fn delta_mean_image<T: Real>(present: &[&[T]], absent: &[&[T]], size: usize) -> Result<DeltaImage<T>> {
    if present.is_empty() || absent.is_empty() {
        return Err(Error::Parameter("both ROI sets must be non-empty".into()));
    }
    let n = size * size;
    if present.iter().chain(absent).any(|r| r.len() != n) {
        return Err(Error::Parameter(format!("ROIs must all be {size}x{size}")));
    }
    let mean = |set: &[&[T]]| -> Vec<T> {
        let mut m = vec![T::zero(); n];
        for r in set {
            m.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += *b);
        }
        let c = T::from_usize_lossy(set.len());
        m.iter_mut().for_each(|a| *a /= c);
        m
    };
    let (mp, ma) = (mean(present), mean(absent));
    let pixels: Vec<T> = mp.iter().zip(&ma).map(|(p, a)| *p - *a).collect();
    let row = size / 2;
    let profile = pixels[row * size..(row + 1) * size].to_vec();
    Ok(DeltaImage { size, pixels, profile })
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}
