//! Ensemble statistics: conditional covariance, polar decomposition and the
//! classical benchmarks.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};

use crate::error::{Error, Result};

/// Largest accepted condition number of `Γ_{F1}`.
pub const MAX_CONDITION: f64 = 1e12;

/// Conditional covariance of the confirming estimate given the predictive one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCovariance {
    pub gamma_f1: Matrix2<f64>,
    pub gamma_f2: Matrix2<f64>,
    /// `Γ_{F2F1} = cov(F₂, F₁)`.
    pub gamma_21: Matrix2<f64>,
    /// `Γ_{F2|F1} = Γ_{F2} − Γ_{F2F1}Γ_{F1}⁻¹Γ_{F1F2}`.
    pub gamma_cond: Matrix2<f64>,
    /// Best linear predictor `A = Γ_{F2F1}Γ_{F1}⁻¹`.
    pub a: Matrix2<f64>,
    /// `𝓕ᵢ = f2ᵢ − A·f1ᵢ` per repetition.
    pub residuals: Vec<Vector2<f64>>,
    pub mean_f1: Vector2<f64>,
    pub mean_f2: Vector2<f64>,
}

/// Joint sample covariance (1/(n−1)) of stacked `(f1, f2)` vectors.
pub fn joint_covariance(f1: &[Vector2<f64>], f2: &[Vector2<f64>]) -> (Matrix4<f64>, Vector4<f64>) {
    let n = f1.len() as f64;
    let mut mean = Vector4::zeros();
    for (a, b) in f1.iter().zip(f2) {
        mean += Vector4::new(a[0], a[1], b[0], b[1]);
    }
    mean /= n;
    let mut cov = Matrix4::zeros();
    for (a, b) in f1.iter().zip(f2) {
        let d = Vector4::new(a[0], a[1], b[0], b[1]) - mean;
        cov += d * d.transpose();
    }
    (cov / (n - 1.0), mean)
}

/// Schur complement of the predictive block and the best linear predictor.
pub fn conditional_covariance(
    f1: &[Vector2<f64>],
    f2: &[Vector2<f64>],
) -> Result<ConditionalCovariance> {
    if f1.len() != f2.len() {
        return Err(Error::Domain(format!(
            "f1 ({}) and f2 ({}) differ in length",
            f1.len(),
            f2.len()
        )));
    }
    if f1.len() < 3 {
        return Err(Error::Domain(
            "conditional covariance needs >= 3 samples".into(),
        ));
    }
    let (cov, mean) = joint_covariance(f1, f2);
    let g1: Matrix2<f64> = cov.fixed_view::<2, 2>(0, 0).into_owned();
    let g2: Matrix2<f64> = cov.fixed_view::<2, 2>(2, 2).into_owned();
    let g21: Matrix2<f64> = cov.fixed_view::<2, 2>(2, 0).into_owned();

    let eig = SymmetricEigen::new(g1).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Conditioning(format!(
            "predictive covariance eigenvalues {lo:.3e}, {hi:.3e}"
        )));
    }
    let inv = g1
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("predictive covariance is singular".into()))?;
    let a = g21 * inv;
    let cond = g2 - a * g21.transpose();
    let gamma_cond = (cond + cond.transpose()) * 0.5;
    let residuals = f1.iter().zip(f2).map(|(x, y)| y - a * x).collect();
    Ok(ConditionalCovariance {
        gamma_f1: g1,
        gamma_f2: g2,
        gamma_21: g21,
        gamma_cond,
        a,
        residuals,
        mean_f1: Vector2::new(mean[0], mean[1]),
        mean_f2: Vector2::new(mean[2], mean[3]),
    })
}

/// Variances along the radial and azimuthal directions of the mean spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarStats {
    pub var_rho: f64,
    pub var_psi: f64,
    /// Azimuth with `(Fy, Fz) = ρ(−sin ψ, cos ψ)`.
    pub psi: f64,
}

/// Radial unit vector `ρ̂ = (−sin ψ, cos ψ)`.
pub fn rho_hat(psi: f64) -> Vector2<f64> {
    Vector2::new(-psi.sin(), psi.cos())
}

/// Azimuthal unit vector `ψ̂ = (−cos ψ, −sin ψ)`.
pub fn psi_hat(psi: f64) -> Vector2<f64> {
    Vector2::new(-psi.cos(), -psi.sin())
}

/// Project `gamma` onto the polar frame of `mean_f`.
pub fn polar_decompose(gamma: &Matrix2<f64>, mean_f: &Vector2<f64>) -> Result<PolarStats> {
    if mean_f.norm() == 0.0 || !mean_f.iter().all(|x| x.is_finite()) {
        return Err(Error::DirectionUndefined);
    }
    let psi = (-mean_f[0]).atan2(mean_f[1]);
    let r = rho_hat(psi);
    let p = psi_hat(psi);
    Ok(PolarStats {
        var_rho: (r.transpose() * gamma * r)[0],
        var_psi: (p.transpose() * gamma * p)[0],
        psi,
    })
}

/// Classical reference variances at one estimation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmarks {
    /// Standard quantum limit `⟨Fρ⟩/2`.
    pub sql: f64,
    /// Poissonian number variance `⟨N_A⟩`.
    pub poisson: f64,
}

/// Benchmarks from the mean spin length and surviving atom number.
pub fn benchmarks(mean_spin_length: f64, mean_atoms: f64) -> Benchmarks {
    Benchmarks {
        sql: mean_spin_length / 2.0,
        poisson: mean_atoms,
    }
}

/// `10·log10(benchmark / var)`: positive means below the benchmark.
pub fn db_below(benchmark: f64, var: f64) -> f64 {
    10.0 * (benchmark / var).log10()
}
