//! Closed-form eigendecomposition of 2×2 symmetric positive-definite matrices,
//! the matrix square root and inverse square root built from it, and the
//! Jacobians from the eigen factors back to the matrix entries.
//!
//! For `m = [[a, b], [b, c]]` the decomposition is `m = Q·diag(λ₁, λ₂)·Qᵀ` with
//!
//! ```text
//! λ₁,₂ = ((a + c) ± √((a − c)² + 4b²)) / 2,   θ = ½·atan2(2b, a − c),
//! Q = [[cos θ, −sin θ], [sin θ, cos θ]].
//! ```
//!
//! `θ ∈ (−π/2, π/2]`, so the first eigenvector always has a non-negative x component
//! (and a non-negative y component when x is zero).

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

/// Symmetric matrix `[[a, b], [b, c]]`. Also used for gradients `(∂L/∂a, ∂L/∂b, ∂L/∂c)`,
/// where `b` is the single shared off-diagonal parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SymMat2 {
    pub const ZERO: SymMat2 = SymMat2 { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Symmetric part of `m`.
    pub fn from_matrix(m: &Matrix2<f64>) -> Self {
        Self { a: m[(0, 0)], b: 0.5 * (m[(0, 1)] + m[(1, 0)]), c: m[(1, 1)] }
    }

    pub fn to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, self.b, self.b, self.c)
    }

    /// Gradient `(∂L/∂a, ∂L/∂b, ∂L/∂c)` viewed as `∂L/∂M` over the four entries of a
    /// symmetric matrix (the off-diagonal gradient is split evenly).
    pub fn grad_to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, 0.5 * self.b, 0.5 * self.b, self.c)
    }

    /// Inverse of [`grad_to_matrix`](Self::grad_to_matrix): collapses `∂L/∂M` onto `(a, b, c)`.
    pub fn grad_from_matrix(g: &Matrix2<f64>) -> Self {
        Self { a: g[(0, 0)], b: g[(0, 1)] + g[(1, 0)], c: g[(1, 1)] }
    }

    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> f64 {
        self.a + self.c
    }

    pub fn is_spd(&self) -> bool {
        self.a > 0.0 && self.c > 0.0 && self.det() > 0.0
    }

    pub fn inverse(&self) -> Option<SymMat2> {
        let det = self.det();
        (det != 0.0).then(|| SymMat2::new(self.c / det, -self.b / det, self.a / det))
    }

    /// `dᵀ·m·d`.
    #[inline]
    pub fn quad(&self, d: &Vector2<f64>) -> f64 {
        self.a * d.x * d.x + 2.0 * self.b * d.x * d.y + self.c * d.y * d.y
    }

    pub fn frobenius(&self) -> f64 {
        (self.a * self.a + 2.0 * self.b * self.b + self.c * self.c).sqrt()
    }
}

impl std::ops::Add for SymMat2 {
    type Output = SymMat2;
    fn add(self, o: SymMat2) -> SymMat2 {
        SymMat2::new(self.a + o.a, self.b + o.b, self.c + o.c)
    }
}

impl std::ops::AddAssign for SymMat2 {
    fn add_assign(&mut self, o: SymMat2) {
        self.a += o.a;
        self.b += o.b;
        self.c += o.c;
    }
}

impl std::ops::Mul<f64> for SymMat2 {
    type Output = SymMat2;
    fn mul(self, s: f64) -> SymMat2 {
        SymMat2::new(self.a * s, self.b * s, self.c * s)
    }
}

/// Relative gap below which the eigenbasis is treated as arbitrary.
pub const DEGENERATE_GAP: f64 = 1e-18;
/// Smallest eigenvalue accepted before taking powers.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenDecomp2 {
    /// Eigenvectors as columns; a proper rotation.
    pub q: Matrix2<f64>,
    /// Eigenvalues, `s[0] ≥ s[1] > 0`.
    pub s: Vector2<f64>,
    pub theta: f64,
    /// Set when `(a − c)² + 4b² < 1e-18·(a + c)²`; `Q` is then the identity.
    pub degenerate: bool,
    pub source: SymMat2,
}

impl EigenDecomp2 {
    pub fn reconstruct(&self) -> Matrix2<f64> {
        self.q * Matrix2::from_diagonal(&self.s) * self.q.transpose()
    }
}

pub fn eigendecompose(m: &SymMat2) -> Result<EigenDecomp2> {
    if !(m.a.is_finite() && m.b.is_finite() && m.c.is_finite()) || !m.is_spd() {
        return Err(Error::Domain(format!("matrix [[{}, {}], [{}, {}]] is not SPD", m.a, m.b, m.b, m.c)));
    }
    let diff = m.a - m.c;
    let r2 = diff * diff + 4.0 * m.b * m.b;
    let tr = m.trace();
    let root = r2.sqrt();
    let l1 = 0.5 * (tr + root);
    // Product form keeps the small eigenvalue accurate for ill-conditioned inputs.
    let l2 = m.det() / l1;
    let degenerate = r2 < DEGENERATE_GAP * tr * tr;
    // `+ 0.0` maps -0.0 to +0.0 so atan2 never returns -π.
    let theta = if degenerate { 0.0 } else { 0.5 * (2.0 * m.b + 0.0).atan2(diff) };
    let (sn, cs) = theta.sin_cos();
    Ok(EigenDecomp2 {
        q: Matrix2::new(cs, -sn, sn, cs),
        s: Vector2::new(l1, l2),
        theta,
        degenerate,
        source: *m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfPower {
    /// `s = +1/2`
    Sqrt,
    /// `s = −1/2`
    InvSqrt,
}

impl HalfPower {
    pub fn exponent(self) -> f64 {
        match self {
            HalfPower::Sqrt => 0.5,
            HalfPower::InvSqrt => -0.5,
        }
    }
}

/// `Q·diag(Sˢ)·Qᵀ` together with the diagonal it was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatPowHalf {
    pub m: Matrix2<f64>,
    pub s_pow: Vector2<f64>,
    pub power: HalfPower,
}

pub fn mat_pow_half(d: &EigenDecomp2, power: HalfPower) -> Result<MatPowHalf> {
    if d.s[1] < EIGEN_FLOOR {
        return Err(Error::DegenerateCovariance(d.s[1]));
    }
    let e = power.exponent();
    let s_pow = d.s.map(|l| l.max(EIGEN_FLOOR).powf(e));
    let m = d.q * Matrix2::from_diagonal(&s_pow) * d.q.transpose();
    // Exact symmetry.
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Ok(MatPowHalf { m: Matrix2::new(m[(0, 0)], off, off, m[(1, 1)]), s_pow, power })
}

/// Pulls gradients with respect to the eigenvector matrix `Q` and the powered
/// eigenvalue matrix `diag(Sˢ)` back to the entries `(a, b, c)` of the decomposed matrix.
///
/// The eigenvalue path uses `∂λₖ/∂m = vₖvₖᵀ` with the inner derivative `s·λˢ⁻¹`; the
/// eigenvector path differentiates the closed-form angle `θ`. At a degenerate gap the
/// eigenvector path is dropped and the off-diagonal entries of `dl_dspow` (which equal
/// `QᵀAQ` when the upstream is a matrix function) carry the divided-difference limit
/// `s·λˢ⁻¹` instead, giving the total derivative of `m ↦ mˢ`.
pub fn backprop_eigen(dl_dq: &Matrix2<f64>, dl_dspow: &Matrix2<f64>, d: &EigenDecomp2, power: HalfPower) -> SymMat2 {
    let e = power.exponent();
    let lam = d.s.map(|l| l.max(EIGEN_FLOOR));
    let inner = lam.map(|l| e * l.powf(e - 1.0));
    let dl1 = dl_dspow[(0, 0)] * inner[0];
    let dl2 = dl_dspow[(1, 1)] * inner[1];
    let (v1, v2) = (d.q.column(0), d.q.column(1));
    let mut g = SymMat2::new(
        dl1 * v1[0] * v1[0] + dl2 * v2[0] * v2[0],
        2.0 * (dl1 * v1[0] * v1[1] + dl2 * v2[0] * v2[1]),
        dl1 * v1[1] * v1[1] + dl2 * v2[1] * v2[1],
    );
    let SymMat2 { a, b, c } = d.source;
    if d.degenerate {
        g.b += inner[0] * (dl_dspow[(0, 1)] + dl_dspow[(1, 0)]);
    } else {
        let (sn, cs) = d.theta.sin_cos();
        let dq_dtheta = Matrix2::new(-sn, -cs, cs, -sn);
        let dl_dtheta = dl_dq.component_mul(&dq_dtheta).sum();
        let r2 = (a - c) * (a - c) + 4.0 * b * b;
        g.a -= dl_dtheta * b / r2;
        g.b += dl_dtheta * (a - c) / r2;
        g.c += dl_dtheta * b / r2;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_diagonal() {
        let d = eigendecompose(&SymMat2::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(d.q, Matrix2::identity());
        assert_eq!(d.s, Vector2::new(1.0, 1.0));
        let d = eigendecompose(&SymMat2::new(4.0, 0.0, 1.0)).unwrap();
        assert_eq!(d.q, Matrix2::identity());
        assert_eq!(d.s, Vector2::new(4.0, 1.0));
    }

    #[test]
    fn column_sign_convention_on_vertical_major_axis() {
        let d = eigendecompose(&SymMat2::new(1.0, 0.0, 4.0)).unwrap();
        assert_eq!(d.s, Vector2::new(4.0, 1.0));
        assert!(d.q[(0, 0)].abs() < 1e-15 && d.q[(1, 0)] == 1.0);
        let d = eigendecompose(&SymMat2::new(1.0, -0.0, 4.0)).unwrap();
        assert!(d.q[(1, 0)] == 1.0);
    }

    #[test]
    fn non_spd_is_a_domain_error() {
        assert!(matches!(eigendecompose(&SymMat2::new(1.0, 2.0, 1.0)), Err(Error::Domain(_))));
        assert!(matches!(eigendecompose(&SymMat2::new(-1.0, 0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn diagonal_powers() {
        let d = eigendecompose(&SymMat2::new(4.0, 0.0, 1.0)).unwrap();
        assert_eq!(mat_pow_half(&d, HalfPower::Sqrt).unwrap().m, Matrix2::new(2.0, 0.0, 0.0, 1.0));
        assert_eq!(mat_pow_half(&d, HalfPower::InvSqrt).unwrap().m, Matrix2::new(0.5, 0.0, 0.0, 1.0));
        let id = eigendecompose(&SymMat2::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(mat_pow_half(&id, HalfPower::Sqrt).unwrap().m, Matrix2::identity());
    }

    #[test]
    fn collapsed_eigenvalue_is_degenerate() {
        let d = eigendecompose(&SymMat2::new(1.0, 0.0, 1e-14)).unwrap();
        assert!(matches!(mat_pow_half(&d, HalfPower::InvSqrt), Err(Error::DegenerateCovariance(_))));
    }

    #[test]
    fn eigenvalue_path_on_diagonal_matrix() {
        let d = eigendecompose(&SymMat2::new(4.0, 0.0, 1.0)).unwrap();
        let g = backprop_eigen(&Matrix2::zeros(), &Matrix2::identity(), &d, HalfPower::Sqrt);
        assert_eq!(g, SymMat2::new(0.25, 0.0, 0.5));
        let z = backprop_eigen(&Matrix2::zeros(), &Matrix2::zeros(), &d, HalfPower::InvSqrt);
        assert_eq!(z, SymMat2::ZERO);
    }

    #[test]
    fn degenerate_gap_gives_total_derivative_of_matrix_function() {
        // L = <A, m^{1/2}> at m = 4I; dm^{1/2} = dm / (2·2).
        let m = SymMat2::new(4.0, 0.0, 4.0);
        let d = eigendecompose(&m).unwrap();
        assert!(d.degenerate);
        let a = Matrix2::new(0.3, -0.7, 0.2, 1.1);
        let p = mat_pow_half(&d, HalfPower::Sqrt).unwrap();
        let dl_dq = (a + a.transpose()) * d.q * Matrix2::from_diagonal(&p.s_pow);
        let dl_ds = d.q.transpose() * a * d.q;
        let g = backprop_eigen(&dl_dq, &dl_ds, &d, HalfPower::Sqrt);
        assert!((g.a - 0.3 / 4.0).abs() < 1e-15);
        assert!((g.b - (-0.7 + 0.2) / 4.0).abs() < 1e-15);
        assert!((g.c - 1.1 / 4.0).abs() < 1e-15);
    }

    fn spd() -> impl Strategy<Value = SymMat2> {
        (0.05f64..5.0, 0.05f64..5.0, -1.5f64..1.5).prop_map(|(l1, l2, th)| {
            let (s, c) = th.sin_cos();
            let q = Matrix2::new(c, -s, s, c);
            SymMat2::from_matrix(&(q * Matrix2::from_diagonal(&Vector2::new(l1, l2)) * q.transpose()))
        })
    }

    proptest! {
        #[test]
        fn reconstruction_and_orthogonality(m in spd()) {
            let d = eigendecompose(&m).unwrap();
            let err = (d.reconstruct() - m.to_matrix()).norm() / m.to_matrix().norm();
            prop_assert!(err <= 1e-12);
            prop_assert!((d.q.transpose() * d.q - Matrix2::identity()).abs().max() <= 1e-12);
            prop_assert!((d.q.determinant() - 1.0).abs() <= 1e-12);
            prop_assert!(d.s[0] >= d.s[1]);
        }

        #[test]
        fn sqrt_then_inverse_sqrt_composes_to_identity(m in spd()) {
            let d = eigendecompose(&m).unwrap();
            let b = mat_pow_half(&d, HalfPower::Sqrt).unwrap();
            prop_assert!((b.m * b.m - m.to_matrix()).abs().max() <= 1e-10 * m.frobenius().max(1.0));
            let inv = mat_pow_half(&d, HalfPower::InvSqrt).unwrap();
            prop_assert!((inv.m * b.m - Matrix2::identity()).abs().max() <= 1e-10);
        }
    }
}
