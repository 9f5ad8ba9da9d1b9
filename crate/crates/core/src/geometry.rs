//! 2x2 covariance geometry: ellipse parameterization, SPD metrics, circle
//! arithmetic and temporally weighted blob moments.
//!
//! Semi-axes are standard deviations: `Σ = R(θ) diag(λ1², λ2²) R(θ)ᵀ`.

use thiserror::Error;

use crate::events::Event;
use crate::scalar::{lit, Real};

/// Covariance floor standard deviation, pixels.
pub const DEFAULT_SIGMA_MIN: f64 = 0.5;
/// Default temporal decay rate, 1/s.
pub const DEFAULT_BETA: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdViolation {
    NonFinite,
    FirstDiagonal,
    SecondDiagonal,
    Determinant,
}

impl std::fmt::Display for SpdViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpdViolation::NonFinite => "entries must be finite",
            SpdViolation::FirstDiagonal => "a > 0",
            SpdViolation::SecondDiagonal => "c > 0",
            SpdViolation::Determinant => "a*c - b^2 > 0",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix not positive definite: violates {0}")]
    NotPositiveDefinite(SpdViolation),
    #[error("invalid ellipse: {0}")]
    InvalidEllipse(&'static str),
    #[error("non-finite angle")]
    NonFiniteAngle,
    #[error("no events to summarize")]
    Empty,
    #[error("event at t={event_us}us is after the reference time {t_k_us}us")]
    FutureEvent { event_us: u64, t_k_us: u64 },
}

/// Ellipse with `lambda1 >= lambda2 > 0` and `theta` in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub theta: T,
}

impl<T: Real> Ellipse<T> {
    /// Validates axis order and positivity; orientation is folded into the
    /// canonical range.
    pub fn new(lambda1: T, lambda2: T, theta: T) -> Result<Self, GeometryError> {
        if !(lambda1.is_finite() && lambda2.is_finite() && theta.is_finite()) {
            return Err(GeometryError::InvalidEllipse("non-finite field"));
        }
        if lambda2 <= T::zero() {
            return Err(GeometryError::InvalidEllipse("axes must be positive"));
        }
        if lambda1 < lambda2 {
            return Err(GeometryError::InvalidEllipse("lambda1 < lambda2"));
        }
        Ok(Self {
            lambda1,
            lambda2,
            theta: canonical_orientation(theta),
        })
    }

    /// Accepts axes in either order, swapping and rotating by π/2 if needed.
    pub fn from_axes(a: T, b: T, theta: T) -> Result<Self, GeometryError> {
        if a >= b {
            Self::new(a, b, theta)
        } else {
            Self::new(b, a, theta + T::FRAC_PI_2())
        }
    }

    pub fn circle(radius: T) -> Result<Self, GeometryError> {
        Self::new(radius, radius, T::zero())
    }

    pub fn cov(&self) -> Spd2<T> {
        cov_from_ellipse(self)
    }
}

/// Symmetric 2x2 matrix `[[a, b], [b, c]]`, positive definite when built via
/// [`Spd2::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spd2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Spd2<T> {
    pub fn new(a: T, b: T, c: T) -> Result<Self, GeometryError> {
        let s = Self { a, b, c };
        s.validate()?;
        Ok(s)
    }

    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
            c: T::one(),
        }
    }

    pub fn diag(a: T, c: T) -> Result<Self, GeometryError> {
        Self::new(a, T::zero(), c)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let Self { a, b, c } = *self;
        let v = if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            SpdViolation::NonFinite
        } else if a <= T::zero() {
            SpdViolation::FirstDiagonal
        } else if c <= T::zero() {
            SpdViolation::SecondDiagonal
        } else if a * c - b * b <= T::zero() {
            SpdViolation::Determinant
        } else {
            return Ok(());
        };
        Err(GeometryError::NotPositiveDefinite(v))
    }

    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> T {
        self.a + self.c
    }

    /// Eigenvalues, larger first, by the closed form for symmetric 2x2.
    pub fn eigenvalues(&self) -> (T, T) {
        let two = lit::<T>(2.0);
        let m = (self.a + self.c) / two;
        let h = (self.a - self.c) / two;
        let d = (h * h + self.b * self.b).sqrt();
        let e1 = m + d;
        // det / e1 avoids cancellation for strongly anisotropic matrices
        let e2 = if e1 > T::zero() { self.det() / e1 } else { m - d };
        (e1, e2)
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        Some(Self {
            a: self.c / det,
            b: -self.b / det,
            c: self.a / det,
        })
    }

    /// `vᵀ Σ⁻¹ v` for `v = (dx, dy)`.
    pub fn mahalanobis_sq(&self, dx: T, dy: T) -> T {
        let det = self.det();
        (self.c * dx * dx - lit::<T>(2.0) * self.b * dx * dy + self.a * dy * dy) / det
    }

    /// Congruence `Aᵀ Σ A` for a row-major 2x2 `A`.
    pub fn congruence(&self, m: [[T; 2]; 2]) -> Self {
        let s = [[self.a, self.b], [self.b, self.c]];
        let mut out = [[T::zero(); 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..2 {
                    for l in 0..2 {
                        acc += m[k][i] * s[k][l] * m[l][j];
                    }
                }
                *o = acc;
            }
        }
        Self {
            a: out[0][0],
            b: (out[0][1] + out[1][0]) / lit(2.0),
            c: out[1][1],
        }
    }

    pub fn add_isotropic(&self, v: T) -> Self {
        Self {
            a: self.a + v,
            b: self.b,
            c: self.c + v,
        }
    }

    pub fn frobenius_dist(&self, o: &Self) -> T {
        let da = self.a - o.a;
        let db = self.b - o.b;
        let dc = self.c - o.c;
        (da * da + lit::<T>(2.0) * db * db + dc * dc).sqrt()
    }
}

/// `R(θ) diag(λ1², λ2²) R(θ)ᵀ` for arbitrary (not necessarily canonical) axes.
pub fn cov_from_axes<T: Real>(lambda1: T, lambda2: T, theta: T) -> Spd2<T> {
    let (s, c) = theta.sin_cos();
    let l1 = lambda1 * lambda1;
    let l2 = lambda2 * lambda2;
    Spd2 {
        a: c * c * l1 + s * s * l2,
        b: c * s * (l1 - l2),
        c: s * s * l1 + c * c * l2,
    }
}

pub fn cov_from_ellipse<T: Real>(e: &Ellipse<T>) -> Spd2<T> {
    cov_from_axes(e.lambda1, e.lambda2, e.theta)
}

/// Closed-form eigendecomposition. Circles get `theta = 0`.
pub fn ellipse_from_cov<T: Real>(s: &Spd2<T>) -> Result<Ellipse<T>, GeometryError> {
    s.validate()?;
    let (e1, e2) = s.eigenvalues();
    let h = (s.a - s.c) / lit(2.0);
    let theta = if h == T::zero() && s.b == T::zero() {
        T::zero()
    } else {
        s.b.atan2(h) / lit(2.0)
    };
    Ok(Ellipse {
        lambda1: e1.sqrt(),
        lambda2: e2.sqrt(),
        theta: canonical_orientation(theta),
    })
}

/// Geodesic distance under the affine-invariant metric,
/// `‖log(s1^{-1/2} s2 s1^{-1/2})‖_F`.
///
/// Uses the eigenvalues of the pencil `det(s2 - μ s1) = 0`, which equal those
/// of `s1^{-1/2} s2 s1^{-1/2}`.
pub fn affine_distance<T: Real>(s1: &Spd2<T>, s2: &Spd2<T>) -> Result<T, GeometryError> {
    s1.validate()?;
    s2.validate()?;
    let d1 = s1.det();
    let d2 = s2.det();
    let b = s1.a * s2.c + s1.c * s2.a - lit::<T>(2.0) * s1.b * s2.b;
    let disc = (b * b - lit::<T>(4.0) * d1 * d2).max(T::zero());
    let mu1 = (b + disc.sqrt()) / (lit::<T>(2.0) * d1);
    let mu2 = d2 / (d1 * mu1);
    let (l1, l2) = (mu1.ln(), mu2.ln());
    Ok((l1 * l1 + l2 * l2).sqrt())
}

/// Log-axis coordinates on ℝ × ℝ × S¹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductCoords<T> {
    pub mu1: T,
    pub mu2: T,
    pub theta: T,
}

impl<T: Real> ProductCoords<T> {
    pub fn to_ellipse(&self) -> Result<Ellipse<T>, GeometryError> {
        Ellipse::from_axes(self.mu1.exp(), self.mu2.exp(), self.theta)
    }
}

pub fn product_coords<T: Real>(e: &Ellipse<T>) -> ProductCoords<T> {
    ProductCoords {
        mu1: e.lambda1.ln(),
        mu2: e.lambda2.ln(),
        theta: e.theta,
    }
}

/// Unweighted product metric `sqrt(dμ1² + dμ2² + dθ²)`, θ taken mod π.
pub fn product_distance<T: Real>(a: &Ellipse<T>, b: &Ellipse<T>) -> T {
    let (pa, pb) = (product_coords(a), product_coords(b));
    let d1 = pb.mu1 - pa.mu1;
    let d2 = pb.mu2 - pa.mu2;
    let dt = angle_diff_pi_periodic(pb.theta, pa.theta);
    (d1 * d1 + d2 * d2 + dt * dt).sqrt()
}

/// Line element of the affine-invariant metric at `base` in log-axis
/// coordinates: `4dμ1² + 4dμ2² + 2((λ1²-λ2²)/(λ1λ2))² dθ²`, square-rooted.
///
/// The coefficients are frozen at `base`; this is the product metric with
/// constant per-factor scalings.
pub fn coupled_metric_distance<T: Real>(base: &Ellipse<T>, delta: &ProductCoords<T>) -> T {
    let l1 = base.lambda1;
    let l2 = base.lambda2;
    let ecc = (l1 * l1 - l2 * l2) / (l1 * l2);
    let four = lit::<T>(4.0);
    (four * delta.mu1 * delta.mu1
        + four * delta.mu2 * delta.mu2
        + lit::<T>(2.0) * ecc * ecc * delta.theta * delta.theta)
        .sqrt()
}

fn floor_mod<T: Real>(x: T, period: T) -> T {
    x - period * (x / period).floor()
}

/// Wraps into `[-π, π)`.
pub fn wrap_angle<T: Real>(theta: T) -> Result<T, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFiniteAngle);
    }
    Ok(wrap_angle_unchecked(theta))
}

#[inline]
pub(crate) fn wrap_angle_unchecked<T: Real>(theta: T) -> T {
    let pi = T::PI();
    if theta >= -pi && theta < pi {
        return theta;
    }
    let r = floor_mod(theta + pi, T::TAU()) - pi;
    if r >= pi {
        -pi
    } else {
        r
    }
}

/// Folds an orientation into `[-π/2, π/2)`.
pub fn canonical_orientation<T: Real>(theta: T) -> T {
    let h = T::FRAC_PI_2();
    if theta >= -h && theta < h {
        return theta;
    }
    let r = floor_mod(theta + h, T::PI()) - h;
    if r >= h {
        -h
    } else {
        r
    }
}

/// Smallest `d` with `a ≡ b + d (mod π)`, in `[-π/2, π/2)`.
pub fn angle_diff_pi_periodic<T: Real>(a: T, b: T) -> T {
    canonical_orientation(a - b)
}

/// Smallest `d` with `a ≡ b + d (mod 2π)`, in `[-π, π)`.
pub fn angle_diff<T: Real>(a: T, b: T) -> T {
    wrap_angle_unchecked(a - b)
}

/// Temporally weighted blob moments over one packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedStats<T> {
    pub mean: [T; 2],
    /// Normalized-weight covariance after the floor.
    pub cov: Spd2<T>,
    /// Sum of the raw (unnormalized) weights.
    pub weight_sum: T,
    pub count: usize,
    /// Weighted mean of `t_k - t_j`, seconds.
    pub mean_age: T,
}

/// Single-pass accumulator for [`WeightedStats`].
///
/// Weights `exp(-β (t_k - t_j))` are normalized at the end, so the mean is a
/// convex combination of event positions. Moments are taken about the first
/// pushed event, which keeps the raw sums well conditioned for pixel
/// coordinates.
#[derive(Debug, Clone)]
pub struct BlobAccumulator<T> {
    t_k: u64,
    beta: T,
    origin: Option<[T; 2]>,
    s0: T,
    sx: T,
    sy: T,
    sxx: T,
    sxy: T,
    syy: T,
    s_age: T,
    count: usize,
    // exp(-beta * age) for age = hi * 64 + lo µs, filled on first use
    lo: [T; 64],
    hi: [T; 64],
}

impl<T: Real> BlobAccumulator<T> {
    pub fn new(t_k: u64, beta: T) -> Self {
        let unset = -T::one();
        Self {
            t_k,
            beta,
            origin: None,
            s0: T::zero(),
            sx: T::zero(),
            sy: T::zero(),
            sxx: T::zero(),
            sxy: T::zero(),
            syy: T::zero(),
            s_age: T::zero(),
            count: 0,
            lo: [unset; 64],
            hi: [unset; 64],
        }
    }

    fn weight(&mut self, age_us: u64) -> T {
        let scale = lit::<T>(1e-6);
        if age_us >= 64 * 64 {
            return (-self.beta * lit::<T>(age_us as f64) * scale).exp();
        }
        let (h, l) = ((age_us >> 6) as usize, (age_us & 63) as usize);
        if self.hi[h] < T::zero() {
            self.hi[h] = (-self.beta * lit::<T>((h << 6) as f64) * scale).exp();
        }
        if self.lo[l] < T::zero() {
            self.lo[l] = (-self.beta * lit::<T>(l as f64) * scale).exp();
        }
        self.hi[h] * self.lo[l]
    }

    pub fn push(&mut self, t: u64, x: T, y: T) -> Result<(), GeometryError> {
        if t > self.t_k {
            return Err(GeometryError::FutureEvent {
                event_us: t,
                t_k_us: self.t_k,
            });
        }
        let age_us = self.t_k - t;
        let w = self.weight(age_us);
        // moments about the first event keep the sums small
        let o = *self.origin.get_or_insert([x, y]);
        let (dx, dy) = (x - o[0], y - o[1]);
        self.count += 1;
        self.s0 += w;
        self.sx += w * dx;
        self.sy += w * dy;
        self.sxx += w * dx * dx;
        self.sxy += w * dx * dy;
        self.syy += w * dy * dy;
        self.s_age += w * lit::<T>(age_us as f64);
        Ok(())
    }

    pub fn push_event(&mut self, e: &Event) -> Result<(), GeometryError> {
        self.push(e.t, lit(e.x as f64), lit(e.y as f64))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Normalized moments with `sigma_min²·I` added when the smallest
    /// eigenvalue is below `sigma_min²`.
    pub fn finish(&self, sigma_min: T) -> Result<WeightedStats<T>, GeometryError> {
        let Some(o) = self.origin else {
            return Err(GeometryError::Empty);
        };
        if self.s0 <= T::zero() {
            return Err(GeometryError::Empty);
        }
        let mx = self.sx / self.s0;
        let my = self.sy / self.s0;
        let raw = Spd2 {
            a: (self.sxx / self.s0 - mx * mx).max(T::zero()),
            b: self.sxy / self.s0 - mx * my,
            c: (self.syy / self.s0 - my * my).max(T::zero()),
        };
        Ok(WeightedStats {
            mean: [o[0] + mx, o[1] + my],
            cov: floor_cov(raw, sigma_min),
            weight_sum: self.s0,
            count: self.count,
            mean_age: self.s_age / self.s0 * lit::<T>(1e-6),
        })
    }
}

/// Adds `sigma_min²·I` when the smallest eigenvalue falls below `sigma_min²`.
pub fn floor_cov<T: Real>(raw: Spd2<T>, sigma_min: T) -> Spd2<T> {
    let floor = sigma_min * sigma_min;
    let (_, e2) = raw.eigenvalues();
    if e2 < floor || !e2.is_finite() {
        raw.add_isotropic(floor)
    } else {
        raw
    }
}

/// Temporally weighted mean and covariance of `events` as seen at `t_k`.
pub fn weighted_blob_stats<T: Real>(
    events: &[Event],
    t_k: u64,
    beta: T,
    sigma_min: T,
) -> Result<WeightedStats<T>, GeometryError> {
    if events.is_empty() {
        return Err(GeometryError::Empty);
    }
    let mut acc = BlobAccumulator::new(t_k, beta);
    for e in events {
        acc.push_event(e)?;
    }
    acc.finish(sigma_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix2, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn mat(s: &Spd2<f64>) -> Matrix2<f64> {
        Matrix2::new(s.a, s.b, s.b, s.c)
    }

    /// R · diag(λ²) · Rᵀ as an explicit matrix product.
    fn oracle_cov(l1: f64, l2: f64, th: f64) -> Matrix2<f64> {
        let r = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        r * Matrix2::new(l1 * l1, 0.0, 0.0, l2 * l2) * r.transpose()
    }

    /// Eigen route: s1^{-1/2} s2 s1^{-1/2}, log of its eigenvalues.
    fn oracle_affine(s1: &Spd2<f64>, s2: &Spd2<f64>) -> f64 {
        let e = SymmetricEigen::new(mat(s1));
        let inv_sqrt = e.eigenvectors
            * Matrix2::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * e.eigenvectors.transpose();
        let m = inv_sqrt * mat(s2) * inv_sqrt;
        let m = (m + m.transpose()) * 0.5;
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .map(|v| v.ln().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn random_spd(rng: &mut impl Rng) -> Spd2<f64> {
        let e = Ellipse::from_axes(
            rng.random_range(0.2..20.0),
            rng.random_range(0.2..20.0),
            rng.random_range(-PI..PI),
        )
        .unwrap();
        e.cov()
    }

    #[test]
    fn cov_examples() {
        let iso = Ellipse::new(1.0, 1.0, 0.7).unwrap().cov();
        assert_abs_diff_eq!(iso.a, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(iso.b, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(iso.c, 1.0, epsilon = 1e-15);
        assert_eq!(
            Ellipse::new(2.0, 1.0, 0.0).unwrap().cov(),
            Spd2 { a: 4.0, b: 0.0, c: 1.0 }
        );
        let o = oracle_cov(2.0, 1.0, FRAC_PI_4);
        assert_abs_diff_eq!(o[(0, 0)], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(o[(0, 1)], 1.5, epsilon = 1e-12);
        let s = Ellipse::new(2.0, 1.0, FRAC_PI_4).unwrap().cov();
        assert_abs_diff_eq!(s.a, o[(0, 0)], epsilon = 1e-12);
        assert_abs_diff_eq!(s.b, o[(0, 1)], epsilon = 1e-12);
        assert_abs_diff_eq!(s.c, o[(1, 1)], epsilon = 1e-12);
    }

    #[test]
    fn eigen_examples() {
        let e = ellipse_from_cov(&Spd2::diag(4.0, 1.0).unwrap()).unwrap();
        assert_eq!((e.lambda1, e.lambda2, e.theta), (2.0, 1.0, 0.0));
        let e = ellipse_from_cov(&Spd2::<f64>::identity()).unwrap();
        assert_eq!((e.lambda1, e.lambda2, e.theta), (1.0, 1.0, 0.0));
        let e = ellipse_from_cov(&Spd2::new(2.5, 1.5, 2.5).unwrap()).unwrap();
        // closed-form oracle: eigenvalues 2.5 ± 1.5, eigenvector (1,1)/√2
        assert_abs_diff_eq!(e.lambda1, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.lambda2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.theta, FRAC_PI_4, epsilon = 1e-12);
        // major axis along y lands on the lower edge of the canonical range
        let e = ellipse_from_cov(&Spd2::diag(1.0, 4.0).unwrap()).unwrap();
        assert_abs_diff_eq!(e.theta, -FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn non_spd_reports_violation() {
        let bad = Spd2 { a: 1.0, b: 2.0, c: 1.0 };
        assert_eq!(
            ellipse_from_cov(&bad),
            Err(GeometryError::NotPositiveDefinite(SpdViolation::Determinant))
        );
        let bad = Spd2 {
            a: -1.0,
            b: 0.0,
            c: 1.0,
        };
        assert_eq!(
            affine_distance(&bad, &Spd2::identity()),
            Err(GeometryError::NotPositiveDefinite(SpdViolation::FirstDiagonal))
        );
        assert!(Spd2::new(1.0, 0.0, 0.0).is_err());
        assert!(Spd2::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn ellipse_validation() {
        assert!(Ellipse::new(1.0, 2.0, 0.0).is_err());
        assert!(Ellipse::new(1.0, 0.0, 0.0).is_err());
        let e = Ellipse::from_axes(1.0, 2.0, 0.0).unwrap();
        assert_eq!(e.lambda1, 2.0);
        assert_abs_diff_eq!(e.theta, -FRAC_PI_2, epsilon = 1e-15);
        let e = Ellipse::new(2.0, 1.0, PI).unwrap();
        assert_abs_diff_eq!(e.theta, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn affine_examples() {
        let i = Spd2::<f64>::identity();
        assert_eq!(affine_distance(&i, &i).unwrap(), 0.0);
        let e2 = 1f64.exp().powi(2);
        let d = affine_distance(&i, &Spd2::diag(e2, e2).unwrap()).unwrap();
        assert_abs_diff_eq!(d, 2.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn affine_matches_eigen_route_and_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s1 = random_spd(&mut rng);
            let s2 = random_spd(&mut rng);
            let d = affine_distance(&s1, &s2).unwrap();
            assert_abs_diff_eq!(d, oracle_affine(&s1, &s2), epsilon = 1e-9 * (1.0 + d));
            assert_abs_diff_eq!(d, affine_distance(&s2, &s1).unwrap(), epsilon = 1e-9);
            let a = loop {
                let m: [[f64; 2]; 2] = [
                    [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                ];
                if (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs() > 0.2 {
                    break m;
                }
            };
            let dc = affine_distance(&s1.congruence(a), &s2.congruence(a)).unwrap();
            assert_abs_diff_eq!(dc, d, epsilon = 1e-9 * (1.0 + d));
        }
    }

    #[test]
    fn product_coord_examples() {
        let p = product_coords(&Ellipse::new(1.0, 1.0, 0.0).unwrap());
        assert_eq!((p.mu1, p.mu2, p.theta), (0.0, 0.0, 0.0));
        let p = product_coords(&Ellipse::new(1f64.exp(), 1.0, 0.3).unwrap());
        assert_abs_diff_eq!(p.mu1, 1.0, epsilon = 1e-15);
        assert_eq!((p.mu2, p.theta), (0.0, 0.3));
    }

    #[test]
    fn angle_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI).unwrap(), -PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI - 0.1).unwrap(), PI - 0.1, epsilon = 1e-12);
        assert_eq!(wrap_angle(PI).unwrap(), -PI);
        assert!(wrap_angle(f64::INFINITY).is_err());
        assert!(wrap_angle(f64::NAN).is_err());

        assert_abs_diff_eq!(angle_diff_pi_periodic(0.1, 0.0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(
            angle_diff_pi_periodic(FRAC_PI_2 - 0.05, -FRAC_PI_2 + 0.05),
            -0.1,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(angle_diff_pi_periodic(0.4, 0.4 + PI), 0.0, epsilon = 1e-12);
    }

    fn ev(t: u64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::On)
    }

    /// Textbook two-pass definition: normalized weights, mean, then scatter.
    fn two_pass(events: &[Event], t_k: u64, beta: f64) -> ([f64; 2], [f64; 3], f64) {
        let w: Vec<f64> = events
            .iter()
            .map(|e| (-beta * (t_k - e.t) as f64 * 1e-6).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        let mut m = [0.0; 2];
        for (e, wi) in events.iter().zip(&w) {
            m[0] += wi / sum * e.x as f64;
            m[1] += wi / sum * e.y as f64;
        }
        let mut c = [0.0; 3];
        for (e, wi) in events.iter().zip(&w) {
            let dx = e.x as f64 - m[0];
            let dy = e.y as f64 - m[1];
            c[0] += wi / sum * dx * dx;
            c[1] += wi / sum * dx * dy;
            c[2] += wi / sum * dy * dy;
        }
        (m, c, sum)
    }

    #[test]
    fn zero_decay_is_sample_moments() {
        let evs = [ev(10, 0, 0), ev(10, 4, 0), ev(10, 4, 2), ev(10, 0, 2)];
        let s = weighted_blob_stats(&evs, 10, 500.0, 0.5).unwrap();
        assert_eq!(s.mean, [2.0, 1.0]);
        assert_abs_diff_eq!(s.cov.a, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov.b, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov.c, 1.0, epsilon = 1e-12);
        assert_eq!(s.weight_sum, 4.0);
        assert_eq!(s.mean_age, 0.0);
    }

    #[test]
    fn hand_computed_weights() {
        // β = ln 2: the older event has half the weight of the newer one.
        let t_k = 2_000_000;
        let evs = [ev(t_k - 1_000_000, 0, 0), ev(t_k, 10, 0)];
        let s = weighted_blob_stats(&evs, t_k, 2f64.ln(), 0.5).unwrap();
        assert_abs_diff_eq!(s.mean[0], 20.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.weight_sum, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_age, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_event_hits_floor() {
        let s = weighted_blob_stats(&[ev(5, 7, 9)], 5, 500.0, 0.5).unwrap();
        assert_eq!(s.mean, [7.0, 9.0]);
        assert_eq!(
            s.cov,
            Spd2 {
                a: 0.25,
                b: 0.0,
                c: 0.25
            }
        );
        let e = ellipse_from_cov(&s.cov).unwrap();
        assert_abs_diff_eq!(e.lambda1, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn collinear_events_are_regularized() {
        let evs: Vec<Event> = (0..10).map(|i| ev(100, i * 3, 5)).collect();
        let s = weighted_blob_stats(&evs, 100, 500.0, 0.5).unwrap();
        assert!(s.cov.validate().is_ok());
        assert_abs_diff_eq!(s.cov.c, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn stats_errors() {
        assert_eq!(
            weighted_blob_stats::<f64>(&[], 0, 500.0, 0.5),
            Err(GeometryError::Empty)
        );
        assert!(matches!(
            weighted_blob_stats::<f64>(&[ev(10, 0, 0)], 5, 500.0, 0.5),
            Err(GeometryError::FutureEvent { .. })
        ));
    }

    #[test]
    fn streaming_equals_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..200 {
            let n = if case == 0 { 10_000 } else { rng.random_range(2..400) };
            let mut evs: Vec<Event> = (0..n)
                .map(|_| {
                    ev(
                        rng.random_range(0..4000),
                        rng.random_range(0..1280),
                        rng.random_range(0..720),
                    )
                })
                .collect();
            evs.sort_by_key(|e| e.t);
            let (m, c, sum) = two_pass(&evs, 4000, 500.0);
            // sigma_min = 0 so no floor masks the comparison
            let s = weighted_blob_stats(&evs, 4000, 500.0, 0.0).unwrap();
            assert_abs_diff_eq!(s.mean[0], m[0], epsilon = 1e-9);
            assert_abs_diff_eq!(s.mean[1], m[1], epsilon = 1e-9);
            assert_abs_diff_eq!(s.cov.a, c[0], epsilon = 1e-9 * c[0].max(1.0));
            assert_abs_diff_eq!(s.cov.b, c[1], epsilon = 1e-9 * c[0].max(1.0));
            assert_abs_diff_eq!(s.cov.c, c[2], epsilon = 1e-9 * c[2].max(1.0));
            assert_abs_diff_eq!(s.weight_sum, sum, epsilon = 1e-9 * sum);
        }
    }

    #[test]
    fn newer_event_gains_relative_weight_with_beta() {
        let w = |beta: f64, age_us: u64| (-beta * age_us as f64 * 1e-6).exp();
        let mut last = 0.0;
        for beta in [0.0, 10.0, 100.0, 500.0, 2000.0] {
            // ratio newest/oldest, computed through the accumulator's mean shift
            let evs = [ev(0, 0, 0), ev(3000, 100, 0)];
            let s = weighted_blob_stats(&evs, 3000, beta, 0.5).unwrap();
            let ratio = s.mean[0] / (100.0 - s.mean[0]);
            assert_abs_diff_eq!(ratio, w(beta, 0) / w(beta, 3000), epsilon = 1e-9 * ratio);
            if beta > 0.0 {
                assert!(ratio > last);
            }
            last = ratio;
        }
    }

    #[test]
    fn works_in_f32() {
        let e = Ellipse::<f32>::new(2.0, 1.0, 0.5).unwrap();
        let back = ellipse_from_cov(&e.cov()).unwrap();
        assert!((back.lambda1 - 2.0).abs() < 1e-5);
        assert!((back.theta - 0.5).abs() < 1e-5);
        assert!(wrap_angle(7.0f32).unwrap() < std::f32::consts::PI);
    }

    fn arb_ellipse() -> impl Strategy<Value = Ellipse<f64>> {
        (0.05f64..50.0, 0.05f64..50.0, -10.0f64..10.0).prop_map(|(a, b, t)| Ellipse::from_axes(a, b, t).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip(e in arb_ellipse()) {
            let back = ellipse_from_cov(&e.cov()).unwrap();
            prop_assert!((back.lambda1 - e.lambda1).abs() <= 1e-9 * e.lambda1.max(1.0));
            prop_assert!((back.lambda2 - e.lambda2).abs() <= 1e-9 * e.lambda1.max(1.0));
            // orientation is only defined for non-circular ellipses
            if (e.lambda1 - e.lambda2) / e.lambda1 > 1e-3 {
                prop_assert!(angle_diff_pi_periodic(back.theta, e.theta).abs() <= 1e-9 * 1e3);
            }
            prop_assert!(back.cov().frobenius_dist(&e.cov()) <= 1e-9 * e.cov().trace().max(1.0));
            prop_assert!(back.theta >= -FRAC_PI_2 && back.theta < FRAC_PI_2);
        }

        #[test]
        fn product_round_trip(e in arb_ellipse()) {
            let back = product_coords(&e).to_ellipse().unwrap();
            prop_assert!((back.lambda1 - e.lambda1).abs() <= 1e-12 * e.lambda1);
            prop_assert!((back.lambda2 - e.lambda2).abs() <= 1e-12 * e.lambda1);
            prop_assert!((back.theta - e.theta).abs() <= 1e-12);
        }

        #[test]
        fn wrap_range(t in -1e6f64..1e6) {
            let w = wrap_angle(t).unwrap();
            prop_assert!((-PI..PI).contains(&w));
            let k = ((t - w) / (2.0 * PI)).round();
            prop_assert!((t - w - k * 2.0 * PI).abs() < 1e-6);
        }

        #[test]
        fn pi_periodic_diff_bounded(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let d = angle_diff_pi_periodic(a, b);
            prop_assert!(d.abs() <= FRAC_PI_2);
            let k = ((a - b - d) / PI).round();
            prop_assert!((a - b - d - k * PI).abs() < 1e-9);
        }
    }

    #[test]
    fn coupled_metric_agrees_with_affine_to_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let base = Ellipse::from_axes(
                rng.random_range(0.5..20.0),
                rng.random_range(0.5..20.0),
                rng.random_range(-PI..PI),
            )
            .unwrap();
            let eps = rng.random_range(1e-4..0.01);
            let dir: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let delta = ProductCoords {
                mu1: eps * dir[0] / n,
                mu2: eps * dir[1] / n,
                theta: eps * dir[2] / n,
            };
            let p = product_coords(&base);
            let moved = cov_from_axes(
                (p.mu1 + delta.mu1).exp(),
                (p.mu2 + delta.mu2).exp(),
                p.theta + delta.theta,
            );
            let d_aff = affine_distance(&base.cov(), &moved).unwrap();
            let d_prod = coupled_metric_distance(&base, &delta);
            worst = worst.max((d_aff - d_prod).abs() / d_aff);
        }
        assert!(worst < 0.10, "worst relative error {worst}");
    }
}
