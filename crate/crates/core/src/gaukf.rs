//! Geometry-aware unscented Kalman filter for one elliptical blob.
//!
//! State: `[x, y, vx, vy, μ1, μ2, θ, ω]` with `μi = ln λi`. Sigma points,
//! covariances and gains are formed in tangent coordinates: Euclidean for
//! everything except θ, whose residuals are wrapped on the circle (state) or
//! modulo π (measured orientation, which comes from an eigenvector). Because
//! the filter stores log-axes, `λi = exp(μi)` is positive for any update.
//!
//! One filter step costs the same 17 sigma-point propagations regardless of
//! how many events the packet holds; the only per-event work is the weighted
//! moment accumulation in [`make_measurement`].

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, SMatrix, SVector, SymmetricEigen};
use thiserror::Error;

use crate::events::EventPacket;
use crate::geometry::{
    angle_diff, angle_diff_pi_periodic, ellipse_from_cov, wrap_angle_unchecked, BlobAccumulator, Ellipse,
    GeometryError, Spd2, DEFAULT_BETA, DEFAULT_SIGMA_MIN,
};
use crate::scalar::{lit, Real};

pub const STATE_DIM: usize = 8;
pub const MEAS_DIM: usize = 5;
pub const SIGMA_POINTS: usize = 2 * STATE_DIM + 1;

const X: usize = 0;
const Y: usize = 1;
const VX: usize = 2;
const VY: usize = 3;
const MU1: usize = 4;
const MU2: usize = 5;
const THETA: usize = 6;
const OMEGA: usize = 7;
const Z_THETA: usize = 4;

pub type StateVec<T> = SVector<T, STATE_DIM>;
pub type StateCov<T> = SMatrix<T, STATE_DIM, STATE_DIM>;
pub type MeasVec<T> = SVector<T, MEAS_DIM>;
pub type MeasCov<T> = SMatrix<T, MEAS_DIM, MEAS_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UkfError {
    #[error("non-finite state component `{0}`")]
    NonFinite(&'static str),
    #[error("time step must be positive and finite")]
    BadTimeStep,
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("packet starts at {packet_us}us, before the belief time {belief_us}us")]
    PacketInPast { packet_us: u64, belief_us: u64 },
    #[error("invalid parameter: {0}")]
    BadParams(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Filter state in its native coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobState<T> {
    pub x: T,
    pub y: T,
    pub vx: T,
    pub vy: T,
    pub mu1: T,
    pub mu2: T,
    pub theta: T,
    pub omega: T,
}

const FIELD_NAMES: [&str; STATE_DIM] = ["x", "y", "vx", "vy", "mu1", "mu2", "theta", "omega"];

impl<T: Real> BlobState<T> {
    pub fn to_vector(&self) -> StateVec<T> {
        StateVec::from([
            self.x, self.y, self.vx, self.vy, self.mu1, self.mu2, self.theta, self.omega,
        ])
    }

    pub fn from_vector(v: &StateVec<T>) -> Self {
        Self {
            x: v[X],
            y: v[Y],
            vx: v[VX],
            vy: v[VY],
            mu1: v[MU1],
            mu2: v[MU2],
            theta: v[THETA],
            omega: v[OMEGA],
        }
    }

    pub fn lambda1(&self) -> T {
        self.mu1.exp()
    }

    pub fn lambda2(&self) -> T {
        self.mu2.exp()
    }

    /// Blob shape; orientation folded to the ellipse range.
    pub fn ellipse(&self) -> Result<Ellipse<T>, GeometryError> {
        Ellipse::from_axes(self.lambda1(), self.lambda2(), self.theta)
    }

    pub fn check_finite(&self) -> Result<(), UkfError> {
        let v = self.to_vector();
        match v.iter().position(|c| !c.is_finite()) {
            Some(i) => Err(UkfError::NonFinite(FIELD_NAMES[i])),
            None => Ok(()),
        }
    }
}

/// Last two posterior minor log-axes, oldest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinorAxisHistory<T> {
    older: Option<T>,
    newer: Option<T>,
}

impl<T> Default for MinorAxisHistory<T> {
    fn default() -> Self {
        Self {
            older: None,
            newer: None,
        }
    }
}

impl<T: Real> MinorAxisHistory<T> {
    pub fn push(&mut self, mu2: T) {
        self.older = self.newer.replace(mu2);
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }

    pub fn values(&self) -> (Option<T>, Option<T>) {
        (self.older, self.newer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBelief<T: Real> {
    pub mean: BlobState<T>,
    pub cov: StateCov<T>,
    /// Time of validity, µs.
    pub t: u64,
    pub history: MinorAxisHistory<T>,
}

/// Blob observation extracted from one packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement<T> {
    pub x: T,
    pub y: T,
    pub lambda1: T,
    pub lambda2: T,
    /// In `[-π/2, π/2)`.
    pub theta: T,
    /// Weighted mean event age at the measurement time, seconds. The
    /// weighted centroid describes the blob this long ago.
    pub age: T,
    pub count: usize,
}

impl<T: Real> Measurement<T> {
    /// Tangent-space form `[x, y, ln λ1, ln λ2, θ]`.
    pub fn tangent(&self) -> MeasVec<T> {
        MeasVec::from([self.x, self.y, self.lambda1.ln(), self.lambda2.ln(), self.theta])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfParams<T: Real> {
    pub alpha: T,
    pub beta_ukf: T,
    pub kappa: T,
    /// Process noise density, per second of prediction.
    pub q: StateCov<T>,
    pub r: MeasCov<T>,
    /// Temporal weight decay for measurements, 1/s.
    pub beta_decay: T,
    pub sigma_min: T,
    /// Fewest events that make a measurement.
    pub n_min: usize,
    /// Bound on the per-step minor-axis log increment.
    pub delta_clamp: T,
    /// Covariance used when a track is seeded from a single measurement.
    pub initial_cov: StateCov<T>,
}

/// Diagonal noise settings, in the order of the state vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDiag {
    pub position: f64,
    pub velocity: f64,
    pub log_axes: f64,
    pub theta: f64,
    pub omega: f64,
}

impl NoiseDiag {
    pub const PROCESS: NoiseDiag = NoiseDiag {
        position: 1.0,
        velocity: 4.0e6,
        log_axes: 0.01,
        theta: 0.05,
        omega: 1.0,
    };

    pub const INITIAL: NoiseDiag = NoiseDiag {
        position: 25.0,
        velocity: 1.0e6,
        log_axes: 0.25,
        theta: 1.0,
        omega: 10.0,
    };

    pub fn state_matrix<T: Real>(&self) -> StateCov<T> {
        StateCov::from_diagonal(&StateVec::from([
            lit(self.position),
            lit(self.position),
            lit(self.velocity),
            lit(self.velocity),
            lit(self.log_axes),
            lit(self.log_axes),
            lit(self.theta),
            lit(self.omega),
        ]))
    }
}

/// `diag(position, position, log_axes, log_axes, theta)`.
pub fn measurement_noise<T: Real>(position: f64, log_axes: f64, theta: f64) -> MeasCov<T> {
    MeasCov::from_diagonal(&MeasVec::from([
        lit(position),
        lit(position),
        lit(log_axes),
        lit(log_axes),
        lit(theta),
    ]))
}

impl<T: Real> Default for UkfParams<T> {
    fn default() -> Self {
        Self {
            alpha: lit(0.5),
            beta_ukf: lit(2.0),
            kappa: T::zero(),
            q: NoiseDiag::PROCESS.state_matrix(),
            r: measurement_noise(1.0, 0.02, 0.05),
            beta_decay: lit(DEFAULT_BETA),
            sigma_min: lit(DEFAULT_SIGMA_MIN),
            n_min: 4,
            delta_clamp: lit(0.2),
            initial_cov: NoiseDiag::INITIAL.state_matrix(),
        }
    }
}

impl<T: Real> UkfParams<T> {
    pub fn validate(&self) -> Result<(), UkfError> {
        if !(self.alpha > T::zero() && self.alpha <= T::one()) {
            return Err(UkfError::BadParams("alpha must lie in (0, 1]"));
        }
        let n = lit::<T>(STATE_DIM as f64);
        if self.alpha * self.alpha * (n + self.kappa) <= T::zero() {
            return Err(UkfError::BadParams("alpha^2 (n + kappa) must be positive"));
        }
        if Cholesky::new(self.q).is_none() {
            return Err(UkfError::BadParams("Q must be positive definite"));
        }
        if Cholesky::new(self.r).is_none() {
            return Err(UkfError::BadParams("R must be positive definite"));
        }
        if !(self.beta_decay >= T::zero()) {
            return Err(UkfError::BadParams("beta_decay must be non-negative"));
        }
        if !(self.sigma_min > T::zero()) {
            return Err(UkfError::BadParams("sigma_min must be positive"));
        }
        Ok(())
    }

    fn weights(&self) -> SigmaWeights<T> {
        let n = lit::<T>(STATE_DIM as f64);
        let lambda = self.alpha * self.alpha * (n + self.kappa) - n;
        let wm0 = lambda / (n + lambda);
        SigmaWeights {
            gamma: (n + lambda).sqrt(),
            wm0,
            wc0: wm0 + T::one() - self.alpha * self.alpha + self.beta_ukf,
            wi: T::one() / (lit::<T>(2.0) * (n + lambda)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SigmaWeights<T> {
    gamma: T,
    wm0: T,
    wc0: T,
    wi: T,
}

impl<T: Real> SigmaWeights<T> {
    #[inline]
    fn mean(&self, i: usize) -> T {
        if i == 0 {
            self.wm0
        } else {
            self.wi
        }
    }

    #[inline]
    fn cov(&self, i: usize) -> T {
        if i == 0 {
            self.wc0
        } else {
            self.wi
        }
    }
}

/// Lower-triangular square root, falling back to a clipped eigen-root when
/// round-off has made `p` indefinite.
fn matrix_sqrt<T: Real>(p: &StateCov<T>) -> StateCov<T> {
    if let Some(ch) = Cholesky::new(*p) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(symmetrize(p));
    let d = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
    eig.eigenvectors * StateCov::from_diagonal(&d)
}

fn symmetrize<T: Real, const N: usize>(m: &SMatrix<T, N, N>) -> SMatrix<T, N, N> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Tangent-space retraction: add, then wrap θ.
fn retract<T: Real>(mean: &StateVec<T>, delta: &StateVec<T>) -> StateVec<T> {
    let mut v = mean + delta;
    v[THETA] = wrap_angle_unchecked(v[THETA]);
    v
}

fn state_residual<T: Real>(a: &StateVec<T>, b: &StateVec<T>) -> StateVec<T> {
    let mut d = a - b;
    d[THETA] = angle_diff(a[THETA], b[THETA]);
    d
}

fn meas_residual<T: Real>(a: &MeasVec<T>, b: &MeasVec<T>) -> MeasVec<T> {
    let mut d = a - b;
    d[Z_THETA] = angle_diff_pi_periodic(a[Z_THETA], b[Z_THETA]);
    d
}

fn sigma_points<T: Real>(mean: &StateVec<T>, cov: &StateCov<T>, w: &SigmaWeights<T>) -> [StateVec<T>; SIGMA_POINTS] {
    let l = matrix_sqrt(cov) * w.gamma;
    let mut pts = [*mean; SIGMA_POINTS];
    for j in 0..STATE_DIM {
        let col: StateVec<T> = l.column(j).into_owned();
        pts[1 + j] = retract(mean, &col);
        pts[1 + STATE_DIM + j] = retract(mean, &(-col));
    }
    pts
}

fn circular_mean<T: Real>(angles: impl Iterator<Item = (T, T)>) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for (w, a) in angles {
        let (sa, ca) = a.sin_cos();
        s += w * sa;
        c += w * ca;
    }
    s.atan2(c)
}

/// `ln(λ_{k-1}/λ_{k-2})` of the minor axis, clamped; zero until two
/// measurement updates have been recorded.
pub fn minor_axis_increment<T: Real>(belief: &FilterBelief<T>, params: &UkfParams<T>) -> T {
    match belief.history.values() {
        (Some(older), Some(newer)) => {
            let d = newer - older;
            d.max(-params.delta_clamp).min(params.delta_clamp)
        }
        _ => T::zero(),
    }
}

fn process<T: Real>(s: &StateVec<T>, dt: T, delta_minor: T) -> StateVec<T> {
    let mut o = *s;
    o[X] += s[VX] * dt;
    o[Y] += s[VY] * dt;
    o[MU1] += delta_minor;
    o[MU2] += delta_minor;
    let th = s[THETA] + s[OMEGA] * dt;
    o[THETA] = th.sin().atan2(th.cos());
    if o[THETA] >= T::PI() {
        o[THETA] = -T::PI();
    }
    o
}

/// Propagates the belief by `dt` seconds through the constant-velocity model.
pub fn predict<T: Real>(belief: &FilterBelief<T>, dt: T, params: &UkfParams<T>) -> Result<FilterBelief<T>, UkfError> {
    if !(dt > T::zero() && dt.is_finite()) {
        return Err(UkfError::BadTimeStep);
    }
    belief.mean.check_finite()?;
    let w = params.weights();
    let delta = minor_axis_increment(belief, params);
    let pts = sigma_points(&belief.mean.to_vector(), &belief.cov, &w);
    let prop: Vec<StateVec<T>> = pts.iter().map(|p| process(p, dt, delta)).collect();

    let mut mean = StateVec::zeros();
    for (i, p) in prop.iter().enumerate() {
        mean += p * w.mean(i);
    }
    mean[THETA] = circular_mean(prop.iter().enumerate().map(|(i, p)| (w.mean(i), p[THETA])));

    let mut cov = params.q * dt;
    for (i, p) in prop.iter().enumerate() {
        let d = state_residual(p, &mean);
        cov += d * d.transpose() * w.cov(i);
    }
    let out = FilterBelief {
        mean: BlobState::from_vector(&mean),
        cov: symmetrize(&cov),
        t: belief.t,
        history: belief.history,
    };
    out.mean.check_finite()?;
    Ok(out)
}

fn observe<T: Real>(s: &StateVec<T>, age: T) -> MeasVec<T> {
    MeasVec::from([s[X] - s[VX] * age, s[Y] - s[VY] * age, s[MU1], s[MU2], s[THETA]])
}

/// Moves the larger log-axis into `mu1`, rotating θ by π/2 to match.
fn canonicalize<T: Real>(mean: &mut StateVec<T>, cov: &mut StateCov<T>) {
    if mean[MU1] >= mean[MU2] {
        return;
    }
    mean.swap_rows(MU1, MU2);
    mean[THETA] = wrap_angle_unchecked(mean[THETA] + T::FRAC_PI_2());
    cov.swap_rows(MU1, MU2);
    cov.swap_columns(MU1, MU2);
}

/// Fuses one blob measurement.
pub fn update<T: Real>(
    belief: &FilterBelief<T>,
    z: &Measurement<T>,
    params: &UkfParams<T>,
) -> Result<FilterBelief<T>, UkfError> {
    belief.mean.check_finite()?;
    let w = params.weights();
    let prior = belief.mean.to_vector();
    let pts = sigma_points(&prior, &belief.cov, &w);
    let zs: Vec<MeasVec<T>> = pts.iter().map(|p| observe(p, z.age)).collect();

    let mut z_hat = MeasVec::zeros();
    for (i, zi) in zs.iter().enumerate() {
        z_hat += zi * w.mean(i);
    }
    z_hat[Z_THETA] = circular_mean(zs.iter().enumerate().map(|(i, p)| (w.mean(i), p[Z_THETA])));

    let mut s = params.r;
    let mut pxz = SMatrix::<T, STATE_DIM, MEAS_DIM>::zeros();
    for (i, (p, zi)) in pts.iter().zip(&zs).enumerate() {
        let dz = meas_residual(zi, &z_hat);
        let dx = state_residual(p, &prior);
        s += dz * dz.transpose() * w.cov(i);
        pxz += dx * dz.transpose() * w.cov(i);
    }
    let s = symmetrize(&s);
    let chol = Cholesky::new(s).ok_or(UkfError::SingularInnovation)?;
    // K = Pxz S⁻¹, solved as (S⁻¹ Pxzᵀ)ᵀ
    let gain = chol.solve(&pxz.transpose()).transpose();
    let innovation = meas_residual(&z.tangent(), &z_hat);

    let mut mean = retract(&prior, &(gain * innovation));
    let mut cov = symmetrize(&(belief.cov - gain * s * gain.transpose()));
    canonicalize(&mut mean, &mut cov);
    let out = FilterBelief {
        mean: BlobState::from_vector(&mean),
        cov,
        t: belief.t,
        history: belief.history,
    };
    out.mean.check_finite()?;
    Ok(out)
}

/// Temporally weighted blob measurement at `t_k`, or `None` with fewer than
/// `n_min` events.
pub fn make_measurement<T: Real>(packet: &EventPacket, t_k: u64, params: &UkfParams<T>) -> Option<Measurement<T>> {
    if packet.len() < params.n_min.max(1) {
        return None;
    }
    let mut acc = BlobAccumulator::new(t_k, params.beta_decay);
    for e in &packet.events {
        acc.push_event(e).ok()?;
    }
    let stats = acc.finish(params.sigma_min).ok()?;
    let e = ellipse_from_cov(&stats.cov).ok()?;
    Some(Measurement {
        x: stats.mean[0],
        y: stats.mean[1],
        lambda1: e.lambda1,
        lambda2: e.lambda2,
        theta: e.theta,
        age: stats.mean_age,
        count: stats.count,
    })
}

impl<T: Real> FilterBelief<T> {
    /// Seeds a track from one measurement: zero velocities and turn rate,
    /// broad covariance.
    pub fn initialize(z: &Measurement<T>, t: u64, params: &UkfParams<T>) -> Self {
        let mut mean = StateVec::from([
            z.x,
            z.y,
            T::zero(),
            T::zero(),
            z.lambda1.ln(),
            z.lambda2.ln(),
            wrap_angle_unchecked(z.theta),
            T::zero(),
        ]);
        let mut cov = params.initial_cov;
        canonicalize(&mut mean, &mut cov);
        let mut history = MinorAxisHistory::default();
        history.push(mean[MU2]);
        Self {
            mean: BlobState::from_vector(&mean),
            cov,
            t,
            history,
        }
    }

    /// Blob covariance `R(θ) diag(λ²) R(θ)ᵀ` of the mean state.
    pub fn shape(&self) -> Spd2<T> {
        crate::geometry::cov_from_axes(self.mean.lambda1(), self.mean.lambda2(), self.mean.theta)
    }

    /// 2x2 position block of the covariance.
    pub fn position_cov(&self) -> Spd2<T> {
        Spd2 {
            a: self.cov[(X, X)],
            b: self.cov[(X, Y)],
            c: self.cov[(Y, Y)],
        }
    }

    pub fn min_eigenvalue(&self) -> T {
        SymmetricEigen::new(self.cov).eigenvalues.min()
    }
}

/// Result of one filter step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Real> {
    pub belief: FilterBelief<T>,
    pub measurement: Option<Measurement<T>>,
    pub elapsed: Duration,
}

/// Predict to the end of `packet`, then fuse its measurement if it has one.
///
/// The minor-axis history records the posterior after each update; a window
/// without a measurement clears it, so the axis increment restarts from zero
/// rather than extrapolating through a dropout.
pub fn step<T: Real>(
    belief: &FilterBelief<T>,
    packet: &EventPacket,
    params: &UkfParams<T>,
) -> Result<StepOutcome<T>, UkfError> {
    let started = Instant::now();
    if packet.t_start < belief.t {
        return Err(UkfError::PacketInPast {
            packet_us: packet.t_start,
            belief_us: belief.t,
        });
    }
    let dt_us = packet.t_end - belief.t;
    let mut next = if dt_us > 0 {
        predict(belief, lit(dt_us as f64 * 1e-6), params)?
    } else {
        belief.clone()
    };
    next.t = packet.t_end;
    let measurement = make_measurement(packet, packet.t_end, params);
    match &measurement {
        Some(z) => {
            next = update(&next, z, params)?;
            next.history.push(next.mean.mu2);
        }
        None => next.history.clear(),
    }
    Ok(StepOutcome {
        belief: next,
        measurement,
        elapsed: started.elapsed(),
    })
}
