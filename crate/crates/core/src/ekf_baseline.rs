//! Per-event extended Kalman filter used as the comparison baseline.
//!
//! This is a stand-in for the sequential blob tracker it is compared against,
//! reproducing its two defining properties rather than its exact equations:
//! every event triggers a full predict/update cycle, so cost grows linearly
//! with the packet size, and the blob shape is treated in flat Euclidean
//! coordinates. Semi-axes are stored linearly and orientation is an
//! unwrapped real number.
//!
//! Per event:
//! 1. constant-velocity prediction to the event time;
//! 2. position update with the event as a 2-D measurement whose noise is the
//!    current blob covariance;
//! 3. a forgetting sample covariance of the pre-update residuals, minus the
//!    position uncertainty, is decomposed into axes and orientation and fused
//!    as a linear pseudo-measurement with a plain (unwrapped) angle
//!    difference.
//!
//! Step 3 can yield non-positive axes when the position uncertainty exceeds
//! the residual spread; such axes are clamped and counted.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, SMatrix, SVector};

use crate::events::{Event, EventPacket};
use crate::gaukf::{Measurement, UkfError};
use crate::geometry::{cov_from_axes, Spd2};
use crate::scalar::{lit, Real};

pub const DEFAULT_FORGETTING: f64 = 0.99;
/// Value a non-positive semi-axis is reset to, px.
pub const CLAMP_AXIS: f64 = 0.1;

const X: usize = 0;
const Y: usize = 1;
const VX: usize = 2;
const VY: usize = 3;
const THETA: usize = 4;
const Q_RATE: usize = 5;
const L1: usize = 6;
const L2: usize = 7;

type Vec8<T> = SVector<T, 8>;
type Mat8<T> = SMatrix<T, 8, 8>;

#[derive(Debug, Clone, PartialEq)]
pub struct EkfParams<T: Real> {
    /// Process noise density in `[x, y, vx, vy, θ, q, λ1, λ2]` order.
    pub q: Mat8<T>,
    /// Pseudo-measurement noise on (θ, λ1, λ2).
    pub shape_noise: [T; 3],
    /// Added to the blob covariance in the position update, px².
    pub position_noise: T,
    pub forgetting: T,
    pub initial_cov: Mat8<T>,
}

impl<T: Real> Default for EkfParams<T> {
    fn default() -> Self {
        let d = |v: [f64; 8]| Mat8::from_diagonal(&Vec8::from(v.map(lit::<T>)));
        Self {
            q: d([1.0, 1.0, 4.0e6, 4.0e6, 0.05, 1.0, 1.0, 1.0]),
            shape_noise: [lit(0.5), lit(4.0), lit(4.0)],
            position_noise: lit(0.25),
            forgetting: lit(DEFAULT_FORGETTING),
            initial_cov: d([25.0, 25.0, 1.0e6, 1.0e6, 1.0, 10.0, 4.0, 4.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState<T: Real> {
    pub x: T,
    pub y: T,
    pub vx: T,
    pub vy: T,
    /// Unwrapped orientation, radians.
    pub theta: T,
    pub q_rate: T,
    pub lambda1: T,
    pub lambda2: T,
    pub cov: Mat8<T>,
    pub t: u64,
    /// Forgetting covariance of event residuals.
    pub residual_cov: Spd2<T>,
    /// Number of times an axis went non-positive and was clamped.
    pub clamped: u64,
}

impl<T: Real> EkfState<T> {
    pub fn initialize(z: &Measurement<T>, t: u64, params: &EkfParams<T>) -> Self {
        let shape = cov_from_axes(z.lambda1, z.lambda2, z.theta);
        let p = &params.initial_cov;
        Self {
            x: z.x,
            y: z.y,
            vx: T::zero(),
            vy: T::zero(),
            theta: z.theta,
            q_rate: T::zero(),
            lambda1: z.lambda1,
            lambda2: z.lambda2,
            cov: *p,
            t,
            residual_cov: Spd2 {
                a: shape.a + p[(X, X)],
                b: shape.b + p[(X, Y)],
                c: shape.c + p[(Y, Y)],
            },
            clamped: 0,
        }
    }

    fn vector(&self) -> Vec8<T> {
        Vec8::from([
            self.x,
            self.y,
            self.vx,
            self.vy,
            self.theta,
            self.q_rate,
            self.lambda1,
            self.lambda2,
        ])
    }

    fn set_vector(&mut self, v: &Vec8<T>) {
        self.x = v[X];
        self.y = v[Y];
        self.vx = v[VX];
        self.vy = v[VY];
        self.theta = v[THETA];
        self.q_rate = v[Q_RATE];
        self.lambda1 = v[L1];
        self.lambda2 = v[L2];
    }

    fn check_finite(&self) -> Result<(), UkfError> {
        const NAMES: [&str; 8] = ["x", "y", "vx", "vy", "theta", "q", "lambda1", "lambda2"];
        match self.vector().iter().position(|c| !c.is_finite()) {
            Some(i) => Err(UkfError::NonFinite(NAMES[i])),
            None => Ok(()),
        }
    }

    /// Blob covariance from the current (Euclidean) shape parameters.
    pub fn shape(&self) -> Spd2<T> {
        cov_from_axes(self.lambda1, self.lambda2, self.theta)
    }

    pub fn position_cov(&self) -> Spd2<T> {
        Spd2 {
            a: self.cov[(X, X)],
            b: self.cov[(X, Y)],
            c: self.cov[(Y, Y)],
        }
    }

    fn predict_to(&mut self, t: u64, params: &EkfParams<T>) {
        if t <= self.t {
            return;
        }
        let dt = lit::<T>((t - self.t) as f64 * 1e-6);
        self.x += self.vx * dt;
        self.y += self.vy * dt;
        self.theta += self.q_rate * dt;
        let mut f = Mat8::identity();
        f[(X, VX)] = dt;
        f[(Y, VY)] = dt;
        f[(THETA, Q_RATE)] = dt;
        self.cov = f * self.cov * f.transpose() + params.q * dt;
        self.t = t;
    }

    fn fuse<const M: usize>(
        &mut self,
        idx: [usize; M],
        innovation: SVector<T, M>,
        r: SMatrix<T, M, M>,
    ) -> Result<(), UkfError> {
        // H selects `idx`, so P Hᵀ and H P Hᵀ are plain sub-blocks.
        let mut pht = SMatrix::<T, 8, M>::zeros();
        let mut s = r;
        for (j, &cj) in idx.iter().enumerate() {
            for i in 0..8 {
                pht[(i, j)] = self.cov[(i, cj)];
            }
            for (k, &ck) in idx.iter().enumerate() {
                s[(k, j)] += self.cov[(ck, cj)];
            }
        }
        let chol = Cholesky::new(s).ok_or(UkfError::SingularInnovation)?;
        let gain = chol.solve(&pht.transpose()).transpose();
        let v = self.vector() + gain * innovation;
        self.set_vector(&v);
        let p = self.cov - gain * pht.transpose();
        self.cov = (p + p.transpose()) * lit::<T>(0.5);
        Ok(())
    }

    fn clamp_axes(&mut self) {
        let floor = lit::<T>(CLAMP_AXIS);
        for l in [&mut self.lambda1, &mut self.lambda2] {
            if *l <= T::zero() {
                *l = floor;
                self.clamped += 1;
            }
        }
    }
}

/// Euclidean shape read from a symmetric (possibly indefinite) 2x2 matrix:
/// signed square roots of the eigenvalues and the major-axis angle.
fn signed_axes<T: Real>(m: &Spd2<T>) -> (T, T, T) {
    let two = lit::<T>(2.0);
    let mid = (m.a + m.c) / two;
    let h = (m.a - m.c) / two;
    let d = (h * h + m.b * m.b).sqrt();
    let theta = if d == T::zero() { T::zero() } else { m.b.atan2(h) / two };
    let sroot = |v: T| if v >= T::zero() { v.sqrt() } else { -(-v).sqrt() };
    (sroot(mid + d), sroot(mid - d), theta)
}

/// One predict/update cycle for a single event.
pub fn ekf_process_event<T: Real>(
    state: &EkfState<T>,
    e: &Event,
    params: &EkfParams<T>,
) -> Result<EkfState<T>, UkfError> {
    let mut s = state.clone();
    process_in_place(&mut s, e, params)?;
    Ok(s)
}

fn process_in_place<T: Real>(s: &mut EkfState<T>, e: &Event, params: &EkfParams<T>) -> Result<(), UkfError> {
    if e.t < s.t {
        return Err(UkfError::PacketInPast {
            packet_us: e.t,
            belief_us: s.t,
        });
    }
    s.predict_to(e.t, params);
    let (ex, ey) = (lit::<T>(e.x as f64), lit::<T>(e.y as f64));
    let (rx, ry) = (ex - s.x, ey - s.y);
    let prior_pos = s.position_cov();

    let shape = s.shape();
    let r = SMatrix::<T, 2, 2>::new(
        shape.a + params.position_noise,
        shape.b,
        shape.b,
        shape.c + params.position_noise,
    );
    s.fuse([X, Y], SVector::<T, 2>::new(rx, ry), r)?;

    let f = params.forgetting;
    let g = T::one() - f;
    let c = &mut s.residual_cov;
    c.a = f * c.a + g * rx * rx;
    c.b = f * c.b + g * rx * ry;
    c.c = f * c.c + g * ry * ry;
    let deconv = Spd2 {
        a: c.a - prior_pos.a,
        b: c.b - prior_pos.b,
        c: c.c - prior_pos.c,
    };
    let (l1m, l2m, thm) = signed_axes(&deconv);
    let innovation = SVector::<T, 3>::new(thm - s.theta, l1m - s.lambda1, l2m - s.lambda2);
    let rs = SMatrix::<T, 3, 3>::from_diagonal(&SVector::<T, 3>::from(params.shape_noise));
    s.fuse([THETA, L1, L2], innovation, rs)?;
    s.clamp_axes();
    s.check_finite()
}

#[derive(Debug, Clone)]
pub struct EkfStepOutcome<T: Real> {
    pub state: EkfState<T>,
    pub elapsed: Duration,
}

/// Folds every event of the packet in order, then predicts to the packet end.
pub fn ekf_step<T: Real>(
    state: &EkfState<T>,
    packet: &EventPacket,
    params: &EkfParams<T>,
) -> Result<EkfStepOutcome<T>, UkfError> {
    let started = Instant::now();
    if packet.t_start < state.t {
        return Err(UkfError::PacketInPast {
            packet_us: packet.t_start,
            belief_us: state.t,
        });
    }
    let mut s = state.clone();
    for e in &packet.events {
        process_in_place(&mut s, e, params)?;
    }
    s.predict_to(packet.t_end, params);
    s.check_finite()?;
    Ok(EkfStepOutcome {
        state: s,
        elapsed: started.elapsed(),
    })
}
