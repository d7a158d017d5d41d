//! Rigid-body poses on SE(3) and their 6-vector tangent coordinates.
//!
//! Conventions used throughout the crate:
//! - a [`PoseSE3`] maps camera coordinates to world coordinates;
//! - cameras look down their local −z axis with +y up;
//! - tangent vectors are ordered `(omega, v)`: rotation first, translation second;
//! - optimization increments are applied on the left: `exp(xi) ∘ base`.

use nalgebra::{Matrix3, Matrix3x6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle the exp/log coefficients switch to their limits.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Coefficients are evaluated by truncated series below this angle; the
/// closed forms lose precision to cancellation there.
const SERIES_ANGLE: f64 = 1e-2;

/// Rigid transform `x_world = rotation * x_cam + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Lie-algebra coordinates of a pose.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TangentSE3 {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

/// Output of [`log_with_info`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogResult {
    pub tangent: TangentSE3,
    /// The rotation angle was within numerical reach of π, where the axis
    /// sign is ambiguous and was resolved by axis extraction.
    pub near_pi: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Linear,
    Cubic,
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `sin θ / θ`, `(1 − cos θ)/θ²`, `(θ − sin θ)/θ³`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else if theta < SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0 - t4 * t2 / 5040.0,
            0.5 - t2 / 24.0 + t4 / 720.0 - t4 * t2 / 40320.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0,
        )
    } else {
        let half = (0.5 * theta).sin();
        (
            theta.sin() / theta,
            2.0 * half * half / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Left Jacobian of SO(3); also the `V` matrix mapping `v` to translation.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + b * w + c * w * w
}

fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + a * w + b * w * w
}

/// Returns the rotation vector and whether the π fallback was used.
pub(crate) fn so3_log(r: &Matrix3<f64>) -> (Vector3<f64>, bool) {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew = vee(&(r - r.transpose())) * 0.5;
    if theta < SERIES_ANGLE {
        // skew = sin θ · axis; θ / sin θ ≈ 1 + θ²/6 + 7θ⁴/360
        let t2 = theta * theta;
        return (skew * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0), false);
    }
    let sin = theta.sin();
    if std::f64::consts::PI - theta > 1e-6 {
        return (skew * (theta / sin), false);
    }
    // Near π: R ≈ 2 a aᵀ − I, so read the axis from the dominant diagonal entry.
    let b = (r + Matrix3::identity()) * 0.5;
    let k = (0..3)
        .max_by(|&i, &j| b[(i, i)].partial_cmp(&b[(j, j)]).unwrap())
        .unwrap();
    let mut axis = b.column(k).into_owned() / b[(k, k)].max(1e-300).sqrt();
    axis.normalize_mut();
    // Resolve the sign with the (small) antisymmetric part when available.
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    (axis * theta, true)
}

impl TangentSE3 {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(a[0], a[1], a[2]),
            v: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::from_array([s[0], s[1], s[2], s[3], s[4], s[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z]
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.to_array())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.omega * s, self.v * s)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.omega + o.omega, self.v + o.v)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(o.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Camera-to-world pose at `eye` looking towards `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, true_up, back]);
        Self::new(rotation, eye)
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn exp(xi: &TangentSE3) -> Self {
        exp(xi)
    }

    pub fn log(&self) -> TangentSE3 {
        log(self)
    }

    /// Largest deviation of `R·Rᵀ` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
            && self.orthonormality_error() <= tol
    }

    /// Projects the rotation back onto SO(3) (closest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self::new(r, self.translation)
    }

    /// Row-major `[R | t]`, the 12-number serialization used on disk.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(a: &[f64]) -> Result<Self> {
        if a.len() != 12 {
            return Err(Error::Invalid(format!("pose row needs 12 numbers, got {}", a.len())));
        }
        let rotation = Matrix3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]);
        let translation = Vector3::new(a[3], a[7], a[11]);
        Ok(Self::new(rotation, translation))
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        self.to_row_major()
            .iter()
            .zip(o.to_row_major())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn exp(xi: &TangentSE3) -> PoseSE3 {
    PoseSE3::new(so3_exp(&xi.omega), so3_left_jacobian(&xi.omega) * xi.v)
}

pub fn log(p: &PoseSE3) -> TangentSE3 {
    log_with_info(p).tangent
}

pub fn log_with_info(p: &PoseSE3) -> LogResult {
    let (omega, near_pi) = so3_log(&p.rotation);
    let theta = omega.norm();
    let w = hat(&omega);
    // V⁻¹ = I − ½W + k·W², k = (1 − θ sin θ / (2(1 − cos θ))) / θ²
    let k = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - 0.5 * w + k * w * w;
    LogResult {
        tangent: TangentSE3::new(omega, v_inv * p.translation),
        near_pi,
    }
}

/// The `Q` block of the SE(3) left Jacobian for `xi = (omega, v)`.
pub fn se3_q_block(xi: &TangentSE3) -> Matrix3<f64> {
    let phi = hat(&xi.omega);
    let rho = hat(&xi.v);
    let theta = xi.omega.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < 5e-2 {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3628800.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0 - t4 * t2 / 9979200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = phi * rho;
    let rp = rho * phi;
    let prp = pr * phi;
    0.5 * rho
        + c1 * (pr + rp + prp)
        + c2 * (phi * pr + rp * phi - 3.0 * prp)
        + c3 * (prp * phi + phi * prp)
}

/// Jacobian of `exp(xi) · p` with respect to `xi = (omega, v)`, returned as
/// a 3×6 matrix with the rotational columns first.
pub fn action_jacobian(xi: &TangentSE3, p: &Vector3<f64>) -> Matrix3x6<f64> {
    let pose = exp(xi);
    let moved = pose.act(p);
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q_block(xi);
    let d_omega = q - hat(&moved) * j;
    let mut out = Matrix3x6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_omega);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&j);
    out
}

/// Uniform Catmull-Rom weights for the four control points at `u ∈ [0, 1]`.
pub fn catmull_rom_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        0.5 * (-u + 2.0 * u2 - u3),
        0.5 * (2.0 - 5.0 * u2 + 3.0 * u3),
        0.5 * (u + 4.0 * u2 - 3.0 * u3),
        0.5 * (-u2 + u3),
    ]
}

/// Geodesic interpolation `exp(u · log(end ∘ start⁻¹)) ∘ start`.
pub fn interpolate_linear(start: &PoseSE3, end: &PoseSE3, u: f64) -> Result<PoseSE3> {
    check_fraction(u)?;
    if u == 0.0 {
        return Ok(*start);
    }
    if u == 1.0 {
        return Ok(*end);
    }
    let delta = log(&end.compose(&start.inverse()));
    Ok(exp(&delta.scale(u)).compose(start))
}

/// Uniform Catmull-Rom spline between `controls[1]` and `controls[2]`,
/// evaluated on tangent coordinates in the chart centred at `controls[1]`.
pub fn interpolate_cubic(controls: &[PoseSE3; 4], u: f64) -> Result<PoseSE3> {
    check_fraction(u)?;
    if u == 0.0 {
        return Ok(controls[1]);
    }
    if u == 1.0 {
        return Ok(controls[2]);
    }
    let anchor_inv = controls[1].inverse();
    let w = catmull_rom_weights(u);
    let mut acc = TangentSE3::zero();
    for (k, c) in controls.iter().enumerate() {
        if k == 1 {
            continue;
        }
        acc = acc.add(&log(&c.compose(&anchor_inv)).scale(w[k]));
    }
    Ok(exp(&acc).compose(&controls[1]))
}

/// Dispatches on `mode`. Linear mode uses `controls[1]` and `controls[2]`.
pub fn interpolate(controls: &[PoseSE3; 4], u: f64, mode: InterpMode) -> Result<PoseSE3> {
    match mode {
        InterpMode::Linear => interpolate_linear(&controls[1], &controls[2], u),
        InterpMode::Cubic => interpolate_cubic(controls, u),
    }
}

fn check_fraction(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Invalid(format!("interpolation fraction {u} outside [0, 1]")));
    }
    Ok(())
}

/// Time-stamped pose samples over one exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<PoseSE3>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<PoseSE3>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::Invalid(format!(
                "trajectory has {} timestamps but {} poses",
                timestamps.len(),
                poses.len()
            )));
        }
        if timestamps.is_empty() {
            return Err(Error::Invalid("empty trajectory".into()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("trajectory timestamps must increase strictly".into()));
        }
        Ok(Self { timestamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Pose at mid-exposure: the middle sample for odd lengths, otherwise the
    /// geodesic midpoint of the two central samples.
    pub fn midpoint_pose(&self) -> PoseSE3 {
        let n = self.poses.len();
        if n % 2 == 1 {
            self.poses[n / 2]
        } else {
            interpolate_linear(&self.poses[n / 2 - 1], &self.poses[n / 2], 0.5)
                .expect("0.5 is a valid fraction")
        }
    }
}

/// `p` evenly spaced times over `[start, end]`; a single sample sits at the midpoint.
pub fn even_timestamps(start: f64, end: f64, p: usize) -> Vec<f64> {
    match p {
        0 => Vec::new(),
        1 => vec![0.5 * (start + end)],
        _ => (0..p)
            .map(|i| start + (end - start) * i as f64 / (p - 1) as f64)
            .collect(),
    }
}
