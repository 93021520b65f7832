//! Constant-velocity Kalman filter over `(center-x, center-y, aspect, height)` and their
//! per-frame velocities. Noise standard deviations scale with the box height.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::num::Scalar;

type Vec8<T> = [T; 8];
type Mat8<T> = [[T; 8]; 8];
type Mat4<T> = [[T; 4]; 4];

/// Filter constants. Defaults follow the usual cascade-matching tracker setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig<T> {
    pub std_weight_position: T,
    pub std_weight_velocity: T,
    /// Minimum height the predicted state is clamped to.
    pub min_height: T,
}

impl<T: Scalar> Default for MotionConfig<T> {
    fn default() -> Self {
        Self { std_weight_position: T::lit(1.0 / 20.0), std_weight_velocity: T::lit(1.0 / 160.0), min_height: T::lit(1e-3) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionState<T> {
    pub mean: Vec8<T>,
    pub covariance: Mat8<T>,
}

impl<T: Scalar> MotionState<T> {
    /// Box at the current mean; the score is carried through unchanged.
    pub fn to_bbox(&self, score: T) -> BBox<T> {
        BBox::from_xyah(self.mean[0], self.mean[1], self.mean[2], self.mean[3], score)
    }

    pub fn trace(&self) -> T {
        (0..8).map(|i| self.covariance[i][i]).sum()
    }

    /// Standard deviation of the center-x component.
    pub fn position_std(&self) -> T {
        self.covariance[0][0].sqrt()
    }

    /// Symmetric to within `tol` and positive semi-definite up to a `tol` diagonal shift.
    pub fn covariance_is_psd(&self, tol: T) -> bool {
        let p = &self.covariance;
        for i in 0..8 {
            for j in 0..8 {
                if (p[i][j] - p[j][i]).abs() > tol {
                    return false;
                }
            }
        }
        let mut shifted = *p;
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] = row[i] + tol;
        }
        cholesky(&shifted).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanFilter<T> {
    pub config: MotionConfig<T>,
}

impl<T: Scalar> Default for KalmanFilter<T> {
    fn default() -> Self {
        Self { config: MotionConfig::default() }
    }
}

impl<T: Scalar> KalmanFilter<T> {
    pub fn new(config: MotionConfig<T>) -> Self {
        Self { config }
    }

    pub fn initiate(&self, bbox: &BBox<T>) -> MotionState<T> {
        let z = bbox.to_xyah();
        let h = z[3];
        let (wp, wv) = (self.config.std_weight_position, self.config.std_weight_velocity);
        let two = T::lit(2.0);
        let ten = T::lit(10.0);
        let std = [
            two * wp * h,
            two * wp * h,
            T::lit(1e-2),
            two * wp * h,
            ten * wv * h,
            ten * wv * h,
            T::lit(1e-5),
            ten * wv * h,
        ];
        let mut mean = [T::zero(); 8];
        mean[..4].copy_from_slice(&z);
        let mut covariance = [[T::zero(); 8]; 8];
        for i in 0..8 {
            covariance[i][i] = std[i] * std[i];
        }
        MotionState { mean, covariance }
    }

    pub fn predict(&self, state: &MotionState<T>) -> MotionState<T> {
        let h = state.mean[3];
        let (wp, wv) = (self.config.std_weight_position, self.config.std_weight_velocity);
        let std = [wp * h, wp * h, T::lit(1e-2), wp * h, wv * h, wv * h, T::lit(1e-5), wv * h];

        let mut mean = state.mean;
        for i in 0..4 {
            mean[i] = mean[i] + mean[i + 4];
        }
        if mean[3] < self.config.min_height {
            mean[3] = self.config.min_height;
            mean[7] = T::zero();
        }

        // F P F^T with F = [[I, I], [0, I]] expanded blockwise.
        let p = &state.covariance;
        let mut fp = [[T::zero(); 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                fp[i][j] = if i < 4 { p[i][j] + p[i + 4][j] } else { p[i][j] };
            }
        }
        let mut cov = [[T::zero(); 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                cov[i][j] = if j < 4 { fp[i][j] + fp[i][j + 4] } else { fp[i][j] };
            }
        }
        for i in 0..8 {
            cov[i][i] = cov[i][i] + std[i] * std[i];
        }
        symmetrize(&mut cov);
        MotionState { mean, covariance: cov }
    }

    /// Kalman measurement update with a box, using the Joseph-form covariance update.
    pub fn update(&self, state: &MotionState<T>, bbox: &BBox<T>) -> MotionState<T> {
        let z = bbox.to_xyah();
        let h = state.mean[3];
        let wp = self.config.std_weight_position;
        let r_std = [wp * h, wp * h, T::lit(1e-1), wp * h];
        let p = &state.covariance;

        // S = H P H^T + R, with H selecting the first four components.
        let mut s: Mat4<T> = [[T::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                s[i][j] = p[i][j];
            }
            s[i][i] = s[i][i] + r_std[i] * r_std[i];
        }
        let chol = cholesky(&s).expect("innovation covariance is positive definite");

        // K = P H^T S^-1  (8x4), solved row by row: S K_i^T = (P H^T)_i^T.
        let mut gain = [[T::zero(); 4]; 8];
        for i in 0..8 {
            let rhs = [p[i][0], p[i][1], p[i][2], p[i][3]];
            gain[i] = cholesky_solve(&chol, rhs);
        }

        let mut mean = state.mean;
        let innovation: [T; 4] = std::array::from_fn(|k| z[k] - state.mean[k]);
        for i in 0..8 {
            let mut acc = T::zero();
            for k in 0..4 {
                acc = acc + gain[i][k] * innovation[k];
            }
            mean[i] = mean[i] + acc;
        }

        // (I - K H) P (I - K H)^T + K R K^T
        let mut ikh = [[T::zero(); 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                let kh = if j < 4 { gain[i][j] } else { T::zero() };
                ikh[i][j] = if i == j { T::one() } else { T::zero() } - kh;
            }
        }
        let left = matmul(&ikh, p);
        let mut cov = matmul_transposed(&left, &ikh);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc = acc + gain[i][k] * r_std[k] * r_std[k] * gain[j][k];
                }
                cov[i][j] = cov[i][j] + acc;
            }
        }
        symmetrize(&mut cov);
        MotionState { mean, covariance: cov }
    }
}

fn symmetrize<T: Scalar>(m: &mut Mat8<T>) {
    let half = T::lit(0.5);
    for i in 0..8 {
        for j in (i + 1)..8 {
            let v = (m[i][j] + m[j][i]) * half;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
}

fn matmul<T: Scalar>(a: &Mat8<T>, b: &Mat8<T>) -> Mat8<T> {
    let mut out = [[T::zero(); 8]; 8];
    for i in 0..8 {
        for k in 0..8 {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..8 {
                out[i][j] = out[i][j] + aik * b[k][j];
            }
        }
    }
    out
}

/// `a * b^T`
fn matmul_transposed<T: Scalar>(a: &Mat8<T>, b: &Mat8<T>) -> Mat8<T> {
    let mut out = [[T::zero(); 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = T::zero();
            for k in 0..8 {
                acc = acc + a[i][k] * b[j][k];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not positive definite.
fn cholesky<T: Scalar, const N: usize>(a: &[[T; N]; N]) -> Option<[[T; N]; N]> {
    let mut l = [[T::zero(); N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum = sum - l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > T::zero()) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve<T: Scalar, const N: usize>(l: &[[T; N]; N], b: [T; N]) -> [T; N] {
    let mut y = [T::zero(); N];
    for i in 0..N {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [T::zero(); N];
    for i in (0..N).rev() {
        let mut s = y[i];
        for k in (i + 1)..N {
            s = s - l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}
