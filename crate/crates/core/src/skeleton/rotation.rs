use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Rotation quaternion `(w, x, y, z)`. Unit length is not enforced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Quaternion::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Axis-angle vector to unit quaternion.
    ///
    /// Uses a Taylor expansion of `sin(θ/2)/θ` near zero so tiny rotations stay accurate.
    pub fn from_expmap(v: [f64; 3]) -> Self {
        let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let half = 0.5 * theta;
        let k = if theta < 1e-6 {
            let t2 = theta * theta;
            0.5 - t2 / 48.0 + t2 * t2 / 3840.0
        } else {
            half.sin() / theta
        };
        Quaternion::new(half.cos(), k * v[0], k * v[1], k * v[2])
    }

    /// Unit quaternion to axis-angle with rotation angle in `[0, π]`.
    pub fn to_expmap(self) -> Result<[f64; 3]> {
        let mut q = self.normalized()?;
        if q.w < 0.0 {
            q = q.neg();
        }
        let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        let theta = 2.0 * s.atan2(q.w);
        let k = if s < 1e-12 { 2.0 / q.w } else { theta / s };
        Ok([k * q.x, k * q.y, k * q.z])
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_matrix(self) -> Result<Mat3> {
        let Quaternion { w, x, y, z } = self.normalized()?;
        Ok([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    /// Euler angles for the given intrinsic order, normalizing first.
    pub fn to_euler(self, order: EulerOrder) -> Result<[f64; 3]> {
        Ok(order.angles_from_matrix(&self.to_matrix()?))
    }
}

/// Intrinsic Tait–Bryan rotation order. `Zyx` means `R = Rz(a0) · Ry(a1) · Rx(a2)`
/// and angles are returned in that order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerOrder {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    #[default]
    Zyx,
}

impl EulerOrder {
    pub const ALL: [EulerOrder; 6] = [
        EulerOrder::Xyz,
        EulerOrder::Xzy,
        EulerOrder::Yxz,
        EulerOrder::Yzx,
        EulerOrder::Zxy,
        EulerOrder::Zyx,
    ];

    fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Xyz => [0, 1, 2],
            EulerOrder::Xzy => [0, 2, 1],
            EulerOrder::Yxz => [1, 0, 2],
            EulerOrder::Yzx => [1, 2, 0],
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
        }
    }

    /// +1 for cyclic orders (xyz, yzx, zxy), −1 otherwise.
    fn parity(self) -> f64 {
        match self {
            EulerOrder::Xyz | EulerOrder::Yzx | EulerOrder::Zxy => 1.0,
            _ => -1.0,
        }
    }

    pub fn matrix_from_angles(self, angles: [f64; 3]) -> Mat3 {
        let [a, b, c] = self.axes();
        matmul3(
            &matmul3(&axis_rotation(a, angles[0]), &axis_rotation(b, angles[1])),
            &axis_rotation(c, angles[2]),
        )
    }

    /// Decomposes a rotation matrix. At gimbal lock the third angle is set to 0.
    pub fn angles_from_matrix(self, r: &Mat3) -> [f64; 3] {
        let [i, j, k] = self.axes();
        let s = self.parity();
        let sin_mid = (s * r[i][k]).clamp(-1.0, 1.0);
        let mid = sin_mid.asin();
        if sin_mid.abs() > 1.0 - 1e-12 {
            let first = (s * r[k][j]).atan2(r[j][j]);
            return [first, mid, 0.0];
        }
        let first = (-s * r[j][k]).atan2(r[k][k]);
        let third = (-s * r[i][j]).atan2(r[i][i]);
        [first, mid, third]
    }
}

impl fmt::Display for EulerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EulerOrder::Xyz => "xyz",
            EulerOrder::Xzy => "xzy",
            EulerOrder::Yxz => "yxz",
            EulerOrder::Yzx => "yzx",
            EulerOrder::Zxy => "zxy",
            EulerOrder::Zyx => "zyx",
        };
        f.write_str(s)
    }
}

impl FromStr for EulerOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EulerOrder::ALL
            .into_iter()
            .find(|o| o.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown Euler order {s:?}")))
    }
}

fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;

    use super::*;

    fn max_mat_diff(a: &Mat3, b: &Mat3) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                m = m.max((a[r][c] - b[r][c]).abs());
            }
        }
        m
    }

    #[test]
    fn zero_expmap_is_identity() {
        assert_eq!(Quaternion::from_expmap([0.0; 3]), Quaternion::IDENTITY);
    }

    #[test]
    fn half_turn_about_x() {
        let q = Quaternion::from_expmap([PI, 0.0, 0.0]);
        assert!(q.w.abs() < 1e-12 && (q.x - 1.0).abs() < 1e-12 && q.y == 0.0 && q.z == 0.0);
    }

    #[test]
    fn small_angle_series_is_continuous() {
        let below = Quaternion::from_expmap([0.999e-6, 0.0, 0.0]);
        let above = Quaternion::from_expmap([1.001e-6, 0.0, 0.0]);
        assert!((above.x - below.x - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn identity_euler_is_zero() {
        for o in EulerOrder::ALL {
            assert_eq!(Quaternion::IDENTITY.to_euler(o).unwrap(), [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn quarter_turn_about_z_is_yaw() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let e = Quaternion::new(h, 0.0, 0.0, h).to_euler(EulerOrder::Zyx).unwrap();
        assert!((e[0] - FRAC_PI_2).abs() < 1e-12);
        assert!(e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).to_euler(EulerOrder::Zyx).is_err());
    }

    #[test]
    fn gimbal_lock_sets_third_angle_zero() {
        let r = EulerOrder::Zyx.matrix_from_angles([0.3, FRAC_PI_2, 0.0]);
        let e = EulerOrder::Zyx.angles_from_matrix(&r);
        assert_eq!(e[2], 0.0);
        assert!(max_mat_diff(&EulerOrder::Zyx.matrix_from_angles(e), &r) < 1e-9);
    }

    #[test]
    fn order_parses() {
        assert_eq!("ZYX".parse::<EulerOrder>().unwrap(), EulerOrder::Zyx);
        assert!("xyx".parse::<EulerOrder>().is_err());
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|a| Quaternion::from_array(a).normalized().unwrap())
    }

    proptest! {
        #[test]
        fn expmap_roundtrip(v in prop::array::uniform3(-1.8f64..1.8)) {
            let n = (v[0]*v[0] + v[1]*v[1] + v[2]*v[2]).sqrt();
            prop_assume!(n < PI - 1e-6);
            let q = Quaternion::from_expmap(v);
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            let back = q.to_expmap().unwrap();
            for k in 0..3 {
                prop_assert!((back[k] - v[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn euler_matrix_matches_quaternion_matrix(q in unit_quat()) {
            let r = q.to_matrix().unwrap();
            for o in EulerOrder::ALL {
                let e = q.to_euler(o).unwrap();
                prop_assert!(max_mat_diff(&o.matrix_from_angles(e), &r) < 1e-9);
            }
        }

        #[test]
        fn double_cover_gives_same_rotation(q in unit_quat()) {
            prop_assert!(max_mat_diff(&q.to_matrix().unwrap(), &q.neg().to_matrix().unwrap()) < 1e-12);
            prop_assert_eq!(q.to_euler(EulerOrder::Zyx).unwrap(), q.neg().to_euler(EulerOrder::Zyx).unwrap());
        }
    }
}
