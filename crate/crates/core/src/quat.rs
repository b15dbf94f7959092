//! Unit-quaternion helpers shared by the kinematics, trajectory and scene
//! modules. Quaternions are exchanged as `[w, x, y, z]` arrays.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

/// Norm tolerance accepted for quaternions read from files or the wire.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Orientation with the tool axis (+z of the flange) pointing straight down:
/// a half turn about the world x axis.
pub fn tool_down() -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(0.0, 1.0, 0.0, 0.0))
}

pub fn to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Builds a unit quaternion without renormalising, so that values survive
/// a save/load cycle bit for bit. Returns the offending norm on failure.
pub fn from_wxyz(v: [f64; 4]) -> Result<UnitQuaternion<f64>, f64> {
    let q = Quaternion::new(v[0], v[1], v[2], v[3]);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(norm);
    }
    Ok(UnitQuaternion::new_unchecked(q))
}

/// Relative rotation `a * b⁻¹` with the double cover resolved to w ≥ 0.
fn relative(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Quaternion<f64> {
    let r = (a * b.inverse()).into_inner();
    if r.w < 0.0 {
        -r
    } else {
        r
    }
}

/// Shortest-arc angle between two orientations, in `[0, π]`.
pub fn angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let r = relative(a, b);
    2.0 * r.imag().norm().atan2(r.w)
}

/// Rotation vector (axis · angle) of `target * current⁻¹`, expressed in the
/// world frame.
pub fn rotation_error(target: &UnitQuaternion<f64>, current: &UnitQuaternion<f64>) -> Vector3<f64> {
    let r = relative(target, current);
    let s = r.imag().norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(r.w);
    r.imag() * (angle / s)
}

/// Spherical interpolation along the shortest arc. Falls back to normalised
/// linear interpolation for nearly identical inputs.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return *b;
    }
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 0.9995 {
        let q = qa * (1.0 - t) + qb * t;
        return UnitQuaternion::new_normalize(q);
    }
    let theta = dot.min(1.0).acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / sin_theta;
    let wb = (t * theta).sin() / sin_theta;
    UnitQuaternion::new_normalize(qa * wa + qb * wb)
}

/// Serde adapter storing a unit quaternion as `[w, x, y, z]`.
pub mod wxyz {
    use nalgebra::UnitQuaternion;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &UnitQuaternion<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::to_wxyz(q))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnitQuaternion<f64>, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        super::from_wxyz(v)
            .map_err(|n| D::Error::custom(format!("quaternion is not unit length (norm {n})")))
    }
}

/// Serde adapter storing a 3-vector as `[x, y, z]`.
pub mod xyz {
    use nalgebra::Vector3;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([v.x, v.y, v.z])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let v = <[f64; 3]>::deserialize(d)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(D::Error::custom("vector components must be finite"));
        }
        Ok(Vector3::new(v[0], v[1], v[2]))
    }
}
