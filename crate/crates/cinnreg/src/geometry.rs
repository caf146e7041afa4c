//! The 5-parameter rigid C-arm pose and its sampling protocol.
//!
//! A pose is three translations in mm (sagittal x, longitudinal y,
//! transverse z) plus two rotations in degrees: LAO about the longitudinal
//! axis and CRAN about the transverse axis, both through the volume center.
//! LAO is kept in the canonical range (-90, 270] so that the two expected
//! posterior mode regions, [-20, 20] and [160, 200], never straddle a
//! wrap-around.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;

/// Normalization scale for translations (mm) and CRAN (deg).
pub const T_SCALE: f64 = 20.0;
///// LAO normalization: (lao - 90) / 110 maps [-20, 200] onto [-1, 1].
pub const LAO_OFFSET: f64 = 90.0;
pub const LAO_SCALE: f64 = 110.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Sagittal translation, mm.
    pub tx: f64,
    /// Longitudinal translation, mm.
    pub ty: f64,
    /// Transverse translation, mm.
    pub tz: f64,
    /// Rotation about the longitudinal axis, degrees, canonical (-90, 270].
    pub lao: f64,
    /// Rotation about the transverse axis, degrees, canonical (-180, 180].
    pub cran: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        lao: 0.0,
        cran: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tz: f64, lao: f64, cran: f64) -> Pose {
        Pose {
            tx,
            ty,
            tz,
            lao: canonicalize_lao(lao),
            cran: canonicalize_cran(cran),
        }
    }
}

/// Wrap an LAO angle into (-90, 270], preserving value mod 360.
pub fn canonicalize_lao(angle_deg: f64) -> f64 {
    let mut a = angle_deg.rem_euclid(360.0);
    if a > 270.0 {
        a -= 360.0;
    }
    a
}

/// Wrap a CRAN angle into (-180, 180].
pub fn canonicalize_cran(angle_deg: f64) -> f64 {
    let mut a = angle_deg.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Rigid map q -> R q + t in volume mm coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    #[inline]
    pub fn apply(&self, q: Vector3<f64>) -> Vector3<f64> {
        self.rotation * q + self.translation
    }
}

/// Build the rigid transform for a pose: translate the C-arm by t, then
/// rotate by CRAN about the transverse (z) axis through `volume_center`,
/// then by LAO about the longitudinal (y) axis through the same center:
///
///   T(q) = R_lao * R_cran * (q + t - c) + c
///
/// With LAO outermost, adding 180 degrees to LAO left-multiplies the whole
/// camera geometry by the volume's 180-degree symmetry rotation, so for a
/// symmetric volume the flipped pose reproduces the projection exactly,
/// for every translation and CRAN value.
pub fn pose_to_transform(p: &Pose, volume_center: [f64; 3]) -> RigidTransform {
    let lao = p.lao.to_radians();
    let cran = p.cran.to_radians();
    let (sl, cl) = lao.sin_cos();
    let (sc, cc) = cran.sin_cos();
    // Rotation about +y by lao.
    let r_lao = Matrix3::new(cl, 0.0, sl, 0.0, 1.0, 0.0, -sl, 0.0, cl);
    // Rotation about +z by cran.
    let r_cran = Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    let rotation = r_lao * r_cran;
    let c = Vector3::new(volume_center[0], volume_center[1], volume_center[2]);
    let t = Vector3::new(p.tx, p.ty, p.tz);
    RigidTransform {
        rotation,
        translation: rotation * (t - c) + c,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoseSamplerConfig {
    /// Continuous-uniform translation range, mm.
    pub t_range_mm: [f64; 2],
    /// Discrete rotation grid range, degrees.
    pub rot_range_deg: [i64; 2],
    pub rot_step_deg: i64,
    /// Probability of adding 180 degrees to LAO.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        PoseSamplerConfig {
            t_range_mm: [-20.0, 20.0],
            rot_range_deg: [-20, 20],
            rot_step_deg: 1,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_range_mm[0] >= self.t_range_mm[1] {
            return Err(Error::Parameter("t_range low must be < high".into()));
        }
        let span = self.rot_range_deg[1] - self.rot_range_deg[0];
        if self.rot_step_deg <= 0 || span < 0 || span % self.rot_step_deg != 0 {
            return Err(Error::Parameter(
                "rot_step must be positive and divide the rotation range".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Parameter("flip_prob must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Draw the pose at `draw_index`. Stateless: each draw derives its own
/// generator from (seed, index), so generation parallelizes and reproduces
/// bit-exactly.
pub fn sample_pose(cfg: &PoseSamplerConfig, draw_index: u64) -> Pose {
    let mut rng = stream(cfg.seed, draw_index);
    let [lo, hi] = cfg.t_range_mm;
    let tx = rng.gen_range(lo..hi);
    let ty = rng.gen_range(lo..hi);
    let tz = rng.gen_range(lo..hi);
    let steps = (cfg.rot_range_deg[1] - cfg.rot_range_deg[0]) / cfg.rot_step_deg + 1;
    let mut lao = (cfg.rot_range_deg[0] + rng.gen_range(0..steps) * cfg.rot_step_deg) as f64;
    let cran = (cfg.rot_range_deg[0] + rng.gen_range(0..steps) * cfg.rot_step_deg) as f64;
    if rng.gen_range(0.0..1.0) < cfg.flip_prob {
        lao += 180.0;
    }
    Pose::new(tx, ty, tz, lao, cran)
}

/// Normalized network-facing representation of a pose.
pub fn pose_vector(p: &Pose) -> [f64; 5] {
    [
        p.tx / T_SCALE,
        p.ty / T_SCALE,
        p.tz / T_SCALE,
        (p.lao - LAO_OFFSET) / LAO_SCALE,
        p.cran / T_SCALE,
    ]
}

/// Exact inverse of [`pose_vector`] (LAO re-canonicalized, a no-op on the
/// valid domain).
pub fn vector_pose(v: &[f64; 5]) -> Pose {
    Pose {
        tx: v[0] * T_SCALE,
        ty: v[1] * T_SCALE,
        tz: v[2] * T_SCALE,
        lao: canonicalize_lao(v[3] * LAO_SCALE + LAO_OFFSET),
        cran: canonicalize_cran(v[4] * T_SCALE),
    }
}
