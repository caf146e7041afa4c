//! Property-based invariants for the angle canonicalization, pose
//! vectorization, and flow bijectivity.

use cinnreg::cinn::{FlowConfig, FlowModel};
use cinnreg::geometry::{canonicalize_cran, canonicalize_lao, pose_vector, vector_pose, Pose};
use cinnreg::nncore::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn lao_canonical_range_and_idempotence(a in -1000.0f64..1000.0) {
        let c = canonicalize_lao(a);
        prop_assert!(c > -90.0 && c <= 270.0, "canonical lao {c}");
        prop_assert!((canonicalize_lao(c) - c).abs() < 1e-9);
        // Same angle modulo 360.
        let d = (a - c).rem_euclid(360.0);
        prop_assert!(d < 1e-6 || (360.0 - d) < 1e-6, "changed by {d}");
    }

    #[test]
    fn cran_canonical_range_and_idempotence(a in -1000.0f64..1000.0) {
        let c = canonicalize_cran(a);
        prop_assert!(c > -180.0 && c <= 180.0, "canonical cran {c}");
        prop_assert!((canonicalize_cran(c) - c).abs() < 1e-9);
    }

    #[test]
    fn pose_vector_round_trip(
        tx in -50.0f64..50.0,
        ty in -50.0f64..50.0,
        tz in -50.0f64..50.0,
        lao in -89.0f64..270.0,
        cran in -179.0f64..180.0,
    ) {
        let p = Pose { tx, ty, tz, lao, cran };
        let q = vector_pose(&pose_vector(&p));
        prop_assert!((q.tx - tx).abs() < 1e-9);
        prop_assert!((q.ty - ty).abs() < 1e-9);
        prop_assert!((q.tz - tz).abs() < 1e-9);
        prop_assert!((q.lao - lao).abs() < 1e-9);
        prop_assert!((q.cran - cran).abs() < 1e-9);
    }

    #[test]
    fn flow_round_trip_is_identity(seed in 0u64..1000, scale in 0.1f64..3.0) {
        let cfg = FlowConfig { cond_dim: 8, ..FlowConfig::default() };
        let mut flow = FlowModel::new(&cfg, seed);
        let batch = 4;
        let mut x = Tensor::zeros(&[batch, 5]);
        let mut cond = Tensor::zeros(&[batch, 8]);
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            s ^= s >> 33;
            s = s.wrapping_mul(0xff51afd7ed558ccd);
            s ^= s >> 33;
            (s as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for v in &mut x.data {
            *v = next() * scale;
        }
        for v in &mut cond.data {
            *v = next();
        }
        let (z, _) = flow.forward(&x, &cond);
        let back = flow.inverse(&z, &cond);
        for (a, b) in x.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
