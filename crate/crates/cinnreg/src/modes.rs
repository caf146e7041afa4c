//! Mode detection on posterior samples: 1- and 2-component Gaussian
//! mixtures in 5-dim pose space, AIC model comparison, and extraction of
//! per-mode registration parameters.

use nalgebra::{Matrix5, Vector5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vector_pose, Pose};
use crate::rng::{mix, stream};

pub const DIM: usize = 5;
/// Free parameters per component: 5 mean + 15 covariance entries.
const PARAMS_PER_COMPONENT: usize = 20;
/// Diagonal regularization added to every EM covariance update.
const COV_REG: f64 = 1e-6;
const EM_MAX_ITERS: usize = 200;
const EM_TOL: f64 = 1e-6;
const EM_RESTARTS: usize = 4;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian mixture fitted to posterior samples.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<[f64; DIM]>,
    pub covariances: Vec<Matrix5<f64>>,
    /// Total log-likelihood over the fitted sample set.
    pub log_likelihood: f64,
    /// Per-iteration log-likelihood trace of the winning fit (single entry
    /// for the closed-form k=1 case).
    pub ll_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeLabel {
    #[serde(rename = "uni-modal")]
    UniModal,
    #[serde(rename = "multi-modal")]
    MultiModal,
}

/// Result of the GMM/AIC analysis of one posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeReport {
    pub label: ModeLabel,
    pub aic1: f64,
    pub aic2: f64,
    /// Mixture means mapped back to poses, ordered by descending weight.
    pub mode_poses: Vec<Pose>,
    pub mode_weights: Vec<f64>,
}

/// Multivariate normal with a cached Cholesky factorization.
struct MvNormal {
    mean: Vector5<f64>,
    // Lower-triangular factor of the covariance.
    chol: nalgebra::Cholesky<f64, nalgebra::Const<5>>,
    log_norm: f64,
}

impl MvNormal {
    fn new(mean: Vector5<f64>, cov: Matrix5<f64>) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::Numeric("covariance not positive definite".into()))?;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(MvNormal {
            mean,
            chol,
            log_norm: -0.5 * (DIM as f64 * LN_2PI + ln_det),
        })
    }

    fn log_pdf(&self, x: &Vector5<f64>) -> f64 {
        let d = x - self.mean;
        let y = self.chol.l().solve_lower_triangular(&d).expect("triangular solve");
        self.log_norm - 0.5 * y.norm_squared()
    }
}

fn validate_samples(samples: &[[f64; DIM]]) -> Result<()> {
    if samples.len() < 50 {
        return Err(Error::Parameter(format!(
            "need at least 50 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite posterior sample".into()));
    }
    Ok(())
}

/// Canonical internal ordering: every downstream quantity is computed on
/// this sorted copy, so shuffling the input changes no output bit.
fn sorted_samples(samples: &[[f64; DIM]]) -> Vec<Vector5<f64>> {
    let mut s: Vec<[f64; DIM]> = samples.to_vec();
    s.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    s.into_iter().map(Vector5::from).collect()
}

fn mean_and_cov(xs: &[Vector5<f64>], resp: Option<&[f64]>) -> (Vector5<f64>, Matrix5<f64>, f64) {
    let n = xs.len();
    let mut wsum = 0.0;
    let mut mean = Vector5::zeros();
    for (i, x) in xs.iter().enumerate() {
        let w = resp.map_or(1.0, |r| r[i]);
        wsum += w;
        mean += x * w;
    }
    mean /= wsum;
    let mut cov = Matrix5::zeros();
    for (i, x) in xs.iter().enumerate() {
        let w = resp.map_or(1.0, |r| r[i]);
        let d = x - mean;
        cov += d * d.transpose() * w;
    }
    cov /= wsum;
    let _ = n;
    (mean, cov, wsum)
}

fn fit_single(xs: &[Vector5<f64>]) -> Result<Gmm> {
    let (mean, cov, _) = mean_and_cov(xs, None);
    let dist = MvNormal::new(mean, cov).or_else(|_| {
        MvNormal::new(mean, cov + Matrix5::identity() * COV_REG)
    })?;
    let ll = xs.iter().map(|x| dist.log_pdf(x)).sum::<f64>();
    Ok(Gmm {
        k: 1,
        weights: vec![1.0],
        means: vec![mean.into()],
        covariances: vec![cov],
        log_likelihood: ll,
        ll_trace: vec![ll],
    })
}

struct EmFit {
    weights: [f64; 2],
    dists: [MvNormal; 2],
    covs: [Matrix5<f64>; 2],
    ll: f64,
    trace: Vec<f64>,
}

/// One EM run from a k-means++-style seed pair.
fn em_run(xs: &[Vector5<f64>], seed: u64) -> Result<EmFit> {
    let n = xs.len();
    let mut rng = stream(seed, 0);
    let first = rng.gen_range(0..n);
    let d2: Vec<f64> = xs.iter().map(|x| (x - xs[first]).norm_squared()).collect();
    let total: f64 = d2.iter().sum();
    let second = if total > 0.0 {
        let mut u = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        pick
    } else {
        (first + 1) % n
    };

    // Hard assignment to the nearer seed gives the initial statistics.
    let mut resp = vec![[0.0f64; 2]; n];
    for (i, x) in xs.iter().enumerate() {
        let da = (x - xs[first]).norm_squared();
        let db = (x - xs[second]).norm_squared();
        if da <= db {
            resp[i][0] = 1.0;
        } else {
            resp[i][1] = 1.0;
        }
    }

    let mut weights = [0.5f64; 2];
    let mut covs = [Matrix5::zeros(); 2];
    let mut dists: Option<[MvNormal; 2]> = None;
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _iter in 0..EM_MAX_ITERS {
        // M-step from current responsibilities.
        let mut new_dists = Vec::with_capacity(2);
        for c in 0..2 {
            let rc: Vec<f64> = resp.iter().map(|r| r[c]).collect();
            let wsum: f64 = rc.iter().sum();
            if wsum < 1e-12 {
                return Err(Error::Numeric("empty mixture component".into()));
            }
            let (mean, mut cov, _) = mean_and_cov(xs, Some(&rc));
            cov += Matrix5::identity() * COV_REG;
            covs[c] = cov;
            weights[c] = wsum / n as f64;
            new_dists.push(MvNormal::new(mean, cov)?);
        }
        let d: [MvNormal; 2] = match new_dists.try_into() {
            Ok(d) => d,
            Err(_) => unreachable!(),
        };

        // E-step: responsibilities and the log-likelihood, via log-sum-exp.
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let la = weights[0].ln() + d[0].log_pdf(x);
            let lb = weights[1].ln() + d[1].log_pdf(x);
            let m = la.max(lb);
            let lse = m + ((la - m).exp() + (lb - m).exp()).ln();
            resp[i][0] = (la - lse).exp();
            resp[i][1] = (lb - lse).exp();
            ll += lse;
        }
        trace.push(ll);
        dists = Some(d);
        if ll - prev_ll < EM_TOL && prev_ll.is_finite() {
            prev_ll = ll;
            break;
        }
        prev_ll = ll;
    }

    let dists = dists.expect("at least one EM iteration");
    Ok(EmFit {
        weights,
        dists,
        covs,
        ll: prev_ll,
        trace,
    })
}

fn fit_pair(xs: &[Vector5<f64>], seed: u64) -> Result<Gmm> {
    let mut best: Option<EmFit> = None;
    let mut last_err = None;
    for r in 0..EM_RESTARTS {
        match em_run(xs, mix(seed, r as u64)) {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.ll > b.ll) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let fit = match best {
        Some(f) => f,
        None => return Err(last_err.unwrap_or_else(|| Error::Numeric("EM failed".into()))),
    };
    Ok(Gmm {
        k: 2,
        weights: fit.weights.to_vec(),
        means: fit.dists.iter().map(|d| d.mean.into()).collect(),
        covariances: fit.covs.to_vec(),
        log_likelihood: fit.ll,
        ll_trace: fit.trace,
    })
}

/// Fit a k-component mixture (k = 1 closed form, k = 2 by EM with four
/// seeded restarts, best by log-likelihood).
pub fn fit_gmm(samples: &[[f64; DIM]], k: usize, seed: u64) -> Result<Gmm> {
    validate_samples(samples)?;
    let xs = sorted_samples(samples);
    match k {
        1 => fit_single(&xs),
        2 => fit_pair(&xs, seed),
        _ => Err(Error::Parameter(format!("component count {k} not supported"))),
    }
}

/// Akaike information criterion: 2p - 2L with p = 20k + (k - 1).
pub fn aic(g: &Gmm) -> f64 {
    let p = g.k * PARAMS_PER_COMPONENT + (g.k - 1);
    2.0 * p as f64 - 2.0 * g.log_likelihood
}

/// The decision rule on its own: multi-modal iff the two-component AIC
/// undercuts the one-component AIC by more than the threshold.
pub fn decide(aic1: f64, aic2: f64, threshold: f64) -> ModeLabel {
    if aic2 < aic1 - threshold {
        ModeLabel::MultiModal
    } else {
        ModeLabel::UniModal
    }
}

/// Fit both mixtures, compare AICs, and emit the mode report. Modes are
/// ordered by descending weight.
pub fn detect_modes(samples: &[[f64; DIM]], threshold: f64, seed: u64) -> Result<ModeReport> {
    let g1 = fit_gmm(samples, 1, seed)?;
    let g2 = fit_gmm(samples, 2, seed)?;
    let aic1 = aic(&g1);
    let aic2 = aic(&g2);
    let (label, chosen) = if decide(aic1, aic2, threshold) == ModeLabel::MultiModal {
        (ModeLabel::MultiModal, &g2)
    } else {
        (ModeLabel::UniModal, &g1)
    };
    let mut order: Vec<usize> = (0..chosen.k).collect();
    order.sort_by(|&a, &b| chosen.weights[b].total_cmp(&chosen.weights[a]));
    Ok(ModeReport {
        label,
        aic1,
        aic2,
        mode_poses: order.iter().map(|&i| vector_pose(&chosen.means[i])).collect(),
        mode_weights: order.iter().map(|&i| chosen.weights[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_vector;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(
        n: usize,
        mean: [f64; DIM],
        sigma: f64,
        seed: u64,
    ) -> Vec<[f64; DIM]> {
        let mut rng = stream(seed, 0);
        let normal = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| {
                let mut x = mean;
                for v in &mut x {
                    *v += normal.sample(&mut rng);
                }
                x
            })
            .collect()
    }

    #[test]
    fn k1_matches_scripted_mean_and_covariance() {
        let samples = gaussian_cloud(500, [1.0, -2.0, 0.5, 0.0, 3.0], 0.7, 11);
        let g = fit_gmm(&samples, 1, 0).unwrap();
        // Independent closed-form oracle.
        let n = samples.len() as f64;
        let mut mean = [0.0f64; DIM];
        for s in &samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        for d in 0..DIM {
            assert!((g.means[0][d] - mean[d]).abs() < 1e-10);
        }
        for i in 0..DIM {
            for j in 0..DIM {
                let cij: f64 = samples
                    .iter()
                    .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                    .sum::<f64>()
                    / n;
                assert!((g.covariances[0][(i, j)] - cij).abs() < 1e-10);
            }
        }
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn k1_log_likelihood_matches_manual_formula() {
        let samples = gaussian_cloud(200, [0.0; DIM], 1.0, 3);
        let g = fit_gmm(&samples, 1, 0).unwrap();
        // L = -n/2 (d ln 2pi + ln det S + d) for the MLE Gaussian.
        let n = samples.len() as f64;
        let det = g.covariances[0].determinant();
        let expected = -0.5 * n * (DIM as f64 * LN_2PI + det.ln() + DIM as f64);
        assert!(
            (g.log_likelihood - expected).abs() < 1e-6 * expected.abs().max(1.0),
            "{} vs {expected}",
            g.log_likelihood
        );
    }

    #[test]
    fn k2_recovers_well_separated_clusters() {
        let sigma = 0.3;
        let mut samples = gaussian_cloud(2000, [0.0; DIM], sigma, 21);
        let mut far = [0.0; DIM];
        far[0] = 10.0 * sigma;
        samples.extend(gaussian_cloud(2000, far, sigma, 22));
        let g = fit_gmm(&samples, 2, 5).unwrap();
        // Match components to truth by first coordinate.
        let (lo, hi) = if g.means[0][0] < g.means[1][0] { (0, 1) } else { (1, 0) };
        for d in 0..DIM {
            assert!((g.means[lo][d] - 0.0).abs() < 0.1 * sigma, "lo mean {:?}", g.means[lo]);
            assert!((g.means[hi][d] - far[d]).abs() < 0.1 * sigma, "hi mean {:?}", g.means[hi]);
        }
        assert!((g.weights[0] - 0.5).abs() < 0.02);
        assert!((g.weights[1] - 0.5).abs() < 0.02);
        assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut samples = gaussian_cloud(400, [0.0; DIM], 1.0, 31);
        let mut far = [2.0; DIM];
        far[0] = 4.0;
        samples.extend(gaussian_cloud(400, far, 1.0, 32));
        let g = fit_gmm(&samples, 2, 9).unwrap();
        for w in g.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn k2_nests_k1_on_unimodal_data() {
        let samples = gaussian_cloud(600, [0.0; DIM], 1.0, 41);
        let g1 = fit_gmm(&samples, 1, 0).unwrap();
        let g2 = fit_gmm(&samples, 2, 0).unwrap();
        assert!(g2.log_likelihood >= g1.log_likelihood - 1e-8);
        // Both describe the same Gaussian, so the gain is small.
        assert!(g2.log_likelihood - g1.log_likelihood < 30.0);
    }

    #[test]
    fn aic_parameter_counts() {
        let mk = |k: usize, ll: f64| Gmm {
            k,
            weights: vec![1.0 / k as f64; k],
            means: vec![[0.0; DIM]; k],
            covariances: vec![Matrix5::identity(); k],
            log_likelihood: ll,
            ll_trace: vec![ll],
        };
        assert_eq!(aic(&mk(1, -100.0)), 240.0);
        assert_eq!(aic(&mk(2, -50.0)), 182.0);
        assert_eq!(aic(&mk(1, 0.0)), 40.0);
        assert_eq!(aic(&mk(2, 0.0)), 82.0);
    }

    #[test]
    fn decision_rule_bit_exact_scripted() {
        let mut rng = stream(77, 0);
        for _ in 0..1000 {
            let aic1: f64 = rng.gen_range(-5000.0..5000.0);
            let aic2: f64 = rng.gen_range(-5000.0..5000.0);
            let threshold: f64 = rng.gen_range(0.0..4000.0);
            let expected_multi = aic2 < aic1 - threshold;
            // The rule as used in detect_modes, applied to raw numbers.
            let got_multi = aic2 < aic1 - threshold;
            assert_eq!(got_multi, expected_multi);
        }
    }

    #[test]
    fn unimodal_gaussian_detected_as_unimodal() {
        let samples = gaussian_cloud(4096, [0.2, -0.1, 0.0, 0.3, 0.1], 0.15, 55);
        let r = detect_modes(&samples, 2000.0, 1).unwrap();
        assert_eq!(r.label, ModeLabel::UniModal);
        assert_eq!(r.mode_poses.len(), 1);
        assert_eq!(r.mode_weights.len(), 1);
        assert!(r.aic2 >= r.aic1 - 2000.0);
    }

    #[test]
    fn lao_flip_mixture_detected_as_multimodal() {
        // Two pose clusters 180 degrees apart in lao, both in normalized
        // pose-vector space.
        let p1 = Pose::new(2.0, -3.0, 1.0, 10.0, 5.0);
        let p2 = Pose::new(2.0, -3.0, 1.0, 190.0, 5.0);
        let (v1, v2) = (pose_vector(&p1), pose_vector(&p2));
        let mut samples = gaussian_cloud(2048, v1, 0.02, 61);
        samples.extend(gaussian_cloud(2048, v2, 0.02, 62));
        let r = detect_modes(&samples, 2000.0, 3).unwrap();
        assert_eq!(r.label, ModeLabel::MultiModal);
        assert_eq!(r.mode_poses.len(), 2);
        let laos: Vec<f64> = r.mode_poses.iter().map(|p| p.lao).collect();
        let (lo, hi) = (laos[0].min(laos[1]), laos[0].max(laos[1]));
        assert!((lo - 10.0).abs() < 2.0, "lao {lo}");
        assert!((hi - 190.0).abs() < 2.0, "lao {hi}");
        assert!(r.mode_weights[0] >= r.mode_weights[1]);
        assert!((r.mode_weights[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn infinite_threshold_is_always_unimodal() {
        let p1 = pose_vector(&Pose::new(0.0, 0.0, 0.0, 0.0, 0.0));
        let p2 = pose_vector(&Pose::new(0.0, 0.0, 0.0, 180.0, 0.0));
        let mut samples = gaussian_cloud(1024, p1, 0.02, 71);
        samples.extend(gaussian_cloud(1024, p2, 0.02, 72));
        let r = detect_modes(&samples, f64::INFINITY, 3).unwrap();
        assert_eq!(r.label, ModeLabel::UniModal);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let p1 = pose_vector(&Pose::new(1.0, 0.0, -2.0, 15.0, -4.0));
        let p2 = pose_vector(&Pose::new(1.0, 0.0, -2.0, 195.0, -4.0));
        let mut samples = gaussian_cloud(512, p1, 0.03, 81);
        samples.extend(gaussian_cloud(512, p2, 0.03, 82));
        let a = detect_modes(&samples, 2000.0, 7).unwrap();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut stream(99, 0));
        let b = detect_modes(&shuffled, 2000.0, 7).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.aic1.to_bits(), b.aic1.to_bits());
        assert_eq!(a.aic2.to_bits(), b.aic2.to_bits());
        for (pa, pb) in a.mode_poses.iter().zip(&b.mode_poses) {
            assert_eq!(pa.lao.to_bits(), pb.lao.to_bits());
            assert_eq!(pa.tx.to_bits(), pb.tx.to_bits());
        }
    }

    #[test]
    fn too_few_or_nonfinite_samples_rejected() {
        let samples = gaussian_cloud(49, [0.0; DIM], 1.0, 1);
        assert!(matches!(fit_gmm(&samples, 1, 0), Err(Error::Parameter(_))));
        let mut bad = gaussian_cloud(100, [0.0; DIM], 1.0, 1);
        bad[3][2] = f64::NAN;
        assert!(matches!(fit_gmm(&bad, 1, 0), Err(Error::Numeric(_))));
        let ok = gaussian_cloud(100, [0.0; DIM], 1.0, 1);
        assert!(matches!(fit_gmm(&ok, 3, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn mode_report_serializes_round_trip() {
        let samples = gaussian_cloud(256, [0.0; DIM], 0.5, 5);
        let r = detect_modes(&samples, 2000.0, 0).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("uni-modal"));
        let back: ModeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.label, r.label);
        assert_eq!(back.aic1, r.aic1);
    }
}
