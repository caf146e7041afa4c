//! Central finite-difference gradient verification.
//!
//! These helpers sit on the oracle side of the gradient tests: they only
//! evaluate loss closures, never the analytic backward pass, so a check
//! compares two independent routes to the same derivative.

use super::Parameterized;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with an absolute floor of 1 for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Snapshot accumulated analytic gradients by parameter name.
pub fn snapshot_grads<N: Parameterized>(net: &mut N) -> Vec<(String, Vec<f64>)> {
    net.named_params()
        .into_iter()
        .map(|(name, p)| (name, p.grad.data.clone()))
        .collect()
}

/// Compare analytic parameter gradients against central differences of a
/// forward-only loss. `loss` must be a deterministic function of the
/// network state; the net is cloned for every evaluation so stateful layers
/// (batchnorm running stats, caches) cannot leak between probes.
///
/// At most `max_per_param` evenly spaced elements are probed per parameter.
/// Returns the worst relative error and its location.
pub fn param_grad_check<N: Parameterized + Clone>(
    net: &N,
    loss: impl Fn(&mut N) -> f64,
    analytic: &[(String, Vec<f64>)],
    h: f64,
    max_per_param: usize,
) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for (slot, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let step = (n / max_per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let mut plus = net.clone();
            plus.named_params()[slot].1.value.data[i] += h;
            let fp = loss(&mut plus);
            let mut minus = net.clone();
            minus.named_params()[slot].1.value.data[i] -= h;
            let fm = loss(&mut minus);
            let fd = (fp - fm) / (2.0 * h);
            let e = rel_err(fd, grads[i]);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: fd {fd} vs analytic {}", grads[i]));
            }
        }
    }
    worst
}
