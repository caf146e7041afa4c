// Probe: can the flow learn cond-gated tight bimodality at large separation?
// cond c=0 -> bimodal at +/-SEP, c=+/-1 -> unimodal at +/-SEP. All modes sigma.
use cinnreg::cinn::{sample_posterior_with_cond, FlowConfig, FlowModel};
use cinnreg::nncore::{AdamConfig, Tensor};
use cinnreg::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;

const SEP: f64 = 0.82;

// cond_dim-wide condition: smooth random features of (kind, nuisance) plus
// per-sample noise, mimicking a drifting condnet embedding with dropout.
fn cond_features(
    kind: i32,
    nuis: f64,
    mag: f64,
    noise: f64,
    cdim: usize,
    linear_mag: bool,
    rng: &mut impl Rng,
) -> Vec<f64> {
    (0..cdim)
        .map(|d| {
            let w = ((d * 37 + 11) % 17) as f64 / 17.0 - 0.5;
            let base = match kind { 0 => 0.3, 1 => -0.7, _ => 0.9 };
            let e: f64 = StandardNormal.sample(rng);
            // linear_mag mimics a regression-trained trunk: the magnitude
            // lives along a single linear direction instead of being spread
            // nonlinearly over all features.
            let magf = if linear_mag {
                if d == 0 { mag } else { 0.0 }
            } else {
                0.6 * (w * 7.0 * mag).cos()
            };
            w * base + 0.4 * (w * 9.0 * nuis).sin() + magf + noise * e
        })
        .collect()
}

/// `distinct` base items; each output row picks a base item with a fresh
/// flip coin (symmetric items) and fresh cond noise, like per-epoch
/// augmentation over a small dataset.
fn make_data(
    n: usize,
    seed: u64,
    sigma: f64,
    cdim: usize,
    cnoise: f64,
    distinct: usize,
    linear_mag: bool,
    bd: usize,
) -> (Tensor, Tensor) {
    let mut rng = stream(seed, 0);
    // base items: (kind, side, nuisance, pose noise)
    let base: Vec<(i32, f64, f64, [f64; 5])> = (0..distinct)
        .map(|_| {
            let kind: i32 = rng.gen_range(0..3);
            let mag = SEP + 0.18 * rng.gen_range(-1.0..1.0f64);
            let side = if kind == 1 || (kind == 0 && rng.gen_bool(0.5)) { -mag } else { mag };
            let nuis: f64 = rng.gen_range(-1.0..1.0);
            let mut eps = [0.0; 5];
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            (kind, side, nuis, eps)
        })
        .collect();
    let mut xs = Tensor::zeros(&[n, 5]);
    let mut cs = Tensor::zeros(&[n, cdim]);
    for i in 0..n {
        let (kind, side, nuis, eps) = base[rng.gen_range(0..distinct)];
        // per-row flip coin for symmetric items: the pose label, including
        // its fixed per-item posterior offset, mirrors to the other side
        let m = if kind == 0 && rng.gen_bool(0.5) { -side } else { side };
        let sgn = if m == side { 1.0 } else { -1.0 };
        let feats = cond_features(kind, nuis, side.abs(), cnoise, cdim, linear_mag, &mut rng);
        cs.data[i * cdim..(i + 1) * cdim].copy_from_slice(&feats);
        for d in 0..5 {
            let e = if d == bd { sgn * eps[d] } else { eps[d] };
            xs.data[i * 5 + d] = sigma * e + if d == bd { m } else { 0.2 * nuis };
        }
    }
    (xs, cs)
}

fn stats(flow: &mut FlowModel, kind: i32, cdim: usize, linear_mag: bool, bd: usize, tag: &str) {
    let mut cond = Tensor::zeros(&[1, cdim]);
    let feats = cond_features(kind, 0.3, SEP, 0.0, cdim, linear_mag, &mut stream(99, 0));
    cond.data.copy_from_slice(&feats);
    let (vecs, _) = sample_posterior_with_cond(flow, &cond, 4000, 15).unwrap();
    let n = vecs.len() as f64;
    let hi = vecs.iter().filter(|v| v[bd] > 0.4).count() as f64 / n;
    let lo = vecs.iter().filter(|v| v[bd] < -0.4).count() as f64 / n;
    let mid = 1.0 - hi - lo;
    // spread inside the hi cluster
    let hs: Vec<f64> = vecs.iter().map(|v| v[bd]).filter(|&x| x > 0.4).collect();
    let hsd = if hs.len() > 1 {
        let m = hs.iter().sum::<f64>() / hs.len() as f64;
        (hs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hs.len() as f64).sqrt()
    } else { f64::NAN };
    println!("  {tag}: lo {lo:.3} mid {mid:.3} hi {hi:.3} hi-sd {hsd:.3}");
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let depth: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let width: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let sigma: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let clamp: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1.9);
    let batch: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(256);
    let n: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16384);
    let cnoise: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let distinct: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(256);
    let linear_mag: bool = args.get(11).map(|s| s == "1").unwrap_or(false);
    let bd: usize = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cdim: usize = 64;
    let (xs, cs) = make_data(n, 11, sigma, cdim, cnoise, distinct, linear_mag, bd);
    let cfg = FlowConfig { cond_dim: cdim, depth, subnet_width: width, clamp_alpha: clamp, ..FlowConfig::default() };
    let mut flow = FlowModel::new(&cfg, 13);
    let adam = AdamConfig { lr, weight_decay: 0.0, ..AdamConfig::default() };
    let t0 = Instant::now();
    let hist = cinnreg::train::train_flow_direct(&mut flow, &xs, &cs, steps, batch, &adam, 14).unwrap();
    println!("steps {steps} lr {lr} d{depth} w{width} sigma {sigma} clamp {clamp} batch {batch} n {n} cnoise {cnoise}: last {:.3} time {:?}",
        hist.last().unwrap(), t0.elapsed());
    stats(&mut flow, 0, cdim, linear_mag, bd, "sym ");
    stats(&mut flow, 1, cdim, linear_mag, bd, "mk-l");
    stats(&mut flow, 2, cdim, linear_mag, bd, "mk-h");
}
