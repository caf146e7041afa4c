use cinnreg::cinn::{sample_posterior_with_cond, FlowConfig, FlowModel};
use cinnreg::nncore::{AdamConfig, Tensor};
use cinnreg::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;

const SIGMA: f64 = 0.5;
const HALF_SEP: f64 = 0.75;

fn make_data(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = stream(seed, 0);
    let mut xs = Tensor::zeros(&[n, 5]);
    let mut cs = Tensor::zeros(&[n, 1]);
    for i in 0..n {
        let c: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let m: f64 = if rng.gen_bool(0.5) { HALF_SEP } else { -HALF_SEP };
        cs.data[i] = c;
        for d in 0..5 {
            let e: f64 = StandardNormal.sample(&mut rng);
            xs.data[i * 5 + d] = SIGMA * e + if d == 0 { 0.5 * c + m } else { 0.0 };
        }
    }
    (xs, cs)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(128);
    // dim-0 mixture entropy by Simpson quadrature + 4 Gaussian dims.
    let gauss_h = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * SIGMA * SIGMA).ln();
    let mix_h = {
        let (lo, hi) = (-HALF_SEP - 10.0 * SIGMA, HALF_SEP + 10.0 * SIGMA);
        let n = 20000;
        let h = (hi - lo) / n as f64;
        let p = |x: f64| {
            let phi = |u: f64| (-u * u / (2.0 * SIGMA * SIGMA)).exp()
                / (SIGMA * (2.0 * std::f64::consts::PI).sqrt());
            0.5 * phi(x - HALF_SEP) + 0.5 * phi(x + HALF_SEP)
        };
        let f = |x: f64| { let px = p(x); if px > 0.0 { -px * px.ln() } else { 0.0 } };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let target = mix_h + 4.0 * gauss_h;
    println!("target nll {target:.4}");
    let (xs, cs) = make_data(16384, 11);
    let (xh, ch) = make_data(16384, 12);
    let depth: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let width: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let cfg = FlowConfig { cond_dim: 1, depth, subnet_width: width, ..FlowConfig::default() };
    let mseed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(13);
    let mut flow = FlowModel::new(&cfg, mseed);
    let adam = AdamConfig { lr, weight_decay: 0.0, ..AdamConfig::default() };
    let t0 = Instant::now();
    let hist = cinnreg::train::train_flow_direct(&mut flow, &xs, &cs, steps, batch, &adam, 14).unwrap();
    let held = flow.nll(&xh, &ch).unwrap();
    println!("steps {steps} lr {lr} batch {batch}: train-last {:.4} held {held:.4} gap {:.4} time {:?}",
        hist.last().unwrap(), held - target, t0.elapsed());
    // cluster weights given c=+1: clusters at -1.0 and +2.0, midpoint 0.5
    let mut cond1 = Tensor::zeros(&[1, 1]);
    cond1.data[0] = 1.0;
    let (vecs, _) = sample_posterior_with_cond(&mut flow, &cond1, 4000, 15).unwrap();
    let hi = vecs.iter().filter(|v| v[0] > 0.5).count() as f64 / 4000.0;
    println!("cluster weight hi {hi:.4} (truth 0.5)");
}
