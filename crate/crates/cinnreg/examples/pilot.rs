use cinnreg::config::RunConfig;
use cinnreg::dataset::{generate_split, DatasetManifest, InMemoryDataset, PhantomKind, Split};
use cinnreg::eval::{evaluate_testset, EvalParams};
use cinnreg::geometry::canonicalize_lao;
use cinnreg::modes::ModeLabel;
use cinnreg::train::train;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let tag = args.get(2).cloned().unwrap_or_default();
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    for ov in &args[3.min(args.len())..] {
        cfg = cfg.apply_override(ov).unwrap();
    }
    let root = std::path::PathBuf::from(format!("/tmp/pilot_{seed}_{tag}"));
    let _ = std::fs::remove_dir_all(&root);
    let t0 = Instant::now();
    let train_m = generate_split(&cfg, Split::Train, &root.join("data")).unwrap();
    let test_m = generate_split(&cfg, Split::Test, &root.join("data")).unwrap();
    println!("[{seed}] gen {:?}", t0.elapsed());
    let ds = InMemoryDataset::load(&train_m, cfg.condnet.volume_input_dims).unwrap();
    let t1 = Instant::now();
    let mut ckpt = train(&cfg, &ds, &root.join("model")).unwrap();
    println!("[{seed}] train {:?}; first/last stage2 loss {:?} {:?}",
        t1.elapsed(), ckpt.loss_history.first(), ckpt.loss_history.last());
    let params = EvalParams {
        camera: test_m.header.camera.clone(),
        aic_threshold: cfg.aic_threshold,
        n_posterior_samples: cfg.n_posterior_samples,
        volume_input_dims: cfg.condnet.volume_input_dims,
    };
    let manifest = DatasetManifest::load(&DatasetManifest::path_of(&root.join("data"), Split::Test)).unwrap();
    let t2 = Instant::now();
    let flow = ckpt.flow.as_mut().unwrap();
    let (summary, cases) = evaluate_testset(flow, &mut ckpt.condnet, &manifest, &params).unwrap();
    println!("[{seed}] eval {:?}", t2.elapsed());
    println!("[{seed}] summary: {}", serde_json::to_string_pretty(&summary).unwrap());
    // criterion-style stats
    let mut sym_total = 0; let mut sym_multi = 0; let mut mk_total = 0; let mut mk_uni = 0;
    let mut lao_ok = 0; let mut sym_multi_cases = 0;
    for c in &cases {
        match c.phantom {
            PhantomKind::Symmetric => {
                sym_total += 1;
                if c.report.label == ModeLabel::MultiModal {
                    sym_multi += 1;
                    sym_multi_cases += 1;
                    let t = c.true_pose.lao;
                    let t2 = canonicalize_lao(t + 180.0);
                    let laos: Vec<f64> = c.report.mode_poses.iter().map(|p| p.lao).collect();
                    let d = |a: f64, b: f64| (a - b).abs().min((a - b + 360.0).abs()).min((a - b - 360.0).abs());
                    let ok = (d(laos[0], t) < 5.0 && d(laos[1], t2) < 5.0)
                          || (d(laos[1], t) < 5.0 && d(laos[0], t2) < 5.0);
                    if ok { lao_ok += 1; }
                }
            }
            PhantomKind::Marked => {
                mk_total += 1;
                if c.report.label == ModeLabel::UniModal { mk_uni += 1; }
            }
        }
    }
    let mut shown_sym = 0;
    let mut shown_mk = 0;
    for c in &cases {
        match c.phantom {
            PhantomKind::Symmetric if shown_sym < 4 => {
                shown_sym += 1;
                println!("[{seed}] SYM true lao {:.1} label {:?} daic {:.0} modes {:?} w {:?}",
                    c.true_pose.lao, c.report.label, c.report.aic1 - c.report.aic2,
                    c.report.mode_poses.iter().map(|p| (p.tx, p.lao, p.cran)).collect::<Vec<_>>(),
                    c.report.mode_weights);
            }
            PhantomKind::Marked if shown_mk < 4 => {
                shown_mk += 1;
                println!("[{seed}] MRK true lao {:.1} label {:?} daic {:.0} modes {:?} w {:?}",
                    c.true_pose.lao, c.report.label, c.report.aic1 - c.report.aic2,
                    c.report.mode_poses.iter().map(|p| (p.tx, p.lao, p.cran)).collect::<Vec<_>>(),
                    c.report.mode_weights);
            }
            _ => {}
        }
    }
    println!("[{seed}] symmetric multi-modal: {sym_multi}/{sym_total}");
    println!("[{seed}] marked uni-modal: {mk_uni}/{mk_total}");
    println!("[{seed}] lao pair within 5 deg: {lao_ok}/{sym_multi_cases}");
}
