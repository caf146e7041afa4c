// Train the flow on FROZEN eval-mode conds from a pilot's stage-1 trunk,
// with per-step symmetry flip coins, to isolate whether condnet co-training
// is what prevents the bimodal split.
use cinnreg::cinn::{sample_posterior_with_cond, FlowConfig, FlowModel};
use cinnreg::dataset::{DatasetManifest, InMemoryDataset, PhantomKind, Split};
use cinnreg::modes::detect_modes;
use cinnreg::nncore::{adam_step, AdamConfig, AdamState, Mode, Parameterized, Tensor};
use cinnreg::rng::stream;
use cinnreg::train::load_checkpoint;
use rand::Rng;
use std::path::PathBuf;

fn conds_for(
    net: &mut cinnreg::condnet::CondNet,
    ds: &InMemoryDataset,
) -> Tensor {
    let cdim = net.cfg.cond_dim;
    let mut out = Tensor::zeros(&[ds.items.len(), cdim]);
    for (i, item) in ds.items.iter().enumerate() {
        let vol_t = net.volume_batch(&[&ds.volumes[item.volume_idx]]).unwrap();
        let img_t = net.image_batch(&[&item.image]).unwrap();
        let c = net.embed(&vol_t, &img_t, Mode::Eval, &mut stream(0, 0));
        out.data[i * cdim..(i + 1) * cdim].copy_from_slice(&c.data);
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = PathBuf::from(args.get(1).cloned().unwrap_or("/tmp/pilot_0_e".into()));
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4800);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let ckpt_name = args.get(4).cloned().unwrap_or("stage1.ckpt".into());
    let mut ckpt = load_checkpoint(&root.join("model").join(&ckpt_name)).unwrap();
    let vol_dims = ckpt.condnet.cfg.volume_input_dims;
    let train_m = DatasetManifest::load(&DatasetManifest::path_of(&root.join("data"), Split::Train)).unwrap();
    let test_m = DatasetManifest::load(&DatasetManifest::path_of(&root.join("data"), Split::Test)).unwrap();
    let tr = InMemoryDataset::load(&train_m, vol_dims).unwrap();
    let te = InMemoryDataset::load(&test_m, vol_dims).unwrap();
    let conds = conds_for(&mut ckpt.condnet, &tr);
    let test_conds = conds_for(&mut ckpt.condnet, &te);
    let cdim = ckpt.condnet.cfg.cond_dim;

    // Ridge-probe: how well do the frozen conds linearly encode the pose
    // targets (esp. the folded lao magnitude)? Per-subset breakdown: the
    // marker is itself a strong angle landmark, so pooled numbers can hide a
    // weak symmetric-subset cue.
    {
        use nalgebra::{DMatrix, DVector};
        let subsets: [(&str, Option<PhantomKind>); 3] = [
            ("all", None),
            ("sym", Some(PhantomKind::Symmetric)),
            ("mrk", Some(PhantomKind::Marked)),
        ];
        for (sname, filt) in subsets {
            let tr_idx: Vec<usize> = (0..tr.items.len())
                .filter(|&i| filt.map_or(true, |k| tr.items[i].kind == k))
                .collect();
            let te_idx: Vec<usize> = (0..te.items.len())
                .filter(|&i| filt.map_or(true, |k| te.items[i].kind == k))
                .collect();
            let n = tr_idx.len();
            let mut a = DMatrix::zeros(n, cdim + 1);
            for (r, &i) in tr_idx.iter().enumerate() {
                for d in 0..cdim {
                    a[(r, d)] = conds.data[i * cdim + d];
                }
                a[(r, cdim)] = 1.0;
            }
            let ata = a.transpose() * &a + DMatrix::identity(cdim + 1, cdim + 1) * 1e-3;
            for (name, f) in [("tx ", 0usize), ("fold-lao", 3), ("cran", 4)] {
                let y = DVector::from_fn(n, |r, _| {
                    let i = tr_idx[r];
                    if f == 3 { tr.items[i].pose_vec_folded[3] } else { tr.items[i].pose_vec[f] }
                });
                let aty = a.transpose() * &y;
                let w = ata.clone().lu().solve(&aty).unwrap();
                let resid = (&a * &w - &y).norm_squared() / n as f64;
                let var = { let m = y.mean(); y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64 };
                let m = te_idx.len();
                let mut at = DMatrix::zeros(m, cdim + 1);
                for (r, &i) in te_idx.iter().enumerate() {
                    for d in 0..cdim {
                        at[(r, d)] = test_conds.data[i * cdim + d];
                    }
                    at[(r, cdim)] = 1.0;
                }
                let yt = DVector::from_fn(m, |r, _| {
                    let i = te_idx[r];
                    if f == 3 { te.items[i].pose_vec_folded[3] } else { te.items[i].pose_vec[f] }
                });
                let residt = (&at * &w - &yt).norm_squared() / m as f64;
                let vart = { let mm = yt.mean(); yt.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / m as f64 };
                println!("probe [{sname}] {name}: train R2 {:.3} test R2 {:.3}", 1.0 - resid / var, 1.0 - residt / vart);
            }
        }
    }
    if steps == 0 {
        return;
    }

    // PCA-whiten conds with train stats: rotate to eigenbasis of the
    // covariance and scale each direction to unit variance (with a floor so
    // near-null directions are not blown up).
    let mut conds = conds;
    let mut test_conds = test_conds;
    // head mode: cond = the trained stage-1 head's 5 predictions (axis-
    // aligned), from the raw embeddings, written into the first 5 dims.
    let head_cond: bool = args.get(7).map(|s| s == "2" || s == "3").unwrap_or(false);
    let kind_dim: bool = args.get(7).map(|s| s == "3").unwrap_or(false);
    let mut cdim = cdim;
    if kind_dim {
        // cond = [5 head predictions | linearly decoded marker indicator]
        use nalgebra::{DMatrix, DVector};
        let n = tr.items.len();
        let mut a = DMatrix::zeros(n, cdim + 1);
        for i in 0..n {
            for d in 0..cdim { a[(i, d)] = conds.data[i * cdim + d]; }
            a[(i, cdim)] = 1.0;
        }
        let y = DVector::from_fn(n, |i, _| if tr.items[i].kind == PhantomKind::Marked { 1.0 } else { -1.0 });
        let ata = a.transpose() * &a + DMatrix::identity(cdim + 1, cdim + 1) * 1e-3;
        let w = ata.lu().solve(&(a.transpose() * &y)).unwrap();
        let trainr2 = { let r = (&a * &w - &y).norm_squared() / n as f64; 1.0 - r / 1.0 };
        println!("kind probe train R2 {trainr2:.3}");
        let decode = |cds: &Tensor, net: &mut cinnreg::condnet::CondNet, rows: usize| {
            let preds = net.head.forward(cds);
            let pd = preds.shape[1];
            let wide = pd + 1;
            let mut out = Tensor::zeros(&[rows, wide]);
            for i in 0..rows {
                for d in 0..pd { out.data[i * wide + d] = preds.data[i * pd + d]; }
                let mut k = w[cdim];
                for d in 0..cdim { k += w[d] * cds.data[i * cdim + d]; }
                out.data[i * wide + pd] = k;
            }
            out
        };
        conds = decode(&conds, &mut ckpt.condnet, tr.items.len());
        test_conds = decode(&test_conds, &mut ckpt.condnet, te.items.len());
        cdim = 6;
    } else if head_cond {
        // cond = [5 head predictions | standardized embedding]
        let wide = cdim + 5;
        let mut mean = vec![0.0; cdim];
        let mut sd = vec![0.0; cdim];
        let n = tr.items.len();
        for d in 0..cdim {
            let mut m = 0.0;
            for i in 0..n { m += conds.data[i * cdim + d]; }
            m /= n as f64;
            let mut v = 0.0;
            for i in 0..n { v += (conds.data[i * cdim + d] - m).powi(2); }
            mean[d] = m;
            sd[d] = (v / n as f64).sqrt().max(1e-6);
        }
        let expand = |cds: &Tensor, net: &mut cinnreg::condnet::CondNet, rows: usize| {
            let preds = net.head.forward(cds);
            let pd = preds.shape[1];
            let mut out = Tensor::zeros(&[rows, wide]);
            for i in 0..rows {
                for d in 0..pd {
                    out.data[i * wide + d] = preds.data[i * pd + d];
                }
                for d in 0..cdim {
                    out.data[i * wide + 5 + d] = (cds.data[i * cdim + d] - mean[d]) / sd[d];
                }
            }
            out
        };
        conds = expand(&conds, &mut ckpt.condnet, tr.items.len());
        test_conds = expand(&test_conds, &mut ckpt.condnet, te.items.len());
        cdim = wide;
    }
    if !head_cond {
        use nalgebra::{DMatrix, DVector};
        let n = tr.items.len();
        let mut mean = vec![0.0; cdim];
        for i in 0..n {
            for d in 0..cdim {
                mean[d] += conds.data[i * cdim + d];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let xc = DMatrix::from_fn(n, cdim, |i, d| conds.data[i * cdim + d] - mean[d]);
        let cov = xc.transpose() * &xc / n as f64;
        let eig = cov.symmetric_eigen();
        let evals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        let mut sorted = evals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tot: f64 = sorted.iter().sum();
        println!(
            "cond spectrum: top {:?} .. frac top8 {:.3}",
            &sorted[..8.min(sorted.len())].iter().map(|v| (v / tot * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            sorted[..8.min(sorted.len())].iter().sum::<f64>() / tot
        );
        let floor = 1e-4 * tot / cdim as f64;
        let scale = DVector::from_fn(cdim, |d, _| 1.0 / (evals[d] + floor).sqrt());
        let whiten = |row: &mut [f64]| {
            let x = DVector::from_fn(cdim, |d, _| row[d] - mean[d]);
            let y = eig.eigenvectors.transpose() * x;
            for d in 0..cdim {
                row[d] = y[d] * scale[d];
            }
        };
        for i in 0..n {
            whiten(&mut conds.data[i * cdim..(i + 1) * cdim]);
        }
        for i in 0..te.items.len() {
            whiten(&mut test_conds.data[i * cdim..(i + 1) * cdim]);
        }
    }
    let cnoise: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    // Oracle mode: replace the learned conds with random-feature encodings
    // of the true flip-invariant quantities, to separate "cond content" from
    // "flow capability" on the real target structure.
    let oracle: bool = args.get(7).map(|s| s == "1").unwrap_or(false);
    let fold_noise: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let linear_fold: bool = args.get(9).map(|s| s == "1").unwrap_or(false);
    let all_linear: bool = args.get(10).map(|s| s == "1").unwrap_or(false);
    if oracle {
        let mut orng = stream(901, 0);
        let mut encode = |item: &cinnreg::dataset::DataItem, out: &mut [f64]| {
            use rand_distr::{Distribution, StandardNormal};
            let kind = if item.kind == PhantomKind::Symmetric { 0.3 } else { -0.7 };
            let e: f64 = StandardNormal.sample(&mut orng);
            // symmetric items expose only the flip-invariant fold; marked
            // items expose the signed angle (the marker gives the side away)
            let lao = if item.kind == PhantomKind::Symmetric {
                item.pose_vec_folded[3]
            } else {
                item.pose_vec[3]
            } + fold_noise * e;
            let q = [
                kind,
                item.pose_vec[0],
                item.pose_vec[1],
                item.pose_vec[2],
                lao,
                item.pose_vec[4],
            ];
            if all_linear {
                // pure low-rank linear embedding, like the regression trunk
                for o in out.iter_mut() {
                    *o = 0.0;
                }
                for (j, qa) in q.iter().enumerate() {
                    out[j] = *qa;
                }
                return;
            }
            for (d, o) in out.iter_mut().enumerate() {
                let w = ((d * 37 + 11) % 17) as f64 / 17.0 - 0.5;
                let mut v = w * kind;
                for (j, qa) in q.iter().enumerate() {
                    if linear_fold && j == 4 {
                        // single linear direction, like a regression trunk
                        if d == 1 {
                            v += *qa;
                        }
                    } else {
                        v += 0.4 * (w * (5.0 + 2.0 * j as f64) * qa).cos();
                    }
                }
                *o = v;
            }
        };
        for (i, item) in tr.items.iter().enumerate() {
            encode(item, &mut conds.data[i * cdim..(i + 1) * cdim]);
        }
        for (i, item) in te.items.iter().enumerate() {
            encode(item, &mut test_conds.data[i * cdim..(i + 1) * cdim]);
        }
    }
    let fcfg = FlowConfig { cond_dim: cdim, ..FlowConfig::default() };
    let mut flow = FlowModel::new(&fcfg, 77);
    let adam_cfg = AdamConfig { lr, weight_decay: 1e-5, ..AdamConfig::default() };
    let mut adam = AdamState::default();
    let n = tr.items.len();
    let bs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    for step in 0..steps {
        let mut rng = stream(500, step as u64);
        let mut xb = Tensor::zeros(&[bs, 5]);
        let mut cb = Tensor::zeros(&[bs, cdim]);
        for row in 0..bs {
            let i = rng.gen_range(0..n);
            let item = &tr.items[i];
            let pv = if item.kind == PhantomKind::Symmetric && rng.gen_range(0.0..1.0) < 0.5 {
                &item.pose_vec_flipped
            } else {
                &item.pose_vec
            };
            xb.data[row * 5..(row + 1) * 5].copy_from_slice(pv);
            cb.data[row * cdim..(row + 1) * cdim]
                .copy_from_slice(&conds.data[i * cdim..(i + 1) * cdim]);
            if cnoise > 0.0 {
                use rand_distr::{Distribution, StandardNormal};
                for d in 0..cdim {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    cb.data[row * cdim + d] += cnoise * e;
                }
            }
        }
        flow.zero_grads();
        let (loss, _) = flow.nll_backward(&xb, &cb).unwrap();
        let mut params = flow.named_params();
        adam_step(&mut adam, &adam_cfg, lr, &mut params).unwrap();
        if step % 1000 == 0 || step + 1 == steps {
            println!("step {step} loss {loss:.3}");
        }
    }

    // lao side fractions + GMM label per record, on both splits
    for (tag, ds, cds, stride) in [("train", &tr, &conds, 64usize), ("test", &te, &test_conds, 16)] {
        let mut sym_multi = 0; let mut sym_tot = 0; let mut mk_uni = 0; let mut mk_tot = 0;
        for (i, item) in ds.items.iter().enumerate() {
            let mut c1 = Tensor::zeros(&[1, cdim]);
            c1.data.copy_from_slice(&cds.data[i * cdim..(i + 1) * cdim]);
            let (vecs, _) = sample_posterior_with_cond(&mut flow, &c1, 2048, item.seed).unwrap();
            let nn = vecs.len() as f64;
            let lo = vecs.iter().filter(|v| v[3] < -0.3).count() as f64 / nn;
            let hi = vecs.iter().filter(|v| v[3] > 0.3).count() as f64 / nn;
            let mid = 1.0 - lo - hi;
            let arr: Vec<[f64; 5]> = vecs.clone();
            let rep = detect_modes(&arr, 2000.0, item.seed).unwrap();
            let multi = format!("{:?}", rep.label) == "MultiModal";
            match item.kind {
                PhantomKind::Symmetric => { sym_tot += 1; if multi { sym_multi += 1; } }
                PhantomKind::Marked => { mk_tot += 1; if !multi { mk_uni += 1; } }
            }
            if i % stride == 0 {
                println!(
                    "{tag} {i} {:?} true lao-v {:+.2} | lo {lo:.2} mid {mid:.2} hi {hi:.2} | {:?} daic {:.0}",
                    item.kind, item.pose_vec[3], rep.label, rep.aic1 - rep.aic2
                );
            }
        }
        println!("{tag}: sym multi {sym_multi}/{sym_tot} mk uni {mk_uni}/{mk_tot}");
    }
}
