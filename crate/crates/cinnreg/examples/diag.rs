use cinnreg::cinn::sample_posterior;
use cinnreg::dataset::{DatasetManifest, Split};
use cinnreg::drr::load_image;
use cinnreg::geometry::pose_vector;
use cinnreg::nncore::{Mode, Tensor};
use cinnreg::phantom::{load_volume, resample};
use cinnreg::rng::stream;
use cinnreg::train::load_checkpoint;

fn main() {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or("/tmp/pilot_0_b".into()));
    let split = if std::env::args().nth(2).as_deref() == Some("train") { Split::Train } else { Split::Test };
    let mut ckpt = load_checkpoint(&root.join("model/stage2.ckpt")).unwrap();
    let flow = ckpt.flow.as_mut().unwrap();
    let m = DatasetManifest::load(&DatasetManifest::path_of(&root.join("data"), split)).unwrap();
    let dims = ckpt.condnet.cfg.volume_input_dims;
    for (i, r) in m.records.iter().enumerate().step_by(16).take(8) {
        let vol = load_volume(&m.resolve(&r.volume_path)).unwrap();
        let ds = resample(&vol, dims);
        let img = load_image(&m.resolve(&r.image_path)).unwrap();
        let vb = ckpt.condnet.volume_batch(&[&ds]).unwrap();
        let ib = ckpt.condnet.image_batch(&[&img]).unwrap();
        let cond = ckpt.condnet.embed(&vb, &ib, Mode::Eval, &mut stream(0, u64::MAX));
        let tv = pose_vector(&r.pose);
        let mut x = Tensor::zeros(&[1, 5]);
        x.data.copy_from_slice(&tv);
        let nll_true = flow.nll(&x, &cond).unwrap();
        let (_, poses) = sample_posterior(flow, &mut ckpt.condnet, &ds, &img, 512, 999).unwrap();
        let mean_lao = poses.iter().map(|p| p.lao).sum::<f64>() / 512.0;
        let var_lao = poses.iter().map(|p| (p.lao - mean_lao).powi(2)).sum::<f64>() / 512.0;
        let mut laos: Vec<f64> = poses.iter().map(|p| p.lao).collect();
        laos.sort_by(f64::total_cmp);
        println!(
            "[{i}] {:?} true lao {:7.1} cran {:6.1} | nll(true) {:8.2} | lao mean {:7.1} sd {:6.1} p5 {:7.1} p50 {:7.1} p95 {:7.1}",
            r.phantom, r.pose.lao, r.pose.cran, nll_true, mean_lao, var_lao.sqrt(),
            laos[25], laos[256], laos[486]
        );
    }
}
