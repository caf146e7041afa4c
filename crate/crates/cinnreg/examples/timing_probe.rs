use std::time::Instant;
use cinnreg::config::RunConfig;
use cinnreg::dataset::{generate_split, InMemoryDataset, Split};
use cinnreg::train::train;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.training.stage1_epochs = 2;
    cfg.training.stage2_epochs = 2;
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let m = generate_split(&cfg, Split::Train, dir.path()).unwrap();
    println!("gen-data train split: {:.1?} ({} records)", t0.elapsed(), m.records.len());
    let t1 = Instant::now();
    let ds = InMemoryDataset::load(&m, cfg.condnet.volume_input_dims).unwrap();
    println!("load in-memory: {:.1?}", t1.elapsed());
    let t2 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let ckpt = train(&cfg, &ds, out.path()).unwrap();
    println!("2+2 epochs: {:.1?}, losses {:?}", t2.elapsed(), ckpt.loss_history);
}
