use fine_core::data::{make_dataset, DatasetName};
use fine_core::diffusion::{sample_chunked, DiffusionSchedule};
use fine_core::model::{Backing, DiTConfig};
use fine_core::train::{he_random_init, train_loop, TrainLoopCfg};
use fine_core::DeskRng;
use std::time::Instant;

#[test]
#[ignore]
fn timing_probe() {
    let cfg = DiTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 2,
        width: 64,
        hidden: 0,
        heads: 4,
        depth: 6,
        num_classes: 2,
        backing: Backing::Plain,
    };
    let ds = make_dataset::<f64>(DatasetName::ShapesA, 2048, 8, 0).unwrap();
    let (model, mut store) = he_random_init(&cfg, 0).unwrap();
    let sched = DiffusionSchedule::linear(100);
    let t0 = Instant::now();
    let steps = 100;
    let lc = TrainLoopCfg {
        steps,
        batch: 8,
        lr: 1e-4,
        weight_decay: 0.0,
        stream_seed: 0,
        loss_seed: 0,
        log_every: 0,
    };
    train_loop(&model, &mut store, &ds, &sched, &lc, None, None).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / steps as f64;
    eprintln!("train step (batch 8, D64 L6): {:.1} ms -> 6000 steps = {:.1} min", per_step * 1e3, per_step * 6000.0 / 60.0);

    let t0 = Instant::now();
    let n = 64;
    sample_chunked(&model, &store, &sched, n, None, &DeskRng::seed_from(1), 64).unwrap();
    let per_img = t0.elapsed().as_secs_f64() / n as f64;
    eprintln!("sampling (T=100): {:.1} ms/img -> 1024 imgs = {:.1} min", per_img * 1e3, per_img * 1024.0 / 60.0);

    let sched400 = DiffusionSchedule::linear(400);
    let t0 = Instant::now();
    sample_chunked(&model, &store, &sched400, 16, None, &DeskRng::seed_from(1), 16).unwrap();
    let per_img = t0.elapsed().as_secs_f64() / 16.0;
    eprintln!("sampling (T=400): {:.1} ms/img -> 64 imgs = {:.1} s", per_img * 1e3, per_img * 64.0);
}
