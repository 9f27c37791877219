//! Timing probe for the desk-overfit configuration (run explicitly).

use saigformer::network::{init_model, ModelConfig, Precision};
use saigformer::train::{self, PairedSample, TrainConfig};

#[test]
#[ignore]
fn time_toy_training_iterations() {
    let cfg = ModelConfig {
        base_channels: 16,
        block_counts: [1, 1, 1, 2, 1, 1, 1, 1],
        precision: Precision::F32,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut model = init_model::<f32>(&cfg).unwrap();
    let data: Vec<PairedSample<f32>> = (0..8).map(|i| train::synth_pair(i, 64)).collect();
    let tcfg = TrainConfig {
        iterations: 10,
        snapshot_interval: 1000,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let report = train::fit(&mut model, &data, &tcfg, None, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "10 iters in {dt:.2}s = {:.3}s/iter; projected 2000 iters = {:.1} min; losses {:?}",
        dt / 10.0,
        dt / 10.0 * 2000.0 / 60.0,
        report.per_iter_loss
    );
}
