//! Scratch probe: training convergence at full toy scale.
use rand::SeedableRng;
use std::time::Instant;
use verbose_core::victim::{
    make_shape_world, train_toy, GenerateOptions, ShapeWorldConfig, TrainConfig, VictimConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let ls: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let n: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1300);

    let data = make_shape_world(&ShapeWorldConfig::images(n, 11));
    let cfg = VictimConfig::image_default(42);
    let tc = TrainConfig {
        epochs,
        held_out: 100,
        learning_rate: lr,
        label_smoothing: ls,
        batch_size: batch,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let (model, report) = train_toy(&cfg, &tc, &data).unwrap();
    println!(
        "train: {:.1}s  ({} epochs, lr {lr}, ls {ls}, batch {batch}, n {n})",
        t1.elapsed().as_secs_f64(),
        epochs
    );
    for (i, l) in report.epoch_losses.iter().enumerate() {
        if i % 5 == 0 || i + 1 == report.epoch_losses.len() {
            println!("epoch {i}: loss {l:.4}");
        }
    }
    println!("held-out accuracy: {:.4}", report.held_out_accuracy);
    println!("mean greedy length: {:.2}", report.mean_greedy_length);

    let vocab = model.vocab().clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for s in &data[data.len() - 6..] {
        let trace = model
            .generate(&s.pixels, &[], &GenerateOptions::greedy(24), &mut rng)
            .unwrap();
        println!(
            "  want: {:28}  got: {}",
            s.caption_text,
            vocab.render(&trace.tokens)
        );
    }
}
