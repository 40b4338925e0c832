use caflow_core::backbone::FlowResNet;
use caflow_core::synthetic;
use caflow_core::training::{self, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let t0_mixing: bool = args.get(2).map(|s| s == "t0").unwrap_or(true);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let all = synthetic::textured_dataset(2024, 80, 256, 256);
    let train_set: Vec<_> = all[..64].to_vec();
    let held_out: Vec<(String, _)> = all[64..]
        .iter()
        .enumerate()
        .map(|(i, img)| (format!("held{i}"), img.clone()))
        .collect();

    let cfg = TrainConfig {
        epochs,
        warmup_epochs: 5.min(epochs.saturating_sub(1)),
        batch: 8,
        crop: 32,
        lr,
        ema_decay: 0.995,
        seed: 7,
        t0_mixing,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };

    let t0 = Instant::now();
    let mut last_print = Instant::now();
    let out = training::train(&cfg, &train_set, &mut |event| {
        if let training::TrainEvent::EpochEnd(r) = event {
            if last_print.elapsed().as_secs() >= 10 || r.epoch <= 3 || r.epoch == epochs {
                println!(
                    "epoch {:>3}: l_total {:.5} l_multi {:.5} l_ssim {:.4} l_cons {:.5} l_router {:.4} ({:.1}s)",
                    r.epoch, r.l_total, r.l_multi, r.l_ssim, r.l_consist, r.l_router,
                    t0.elapsed().as_secs_f64()
                );
                last_print = Instant::now();
            }
        }
        Ok(())
    })
    .unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!("training: {train_time:.1}s ({:.3}s/step avg)", train_time / (epochs * 8) as f64);

    let t1 = Instant::now();
    let ema_model = FlowResNet::from_params(out.model.cfg, out.ema.clone());
    let summary = training::evaluate(&ema_model, &held_out).unwrap();
    println!("eval: {:.1}s", t1.elapsed().as_secs_f64());
    println!("bicubic PSNR: {:?}", summary.mean_psnr_bicubic);
    println!("exit PSNR:    {:?}", summary.mean_psnr_exits);
    println!("adaptive PSNR {:?} | hist {:?} | within-one {:.3} | E[flops] {:.2}G vs E3 {:.2}G",
        summary.mean_psnr_adaptive, summary.exit_histogram, summary.within_one_exit_rate,
        summary.expected_flops / 1e9, summary.full_depth_flops / 1e9);
    println!("oracle exits: {:?}", summary.per_image.iter().map(|r| r.oracle_exit).collect::<Vec<_>>());
    println!("picked exits: {:?}", summary.per_image.iter().map(|r| r.predicted_exit).collect::<Vec<_>>());
}
