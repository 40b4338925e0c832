use caflow_core::autodiff::Graph;
use caflow_core::backbone::{FlowResNet, ForwardMode, ModelConfig};
use caflow_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let model = FlowResNet::<f32>::new(cfg, 7);
    let xt = Tensor::<f32>::from_fn(&[8, 48, 8, 8], |i| (i as f32 * 0.01).sin());
    let x0 = Tensor::<f32>::from_fn(&[8, 48, 8, 8], |i| (i as f32 * 0.02).cos());
    let t = vec![0.3f64; 8];
    let reps = 30;
    let mut prev = 0.0;
    for e in 0..4 {
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let a = g.input(xt.clone());
            let b = g.input(x0.clone());
            let bundle = model.forward(&mut g, a, b, &t, ForwardMode::UntilExit(e));
            let s = g.mean_abs(bundle.velocities[e]);
            let grads = g.backward(s).unwrap();
            let _ = g.param_grads(&grads);
        }
        let ms = t0.elapsed().as_secs_f64() / reps as f64 * 1e3;
        println!("until-exit {e}: {ms:7.1} ms  (delta {:+.1})", ms - prev);
        prev = ms;
    }
}
