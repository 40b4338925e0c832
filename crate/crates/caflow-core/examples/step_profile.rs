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

    // forward only
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.input(xt.clone());
        let b = g.input(x0.clone());
        let _ = model.forward(&mut g, a, b, &t, ForwardMode::AllExits);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward all-exits: {:.1} ms", fwd * 1e3);

    // forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.input(xt.clone());
        let b = g.input(x0.clone());
        let bundle = model.forward(&mut g, a, b, &t, ForwardMode::AllExits);
        let mut total = None;
        for &v in &bundle.velocities {
            let s = g.mean_abs(v);
            total = Some(match total { None => s, Some(acc) => g.add(acc, s) });
        }
        let grads = g.backward(total.unwrap()).unwrap();
        let _ = g.param_grads(&grads);
    }
    let full = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward+backward:  {:.1} ms", full * 1e3);

    // only film blocks (no hybrid): approximate conv share
    let cfg8 = ModelConfig { n_blocks: 8, ..ModelConfig::default() };
    let model8 = FlowResNet::<f32>::new(cfg8, 7);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.input(xt.clone());
        let b = g.input(x0.clone());
        let bundle = model8.forward(&mut g, a, b, &t, ForwardMode::AllExits);
        let s = g.mean_abs(bundle.velocities[3]);
        let grads = g.backward(s).unwrap();
        let _ = g.param_grads(&grads);
    }
    println!("8-block fwd+bwd:   {:.1} ms (pure conv path)", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
