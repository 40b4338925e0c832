//! Central finite-difference validation of the backward pass, in double
//! precision, across every block type and a small end-to-end model.

use caflow_core::autodiff::Graph;
use caflow_core::backbone::{init_params, FlowResNet, ForwardMode, ModelConfig};
use caflow_core::tensor::{ParamSet, Tensor};
use caflow_core::training::ssim_loss_graph;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
// Central differences at h=1e-4 on a deep composition carry O(h^2 * f''')
// truncation noise around 1e-7; gradients below that scale are only
// absolute-comparable.
const FD_ABS_TOL: f64 = 5e-7;
const MIN_COORDS: usize = 50;

type Grads = IndexMap<String, Tensor<f64>>;

/// Checks analytic gradients against central differences on `n_coords`
/// coordinates sampled from the parameters the loss touches.
fn check_gradients(
    params: &ParamSet<f64>,
    eval: &dyn Fn(&ParamSet<f64>) -> (f64, Grads),
    n_coords: usize,
    seed: u64,
) -> f64 {
    let (_, grads) = eval(params);
    assert!(!grads.is_empty(), "loss produced no gradients");
    let names: Vec<&String> = grads.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let name = names[rng.gen_range(0..names.len())];
        let g = &grads[name.as_str()];
        let idx = rng.gen_range(0..g.len());
        let analytic = g.data()[idx];

        let mut plus = params.clone();
        plus.get_mut(name).unwrap().tensor.data_mut()[idx] += FD_STEP;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().tensor.data_mut()[idx] -= FD_STEP;
        let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);

        // combined tolerance: the absolute term covers coordinates whose true
        // gradient sits below the O(h^2) truncation noise of the difference
        let diff = (analytic - fd).abs();
        let scale = analytic.abs().max(fd.abs());
        assert!(
            diff <= FD_ABS_TOL + REL_TOL * scale,
            "{name}[{idx}]: analytic {analytic:.6e} vs fd {fd:.6e} (diff {diff:.3e})"
        );
        if scale > FD_ABS_TOL {
            max_rel = max_rel.max(diff / scale.max(1e-12));
        }
    }
    max_rel
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * 0.8 + 0.1)
}

/// Parameters with the zero-initialized tensors nudged to small random
/// values, so every gradient path is generic.
fn generic_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f64> {
    let mut params = init_params::<f64>(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for (_, p) in params.iter_mut() {
        for v in p.tensor.data_mut() {
            if *v == 0.0 {
                *v = (rng.gen::<f64>() - 0.5) * 0.02;
            }
        }
    }
    params
}

/// Squared-mean loss on one exit's velocity; returns (loss, param grads).
fn velocity_eval(cfg: ModelConfig, p: &ParamSet<f64>, exit: usize, seed: u64) -> (f64, Grads) {
    let model = FlowResNet::from_params(cfg, p.clone());
    let c = cfg.out_channels();
    let mut g = Graph::new();
    let xt = g.input(random_tensor(&[1, c, 8, 8], seed));
    let x0 = g.input(random_tensor(&[1, c, 8, 8], seed + 1));
    let bundle = model.forward(&mut g, xt, x0, &[0.37], ForwardMode::UntilExit(exit));
    let v = bundle.velocities[exit];
    let sq = g.mul(v, v);
    let loss = g.mean(sq);
    let val = g.value(loss).item();
    let grads = g.backward(loss).expect("scalar loss");
    (val, g.param_grads(&grads))
}

fn run_velocity_check(cfg: ModelConfig, exit: usize, seed: u64) {
    let params = generic_params(&cfg, seed);
    let eval = move |p: &ParamSet<f64>| velocity_eval(cfg, p, exit, seed);
    let max_rel = check_gradients(&params, &eval, MIN_COORDS, seed + 7);
    println!(
        "gradcheck exit{exit} n_blocks={}: {MIN_COORDS} coords, max rel err {max_rel:.3e}",
        cfg.n_blocks
    );
}

#[test]
fn two_block_mini_model_matches_finite_differences() {
    // 8-block config stopped at exit 0: head + two FiLM blocks + exit head
    let cfg = ModelConfig { n_blocks: 8, ..ModelConfig::default() };
    run_velocity_check(cfg, 0, 101);
}

#[test]
fn film_blocks_match_finite_differences() {
    // default config stopped at exit 0: four FiLM blocks
    run_velocity_check(ModelConfig::default(), 0, 202);
}

#[test]
fn hybrid_block_unshifted_matches_finite_differences() {
    // exit 1 passes through hybrid block 5 (shift 0)
    run_velocity_check(ModelConfig::default(), 1, 303);
}

#[test]
fn hybrid_block_shifted_matches_finite_differences() {
    // exit 2 passes through hybrid block 9 (shift w/2) and block 11
    run_velocity_check(ModelConfig::default(), 2, 404);
}

#[test]
fn final_exit_with_global_residual_matches_finite_differences() {
    run_velocity_check(ModelConfig::default(), 3, 505);
}

#[test]
fn classifier_cross_entropy_matches_finite_differences() {
    let cfg = ModelConfig::default();
    let params = init_params::<f64>(&cfg, 606);
    let eval = move |p: &ParamSet<f64>| -> (f64, Grads) {
        let model = FlowResNet::from_params(cfg, p.clone());
        let mut g = Graph::new();
        let f = g.input(random_tensor(&[2, 64, 8, 8], 17));
        let logits = model.classify_exit(&mut g, f);
        let loss = g.cross_entropy(logits, std::rc::Rc::new(vec![1, 3]));
        let val = g.value(loss).item();
        let grads = g.backward(loss).expect("scalar");
        (val, g.param_grads(&grads))
    };
    let max_rel = check_gradients(&params, &eval, MIN_COORDS, 608);
    println!("gradcheck classifier: {MIN_COORDS} coords, max rel err {max_rel:.3e}");
}

#[test]
fn ssim_loss_matches_finite_differences() {
    // gradient of 1 - SSIM w.r.t. the reconstructed image
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    params.insert("img", Tensor::from_fn(&[1, 3, 14, 14], |_| rng.gen::<f64>()), true);
    let target = Tensor::<f64>::from_fn(&[1, 3, 14, 14], |_| rng.gen::<f64>());

    let eval = move |p: &ParamSet<f64>| -> (f64, Grads) {
        let mut g = Graph::new();
        let a = g.param(p, "img");
        let b = g.input(target.clone());
        let loss = ssim_loss_graph(&mut g, a, b);
        let val = g.value(loss).item();
        let grads = g.backward(loss).expect("scalar");
        (val, g.param_grads(&grads))
    };
    let max_rel = check_gradients(&params, &eval, MIN_COORDS, 11);
    println!("gradcheck ssim: {MIN_COORDS} coords, max rel err {max_rel:.3e}");
}

#[test]
fn l1_losses_match_finite_differences_away_from_kinks() {
    // |x| is non-differentiable at 0; keep coordinates away from it
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    params.insert(
        "v",
        Tensor::from_fn(&[4, 16], |_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * (0.1 + rng.gen::<f64>())
        }),
        true,
    );
    let eval = |p: &ParamSet<f64>| -> (f64, Grads) {
        let mut g = Graph::new();
        let v = g.param(p, "v");
        let loss = g.mean_abs(v);
        let val = g.value(loss).item();
        let grads = g.backward(loss).expect("scalar");
        (val, g.param_grads(&grads))
    };
    let max_rel = check_gradients(&params, &eval, MIN_COORDS, 15);
    println!("gradcheck mean_abs: {MIN_COORDS} coords, max rel err {max_rel:.3e}");
}
