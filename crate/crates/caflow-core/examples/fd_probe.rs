use caflow_core::autodiff::{Graph, VarId};
use caflow_core::tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn check(name: &str, shape: &[usize], build: impl Fn(&mut Graph<f64>, VarId) -> VarId) {
    let mut params = ParamSet::<f64>::new();
    params.insert("x", rt(shape, 42), true);
    let eval = |p: &ParamSet<f64>| -> (f64, Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(p, "x");
        let y = build(&mut g, x);
        let sq = g.mul(y, y);
        let loss = g.mean(sq);
        let val = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        (val, g.param_grads(&grads)["x"].clone())
    };
    let (_, grad) = eval(&params);
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let idx = rng.gen_range(0..grad.len());
        let h = 1e-5;
        let mut plus = params.clone();
        plus.get_mut("x").unwrap().tensor.data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut("x").unwrap().tensor.data_mut()[idx] -= h;
        let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        let ad = grad.data()[idx];
        let diff = (ad - fd).abs();
        let rel = diff / ad.abs().max(fd.abs()).max(1e-10);
        if rel > worst { worst = rel; }
    }
    println!("{name:24} worst rel {worst:.3e}");
}

fn main() {
    check("layernorm_chan", &[2, 8, 4, 4], |g, x| {
        let gamma = g.input(rt(&[8], 1));
        let beta = g.input(rt(&[8], 2));
        g.layernorm_chan(x, gamma, beta, 1e-5)
    });
    check("softmax_last", &[6, 10], |g, x| g.softmax_last(x));
    check("bmm_plain", &[3, 4, 5], |g, x| {
        let b = g.input(rt(&[3, 5, 6], 3));
        g.batched_matmul(x, b, false)
    });
    check("bmm_plain_rhs", &[3, 5, 6], |g, x| {
        let a = g.input(rt(&[3, 4, 5], 4));
        g.batched_matmul(a, x, false)
    });
    check("bmm_tb", &[3, 4, 5], |g, x| {
        let b = g.input(rt(&[3, 6, 5], 5));
        g.batched_matmul(x, b, true)
    });
    check("bmm_tb_rhs", &[3, 6, 5], |g, x| {
        let a = g.input(rt(&[3, 4, 5], 6));
        g.batched_matmul(a, x, true)
    });
    check("rows_lookup", &[9, 4], |g, x| {
        g.rows_lookup(x, Rc::new(vec![0, 3, 3, 8, 2, 1]))
    });
    check("add_bcast0", &[4, 3, 2], |g, x| {
        let b = g.input(rt(&[3, 2], 8));
        g.add_bcast0(x, b)
    });
    check("add_bcast0_rhs", &[3, 2], |g, x| {
        let a = g.input(rt(&[4, 3, 2], 9));
        g.add_bcast0(a, x)
    });
    check("window_partition", &[1, 3, 8, 8], |g, x| g.window_partition(x, 4));
    check("window_merge", &[4, 16, 3], |g, x| g.window_merge(x, 4, 8, 8));
    check("roll2d", &[1, 2, 4, 4], |g, x| g.roll2d(x, -1, -2));
    check("narrow", &[2, 3, 6], |g, x| g.narrow(x, 2, 1, 3));
    check("permute", &[2, 3, 4, 5], |g, x| g.permute(x, &[2, 0, 3, 1]));
    check("reshape", &[2, 12], |g, x| g.reshape(x, &[4, 6]));
    check("conv1x1", &[2, 4, 3, 3], |g, x| {
        let w = g.input(rt(&[5, 4], 10));
        let b = g.input(rt(&[5], 11));
        g.conv1x1(x, w, b)
    });
    check("conv1x1_w", &[5, 4], |g, x| {
        let a = g.input(rt(&[2, 4, 3, 3], 12));
        let b = g.input(rt(&[5], 13));
        g.conv1x1(a, x, b)
    });
    check("film_h", &[2, 4, 3, 3], |g, x| {
        let gb = g.input(rt(&[2, 8], 14));
        g.film(x, gb)
    });
    check("film_gb", &[2, 8], |g, x| {
        let h = g.input(rt(&[2, 4, 3, 3], 15));
        g.film(h, x)
    });
    check("scale_rows", &[3, 4], |g, x| {
        g.scale_rows(x, Rc::new(vec![0.3, -1.2, 2.0]))
    });
    check("silu", &[10], |g, x| g.silu(x));
    check("sigmoid", &[10], |g, x| g.sigmoid(x));
    check("gap", &[2, 3, 4, 4], |g, x| g.gap(x));
    check("add_window_mask", &[4, 2, 4, 4], |g, x| {
        let mask = rt(&[2, 4, 4], 16).map(|v| if v > 0.0 { 0.0 } else { -5.0 });
        g.add_window_mask(x, &mask)
    });
    check("linear_x", &[3, 7, 5], |g, x| {
        let w = g.input(rt(&[6, 5], 17));
        let b = g.input(rt(&[6], 18));
        g.linear(x, w, b)
    });
    check("linear_w", &[6, 5], |g, x| {
        let a = g.input(rt(&[3, 7, 5], 19));
        let b = g.input(rt(&[6], 20));
        g.linear(a, x, b)
    });
    check("conv3x3_x", &[1, 3, 5, 5], |g, x| {
        let w = g.input(rt(&[4, 3, 3, 3], 21));
        let b = g.input(rt(&[4], 22));
        g.conv3x3(x, w, b)
    });
    check("conv3x3_w", &[4, 3, 3, 3], |g, x| {
        let a = g.input(rt(&[1, 3, 5, 5], 23));
        let b = g.input(rt(&[4], 24));
        g.conv3x3(a, x, b)
    });
}
