//! Plain (non-differentiating) tensor operations with validated contracts.
//!
//! These are the public building blocks; the autodiff graph in [`crate::autodiff`]
//! runs the same kernels when gradients are needed.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 3x3 cross-correlation, padding 1, stride 1 ("same" output size).
pub fn conv3x3<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(CoreError::shape("conv3x3", format!("input must be NCHW, got {xs:?}")));
    }
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(CoreError::shape("conv3x3", format!("weight must be (Cout,Cin,3,3), got {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(CoreError::shape(
            "conv3x3",
            format!("input has {} channels, weight expects {}", xs[1], ws[1]),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(CoreError::shape("conv3x3", format!("bias must be ({},)", ws[0])));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let c_out = ws[0];
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    kernels::conv3x3_fwd(input.data(), n, c_in, h, w, weight.data(), bias.data(), c_out, out.data_mut());
    Ok(out)
}

/// Affine map over the last dimension: `(..., Din) -> (..., Dout)`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(CoreError::shape("linear", format!("weight must be (Dout,Din), got {ws:?}")));
    }
    let d_in = *xs.last().ok_or_else(|| CoreError::shape("linear", "input needs at least one dim"))?;
    if d_in != ws[1] {
        return Err(CoreError::shape("linear", format!("input Din {d_in} != weight Din {}", ws[1])));
    }
    if bias.shape() != [ws[0]] {
        return Err(CoreError::shape("linear", format!("bias must be ({},)", ws[0])));
    }
    let rows = input.len() / d_in;
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = ws[0];
    let mut out = Tensor::zeros(&shape);
    kernels::linear_fwd(input.data(), rows, d_in, weight.data(), bias.data(), ws[0], out.data_mut());
    Ok(out)
}

/// LayerNorm over the last dimension of `(..., C)`.
pub fn layernorm<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let xs = input.shape();
    let c = *xs.last().ok_or_else(|| CoreError::shape("layernorm", "input needs at least one dim"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(CoreError::shape("layernorm", format!("gamma/beta must be ({c},)")));
    }
    if eps <= T::zero() {
        return Err(CoreError::invalid("layernorm", "eps must be positive"));
    }
    let mut out = Tensor::zeros(xs);
    let cf = T::from_f64(c as f64);
    for (row_in, row_out) in input.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let mut m = T::zero();
        for &v in row_in {
            m += v;
        }
        m = m / cf;
        let mut var = T::zero();
        for &v in row_in {
            let d = v - m;
            var += d * d;
        }
        var = var / cf;
        let r = T::one() / (var + eps).sqrt();
        for (i, (&v, o)) in row_in.iter().zip(row_out.iter_mut()).enumerate() {
            *o = (v - m) * r * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Softmax over the last dimension; rows sum to 1.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let row = *x.shape().last().expect("softmax needs >= 1 dim");
    let mut out = x.clone();
    kernels::softmax_rows(out.data_mut(), row);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_zero_weight_gives_zeros() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv3x3(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 5, 4], |i| (i as f32 * 0.37).sin());
        let mut w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv3x3(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        // random 1x2x5x5 input vs direct 9-tap summation
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 40503) % 997) as f64 / 997.0 - 0.5);
        let b = t(&[3], vec![0.1, -0.2, 0.05]);
        let y = conv3x3(&x, &w, &b).unwrap();
        let (h, wd) = (5usize, 5usize);
        let mut max_diff = 0.0f64;
        for o in 0..3 {
            for yy in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = b.data()[o];
                    for c in 0..2usize {
                        for ky in -1isize..=1 {
                            for kx in -1isize..=1 {
                                let (sy, sx) = (yy + ky, xx + kx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * 2 + c) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize]
                                    * x.data()[c * h * wd + sy as usize * wd + sx as usize];
                            }
                        }
                    }
                    let got = y.data()[o * h * wd + yy as usize * wd + xx as usize];
                    max_diff = max_diff.max((acc - got).abs());
                }
            }
        }
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv3x3(&x, &w, &b).is_err());
    }

    #[test]
    fn linear_identity_weight() {
        let x = t(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_zero_weight_gives_bias() {
        let x = t(&[2, 3], vec![1.0f32; 6]);
        let w = Tensor::zeros(&[2, 3]);
        let b = t(&[2], vec![0.7, -0.3]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn linear_matches_dot_oracle() {
        let x = Tensor::<f64>::from_fn(&[4, 7], |i| ((i * 131) % 89) as f64 / 44.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[5, 7], |i| ((i * 61) % 53) as f64 / 26.0 - 1.0);
        let b = Tensor::<f64>::from_fn(&[5], |i| i as f64 * 0.1);
        let y = linear(&x, &w, &b).unwrap();
        for r in 0..4 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for k in 0..7 {
                    acc += x.data()[r * 7 + k] * w.data()[o * 7 + k];
                }
                assert!((acc - y.data()[r * 5 + o]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_rejects_din_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let w = Tensor::<f32>::zeros(&[2, 4]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(linear(&x, &w, &b).is_err());
    }

    #[test]
    fn layernorm_constant_input_is_zero() {
        let x = Tensor::<f32>::full(&[2, 8], 3.5);
        let gamma = Tensor::full(&[8], 1.0);
        let beta = Tensor::zeros(&[8]);
        let y = layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_two_value_rows_unchanged() {
        // {-1,+1} rows already have mean 0, var 1
        let x = t(&[3, 2], vec![-1.0f32, 1.0, -1.0, 1.0, -1.0, 1.0]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layernorm_normalizes_statistics() {
        let x = Tensor::<f64>::from_fn(&[4, 16], |i| ((i * 2654435761) % 1000) as f64 / 100.0);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let y = layernorm(&x, &gamma, &beta, 1e-10).unwrap();
        for row in y.data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn activation_point_values() {
        let x = t(&[2], vec![-1.0f32, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let z = t(&[1], vec![0.0f32]);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_fn(&[6, 9], |i| ((i * 37) % 23) as f64 * 0.3 - 2.0);
        let y = softmax(&x);
        for row in y.data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_linear_are_linear_in_input() {
        // f(a*x + b*y) = a*f(x) + b*f(y) without bias
        let w = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |i| ((i * 97) % 31) as f64 / 15.0 - 1.0);
        let zb = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| ((i * 53) % 17) as f64 / 8.0 - 1.0);
        let y = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| ((i * 29) % 13) as f64 / 6.0 - 1.0);
        let (a, b) = (0.7, -1.3);
        let combo = Tensor::from_fn(&[1, 3, 4, 4], |i| a * x.data()[i] + b * y.data()[i]);
        let f_combo = conv3x3(&combo, &w, &zb).unwrap();
        let fx = conv3x3(&x, &w, &zb).unwrap();
        let fy = conv3x3(&y, &w, &zb).unwrap();
        for i in 0..f_combo.len() {
            let expect = a * fx.data()[i] + b * fy.data()[i];
            assert!((f_combo.data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 6, 6], |i| (i as f32 * 0.771).cos());
        let w = Tensor::<f32>::from_fn(&[2, 2, 3, 3], |i| (i as f32 * 0.13).sin());
        let b = Tensor::<f32>::from_fn(&[2], |i| i as f32);
        let y1 = conv3x3(&x, &w, &b).unwrap();
        let y2 = conv3x3(&x, &w, &b).unwrap();
        assert_eq!(y1.data(), y2.data());
    }
}
