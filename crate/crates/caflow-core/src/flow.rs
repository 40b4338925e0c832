//! The flow-matching path: endpoints in rearranged space, linear
//! interpolation, target reconstruction, and single-step / Euler inference.

use crate::autodiff::Graph;
use crate::backbone::{FlowResNet, ForwardMode};
use crate::error::{CoreError, Result};
use crate::imaging::{self, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rearranged endpoints of one training pair: `x0` is the pixel-unshuffled
/// bicubic upsample of the LR image, `x1` the unshuffled HR image.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub x0: Tensor<f32>,
    pub x1: Tensor<f32>,
    pub scale: usize,
}

/// A point on the interpolation path.
#[derive(Debug, Clone)]
pub struct TimedState {
    pub t: f64,
    pub x_t: Tensor<f32>,
}

/// Builds the rearranged endpoint pair from an LR/HR image pair.
pub fn make_pair(lr: &Image, hr: &Image, s: usize) -> Result<FlowPair> {
    if s < 2 {
        return Err(CoreError::invalid("make_pair", "scale must be >= 2"));
    }
    let (lh, lw) = (lr.height(), lr.width());
    let (hh, hw) = (hr.height(), hr.width());
    if hh != s * lh || hw != s * lw {
        return Err(CoreError::shape(
            "make_pair",
            format!("hr {hh}x{hw} is not {s}x the lr {lh}x{lw}"),
        ));
    }
    let up = imaging::bicubic_resize(lr, hh, hw)?;
    let x0 = imaging::pixel_unshuffle(&up.to_nchw(), s)?;
    let x1 = imaging::pixel_unshuffle(&hr.to_nchw(), s)?;
    Ok(FlowPair { x0, x1, scale: s })
}

/// Linear path: `x_t = (1-t) x0 + t x1`, target velocity `v = x1 - x0`.
pub fn interpolate(pair: &FlowPair, t: f64) -> Result<(TimedState, Tensor<f32>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::invalid("interpolate", format!("t = {t} outside [0,1]")));
    }
    let tf = t as f32;
    let x_t = Tensor::from_fn(pair.x0.shape(), |i| {
        (1.0 - tf) * pair.x0.data()[i] + tf * pair.x1.data()[i]
    });
    let v = Tensor::from_fn(pair.x0.shape(), |i| pair.x1.data()[i] - pair.x0.data()[i]);
    Ok((TimedState { t, x_t }, v))
}

/// `x1_hat = x_t + (1-t) v`.
pub fn reconstruct_x1<T: Scalar>(x_t: &Tensor<T>, t: f64, v_pred: &Tensor<T>) -> Result<Tensor<T>> {
    if x_t.shape() != v_pred.shape() {
        return Err(CoreError::shape("reconstruct_x1", "state/velocity shapes differ"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::invalid("reconstruct_x1", format!("t = {t} outside [0,1]")));
    }
    let c = T::from_f64(1.0 - t);
    Ok(Tensor::from_fn(x_t.shape(), |i| x_t.data()[i] + c * v_pred.data()[i]))
}

/// Padding bookkeeping for inference on sizes that are not divisible by the
/// attention window.
#[derive(Debug, Clone, Copy)]
pub struct PadSpec {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

fn mirror_index(i: usize, size: usize) -> usize {
    // symmetric reflection: 0 1 2 | 2 1 0 | 0 1 2 ...
    let period = 2 * size;
    let m = i % period;
    if m < size {
        m
    } else {
        period - 1 - m
    }
}

/// Reflect-pads an LR image on the bottom/right to the next multiple of
/// `multiple`.
pub fn reflect_pad(lr: &Image, multiple: usize) -> Result<(Image, PadSpec)> {
    let (h, w) = (lr.height(), lr.width());
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let spec = PadSpec { orig_h: h, orig_w: w, padded_h: ph, padded_w: pw };
    if ph == h && pw == w {
        return Ok((lr.clone(), spec));
    }
    let src = lr.tensor().data();
    let t = Tensor::from_fn(&[3, ph, pw], |i| {
        let c = i / (ph * pw);
        let y = (i / pw) % ph;
        let x = i % pw;
        src[c * h * w + mirror_index(y, h) * w + mirror_index(x, w)]
    });
    Ok((Image::new(t)?, spec))
}

/// Pads the LR tile if needed, bicubically upsamples by `s` and rearranges:
/// returns `x0` with shape `(1, 3s^2, padded_h, padded_w)`.
pub fn prepare_rearranged(lr: &Image, s: usize, window: usize) -> Result<(Tensor<f32>, PadSpec)> {
    let (padded, spec) = reflect_pad(lr, window)?;
    let up = imaging::bicubic_resize(&padded, spec.padded_h * s, spec.padded_w * s)?;
    let x0 = imaging::pixel_unshuffle(&up.to_nchw(), s)?;
    Ok((x0, spec))
}

/// Shuffles a rearranged prediction back to pixel space, crops away the pad
/// and clamps to `[0, 1]`.
pub fn finish_image(x1_rearranged: &Tensor<f32>, s: usize, spec: &PadSpec) -> Result<Image> {
    let full = imaging::pixel_shuffle(x1_rearranged, s)?;
    let (fh, fw) = (spec.padded_h * s, spec.padded_w * s);
    let (oh, ow) = (spec.orig_h * s, spec.orig_w * s);
    let d = full.data();
    let t = Tensor::from_fn(&[3, oh, ow], |i| {
        let c = i / (oh * ow);
        let y = (i / ow) % oh;
        let x = i % ow;
        debug_assert!(fh >= oh && fw >= ow);
        d[c * fh * fw + y * fw + x]
    });
    Image::new(t)
}

/// Which exit drives single-step inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitPolicy {
    /// Route through the exit classifier (Alg.-2 style adaptive depth).
    Auto,
    /// Force a fixed exit 0..=3.
    Fixed(usize),
}

/// Single forward pass at `t = 0`: `x1_hat = x0 + v(x0, x0, 0)`, shuffled
/// back to pixel space. Returns the image and the exit that produced it.
pub fn single_step_infer(model: &FlowResNet<f32>, lr: &Image, policy: ExitPolicy) -> Result<(Image, usize)> {
    match policy {
        ExitPolicy::Fixed(e) => {
            if e > 3 {
                return Err(CoreError::invalid("single_step_infer", format!("exit {e} out of range")));
            }
            let (x0, spec) = prepare_rearranged(lr, model.cfg.scale, model.cfg.window)?;
            let mut g = Graph::new();
            let x0_id = g.input(x0.clone());
            let bundle = model.forward(&mut g, x0_id, x0_id, &[0.0], ForwardMode::UntilExit(e));
            let v = g.value(bundle.velocities[e]);
            let x1_hat = Tensor::from_fn(x0.shape(), |i| x0.data()[i] + v.data()[i]);
            Ok((finish_image(&x1_hat, model.cfg.scale, &spec)?, e))
        }
        ExitPolicy::Auto => {
            let (img, decision) = crate::routing::adaptive_infer(model, lr)?;
            Ok((img, decision.predicted_exit))
        }
    }
}

/// A velocity field over rearranged space; lets inference run against the
/// trained model or against test stubs.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor<f32>, x0: &Tensor<f32>, t: f64) -> Tensor<f32>;
}

/// The trained network evaluated at a fixed exit.
pub struct ModelField<'a> {
    pub model: &'a FlowResNet<f32>,
    pub exit: usize,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x_t: &Tensor<f32>, x0: &Tensor<f32>, t: f64) -> Tensor<f32> {
        let mut g = Graph::new();
        let xt_id = g.input(x_t.clone());
        let x0_id = g.input(x0.clone());
        let bundle = self.model.forward(&mut g, xt_id, x0_id, &[t], ForwardMode::UntilExit(self.exit));
        g.value(bundle.velocities[self.exit]).clone()
    }
}

/// Multi-step Euler integration of the velocity field with uniform steps,
/// starting at `x0`, `t = 0`. `n_steps = 1` is exactly single-step inference.
pub fn euler_infer_field(
    field: &dyn VelocityField,
    lr: &Image,
    scale: usize,
    window: usize,
    n_steps: usize,
) -> Result<Image> {
    if n_steps == 0 {
        return Err(CoreError::invalid("euler_infer", "n_steps must be >= 1"));
    }
    let (x0, spec) = prepare_rearranged(lr, scale, window)?;
    let dt = 1.0 / n_steps as f64;
    let dtf = dt as f32;
    let mut x = x0.clone();
    let mut t = 0.0f64;
    for _ in 0..n_steps {
        let v = field.velocity(&x, &x0, t);
        x = Tensor::from_fn(x.shape(), |i| x.data()[i] + dtf * v.data()[i]);
        t += dt;
    }
    finish_image(&x, scale, &spec)
}

/// Euler inference with the model's final (or a chosen) exit.
pub fn euler_infer(model: &FlowResNet<f32>, lr: &Image, n_steps: usize, exit: usize) -> Result<Image> {
    let field = ModelField { model, exit };
    euler_infer_field(&field, lr, model.cfg.scale, model.cfg.window, n_steps)
}
