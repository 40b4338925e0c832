//! Reverse-mode automatic differentiation over a closed set of dense ops.
//!
//! A [`Graph`] is a define-by-run tape: every operation eagerly computes its
//! value and records enough to run the backward pass. The op set is exactly
//! what the velocity network, its losses and the exit router need; there is no
//! broadcasting machinery beyond the few patterns those consumers use.
//!
//! Determinism: all kernels iterate in fixed order and the tape is replayed in
//! reverse insertion order, so gradients are bitwise-reproducible.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Multiply-accumulate counter per op family, filled during forward execution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MacCounter {
    pub conv: u64,
    pub linear: u64,
    pub matmul: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.matmul
    }
}

enum Op<T: Scalar> {
    Leaf { requires_grad: bool },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, T),
    AddScalar(VarId),
    Relu(VarId),
    Silu(VarId),
    Sigmoid(VarId),
    SoftmaxLast(VarId, usize),
    Conv3x3 { x: VarId, w: VarId, b: VarId },
    Conv1x1 { x: VarId, w: VarId, b: VarId },
    Linear { x: VarId, w: VarId, b: VarId },
    LayerNormChan { x: VarId, gamma: VarId, beta: VarId, mean: Vec<T>, rstd: Vec<T> },
    Film { h: VarId, gb: VarId },
    PixelShuffle { x: VarId, s: usize },
    PixelUnshuffle { x: VarId, s: usize },
    ConcatChan(VarId, VarId),
    Roll2d { x: VarId, dy: isize, dx: isize },
    WindowPartition { x: VarId, win: usize },
    WindowMerge { x: VarId, win: usize, h: usize, w: usize },
    Narrow { x: VarId, axis: usize, start: usize },
    Reshape { x: VarId },
    Permute { x: VarId, axes: Vec<usize> },
    BatchedMatmul { a: VarId, b: VarId, transpose_b: bool },
    AddBcast0 { x: VarId, b: VarId },
    AddWindowMask { x: VarId },
    RowsLookup { table: VarId, idx: Rc<Vec<usize>> },
    Gap(VarId),
    MeanAbs(VarId),
    Mean(VarId),
    ScaleRows { x: VarId, coeffs: Rc<Vec<T>> },
    SelectRows { x: VarId, idx: Rc<Vec<usize>> },
    CrossEntropy { logits: VarId, labels: Rc<Vec<usize>> },
    Detach(#[allow(dead_code)] VarId),
    FilterValid { x: VarId, kernel: Rc<Vec<T>>, k: usize },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`VarId`].
pub struct GradStore<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

/// Define-by-run tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_ids: HashMap<String, VarId>,
    bound_names: Vec<String>,
    pub macs: MacCounter,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_ids: HashMap::new(), bound_names: Vec::new(), macs: MacCounter::default() }
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Parameter names that have been bound into this graph so far.
    pub fn bound_param_names(&self) -> &[String] {
        &self.bound_names
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node { op, value, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant input (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf { requires_grad: false }, value, false)
    }

    /// Inserts a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf { requires_grad: true }, value, true)
    }

    /// Binds a named parameter as a leaf, caching by name so repeated binds
    /// share one node (gradients accumulate correctly across reuse).
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> VarId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let p = params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let id = self.push(Op::Leaf { requires_grad: p.trainable }, p.tensor.clone(), p.trainable);
        self.param_ids.insert(name.to_string(), id);
        self.bound_names.push(name.to_string());
        id
    }

    /// Collects gradients for every bound parameter that received one.
    pub fn param_grads(&self, grads: &GradStore<T>) -> indexmap::IndexMap<String, Tensor<T>> {
        let mut out = indexmap::IndexMap::new();
        for name in &self.bound_names {
            let id = self.param_ids[name];
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut v = self.value(a).clone();
        for (o, &rhs) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + rhs;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let mut v = self.value(a).clone();
        for (o, &rhs) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o - rhs;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let mut v = self.value(a).clone();
        for (o, &rhs) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * rhs;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let mut v = self.value(a).clone();
        for (o, &rhs) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o / rhs;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let v = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(Op::Scale(x, c), v, ng)
    }

    pub fn add_scalar(&mut self, x: VarId, c: T) -> VarId {
        let v = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(Op::AddScalar(x), v, ng)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(Op::Relu(x), v, ng)
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(Op::Silu(x), v, ng)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), v, ng)
    }

    pub fn softmax_last(&mut self, x: VarId) -> VarId {
        let shape = self.shape(x).to_vec();
        let row = *shape.last().expect("softmax needs >= 1 dim");
        let mut v = self.value(x).clone();
        kernels::softmax_rows(v.data_mut(), row);
        let ng = self.needs(x);
        self.push(Op::SoftmaxLast(x, row), v, ng)
    }

    // ---- dense layers ----------------------------------------------------

    pub fn conv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv3x3: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv3x3: weight must be (Cout,Cin,3,3)");
        assert_eq!(ws[2], 3);
        assert_eq!(ws[3], 3);
        assert_eq!(xs[1], ws[1], "conv3x3: channel mismatch");
        assert_eq!(self.shape(b), [ws[0]], "conv3x3: bias shape");
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        let mut out = Tensor::zeros(&[n, c_out, h, wd]);
        kernels::conv3x3_fwd(
            self.value(x).data(), n, c_in, h, wd,
            self.value(w).data(), self.value(b).data(), c_out,
            out.data_mut(),
        );
        self.macs.conv += (n * h * wd * c_out * c_in * 9) as u64;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv3x3 { x, w, b }, out, ng)
    }

    pub fn conv1x1(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv1x1: input must be NCHW");
        assert_eq!(ws.len(), 2, "conv1x1: weight must be (Cout,Cin)");
        assert_eq!(xs[1], ws[1], "conv1x1: channel mismatch");
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        let mut out = Tensor::zeros(&[n, c_out, h, wd]);
        kernels::conv1x1_fwd(
            self.value(x).data(), n, c_in, h * wd,
            self.value(w).data(), self.value(b).data(), c_out,
            out.data_mut(),
        );
        self.macs.linear += (n * h * wd * c_out * c_in) as u64;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv1x1 { x, w, b }, out, ng)
    }

    /// Affine map over the last dim: input `(..., Din)`, weight `(Dout, Din)`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear: weight must be (Dout,Din)");
        let d_in = *xs.last().expect("linear input needs >= 1 dim");
        assert_eq!(d_in, ws[1], "linear: Din mismatch");
        let d_out = ws[0];
        assert_eq!(self.shape(b), [d_out], "linear: bias shape");
        let rows = self.value(x).len() / d_in;
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&shape);
        kernels::linear_fwd(self.value(x).data(), rows, d_in, self.value(w).data(), self.value(b).data(), d_out, out.data_mut());
        self.macs.linear += (rows * d_in * d_out) as u64;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Linear { x, w, b }, out, ng)
    }

    /// LayerNorm over the channel axis of an NCHW tensor.
    pub fn layernorm_chan(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "layernorm_chan: input must be NCHW");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let mut out = Tensor::zeros(&xs);
        let (mean, rstd) = kernels::layernorm_chan_fwd(
            self.value(x).data(), n, c, h * w,
            self.value(gamma).data(), self.value(beta).data(), eps,
            out.data_mut(),
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNormChan { x, gamma, beta, mean, rstd }, out, ng)
    }

    /// FiLM modulation: `h * (1 + gamma) + beta` with `(gamma, beta)` packed
    /// as `(N, 2C)` and broadcast over the spatial dims.
    pub fn film(&mut self, h: VarId, gb: VarId) -> VarId {
        let hs = self.shape(h).to_vec();
        assert_eq!(hs.len(), 4, "film: input must be NCHW");
        let (n, c, hh, ww) = (hs[0], hs[1], hs[2], hs[3]);
        assert_eq!(self.shape(gb), [n, 2 * c], "film: conditioning must be (N, 2C)");
        let hw = hh * ww;
        let mut out = Tensor::zeros(&hs);
        {
            let hv = self.value(h).data();
            let gbv = self.value(gb).data();
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let g = T::one() + gbv[s * 2 * c + ch];
                    let b = gbv[s * 2 * c + c + ch];
                    let base = (s * c + ch) * hw;
                    for p in 0..hw {
                        o[base + p] = hv[base + p] * g + b;
                    }
                }
            }
        }
        let ng = self.needs(h) || self.needs(gb);
        self.push(Op::Film { h, gb }, out, ng)
    }

    // ---- rearrangement ---------------------------------------------------

    pub fn pixel_unshuffle(&mut self, x: VarId, s: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % s == 0 && w % s == 0, "pixel_unshuffle: dims not divisible by {s}");
        let mut out = Tensor::zeros(&[n, c * s * s, h / s, w / s]);
        kernels::pixel_unshuffle_raw(self.value(x).data(), n, c, h, w, s, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::PixelUnshuffle { x, s }, out, ng)
    }

    pub fn pixel_shuffle(&mut self, x: VarId, s: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(c % (s * s) == 0, "pixel_shuffle: channels not divisible by {}", s * s);
        let c_out = c / (s * s);
        let mut out = Tensor::zeros(&[n, c_out, h * s, w * s]);
        kernels::pixel_shuffle_raw(self.value(x).data(), n, c_out, h, w, s, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::PixelShuffle { x, s }, out, ng)
    }

    pub fn concat_chan(&mut self, a: VarId, b: VarId) -> VarId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 4);
        assert_eq!(sb.len(), 4);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[2]);
        assert_eq!(sa[3], sb[3]);
        let (n, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c1 + c2, h, w]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let o = out.data_mut();
            for s in 0..n {
                o[s * (c1 + c2) * hw..s * (c1 + c2) * hw + c1 * hw]
                    .copy_from_slice(&av[s * c1 * hw..(s + 1) * c1 * hw]);
                o[s * (c1 + c2) * hw + c1 * hw..(s + 1) * (c1 + c2) * hw]
                    .copy_from_slice(&bv[s * c2 * hw..(s + 1) * c2 * hw]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatChan(a, b), out, ng)
    }

    pub fn roll2d(&mut self, x: VarId, dy: isize, dx: isize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let mut out = Tensor::zeros(&xs);
        kernels::roll2d_raw(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], dy, dx, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::Roll2d { x, dy, dx }, out, ng)
    }

    /// `(N,C,H,W)` -> `(N*nWin, win*win, C)` token sequences.
    pub fn window_partition(&mut self, x: VarId, win: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % win == 0 && w % win == 0, "window_partition: dims not divisible by {win}");
        let n_win = (h / win) * (w / win);
        let mut out = Tensor::zeros(&[n * n_win, win * win, c]);
        kernels::window_partition_raw(self.value(x).data(), n, c, h, w, win, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::WindowPartition { x, win }, out, ng)
    }

    /// Inverse of [`Self::window_partition`]; `h`/`w` are the target dims.
    pub fn window_merge(&mut self, x: VarId, win: usize, h: usize, w: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let c = xs[2];
        let n_win = (h / win) * (w / win);
        assert_eq!(xs[0] % n_win, 0, "window_merge: batch not divisible by window count");
        let n = xs[0] / n_win;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        kernels::window_merge_raw(self.value(x).data(), n, c, h, w, win, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::WindowMerge { x, win, h, w }, out, ng)
    }

    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert!(axis < xs.len());
        assert!(start + len <= xs[axis], "narrow out of range");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut shape = xs.clone();
        shape[axis] = len;
        let mut out = Tensor::zeros(&shape);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for o in 0..outer {
                let sbase = (o * xs[axis] + start) * inner;
                let dbase = o * len * inner;
                dst[dbase..dbase + len * inner].copy_from_slice(&src[sbase..sbase + len * inner]);
            }
        }
        let ng = self.needs(x);
        self.push(Op::Narrow { x, axis, start }, out, ng)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(x).len(), "reshape: element count mismatch");
        let v = self.value(x).clone().reshaped(shape.to_vec()).expect("checked");
        let ng = self.needs(x);
        self.push(Op::Reshape { x }, v, ng)
    }

    pub fn permute(&mut self, x: VarId, axes: &[usize]) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(axes.len(), xs.len());
        let out = permute_tensor(self.value(x), axes);
        let ng = self.needs(x);
        self.push(Op::Permute { x, axes: axes.to_vec() }, out, ng)
    }

    // ---- attention helpers -------------------------------------------------

    /// Batched matmul `(B,M,K) x (B,K,N)`; with `transpose_b`, `b` is `(B,N,K)`.
    pub fn batched_matmul(&mut self, a: VarId, b: VarId, transpose_b: bool) -> VarId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "batched_matmul: batch mismatch");
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let kb = if transpose_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "batched_matmul: inner dim mismatch");
        let mut out = Tensor::zeros(&[bsz, m, n]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let ov = out.data_mut();
            let bstride = sb[1] * sb[2];
            for s in 0..bsz {
                let asl = &av[s * m * k..(s + 1) * m * k];
                let bsl = &bv[s * bstride..(s + 1) * bstride];
                let osl = &mut ov[s * m * n..(s + 1) * m * n];
                if transpose_b {
                    T::gemm_strided(m, k, n, T::one(), asl, k as isize, 1, bsl, 1, k as isize, T::zero(), osl, n as isize, 1);
                } else {
                    T::gemm_strided(m, k, n, T::one(), asl, k as isize, 1, bsl, n as isize, 1, T::zero(), osl, n as isize, 1);
                }
            }
        }
        self.macs.matmul += (bsz * m * k * n) as u64;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::BatchedMatmul { a, b, transpose_b }, out, ng)
    }

    /// `x (B, rest...) + b (rest...)`, `b` repeated along axis 0.
    pub fn add_bcast0(&mut self, x: VarId, b: VarId) -> VarId {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(&xs[1..], &bs[..], "add_bcast0: trailing shape mismatch");
        let inner: usize = bs.iter().product();
        let mut out = self.value(x).clone();
        {
            let bv = self.value(b).data().to_vec();
            for chunk in out.data_mut().chunks_mut(inner) {
                for (v, &a) in chunk.iter_mut().zip(&bv) {
                    *v += a;
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::AddBcast0 { x, b }, out, ng)
    }

    /// Adds a constant attention mask: `x` is `(B, heads, T, T)` with
    /// `B = N * nWin`, mask is `(nWin, T, T)` selected by `B % nWin`.
    pub fn add_window_mask(&mut self, x: VarId, mask: &Tensor<T>) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let ms = mask.shape().to_vec();
        assert_eq!(ms.len(), 3);
        assert_eq!(ms[1], xs[2]);
        assert_eq!(ms[2], xs[3]);
        let n_win = ms[0];
        assert_eq!(xs[0] % n_win, 0);
        let tt = xs[2] * xs[3];
        let heads = xs[1];
        let mut out = self.value(x).clone();
        {
            let mv = mask.data();
            let ov = out.data_mut();
            for b in 0..xs[0] {
                let wsel = b % n_win;
                let msl = &mv[wsel * tt..(wsel + 1) * tt];
                for h in 0..heads {
                    let base = (b * heads + h) * tt;
                    for p in 0..tt {
                        ov[base + p] += msl[p];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::AddWindowMask { x }, out, ng)
    }

    /// Row lookup into a `(rows, cols)` table, used for relative position bias.
    pub fn rows_lookup(&mut self, table: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2);
        let cols = ts[1];
        let mut out = Tensor::zeros(&[idx.len(), cols]);
        {
            let tv = self.value(table).data();
            let ov = out.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                ov[i * cols..(i + 1) * cols].copy_from_slice(&tv[r * cols..(r + 1) * cols]);
            }
        }
        let ng = self.needs(table);
        self.push(Op::RowsLookup { table, idx }, out, ng)
    }

    // ---- reductions & losses ----------------------------------------------

    /// Global average pooling `(N,C,H,W)` -> `(N,C)`.
    pub fn gap(&mut self, x: VarId) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[n, c]);
        kernels::gap_fwd(self.value(x).data(), n, c, h * w, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::Gap(x), out, ng)
    }

    /// Mean absolute value over all elements -> scalar.
    pub fn mean_abs(&mut self, x: VarId) -> VarId {
        let n = self.value(x).len();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v.abs();
        }
        let v = Tensor::scalar(acc / T::from_f64(n as f64));
        let ng = self.needs(x);
        self.push(Op::MeanAbs(x), v, ng)
    }

    /// Mean over all elements -> scalar.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.value(x).len();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let v = Tensor::scalar(acc / T::from_f64(n as f64));
        let ng = self.needs(x);
        self.push(Op::Mean(x), v, ng)
    }

    /// Scales each axis-0 slice by a constant per-slice coefficient.
    pub fn scale_rows(&mut self, x: VarId, coeffs: Rc<Vec<T>>) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs[0], coeffs.len(), "scale_rows: coefficient count mismatch");
        let inner: usize = xs[1..].iter().product();
        let mut out = self.value(x).clone();
        for (s, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let c = coeffs[s];
            for v in chunk {
                *v = *v * c;
            }
        }
        let ng = self.needs(x);
        self.push(Op::ScaleRows { x, coeffs }, out, ng)
    }

    /// Gathers axis-0 slices by index.
    pub fn select_rows(&mut self, x: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = idx.len();
        let mut out = Tensor::zeros(&shape);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                dst[i * inner..(i + 1) * inner].copy_from_slice(&src[r * inner..(r + 1) * inner]);
            }
        }
        let ng = self.needs(x);
        self.push(Op::SelectRows { x, idx }, out, ng)
    }

    /// Mean cross-entropy of `(N,K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: VarId, labels: Rc<Vec<usize>>) -> VarId {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls.len(), 2);
        assert_eq!(ls[0], labels.len());
        let k = ls[1];
        let mut acc = T::zero();
        {
            let lv = self.value(logits).data();
            for (i, &lab) in labels.iter().enumerate() {
                let row = &lv[i * k..(i + 1) * k];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut se = T::zero();
                for &v in row {
                    se += (v - mx).exp();
                }
                acc += se.ln() + mx - row[lab];
            }
        }
        let v = Tensor::scalar(acc / T::from_f64(labels.len() as f64));
        let ng = self.needs(logits);
        self.push(Op::CrossEntropy { logits, labels }, v, ng)
    }

    /// Stop-gradient: value passes through, backward stops here.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let v = self.value(x).clone();
        self.push(Op::Detach(x), v, false)
    }

    /// Depthwise valid-mode correlation with a constant `k x k` kernel.
    pub fn filter_valid(&mut self, x: VarId, kernel: Rc<Vec<T>>, k: usize) -> VarId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(kernel.len(), k * k);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h >= k && w >= k, "filter_valid: input smaller than kernel");
        let mut out = Tensor::zeros(&[n, c, h - k + 1, w - k + 1]);
        kernels::filter_valid_fwd(self.value(x).data(), n, c, h, w, &kernel, k, out.data_mut());
        let ng = self.needs(x);
        self.push(Op::FilterValid { x, kernel, k }, out, ng)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: VarId) -> Result<GradStore<T>> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(dy);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, dy.clone());
                    self.accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, dy.clone());
                    self.accumulate(&mut grads, *b, dy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let mut g = dy.clone();
                        for (o, &v) in g.data_mut().iter_mut().zip(self.value(*b).data()) {
                            *o = *o * v;
                        }
                        self.accumulate(&mut grads, *a, g);
                    }
                    if self.needs(*b) {
                        let mut g = dy.clone();
                        for (o, &v) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                            *o = *o * v;
                        }
                        self.accumulate(&mut grads, *b, g);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(*a) {
                        let mut g = dy.clone();
                        for (o, &v) in g.data_mut().iter_mut().zip(self.value(*b).data()) {
                            *o = *o / v;
                        }
                        self.accumulate(&mut grads, *a, g);
                    }
                    if self.needs(*b) {
                        let mut g = dy.clone();
                        let av = self.value(*a).data();
                        let bv = self.value(*b).data();
                        for (j, o) in g.data_mut().iter_mut().enumerate() {
                            *o = -*o * av[j] / (bv[j] * bv[j]);
                        }
                        self.accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *x, dy.map(|v| v * c));
                }
                Op::AddScalar(x) => {
                    self.accumulate(&mut grads, *x, dy);
                }
                Op::Relu(x) => {
                    let mut g = dy.clone();
                    for (o, &v) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Silu(x) => {
                    let mut g = dy.clone();
                    for (o, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let s = T::one() / (T::one() + (-xv).exp());
                        *o = *o * s * (T::one() + xv * (T::one() - s));
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = dy.clone();
                    for (o, &y) in g.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *o = *o * y * (T::one() - y);
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::SoftmaxLast(x, row) => {
                    let y = self.nodes[i].value.data();
                    let mut g = Tensor::zeros(dy.shape());
                    {
                        let gd = g.data_mut();
                        for (r, chunk) in dy.data().chunks(*row).enumerate() {
                            let ys = &y[r * row..(r + 1) * row];
                            let mut dot = T::zero();
                            for (a, b) in chunk.iter().zip(ys) {
                                dot += *a * *b;
                            }
                            for j in 0..*row {
                                gd[r * row + j] = ys[j] * (chunk[j] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Conv3x3 { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let c_out = self.shape(*w)[0];
                    let mut dx = Tensor::zeros(&xs);
                    let mut dw = Tensor::zeros(self.shape(*w));
                    let mut db = Tensor::zeros(self.shape(*b));
                    kernels::conv3x3_bwd(
                        self.value(*x).data(), n, c_in, h, wd,
                        self.value(*w).data(), c_out, dy.data(),
                        dx.data_mut(), dw.data_mut(), db.data_mut(),
                    );
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let c_out = self.shape(*w)[0];
                    let mut dx = Tensor::zeros(&xs);
                    let mut dw = Tensor::zeros(self.shape(*w));
                    let mut db = Tensor::zeros(self.shape(*b));
                    kernels::conv1x1_bwd(
                        self.value(*x).data(), n, c_in, h * wd,
                        self.value(*w).data(), c_out, dy.data(),
                        dx.data_mut(), dw.data_mut(), db.data_mut(),
                    );
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let d_in = *self.shape(*x).last().unwrap();
                    let d_out = self.shape(*w)[0];
                    let rows = self.value(*x).len() / d_in;
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let mut dw = Tensor::zeros(self.shape(*w));
                    let mut db = Tensor::zeros(self.shape(*b));
                    kernels::linear_bwd(
                        self.value(*x).data(), rows, d_in,
                        self.value(*w).data(), d_out, dy.data(),
                        dx.data_mut(), dw.data_mut(), db.data_mut(),
                    );
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::LayerNormChan { x, gamma, beta, mean, rstd } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = Tensor::zeros(&xs);
                    let mut dgamma = Tensor::zeros(self.shape(*gamma));
                    let mut dbeta = Tensor::zeros(self.shape(*beta));
                    kernels::layernorm_chan_bwd(
                        self.value(*x).data(), n, c, h * w,
                        self.value(*gamma).data(), mean, rstd, dy.data(),
                        dx.data_mut(), dgamma.data_mut(), dbeta.data_mut(),
                    );
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        self.accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Film { h, gb } => {
                    let hs = self.shape(*h).to_vec();
                    let (n, c, hh, ww) = (hs[0], hs[1], hs[2], hs[3]);
                    let hw = hh * ww;
                    let gbv = self.value(*gb).data();
                    if self.needs(*h) {
                        let mut dh = Tensor::zeros(&hs);
                        {
                            let d = dh.data_mut();
                            for s in 0..n {
                                for ch in 0..c {
                                    let g = T::one() + gbv[s * 2 * c + ch];
                                    let base = (s * c + ch) * hw;
                                    for p in 0..hw {
                                        d[base + p] = dy.data()[base + p] * g;
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut grads, *h, dh);
                    }
                    if self.needs(*gb) {
                        let hv = self.value(*h).data();
                        let mut dgb = Tensor::zeros(&[n, 2 * c]);
                        {
                            let d = dgb.data_mut();
                            for s in 0..n {
                                for ch in 0..c {
                                    let base = (s * c + ch) * hw;
                                    let mut sg = T::zero();
                                    let mut sb = T::zero();
                                    for p in 0..hw {
                                        sg += dy.data()[base + p] * hv[base + p];
                                        sb += dy.data()[base + p];
                                    }
                                    d[s * 2 * c + ch] = sg;
                                    d[s * 2 * c + c + ch] = sb;
                                }
                            }
                        }
                        self.accumulate(&mut grads, *gb, dgb);
                    }
                }
                Op::PixelShuffle { x, s } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    // adjoint of shuffle is unshuffle
                    kernels::pixel_unshuffle_raw(dy.data(), xs[0], xs[1] / (s * s), xs[2] * s, xs[3] * s, *s, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::PixelUnshuffle { x, s } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    kernels::pixel_shuffle_raw(dy.data(), xs[0], xs[1], xs[2] / s, xs[3] / s, *s, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ConcatChan(a, b) => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(&sa);
                        for s in 0..n {
                            da.data_mut()[s * c1 * hw..(s + 1) * c1 * hw]
                                .copy_from_slice(&dy.data()[s * (c1 + c2) * hw..s * (c1 + c2) * hw + c1 * hw]);
                        }
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&sb);
                        for s in 0..n {
                            db.data_mut()[s * c2 * hw..(s + 1) * c2 * hw]
                                .copy_from_slice(&dy.data()[s * (c1 + c2) * hw + c1 * hw..(s + 1) * (c1 + c2) * hw]);
                        }
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Roll2d { x, dy: ry, dx: rx } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    kernels::roll2d_raw(dy.data(), xs[0], xs[1], xs[2], xs[3], -ry, -rx, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::WindowPartition { x, win } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    kernels::window_merge_raw(dy.data(), xs[0], xs[1], xs[2], xs[3], *win, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::WindowMerge { x, win, h, w } => {
                    let xs = self.shape(*x).to_vec();
                    let n_win = (h / win) * (w / win);
                    let n = xs[0] / n_win;
                    let c = xs[2];
                    let mut dx = Tensor::zeros(&xs);
                    kernels::window_partition_raw(dy.data(), n, c, *h, *w, *win, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x).to_vec();
                    let len = dy.shape()[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let mut dx = Tensor::zeros(&xs);
                    {
                        let d = dx.data_mut();
                        for o in 0..outer {
                            let dbase = (o * xs[*axis] + start) * inner;
                            let sbase = o * len * inner;
                            d[dbase..dbase + len * inner].copy_from_slice(&dy.data()[sbase..sbase + len * inner]);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = dy.clone().reshaped(self.shape(*x).to_vec()).expect("reshape backward");
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Permute { x, axes } => {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let dx = permute_tensor(&dy, &inv);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::BatchedMatmul { a, b, transpose_b } => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                    let n = dy.shape()[2];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(&sa);
                        for s in 0..bsz {
                            let dsl = &dy.data()[s * m * n..(s + 1) * m * n];
                            let out = &mut da.data_mut()[s * m * k..(s + 1) * m * k];
                            if *transpose_b {
                                // dA = dC (m,n) x B (n,k)
                                let bsl = &bv[s * n * k..(s + 1) * n * k];
                                T::gemm(m, n, k, T::one(), dsl, bsl, T::zero(), out);
                            } else {
                                // dA = dC (m,n) x B^T (n,k)
                                let bsl = &bv[s * k * n..(s + 1) * k * n];
                                T::gemm_strided(m, n, k, T::one(), dsl, n as isize, 1, bsl, 1, n as isize, T::zero(), out, k as isize, 1);
                            }
                        }
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(&sb);
                        for s in 0..bsz {
                            let dsl = &dy.data()[s * m * n..(s + 1) * m * n];
                            let asl = &av[s * m * k..(s + 1) * m * k];
                            if *transpose_b {
                                // dB (n,k) = dC^T (n,m) x A (m,k)
                                let out = &mut db.data_mut()[s * n * k..(s + 1) * n * k];
                                T::gemm_strided(n, m, k, T::one(), dsl, 1, n as isize, asl, k as isize, 1, T::zero(), out, k as isize, 1);
                            } else {
                                // dB (k,n) = A^T (k,m) x dC (m,n)
                                let out = &mut db.data_mut()[s * k * n..(s + 1) * k * n];
                                T::gemm_strided(k, m, n, T::one(), asl, 1, k as isize, dsl, n as isize, 1, T::zero(), out, n as isize, 1);
                            }
                        }
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBcast0 { x, b } => {
                    if self.needs(*b) {
                        let bs = self.shape(*b).to_vec();
                        let inner: usize = bs.iter().product();
                        let mut db = Tensor::zeros(&bs);
                        for chunk in dy.data().chunks(inner) {
                            for (g, &v) in db.data_mut().iter_mut().zip(chunk) {
                                *g += v;
                            }
                        }
                        self.accumulate(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dy);
                    }
                }
                Op::AddWindowMask { x } => {
                    self.accumulate(&mut grads, *x, dy);
                }
                Op::RowsLookup { table, idx } => {
                    let ts = self.shape(*table).to_vec();
                    let cols = ts[1];
                    let mut dt = Tensor::zeros(&ts);
                    {
                        let d = dt.data_mut();
                        for (i, &r) in idx.iter().enumerate() {
                            for cidx in 0..cols {
                                d[r * cols + cidx] += dy.data()[i * cols + cidx];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *table, dt);
                }
                Op::Gap(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let inv = T::one() / T::from_f64(hw as f64);
                    let mut dx = Tensor::zeros(&xs);
                    {
                        let d = dx.data_mut();
                        for s in 0..n {
                            for ch in 0..c {
                                let g = dy.data()[s * c + ch] * inv;
                                for p in 0..hw {
                                    d[(s * c + ch) * hw + p] = g;
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MeanAbs(x) => {
                    let n = self.value(*x).len();
                    let scale = dy.item() / T::from_f64(n as f64);
                    let g = Tensor::from_fn(self.shape(*x), |j| {
                        let v = self.value(*x).data()[j];
                        if v > T::zero() {
                            scale
                        } else if v < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let scale = dy.item() / T::from_f64(n as f64);
                    let g = Tensor::full(self.shape(*x), scale);
                    self.accumulate(&mut grads, *x, g);
                }
                Op::ScaleRows { x, coeffs } => {
                    let xs = self.shape(*x).to_vec();
                    let inner: usize = xs[1..].iter().product();
                    let mut dx = dy.clone();
                    for (s, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let c = coeffs[s];
                        for v in chunk {
                            *v = *v * c;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SelectRows { x, idx } => {
                    let xs = self.shape(*x).to_vec();
                    let inner: usize = xs[1..].iter().product();
                    let mut dx = Tensor::zeros(&xs);
                    {
                        let d = dx.data_mut();
                        for (i, &r) in idx.iter().enumerate() {
                            for j in 0..inner {
                                d[r * inner + j] += dy.data()[i * inner + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let ls = self.shape(*logits).to_vec();
                    let (n, k) = (ls[0], ls[1]);
                    let scale = dy.item() / T::from_f64(n as f64);
                    let lv = self.value(*logits).data();
                    let mut dl = Tensor::zeros(&ls);
                    {
                        let d = dl.data_mut();
                        for (r, &lab) in labels.iter().enumerate() {
                            let row = &lv[r * k..(r + 1) * k];
                            let mut mx = row[0];
                            for &v in row {
                                if v > mx {
                                    mx = v;
                                }
                            }
                            let mut se = T::zero();
                            for &v in row {
                                se += (v - mx).exp();
                            }
                            for j in 0..k {
                                let p = (row[j] - mx).exp() / se;
                                let onehot = if j == lab { T::one() } else { T::zero() };
                                d[r * k + j] = (p - onehot) * scale;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
                Op::Detach(_) => {
                    // stop gradient
                }
                Op::FilterValid { x, kernel, k } => {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    kernels::filter_valid_bwd(dy.data(), xs[0], xs[1], xs[2], xs[3], kernel, *k, dx.data_mut());
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(GradStore { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: VarId, g: Tensor<T>) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let src = x.data();
    let dst = out.data_mut();
    let last_len = out_shape[nd - 1];
    let last_stride = perm_strides[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut src_base = 0usize;
    for block in 0..outer {
        let dbase = block * last_len;
        if last_stride == 1 {
            dst[dbase..dbase + last_len].copy_from_slice(&src[src_base..src_base + last_len]);
        } else {
            let row = &mut dst[dbase..dbase + last_len];
            let mut so = src_base;
            for d in row {
                *d = src[so];
                so += last_stride;
            }
        }
        if block + 1 == outer {
            break;
        }
        // odometer over the outer axes, tracking the source offset
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            src_base += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src_base -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
