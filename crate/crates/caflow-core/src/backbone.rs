//! FlowResNet: the multi-exit velocity network.
//!
//! Sixteen residual blocks with FiLM timestep conditioning; six of them add
//! window self-attention and an MLP (HybridFiLMBlock). Exit heads tap the
//! trunk after blocks 3/7/11/15; a small MLP classifier predicts the exit
//! from the features at the first tap.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const RESIDUAL_SCALE: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Super-resolution scale factor s; the network runs on 3*s^2 channels.
    pub scale: usize,
    /// Trunk width.
    pub features: usize,
    /// Number of residual blocks (16, or 8 for the reduced ablation).
    pub n_blocks: usize,
    /// Attention window size.
    pub window: usize,
    /// Attention heads.
    pub heads: usize,
    /// Sinusoidal timestep embedding width.
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { scale: 4, features: 64, n_blocks: 16, window: 8, heads: 8, time_dim: 128 }
    }
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        2 * 3 * self.scale * self.scale
    }

    pub fn out_channels(&self) -> usize {
        3 * self.scale * self.scale
    }

    /// Blocks that carry window attention. The 8-block variant is pure
    /// convolution (it drops all hybrid blocks).
    pub fn hybrid_indices(&self) -> Vec<usize> {
        match self.n_blocks {
            16 => vec![5, 9, 11, 13, 14, 15],
            8 => vec![],
            n => panic!("unsupported n_blocks {n}"),
        }
    }

    /// Trunk block index after which each of the four exits taps.
    pub fn exit_blocks(&self) -> [usize; 4] {
        let q = self.n_blocks / 4;
        [q - 1, 2 * q - 1, 3 * q - 1, 4 * q - 1]
    }

    /// Cyclic shift of a hybrid block: consecutive hybrids alternate 0, w/2.
    pub fn shift_for_hybrid(&self, block_idx: usize) -> usize {
        let order = self
            .hybrid_indices()
            .iter()
            .position(|&b| b == block_idx)
            .expect("not a hybrid block");
        if order % 2 == 0 {
            0
        } else {
            self.window / 2
        }
    }
}

/// Sinusoidal embedding of timesteps: 64 sine + 64 cosine coordinates at
/// log-spaced frequencies `w_k = exp(-ln(10000) * k / 63)`, `t` unscaled.
pub fn time_embed<T: Scalar>(t: &[f64], time_dim: usize) -> Tensor<T> {
    let half = time_dim / 2;
    let mut out = Tensor::zeros(&[t.len(), time_dim]);
    {
        let d = out.data_mut();
        for (n, &tv) in t.iter().enumerate() {
            for k in 0..half {
                let omega = (-(10000.0f64).ln() * k as f64 / (half as f64 - 1.0)).exp();
                d[n * time_dim + k] = T::from_f64((omega * tv).sin());
                d[n * time_dim + half + k] = T::from_f64((omega * tv).cos());
            }
        }
    }
    out
}

/// Frequency of embedding coordinate `k` (for tests).
pub fn time_embed_frequency(k: usize, half: usize) -> f64 {
    (-(10000.0f64).ln() * k as f64 / (half as f64 - 1.0)).exp()
}

/// Relative-position index for a `win x win` window: maps token pair `(i, j)`
/// to a row of the `(2w-1)^2` bias table.
pub fn relative_position_index(win: usize) -> Rc<Vec<usize>> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (ty, tx) = (i / win, i % win);
        for j in 0..t {
            let (uy, ux) = (j / win, j % win);
            let dy = ty as isize - uy as isize + win as isize - 1;
            let dx = tx as isize - ux as isize + win as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    Rc::new(idx)
}

/// Additive attention mask for shifted windows: `(nWin, T, T)` with 0 for
/// same-region pairs and a large negative value across pre-roll boundaries.
pub fn shifted_window_mask<T: Scalar>(h: usize, w: usize, win: usize, shift: usize) -> Tensor<T> {
    let (nh, nw) = (h / win, w / win);
    let t = win * win;
    // region ids on the rolled image
    let mut region = vec![0u8; h * w];
    let slices = |size: usize| -> [(usize, usize); 3] {
        [(0, size - win), (size - win, size - shift), (size - shift, size)]
    };
    let hs = slices(h);
    let ws = slices(w);
    for (hi, &(h0, h1)) in hs.iter().enumerate() {
        for (wi, &(w0, w1)) in ws.iter().enumerate() {
            let id = (hi * 3 + wi) as u8;
            for y in h0..h1 {
                for x in w0..w1 {
                    region[y * w + x] = id;
                }
            }
        }
    }
    let neg = T::from_f64(-1e9);
    let mut mask = Tensor::zeros(&[nh * nw, t, t]);
    {
        let m = mask.data_mut();
        for wy in 0..nh {
            for wx in 0..nw {
                let widx = wy * nw + wx;
                for i in 0..t {
                    let ri = region[(wy * win + i / win) * w + wx * win + i % win];
                    for j in 0..t {
                        let rj = region[(wy * win + j / win) * w + wx * win + j % win];
                        if ri != rj {
                            m[(widx * t + i) * t + j] = neg;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Which exits a forward pass materializes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    AllExits,
    UntilExit(usize),
}

/// One forward pass's tap points: predicted velocities per materialized exit,
/// router logits, and the exit-0 feature map.
pub struct ExitBundle {
    pub velocities: Vec<VarId>,
    pub logits: VarId,
    pub f_e0: VarId,
}

/// The velocity network plus exit classifier.
#[derive(Clone)]
pub struct FlowResNet<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
}

/// Trunk execution state threaded through block ranges.
pub struct TrunkState {
    pub features: VarId,
    head_out: VarId,
    e_act: VarId,
}

impl<T: Scalar> FlowResNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        FlowResNet { cfg, params: init_params(&cfg, seed) }
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet<T>) -> Self {
        FlowResNet { cfg, params }
    }

    /// Concatenates the conditioned inputs, runs the head conv and prepares
    /// the activated time embedding.
    pub fn start_trunk(&self, g: &mut Graph<T>, x_t: VarId, x0: VarId, t: &[f64]) -> TrunkState {
        let emb = g.input(time_embed::<T>(t, self.cfg.time_dim));
        let e_act = g.silu(emb);
        let cat = g.concat_chan(x_t, x0);
        let hw = g.param(&self.params, "head.weight");
        let hb = g.param(&self.params, "head.bias");
        let features = g.conv3x3(cat, hw, hb);
        TrunkState { features, head_out: features, e_act }
    }

    /// Runs trunk blocks `[from, to)` in order.
    pub fn run_blocks(&self, g: &mut Graph<T>, st: &mut TrunkState, from: usize, to: usize) {
        let hybrids = self.cfg.hybrid_indices();
        for i in from..to {
            st.features = self.film_res_block(g, st.features, st.e_act, i);
            if hybrids.contains(&i) {
                st.features = self.attention_branch(g, st.features, i);
                st.features = self.mlp_branch(g, st.features, i);
            }
        }
    }

    /// Eq.-style FiLM residual block: conv, ReLU, FiLM, zero-init conv,
    /// residual scale 0.1.
    fn film_res_block(&self, g: &mut Graph<T>, x: VarId, e_act: VarId, i: usize) -> VarId {
        let c1w = g.param(&self.params, &format!("block{i}.conv1.weight"));
        let c1b = g.param(&self.params, &format!("block{i}.conv1.bias"));
        let fw = g.param(&self.params, &format!("block{i}.film.weight"));
        let fb = g.param(&self.params, &format!("block{i}.film.bias"));
        let c2w = g.param(&self.params, &format!("block{i}.conv2.weight"));
        let c2b = g.param(&self.params, &format!("block{i}.conv2.bias"));
        let h = g.conv3x3(x, c1w, c1b);
        let h = g.relu(h);
        let gb = g.linear(e_act, fw, fb);
        let h = g.film(h, gb);
        let h = g.conv3x3(h, c2w, c2b);
        let h = g.scale(h, T::from_f64(RESIDUAL_SCALE));
        g.add(x, h)
    }

    /// `x + W-MSA(LN(x))` with relative position bias and, for shifted
    /// blocks, the cross-boundary mask.
    fn attention_branch(&self, g: &mut Graph<T>, x: VarId, i: usize) -> VarId {
        let cfg = &self.cfg;
        let shape = g.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let win = cfg.window;
        assert!(h % win == 0 && w % win == 0, "attention needs dims divisible by {win}");
        let shift = cfg.shift_for_hybrid(i);
        let heads = cfg.heads;
        let dh = c / heads;

        let g1 = g.param(&self.params, &format!("block{i}.ln1.gamma"));
        let b1 = g.param(&self.params, &format!("block{i}.ln1.beta"));
        let qkv_w = g.param(&self.params, &format!("block{i}.qkv.weight"));
        let qkv_b = g.param(&self.params, &format!("block{i}.qkv.bias"));
        let proj_w = g.param(&self.params, &format!("block{i}.proj.weight"));
        let proj_b = g.param(&self.params, &format!("block{i}.proj.bias"));
        let table = g.param(&self.params, &format!("block{i}.rel_bias"));

        let mut a = g.layernorm_chan(x, g1, b1, T::from_f64(LAYERNORM_EPS));
        if shift > 0 {
            a = g.roll2d(a, -(shift as isize), -(shift as isize));
        }
        let tok = g.window_partition(a, win); // (B_, T, C)
        let bsz = n * (h / win) * (w / win);
        let t = win * win;
        let qkv = g.linear(tok, qkv_w, qkv_b); // (B_, T, 3C)
        let q = g.narrow(qkv, 2, 0, c);
        let k = g.narrow(qkv, 2, c, c);
        let v = g.narrow(qkv, 2, 2 * c, c);
        let heads_of = |g: &mut Graph<T>, x: VarId| -> VarId {
            let r = g.reshape(x, &[bsz, t, heads, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[bsz * heads, t, dh])
        };
        let qh = heads_of(g, q);
        let kh = heads_of(g, k);
        let vh = heads_of(g, v);
        let logits = g.batched_matmul(qh, kh, true); // (B_*heads, T, T)
        let logits = g.scale(logits, T::from_f64(1.0 / (dh as f64).sqrt()));
        let idx = relative_position_index(win);
        let bias_rows = g.rows_lookup(table, idx); // (T*T, heads)
        let bias = g.reshape(bias_rows, &[t, t, heads]);
        let bias = g.permute(bias, &[2, 0, 1]); // (heads, T, T)
        let logits = g.reshape(logits, &[bsz, heads, t, t]);
        let mut logits = g.add_bcast0(logits, bias);
        if shift > 0 {
            let mask = shifted_window_mask::<T>(h, w, win, shift);
            logits = g.add_window_mask(logits, &mask);
        }
        let flat = g.reshape(logits, &[bsz * heads, t, t]);
        let attn = g.softmax_last(flat);
        let out = g.batched_matmul(attn, vh, false); // (B_*heads, T, dh)
        let r = g.reshape(out, &[bsz, heads, t, dh]);
        let p = g.permute(r, &[0, 2, 1, 3]);
        let merged = g.reshape(p, &[bsz, t, c]);
        let proj = g.linear(merged, proj_w, proj_b);
        let mut back = g.window_merge(proj, win, h, w);
        if shift > 0 {
            back = g.roll2d(back, shift as isize, shift as isize);
        }
        g.add(x, back)
    }

    /// `x + MLP(LN(x))`, pointwise MLP with expansion ratio 2.
    fn mlp_branch(&self, g: &mut Graph<T>, x: VarId, i: usize) -> VarId {
        let g2 = g.param(&self.params, &format!("block{i}.ln2.gamma"));
        let b2 = g.param(&self.params, &format!("block{i}.ln2.beta"));
        let w1 = g.param(&self.params, &format!("block{i}.mlp1.weight"));
        let b1 = g.param(&self.params, &format!("block{i}.mlp1.bias"));
        let w2 = g.param(&self.params, &format!("block{i}.mlp2.weight"));
        let b2m = g.param(&self.params, &format!("block{i}.mlp2.bias"));
        let m = g.layernorm_chan(x, g2, b2, T::from_f64(LAYERNORM_EPS));
        let m = g.conv1x1(m, w1, b1);
        let m = g.relu(m);
        let m = g.conv1x1(m, w2, b2m);
        g.add(x, m)
    }

    /// Velocity head for one exit. Exits 0-2 convolve the current trunk
    /// features; exit 3 runs the body conv, adds the global residual from the
    /// head, then the tail conv.
    pub fn exit_velocity(&self, g: &mut Graph<T>, st: &TrunkState, exit: usize) -> VarId {
        if exit < 3 {
            let w = g.param(&self.params, &format!("exit{exit}.weight"));
            let b = g.param(&self.params, &format!("exit{exit}.bias"));
            g.conv3x3(st.features, w, b)
        } else {
            let bw = g.param(&self.params, "body.weight");
            let bb = g.param(&self.params, "body.bias");
            let tw = g.param(&self.params, "tail.weight");
            let tb = g.param(&self.params, "tail.bias");
            let body = g.conv3x3(st.features, bw, bb);
            let skip = g.add(body, st.head_out);
            g.conv3x3(skip, tw, tb)
        }
    }

    /// Exit classifier on stop-gradient exit-0 features:
    /// GAP -> FC 64->64 ReLU -> FC 64->32 ReLU -> FC 32->4.
    pub fn classify_exit(&self, g: &mut Graph<T>, f_e0: VarId) -> VarId {
        let sg = g.detach(f_e0);
        let pooled = g.gap(sg);
        let w1 = g.param(&self.params, "classifier.fc1.weight");
        let b1 = g.param(&self.params, "classifier.fc1.bias");
        let w2 = g.param(&self.params, "classifier.fc2.weight");
        let b2 = g.param(&self.params, "classifier.fc2.bias");
        let w3 = g.param(&self.params, "classifier.fc3.weight");
        let b3 = g.param(&self.params, "classifier.fc3.bias");
        let h = g.linear(pooled, w1, b1);
        let h = g.relu(h);
        let h = g.linear(h, w2, b2);
        let h = g.relu(h);
        g.linear(h, w3, b3)
    }

    /// Full forward pass. Inputs are rearranged `(N, 3s^2, h, w)` tensors and
    /// per-sample timesteps.
    pub fn forward(&self, g: &mut Graph<T>, x_t: VarId, x0: VarId, t: &[f64], mode: ForwardMode) -> ExitBundle {
        let exits = self.cfg.exit_blocks();
        let last_exit = match mode {
            ForwardMode::AllExits => 3,
            ForwardMode::UntilExit(e) => {
                assert!(e < 4, "exit index out of range");
                e
            }
        };
        let mut st = self.start_trunk(g, x_t, x0, t);
        let mut velocities = Vec::with_capacity(last_exit + 1);
        let mut f_e0 = None;
        let mut cursor = 0usize;
        for (e, &stop) in exits.iter().enumerate().take(last_exit + 1) {
            self.run_blocks(g, &mut st, cursor, stop + 1);
            cursor = stop + 1;
            if e == 0 {
                f_e0 = Some(st.features);
            }
            velocities.push(self.exit_velocity(g, &st, e));
        }
        let f_e0 = f_e0.expect("exit 0 always materialized");
        let logits = self.classify_exit(g, f_e0);
        ExitBundle { velocities, logits, f_e0 }
    }
}

/// Deterministic parameter initialization. Non-residual convolutions and
/// linear layers draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the second
/// conv of every block, all exit heads, the tail and the relative-position
/// bias tables start at zero so the network is an identity map at init.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let f = cfg.features;
    let c_in = cfg.in_channels();
    let c_out = cfg.out_channels();
    let hidden = 2 * f;

    let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
    };

    params.insert("head.weight", uniform(&[f, c_in, 3, 3], c_in * 9), true);
    params.insert("head.bias", Tensor::zeros(&[f]), true);

    let hybrids = cfg.hybrid_indices();
    for i in 0..cfg.n_blocks {
        params.insert(format!("block{i}.conv1.weight"), uniform(&[f, f, 3, 3], f * 9), true);
        params.insert(format!("block{i}.conv1.bias"), Tensor::zeros(&[f]), true);
        params.insert(format!("block{i}.conv2.weight"), Tensor::zeros(&[f, f, 3, 3]), true);
        params.insert(format!("block{i}.conv2.bias"), Tensor::zeros(&[f]), true);
        params.insert(format!("block{i}.film.weight"), uniform(&[2 * f, cfg.time_dim], cfg.time_dim), true);
        params.insert(format!("block{i}.film.bias"), Tensor::zeros(&[2 * f]), true);
        if hybrids.contains(&i) {
            let span = 2 * cfg.window - 1;
            params.insert(format!("block{i}.ln1.gamma"), Tensor::full(&[f], T::one()), true);
            params.insert(format!("block{i}.ln1.beta"), Tensor::zeros(&[f]), true);
            params.insert(format!("block{i}.qkv.weight"), uniform(&[3 * f, f], f), true);
            params.insert(format!("block{i}.qkv.bias"), Tensor::zeros(&[3 * f]), true);
            params.insert(format!("block{i}.proj.weight"), uniform(&[f, f], f), true);
            params.insert(format!("block{i}.proj.bias"), Tensor::zeros(&[f]), true);
            params.insert(format!("block{i}.rel_bias"), Tensor::zeros(&[span * span, cfg.heads]), true);
            params.insert(format!("block{i}.ln2.gamma"), Tensor::full(&[f], T::one()), true);
            params.insert(format!("block{i}.ln2.beta"), Tensor::zeros(&[f]), true);
            params.insert(format!("block{i}.mlp1.weight"), uniform(&[hidden, f], f), true);
            params.insert(format!("block{i}.mlp1.bias"), Tensor::zeros(&[hidden]), true);
            params.insert(format!("block{i}.mlp2.weight"), uniform(&[f, hidden], hidden), true);
            params.insert(format!("block{i}.mlp2.bias"), Tensor::zeros(&[f]), true);
        }
    }

    params.insert("body.weight", uniform(&[f, f, 3, 3], f * 9), true);
    params.insert("body.bias", Tensor::zeros(&[f]), true);
    for e in 0..3 {
        params.insert(format!("exit{e}.weight"), Tensor::zeros(&[c_out, f, 3, 3]), true);
        params.insert(format!("exit{e}.bias"), Tensor::zeros(&[c_out]), true);
    }
    params.insert("tail.weight", Tensor::zeros(&[c_out, f, 3, 3]), true);
    params.insert("tail.bias", Tensor::zeros(&[c_out]), true);

    params.insert("classifier.fc1.weight", uniform(&[f, f], f), true);
    params.insert("classifier.fc1.bias", Tensor::zeros(&[f]), true);
    params.insert("classifier.fc2.weight", uniform(&[f / 2, f], f), true);
    params.insert("classifier.fc2.bias", Tensor::zeros(&[f / 2]), true);
    params.insert("classifier.fc3.weight", uniform(&[4, f / 2], f / 2), true);
    params.insert("classifier.fc3.bias", Tensor::zeros(&[4]), true);

    params
}

pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("classifier.")
}

/// `(total_trainable, classifier_only)` parameter counts.
pub fn parameter_counts<T: Scalar>(params: &ParamSet<T>) -> (usize, usize) {
    let mut total = 0;
    let mut classifier = 0;
    for (name, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        total += p.tensor.len();
        if is_classifier_param(name) {
            classifier += p.tensor.len();
        }
    }
    (total, classifier)
}
