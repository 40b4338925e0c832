//! Analytic FLOPs accounting for the multi-exit backbone.
//!
//! Convention: 2 FLOPs per multiply-accumulate for conv/linear/attention
//! matrix products; elementwise ops and normalizations count 1 FLOP per
//! output element; softmax counts 5 FLOPs per logit.

use serde::Serialize;

use crate::backbone::ModelConfig;
use crate::error::{CoreError, Result};

pub const FLOPS_PER_MAC: f64 = 2.0;
pub const SOFTMAX_FLOPS_PER_LOGIT: f64 = 5.0;

/// FLOPs of one k x k convolution at `h x w` output: `2*h*w*cout*cin*k^2`
/// plus `h*w*cout` for the bias add.
pub fn flops_conv(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> Result<f64> {
    if c_in == 0 || c_out == 0 || k == 0 || h == 0 || w == 0 {
        return Err(CoreError::invalid("flops_conv", "dimensions must be positive"));
    }
    let hw = (h * w) as f64;
    Ok(FLOPS_PER_MAC * hw * (c_out * c_in * k * k) as f64 + hw * c_out as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockKind {
    Film,
    Hybrid,
}

/// Per-block cost with the attention MAC split needed for counter checks.
#[derive(Debug, Clone, Serialize)]
pub struct BlockCost {
    pub index: usize,
    pub kind: BlockKind,
    pub flops: f64,
    pub conv_macs: u64,
    pub linear_macs: u64,
    pub matmul_macs: u64,
}

/// Analytic per-exit cost table at a fixed rearranged input size.
#[derive(Debug, Clone, Serialize)]
pub struct CostTable {
    pub h: usize,
    pub w: usize,
    /// Total FLOPs of routed inference through each exit
    /// (head + trunk blocks + that exit's head + classifier + embedding).
    pub exit_flops: [f64; 4],
    pub head_flops: f64,
    pub exit_head_flops: [f64; 4],
    pub classifier_flops: f64,
    pub embed_flops: f64,
    pub blocks: Vec<BlockCost>,
    /// MAC counts per category accumulated along each exit's routed path.
    pub exit_conv_macs: [u64; 4],
    pub exit_linear_macs: [u64; 4],
    pub exit_matmul_macs: [u64; 4],
}

impl CostTable {
    pub fn gflops(&self) -> [f64; 4] {
        let mut g = [0.0; 4];
        for (o, &f) in g.iter_mut().zip(&self.exit_flops) {
            *o = f / 1e9;
        }
        g
    }
}

fn film_block_cost(cfg: &ModelConfig, index: usize, h: usize, w: usize) -> BlockCost {
    let f = cfg.features;
    let hw = (h * w) as f64;
    let conv_macs = 2 * (h * w * f * f * 9) as u64;
    let film_proj_macs = (cfg.time_dim * 2 * f) as u64;
    let mut flops = 0.0;
    flops += flops_conv(f, f, 3, h, w).unwrap(); // conv1
    flops += hw * f as f64; // relu
    flops += 2.0 * hw * f as f64; // film scale + shift
    flops += flops_conv(f, f, 3, h, w).unwrap(); // conv2
    flops += hw * f as f64; // residual scale
    flops += hw * f as f64; // residual add
    flops += FLOPS_PER_MAC * film_proj_macs as f64 + 2.0 * f as f64; // film projection + bias
    BlockCost { index, kind: BlockKind::Film, flops, conv_macs, linear_macs: film_proj_macs, matmul_macs: 0 }
}

fn hybrid_block_cost(cfg: &ModelConfig, index: usize, h: usize, w: usize, shifted: bool) -> BlockCost {
    let base = film_block_cost(cfg, index, h, w);
    let f = cfg.features;
    let hw = (h * w) as f64;
    let win = cfg.window;
    let t = win * win;
    let n_win = (h / win) * (w / win);
    let heads = cfg.heads;
    let dh = f / heads;
    let logits = (n_win * heads * t * t) as f64;

    let qkv_macs = (h * w * 3 * f * f) as u64;
    let proj_macs = (h * w * f * f) as u64;
    let mlp_macs = (h * w * 2 * f * f + h * w * f * 2 * f) as u64;
    let attn_macs = 2 * (n_win * heads * t * t * dh) as u64;

    let mut flops = base.flops;
    flops += hw * f as f64; // ln1
    flops += FLOPS_PER_MAC * qkv_macs as f64 + hw * (3 * f) as f64; // qkv + bias
    flops += FLOPS_PER_MAC * (n_win * heads * t * t * dh) as f64; // q k^T
    flops += logits; // scale by 1/sqrt(dh)
    flops += logits; // relative position bias add
    if shifted {
        flops += logits; // boundary mask add
    }
    flops += SOFTMAX_FLOPS_PER_LOGIT * logits; // softmax
    flops += FLOPS_PER_MAC * (n_win * heads * t * t * dh) as f64; // attn x V
    flops += FLOPS_PER_MAC * proj_macs as f64 + hw * f as f64; // proj + bias
    flops += hw * f as f64; // attention residual add
    flops += hw * f as f64; // ln2
    flops += FLOPS_PER_MAC * (h * w * 2 * f * f) as f64 + hw * (2 * f) as f64; // mlp fc1 + bias
    flops += hw * (2 * f) as f64; // relu
    flops += FLOPS_PER_MAC * (h * w * f * 2 * f) as f64 + hw * f as f64; // mlp fc2 + bias
    flops += hw * f as f64; // mlp residual add

    BlockCost {
        index,
        kind: BlockKind::Hybrid,
        flops,
        conv_macs: base.conv_macs,
        linear_macs: base.linear_macs + qkv_macs + proj_macs + mlp_macs,
        matmul_macs: attn_macs,
    }
}

/// Builds the per-exit cost table for a rearranged input of `h x w`.
pub fn exit_costs(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostTable> {
    if cfg.n_blocks != 8 && cfg.n_blocks != 16 {
        return Err(CoreError::invalid("exit_costs", format!("unsupported n_blocks {}", cfg.n_blocks)));
    }
    if h % cfg.window != 0 || w % cfg.window != 0 {
        return Err(CoreError::invalid(
            "exit_costs",
            format!("{h}x{w} not divisible by window {}", cfg.window),
        ));
    }
    let f = cfg.features;
    let hw = (h * w) as f64;
    let c_in = cfg.in_channels();
    let c_out = cfg.out_channels();

    let head_conv_macs = (h * w * f * c_in * 9) as u64;
    let head_flops = flops_conv(c_in, f, 3, h, w)?;

    let hybrids = cfg.hybrid_indices();
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        if hybrids.contains(&i) {
            let shifted = cfg.shift_for_hybrid(i) > 0;
            blocks.push(hybrid_block_cost(cfg, i, h, w, shifted));
        } else {
            blocks.push(film_block_cost(cfg, i, h, w));
        }
    }

    let exit_conv = flops_conv(f, c_out, 3, h, w)?;
    let exit_conv_macs_one = (h * w * c_out * f * 9) as u64;
    let body_flops = flops_conv(f, f, 3, h, w)?;
    let body_macs = (h * w * f * f * 9) as u64;
    let global_add = hw * f as f64;
    let exit_head_flops = [exit_conv, exit_conv, exit_conv, body_flops + global_add + exit_conv];

    // classifier: GAP + three FC layers with ReLUs
    let cls_macs = (f * f + f * (f / 2) + (f / 2) * 4) as u64;
    let classifier_flops =
        hw * f as f64 + FLOPS_PER_MAC * cls_macs as f64 + (f + f / 2 + 4) as f64 + (f + f / 2) as f64;

    // sinusoidal embedding + one SiLU over the 128-dim vector
    let embed_flops = 2.0 * cfg.time_dim as f64;

    let exits = cfg.exit_blocks();
    let mut exit_flops = [0.0; 4];
    let mut exit_conv_macs = [0u64; 4];
    let mut exit_linear_macs = [0u64; 4];
    let mut exit_matmul_macs = [0u64; 4];
    for e in 0..4 {
        let mut total = head_flops + embed_flops + classifier_flops;
        let mut cmacs = head_conv_macs;
        let mut lmacs = cls_macs;
        let mut mmacs = 0u64;
        for b in blocks.iter().take(exits[e] + 1) {
            total += b.flops;
            cmacs += b.conv_macs;
            lmacs += b.linear_macs;
            mmacs += b.matmul_macs;
        }
        total += exit_head_flops[e];
        cmacs += exit_conv_macs_one;
        if e == 3 {
            cmacs += body_macs;
        }
        exit_flops[e] = total;
        exit_conv_macs[e] = cmacs;
        exit_linear_macs[e] = lmacs;
        exit_matmul_macs[e] = mmacs;
    }

    Ok(CostTable {
        h,
        w,
        exit_flops,
        head_flops,
        exit_head_flops,
        classifier_flops,
        embed_flops,
        blocks,
        exit_conv_macs,
        exit_linear_macs,
        exit_matmul_macs,
    })
}

/// Expected routed cost of an exit distribution.
pub fn expected_cost(table: &CostTable, p: &[f64; 4]) -> Result<f64> {
    if p.iter().any(|&v| v < 0.0) {
        return Err(CoreError::invalid("expected_cost", "negative probability"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::invalid("expected_cost", format!("distribution sums to {sum}")));
    }
    Ok(p.iter().zip(&table.exit_flops).map(|(&pi, &c)| pi * c).sum())
}

/// One compute/quality operating point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParetoPoint {
    pub flops: f64,
    pub psnr: f64,
    pub dominated: bool,
}

/// Flags dominated points (some other point has <= FLOPs and >= PSNR with at
/// least one strict) and sorts by FLOPs ascending.
pub fn pareto_points(points: &[(f64, f64)]) -> Vec<ParetoPoint> {
    let mut rows: Vec<ParetoPoint> = points
        .iter()
        .map(|&(flops, psnr)| {
            let dominated = points.iter().any(|&(f2, p2)| {
                (f2 <= flops && p2 >= psnr) && (f2 < flops || p2 > psnr)
            });
            ParetoPoint { flops, psnr, dominated }
        })
        .collect();
    rows.sort_by(|a, b| a.flops.partial_cmp(&b.flops).unwrap());
    rows
}

/// CSV export of operating points with dominance flags.
pub fn pareto_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("flops,psnr,dominated\n");
    for p in pareto_points(points) {
        out.push_str(&format!("{},{},{}\n", p.flops, p.psnr, p.dominated));
    }
    out
}
