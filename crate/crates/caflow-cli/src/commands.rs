//! The five pipeline commands. Each writes its artifacts atomically and
//! stamps JSON outputs with config/checkpoint hashes for provenance.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use caflow_core::autodiff::Graph;
use caflow_core::backbone::{FlowResNet, ModelConfig};
use caflow_core::checkpoint::{self, Checkpoint};
use caflow_core::costmodel;
use caflow_core::flow;
use caflow_core::imaging::{self, Image};
use caflow_core::routing;
use caflow_core::training::{self, LossReport, TrainEvent};

use crate::config::{file_hash, ExitPolicyConfig, RunConfig};

/// All PNGs in a directory, sorted by filename for reproducible iteration.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        bail!("no .png files in {}", dir.display());
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let img = imaging::load_png(&p).with_context(|| format!("loading {}", p.display()))?;
        out.push((name, img));
    }
    Ok(out)
}

/// Loads a checkpoint and builds the inference model from the EMA weights.
pub fn load_model(ckpt_path: &Path) -> Result<(FlowResNet<f32>, Checkpoint, String)> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let hash = file_hash(ckpt_path)?;
    let model = FlowResNet::from_params(ckpt.manifest.model, ckpt.ema.clone());
    Ok((model, ckpt, hash))
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let data = serde_json::to_vec_pretty(value)?;
    std::fs::write(&tmp, data)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- train -----------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub epochs: usize,
    pub final_report: LossReport,
    pub checkpoint: PathBuf,
    pub epoch_log: PathBuf,
}

/// Trains on the PNGs in `data_dir` and writes the checkpoint plus a JSONL
/// epoch log under `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    cfg.apply_env_seed()?;
    cfg.validate()?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| anyhow!("train requires data_dir in the config"))?;
    // validate inputs before creating any outputs
    let images = load_images(&data_dir)?;
    let dataset: Vec<Image> = images.into_iter().map(|(_, img)| img).collect();

    std::fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("epochs.jsonl");
    let log_tmp = cfg.out_dir.join("epochs.jsonl.tmp");
    let ckpt_path = cfg.out_dir.join("checkpoint.ckpt");

    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_tmp)?);
    let out_dir = cfg.out_dir.clone();
    let total_epochs = cfg.train.epochs;
    let result = training::train(&cfg.train, &dataset, &mut |event| {
        match event {
            TrainEvent::EpochEnd(report) => {
                let line = serde_json::to_string(report)
                    .map_err(|e| caflow_core::CoreError::Config(e.to_string()))?;
                writeln!(log, "{line}")?;
            }
            TrainEvent::CheckpointReady(ckpt) => {
                let path = if ckpt.manifest.epoch as usize == total_epochs {
                    ckpt_path.clone()
                } else {
                    out_dir.join(format!("checkpoint_ep{}.ckpt", ckpt.manifest.epoch))
                };
                checkpoint::save(ckpt, &path)?;
            }
        }
        Ok(())
    })?;
    log.flush()?;
    drop(log);
    std::fs::rename(&log_tmp, &log_path)?;

    let summary = TrainSummary {
        config_hash: cfg.hash(),
        checkpoint_hash: file_hash(&ckpt_path)?,
        epochs: result.reports.len(),
        final_report: result.reports.last().expect("at least one epoch").clone(),
        checkpoint: ckpt_path,
        epoch_log: log_path,
    };
    write_json_atomic(&summary, &cfg.out_dir.join("train_summary.json"))?;
    Ok(summary)
}

// ---- infer -----------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct InferRecord {
    pub name: String,
    pub exit: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 4]>,
}

#[derive(Debug, Serialize)]
pub struct InferSummary {
    pub checkpoint_hash: String,
    pub exit_policy: String,
    pub steps: usize,
    pub images: Vec<InferRecord>,
}

/// Routing-only pass: trunk to the first tap plus the classifier.
fn route_exit(model: &FlowResNet<f32>, lr: &Image) -> Result<(usize, [f64; 4])> {
    let (x0, _) = flow::prepare_rearranged(lr, model.cfg.scale, model.cfg.window)?;
    let mut g = Graph::<f32>::new();
    let x0_id = g.input(x0);
    let exits = model.cfg.exit_blocks();
    let mut st = model.start_trunk(&mut g, x0_id, x0_id, &[0.0]);
    model.run_blocks(&mut g, &mut st, 0, exits[0] + 1);
    let logits_id = model.classify_exit(&mut g, st.features);
    let mut logits = [0.0f64; 4];
    for (i, l) in logits.iter_mut().enumerate() {
        *l = g.value(logits_id).data()[i] as f64;
    }
    Ok((routing::argmax_lowest(&logits), logits))
}

/// Super-resolves one PNG or every PNG in a directory.
pub fn cmd_infer(
    ckpt_path: &Path,
    input: &Path,
    out_dir: &Path,
    policy: ExitPolicyConfig,
    steps: usize,
) -> Result<InferSummary> {
    if steps == 0 {
        bail!("--steps must be >= 1");
    }
    let (model, _ckpt, ckpt_hash) = load_model(ckpt_path)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let v = list_pngs(input)?;
        if v.is_empty() {
            bail!("no .png files in {}", input.display());
        }
        v
    } else {
        vec![input.to_path_buf()]
    };
    std::fs::create_dir_all(out_dir)?;

    let mut records = Vec::new();
    for path in &inputs {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let lr = imaging::load_png(path)?;
        let (img, exit, logits) = if steps == 1 {
            match policy {
                ExitPolicyConfig::Auto => {
                    let (img, d) = routing::adaptive_infer(&model, &lr)?;
                    (img, d.predicted_exit, Some(d.logits))
                }
                ExitPolicyConfig::Fixed(e) => {
                    let (img, e) = flow::single_step_infer(&model, &lr, flow::ExitPolicy::Fixed(e))?;
                    (img, e, None)
                }
            }
        } else {
            // Euler integration runs at one exit; "auto" routes first, then
            // integrates through the routed exit.
            let (exit, logits) = match policy {
                ExitPolicyConfig::Auto => {
                    let (e, l) = route_exit(&model, &lr)?;
                    (e, Some(l))
                }
                ExitPolicyConfig::Fixed(e) => (e, None),
            };
            (flow::euler_infer(&model, &lr, steps, exit)?, exit, logits)
        };
        imaging::save_png(&img, &out_dir.join(&name))?;
        records.push(InferRecord { name, exit, steps, logits });
    }
    let summary = InferSummary {
        checkpoint_hash: ckpt_hash,
        exit_policy: match policy {
            ExitPolicyConfig::Auto => "auto".into(),
            ExitPolicyConfig::Fixed(e) => e.to_string(),
        },
        steps,
        images: records,
    };
    write_json_atomic(&summary, &out_dir.join("inference.json"))?;
    Ok(summary)
}

// ---- eval ------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub summary: training::EvalSummary,
}

/// Evaluates a checkpoint over an HR directory (paired with an LR directory
/// by filename, or degraded on the fly) and writes metrics plus a Pareto CSV.
pub fn cmd_eval(
    ckpt_path: &Path,
    hr_dir: &Path,
    lr_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalOutput> {
    let (model, ckpt, ckpt_hash) = load_model(ckpt_path)?;
    let hr_images = load_images(hr_dir)?;
    let summary = match lr_dir {
        Some(lrd) => {
            let mut pairs = Vec::with_capacity(hr_images.len());
            for (name, hr) in hr_images {
                let lr_path = lrd.join(&name);
                let lr = imaging::load_png(&lr_path)
                    .with_context(|| format!("paired LR image {}", lr_path.display()))?;
                pairs.push((name, lr, hr));
            }
            training::evaluate_pairs(&model, &pairs)?
        }
        None => training::evaluate(&model, &hr_images)?,
    };
    std::fs::create_dir_all(out_dir)?;

    // Pareto export: the four exits plus the adaptive operating point.
    let mut points = Vec::new();
    let table = costmodel::exit_costs(&model.cfg, 64, 64)?;
    for e in 0..4 {
        if let Some(p) = summary.mean_psnr_exits[e] {
            points.push((table.exit_flops[e], p));
        }
    }
    if let Some(p) = summary.mean_psnr_adaptive {
        let adaptive_cost = costmodel::expected_cost(&table, &summary.exit_distribution)?;
        points.push((adaptive_cost, p));
    }
    std::fs::write(out_dir.join("pareto.csv"), costmodel::pareto_csv(&points))?;

    let output = EvalOutput {
        checkpoint_hash: ckpt_hash,
        config_hash: {
            use sha2::Digest;
            let mut h = sha2::Sha256::new();
            h.update(serde_json::to_vec(&ckpt.manifest.config)?);
            crate::config::hex_string(&h.finalize())
        },
        summary,
    };
    write_json_atomic(&output, &out_dir.join("metrics.json"))?;
    Ok(output)
}

// ---- flops -----------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct FlopsReport {
    pub n_blocks: usize,
    pub scale: usize,
    pub input: [usize; 2],
    pub gflops: [f64; 4],
    pub ratio_e3_e0: f64,
    pub table: costmodel::CostTable,
}

/// Prints and optionally writes the per-exit cost table.
pub fn cmd_flops(n_blocks: usize, scale: usize, size: usize, out: Option<&Path>) -> Result<FlopsReport> {
    let cfg = ModelConfig { scale, n_blocks, ..ModelConfig::default() };
    let table = costmodel::exit_costs(&cfg, size, size)?;
    let gflops = table.gflops();
    let report = FlopsReport {
        n_blocks,
        scale,
        input: [size, size],
        gflops,
        ratio_e3_e0: gflops[3] / gflops[0],
        table,
    };
    let exits = cfg.exit_blocks();
    let hybrids = cfg.hybrid_indices();
    println!("per-exit cost at {size}x{size} rearranged input ({n_blocks} blocks):");
    println!("{:<6} {:<10} {:<8} {:>10}", "exit", "blocks", "hybrid", "GFLOPs");
    for e in 0..4 {
        let n_hybrid = hybrids.iter().filter(|&&i| i <= exits[e]).count();
        println!("E{e:<5} 0-{:<8} {n_hybrid:<8} {:>10.2}", exits[e], gflops[e]);
    }
    println!("E3/E0 ratio: {:.2}", report.ratio_e3_e0);
    if let Some(path) = out {
        write_json_atomic(&report, path)?;
    }
    Ok(report)
}

// ---- route-slide -----------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TileRecord {
    pub row: usize,
    pub col: usize,
    pub tissue: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_flops: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SlideRouteMap {
    pub checkpoint_hash: String,
    pub tissue_frac: f64,
    pub tile_count: usize,
    pub tissue_tiles: usize,
    pub exit_histogram: [usize; 4],
    pub mean_flops: Option<f64>,
    pub full_depth_flops: f64,
    pub savings_vs_full_depth: Option<f64>,
    pub tiles: Vec<TileRecord>,
}

fn parse_tile_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_suffix(".png")?;
    let rest = stem.strip_prefix('r')?;
    let (row, col_part) = rest.split_once("_c")?;
    Some((row.parse().ok()?, col_part.parse().ok()?))
}

/// Routes every tissue tile of a slide and renders the flat-color exit map.
/// Tiles are named `r{row}_c{col}.png`; a tile counts as tissue when at
/// least `tissue_frac` of its pixels fall on the dark side of the Otsu
/// threshold pooled over all tiles.
pub fn cmd_route_slide(
    ckpt_path: &Path,
    tiles_dir: &Path,
    tissue_frac: f64,
    out_dir: &Path,
) -> Result<SlideRouteMap> {
    let (model, _, ckpt_hash) = load_model(ckpt_path)?;
    let paths = list_pngs(tiles_dir)?;
    if paths.is_empty() {
        bail!("no tiles in {}", tiles_dir.display());
    }
    let mut tiles = Vec::with_capacity(paths.len());
    for p in &paths {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let (row, col) = parse_tile_name(&name)
            .ok_or_else(|| anyhow!("tile {} does not match r{{row}}_c{{col}}.png", name))?;
        let img = imaging::load_png(p)?;
        tiles.push((row, col, img));
    }
    tiles.sort_by_key(|&(r, c, _)| (r, c));
    let (th, tw) = (tiles[0].2.height(), tiles[0].2.width());
    for (r, c, img) in &tiles {
        if img.height() != th || img.width() != tw {
            bail!("tile r{r}_c{c} is {}x{}, expected {th}x{tw}", img.height(), img.width());
        }
    }

    // tissue detection: Otsu over the pooled luma histogram of all tiles
    let mut pooled = [0u64; 256];
    let lumas: Vec<_> = tiles.iter().map(|(_, _, img)| imaging::luma(img)).collect();
    for l in &lumas {
        for (p, c) in pooled.iter_mut().zip(imaging::histogram256(l)) {
            *p += c;
        }
    }
    let otsu_level = imaging::otsu_level_from_histogram(&pooled).ok();

    // cost table at the padded rearranged tile size
    let padded = |v: usize| v.div_ceil(model.cfg.window) * model.cfg.window;
    let table = costmodel::exit_costs(&model.cfg, padded(th), padded(tw))?;

    let mut records = Vec::with_capacity(tiles.len());
    let mut histogram = [0usize; 4];
    let mut tissue_tiles = 0usize;
    for ((row, col, img), l) in tiles.iter().zip(&lumas) {
        let tissue = match otsu_level {
            None => false,
            Some(level) => {
                let dark = l
                    .data()
                    .iter()
                    .filter(|&&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8 <= level)
                    .count();
                dark as f64 / l.len() as f64 >= tissue_frac
            }
        };
        if tissue {
            let (exit, _) = route_exit(&model, img)?;
            histogram[exit] += 1;
            tissue_tiles += 1;
            records.push(TileRecord {
                row: *row,
                col: *col,
                tissue: true,
                exit: Some(exit),
                cost_flops: Some(table.exit_flops[exit]),
            });
        } else {
            records.push(TileRecord { row: *row, col: *col, tissue: false, exit: None, cost_flops: None });
        }
    }

    let (mean_flops, savings) = if tissue_tiles > 0 {
        let mut dist = [0.0f64; 4];
        for (d, &c) in dist.iter_mut().zip(&histogram) {
            *d = c as f64 / tissue_tiles as f64;
        }
        let mean = costmodel::expected_cost(&table, &dist)?;
        (Some(mean), Some(1.0 - mean / table.exit_flops[3]))
    } else {
        (None, None)
    };

    std::fs::create_dir_all(out_dir)?;
    render_route_map(&records, &out_dir.join("route_map.png"))?;
    let map = SlideRouteMap {
        checkpoint_hash: ckpt_hash,
        tissue_frac,
        tile_count: records.len(),
        tissue_tiles,
        exit_histogram: histogram,
        mean_flops,
        full_depth_flops: table.exit_flops[3],
        savings_vs_full_depth: savings,
        tiles: records,
    };
    write_json_atomic(&map, &out_dir.join("route_map.json"))?;
    Ok(map)
}

const EXIT_COLORS: [[f32; 3]; 4] = [
    [0.30, 0.69, 0.31], // E0 green
    [0.13, 0.59, 0.95], // E1 blue
    [1.00, 0.60, 0.00], // E2 orange
    [0.96, 0.26, 0.21], // E3 red
];
const BACKGROUND_COLOR: [f32; 3] = [0.92, 0.92, 0.92];
const MAP_CELL: usize = 16;

fn render_route_map(records: &[TileRecord], path: &Path) -> Result<()> {
    let rows = records.iter().map(|r| r.row).max().unwrap_or(0) + 1;
    let cols = records.iter().map(|r| r.col).max().unwrap_or(0) + 1;
    let (h, w) = (rows * MAP_CELL, cols * MAP_CELL);
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        data[c * h * w..(c + 1) * h * w].fill(BACKGROUND_COLOR[c]);
    }
    for rec in records {
        let color = match rec.exit {
            Some(e) => EXIT_COLORS[e],
            None => BACKGROUND_COLOR,
        };
        for (c, &col) in color.iter().enumerate() {
            for y in rec.row * MAP_CELL..(rec.row + 1) * MAP_CELL {
                for x in rec.col * MAP_CELL..(rec.col + 1) * MAP_CELL {
                    data[c * h * w + y * w + x] = col;
                }
            }
        }
    }
    let img = Image::new(caflow_core::Tensor::new(vec![3, h, w], data)?)?;
    imaging::save_png(&img, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_names_parse() {
        assert_eq!(parse_tile_name("r3_c17.png"), Some((3, 17)));
        assert_eq!(parse_tile_name("r0_c0.png"), Some((0, 0)));
        assert_eq!(parse_tile_name("tile_3_17.png"), None);
        assert_eq!(parse_tile_name("r3_c17.jpg"), None);
    }
}
