//! The analytic cost model against instrumented multiply-accumulate counts
//! from an actual routed forward pass.

use caflow_core::autodiff::Graph;
use caflow_core::backbone::{FlowResNet, ModelConfig};
use caflow_core::costmodel;
use caflow_core::tensor::Tensor;

/// Runs the adaptive-style staged path for a forced exit and returns the
/// graph's MAC counters.
fn measured_macs(model: &FlowResNet<f32>, exit: usize, h: usize, w: usize) -> caflow_core::autodiff::MacCounter {
    let cfg = &model.cfg;
    let mut g = Graph::<f32>::new();
    let x0 = g.input(Tensor::from_fn(&[1, cfg.out_channels(), h, w], |i| (i as f32 * 0.01).sin()));
    let exits = cfg.exit_blocks();
    let mut st = model.start_trunk(&mut g, x0, x0, &[0.0]);
    model.run_blocks(&mut g, &mut st, 0, exits[0] + 1);
    let f_e0 = st.features;
    let _logits = model.classify_exit(&mut g, f_e0);
    if exit > 0 {
        model.run_blocks(&mut g, &mut st, exits[0] + 1, exits[exit] + 1);
    }
    let _v = model.exit_velocity(&mut g, &st, exit);
    g.macs
}

#[test]
fn instrumented_counter_matches_analytic_model() {
    let cfg = ModelConfig::default();
    let model = FlowResNet::<f32>::new(cfg, 42);
    let (h, w) = (8usize, 8usize);
    let table = costmodel::exit_costs(&cfg, h, w).unwrap();
    for exit in 0..4 {
        let macs = measured_macs(&model, exit, h, w);
        let conv_rel = (macs.conv as f64 - table.exit_conv_macs[exit] as f64).abs()
            / table.exit_conv_macs[exit] as f64;
        assert!(
            conv_rel < 0.01,
            "exit {exit} conv: measured {} vs analytic {} ({:.2}%)",
            macs.conv,
            table.exit_conv_macs[exit],
            conv_rel * 100.0
        );
        let lin_rel = (macs.linear as f64 - table.exit_linear_macs[exit] as f64).abs()
            / table.exit_linear_macs[exit] as f64;
        assert!(lin_rel < 0.01, "exit {exit} linear: {} vs {}", macs.linear, table.exit_linear_macs[exit]);
        if table.exit_matmul_macs[exit] > 0 {
            let mm_rel = (macs.matmul as f64 - table.exit_matmul_macs[exit] as f64).abs()
                / table.exit_matmul_macs[exit] as f64;
            assert!(mm_rel < 0.10, "exit {exit} attention: {} vs {}", macs.matmul, table.exit_matmul_macs[exit]);
        } else {
            assert_eq!(macs.matmul, 0, "exit {exit} should have no attention matmuls");
        }
    }
}

#[test]
fn routed_mean_cost_below_full_depth_when_any_early_exit() {
    // accounting identity: any distribution with mass below exit 3 costs less
    let table = costmodel::exit_costs(&ModelConfig::default(), 64, 64).unwrap();
    let mixed = costmodel::expected_cost(&table, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!(mixed < table.exit_flops[3]);
    let all_full = costmodel::expected_cost(&table, &[0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(all_full, table.exit_flops[3]);
}
