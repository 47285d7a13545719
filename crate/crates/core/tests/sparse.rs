mod common;

use common::{
    instrumented_forward, jitter, random_arch, random_frames, random_gates, random_input, tiny_arch,
};
use moevc::autodiff::Tape;
use moevc::config::ArchConfig;
use moevc::gated_vae::Sampling;
use moevc::model::Model;
use moevc::moe::{moe_forward, GateMode, GateSet};
use moevc::sparse::{
    count_flops_dense, count_flops_sparse, frr, overhead_macs, plan_gates, sparse_forward,
    FlopLedger, LayerFlops,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense_gated(
    model: &Model<f64>,
    x: &moevc::Tensor<f64>,
    s: usize,
    t: usize,
    mode: &GateMode<f64>,
) -> moevc::Tensor<f64> {
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x.clone());
    let (cs, ct) = (model.code(s).unwrap(), model.code(t).unwrap());
    let f = moe_forward(
        &mut tape,
        &model.base,
        model.moe.as_ref(),
        xv,
        &cs,
        &ct,
        mode,
        Sampling::Mean,
    )
    .unwrap();
    tape.value(f.output).clone()
}

#[test]
fn chained_plan_propagates_live_outputs_and_code_channels() {
    let arch = ArchConfig {
        speakers: 2,
        enc_channels: vec![4, 3],
        dec_channels: vec![4],
        ..tiny_arch()
    };
    let mut g = GateSet::<f64>::ones(&arch.gate_widths());
    g.layers[0] = vec![0.7, 0.0, 1.5, 0.0];
    let plan = plan_gates(&g, &arch).unwrap();
    assert_eq!(plan.layers[0].active_out, vec![0, 2]);
    assert_eq!(plan.layers[1].active_in, vec![0, 2]);
    // decoder layer reads the latent plus two code channels
    let dec = plan.layers.iter().position(|l| l.name == "dec.0").unwrap();
    assert_eq!(plan.layers[dec].active_in, vec![0, 1, 2, 3]);
}

#[test]
fn all_active_gates_reproduce_the_dense_pass_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let arch = random_arch(&mut rng);
        let mut model = Model::<f64>::new(arch.clone(), 3).unwrap();
        jitter(&mut model, &mut rng);
        let n = random_frames(&mut rng, &arch);
        let x = random_input(&mut rng, &arch, n);
        let ones = GateMode::Fixed(GateSet::ones(&arch.gate_widths()));
        let (cs, ct) = (model.code(0).unwrap(), model.code(1).unwrap());
        let sp = sparse_forward(&model, &x, &cs, &ct, &ones).unwrap();
        assert_eq!(sp.output, dense_gated(&model, &x, 0, 1, &ones));
        for l in &sp.ledger.layers {
            assert_eq!(l.actual_macs, l.dense_macs, "{}", l.name);
        }
    }
}

#[test]
fn half_zero_gates_match_the_dense_path_at_both_precisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let arch = random_arch(&mut rng);
        let mut model = Model::<f64>::new(arch.clone(), 4).unwrap();
        jitter(&mut model, &mut rng);
        let n = random_frames(&mut rng, &arch);
        let x = random_input(&mut rng, &arch, n);
        let gates = GateSet::new(random_gates(&mut rng, &arch, 0.5)).unwrap();
        let mode = GateMode::Fixed(gates.clone());
        let (cs, ct) = (model.code(1).unwrap(), model.code(0).unwrap());
        let sp = sparse_forward(&model, &x, &cs, &ct, &mode).unwrap();
        assert!(
            sp.output
                .max_abs_diff(&dense_gated(&model, &x, 1, 0, &mode))
                <= 1e-10
        );

        let m32 = model.cast::<f32>();
        let x32 = x.cast::<f32>();
        let mode32 = GateMode::Fixed(
            GateSet::new(
                gates
                    .layers
                    .iter()
                    .map(|g| g.iter().map(|&v| v as f32).collect())
                    .collect(),
            )
            .unwrap(),
        );
        let sp32 = sparse_forward(&m32, &x32, &cs, &ct, &mode32).unwrap();
        let mut tape = Tape::new(&m32.store);
        let xv = tape.constant(x32.clone());
        let f = moe_forward(
            &mut tape,
            &m32.base,
            m32.moe.as_ref(),
            xv,
            &cs,
            &ct,
            &mode32,
            Sampling::Mean,
        )
        .unwrap();
        assert!(sp32.output.max_abs_diff(tape.value(f.output)) <= 1e-5);
    }
}

#[test]
fn dead_layer_leaves_only_code_channel_work_downstream() {
    let arch = ArchConfig {
        speakers: 3,
        ..ArchConfig::default()
    };
    let model = Model::<f64>::new(arch.clone(), 0).unwrap();
    let n = 64;
    let mut g = GateSet::<f64>::ones(&arch.gate_widths());
    g.layers[3] = vec![0.0; 16];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(&mut rng, &arch, n);
    let (cs, ct) = (model.code(0).unwrap(), model.code(2).unwrap());
    let sp = sparse_forward(&model, &x, &cs, &ct, &GateMode::Fixed(g)).unwrap();
    let shapes = arch.base_layers(n).unwrap();
    let i = shapes.iter().position(|s| s.name == "dec.0").unwrap();
    assert_eq!(sp.ledger.layers[i].actual_macs, 0);
    let next = &shapes[i + 1];
    assert_eq!(
        sp.ledger.layers[i + 1].actual_macs,
        next.macs(3, next.c_out)
    );
}

#[test]
fn analytic_counts_equal_the_instrumented_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let arch = random_arch(&mut rng);
        let model = Model::<f64>::new(arch.clone(), 1).unwrap();
        let n = random_frames(&mut rng, &arch);
        let x = random_input(&mut rng, &arch, n);
        let gates = random_gates(&mut rng, &arch, 0.4);
        let plan = plan_gates(&GateSet::new(gates.clone()).unwrap(), &arch).unwrap();
        let ct = model.code(1).unwrap();
        let (_, counts) = instrumented_forward(&model, &x, &ct, &gates, &plan);
        let sparse = count_flops_sparse(&plan, &arch, n).unwrap();
        let got: Vec<u64> = sparse.layers.iter().map(|l| l.actual_macs).collect();
        assert_eq!(got, counts);

        let full: Vec<Vec<f64>> = arch.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
        let dense_plan = plan_gates(&GateSet::new(full.clone()).unwrap(), &arch).unwrap();
        let (_, dense_counts) = instrumented_forward(&model, &x, &ct, &full, &dense_plan);
        let dense = count_flops_dense(&arch, n).unwrap();
        assert_eq!(
            dense
                .layers
                .iter()
                .map(|l| l.dense_macs)
                .collect::<Vec<_>>(),
            dense_counts
        );
    }
}

#[test]
fn sparse_forward_ledger_equals_the_analytic_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let arch = random_arch(&mut rng);
        let mut model = Model::<f64>::new(arch.clone(), 2).unwrap();
        jitter(&mut model, &mut rng);
        let n = random_frames(&mut rng, &arch);
        let x = random_input(&mut rng, &arch, n);
        let (cs, ct) = (model.code(0).unwrap(), model.code(1).unwrap());
        let sp = sparse_forward(&model, &x, &cs, &ct, &GateMode::Learned).unwrap();
        let analytic = count_flops_sparse(&sp.plan, &arch, n).unwrap();
        assert_eq!(sp.ledger, analytic);
        assert_eq!(sp.ledger.overhead_macs, overhead_macs(&arch, n).unwrap());
    }
}

#[test]
fn worked_glu_example_halves_the_layer() {
    let shape = moevc::model::LayerShape {
        name: "l".into(),
        c_in: 4,
        code_in: 0,
        c_out: 8,
        geom: moevc::conv::ConvGeom::new((3, 3), (1, 1), (1, 1)),
        transpose: false,
        glu: true,
        gate: Some(0),
        q_in: 10,
        n_in: 10,
        q_out: 10,
        n_out: 10,
    };
    assert_eq!(2 * shape.dense_macs(), 115_200);
    let l = LayerFlops {
        name: "l".into(),
        dense_macs: shape.dense_macs(),
        actual_macs: shape.macs(4, 4),
    };
    assert_eq!(2 * l.actual_macs, 57_600);
    assert_eq!(l.reduction(), 0.5);
}

#[test]
fn frr_definition_anchors() {
    let ledger = FlopLedger {
        layers: vec![LayerFlops {
            name: "a".into(),
            dense_macs: 100,
            actual_macs: 28,
        }],
        overhead_macs: 0,
    };
    let g = GateSet::<f64>::ones(&[1]);
    assert!((frr(&ledger, &g, "u").frr - 0.72).abs() < 1e-12);

    let arch = ArchConfig {
        speakers: 4,
        ..ArchConfig::default()
    };
    let dense = count_flops_dense(&arch, 256).unwrap();
    let r = frr(&dense, &GateSet::<f64>::ones(&arch.gate_widths()), "u");
    assert!((r.frr + dense.overhead_macs as f64 / dense.dense_macs() as f64).abs() < 1e-12);
    for ((name, red), l) in r.layer_reduction.iter().zip(&dense.layers) {
        assert_eq!(name, &l.name);
        assert_eq!(*red, l.reduction());
    }
}

#[test]
fn zeroing_more_gates_never_adds_work() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let arch = random_arch(&mut rng);
        let n = random_frames(&mut rng, &arch);
        let mut gates = random_gates(&mut rng, &arch, 0.3);
        let before = count_flops_sparse(
            &plan_gates(&GateSet::new(gates.clone()).unwrap(), &arch).unwrap(),
            &arch,
            n,
        )
        .unwrap();
        let l = rand::Rng::random_range(&mut rng, 0..gates.len());
        let c = rand::Rng::random_range(&mut rng, 0..gates[l].len());
        gates[l][c] = 0.0;
        let after = count_flops_sparse(
            &plan_gates(&GateSet::new(gates).unwrap(), &arch).unwrap(),
            &arch,
            n,
        )
        .unwrap();
        assert!(after.actual_macs() <= before.actual_macs());
        assert_eq!(
            after.dense_macs(),
            after.layers.iter().map(|l| l.dense_macs).sum::<u64>()
        );
    }
}
