mod common;

use common::*;
use ldlt_core::network::{empirical_lipschitz, empirical_lipschitz_with, BlockParams, Model, ModelKind, ModelSpec};
use ldlt_core::par::Execution;
use ldlt_core::param;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturb_biases(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<bool> = m.params().iter().map(|p| p.name.ends_with("bias")).collect();
    for (slot, is_bias) in m.params_mut().into_iter().zip(names) {
        if is_bias {
            let g = gaussian(&mut rng, 1, slot.len(), 0.5);
            slot.copy_from_slice(g.data());
        }
    }
    m.refresh().unwrap();
}

#[test]
fn single_layer_residual_matches_hand_rolled() {
    let mut spec = ModelSpec::new(ModelKind::Residual, 3, 2, 5, 1);
    spec.seed = 4;
    let mut m = Model::new(spec).unwrap();
    perturb_biases(&mut m, 1);
    let w = m.weights();
    let blk = &w.blocks[0];
    let relu = |v: DVector<f64>| v.map(|x| x.max(0.0));
    let col = |m: &ldlt_core::linalg::Matrix| DVector::from_row_slice(m.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x = gaussian(&mut rng, 1, 3, 1.0);
        let h = na(&w.proj) * col(&x) + col(&w.proj_bias);
        let z = relu(na(&blk.c[0]) * &h + col(&blk.biases[0]));
        let h = na(blk.a.as_ref().unwrap()) * &h + na(blk.b.as_ref().unwrap()) * z;
        let y = na(&w.head) * h + col(&w.head_bias);
        let ours = m.forward(x.data()).unwrap();
        for (a, b) in ours.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn stored_weights_come_from_raw_parameters() {
    let mut spec = ModelSpec::new(ModelKind::Residual, 4, 3, 6, 2);
    spec.blocks = 2;
    let m = Model::new(spec).unwrap();
    for (k, bp) in m.blocks.iter().enumerate() {
        let BlockParams::Residual(p) = bp else { panic!("residual expected") };
        let mb = param::materialize_residual(p).unwrap();
        let w = &m.weights().blocks[k];
        assert!(rel(&na(w.a.as_ref().unwrap()), &na(&mb.a)) < 1e-14);
        assert!(rel(&na(w.b.as_ref().unwrap()), &na(&mb.b)) < 1e-14);
    }
    assert_eq!(m.params().iter().filter(|p| p.name.starts_with("block1.")).count(), 6);
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let mut spec = ModelSpec::new(ModelKind::Feedforward, 6, 3, 16, 3);
    spec.seed = 9;
    let m = Model::new(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 300, 6, 1.0);
    assert_eq!(
        m.forward_batch_with(&x, Execution::Sequential).unwrap(),
        m.forward_batch_with(&x, Execution::Parallel).unwrap()
    );
    assert_eq!(
        empirical_lipschitz_with(&m, 500, 3, Execution::Sequential),
        empirical_lipschitz_with(&m, 500, 3, Execution::Parallel)
    );
}

#[test]
fn fresh_models_verify() {
    for kind in [ModelKind::Residual, ModelKind::Feedforward] {
        for depth in 1..=4 {
            let mut spec = ModelSpec::new(kind, 5, 3, 8, depth);
            spec.lipschitz = 2.0;
            let v = Model::new(spec).unwrap().verify().unwrap();
            assert!(v.is_certified(), "{kind:?} depth {depth}");
            assert!(v.proj_norm <= 1.0 + 1e-9 && v.head_norm <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn unsupported_activation_is_rejected() {
    let mut spec = ModelSpec::new(ModelKind::Residual, 2, 2, 4, 1);
    spec.activation = "selu".into();
    assert!(Model::new(spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn empirical_ratio_respects_bound(
        seed: u64,
        residual: bool,
        depth in 1usize..4,
        width in 2usize..12,
        l in 0.25f64..3.0,
        act in prop_oneof![Just("relu"), Just("tanh"), Just("sigmoid"), Just("hardtanh")],
    ) {
        let kind = if residual { ModelKind::Residual } else { ModelKind::Feedforward };
        let mut spec = ModelSpec::new(kind, 4, 3, width, depth);
        spec.lipschitz = l;
        spec.seed = seed;
        spec.activation = act.into();
        let mut m = Model::new(spec).unwrap();
        perturb_biases(&mut m, seed);
        let ratio = empirical_lipschitz(&m, 400, seed);
        prop_assert!(ratio <= m.lipschitz_bound() * (1.0 + 1e-9));
    }
}
