use budgetlm::autodiff::{check_tape_gradients, Tape, Tensor};
use budgetlm::cells::{CellKind, CellRegistry, GateCoupling, StateDropVariant};
use budgetlm::model::{
    count_parameters, sample_masks, solve_sizing, ForwardMode, Model, ModelConfig, SizingSolution, EMBEDDING,
};
use budgetlm::params::Bound;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive scan: the largest h whose count fits.
fn brute_force_hidden(config: &ModelConfig) -> Option<usize> {
    let mut best = None;
    for h in 1..5000 {
        if config.params_for_hidden(h) <= config.budget {
            best = Some(h);
        }
    }
    best
}

/// Count written out term by term, independent of the library's accounting.
fn independent_count(config: &ModelConfig, h: u64) -> u64 {
    let v = config.vocab_size as u64;
    let r = if config.shared_embeddings { config.input_embedding_ratio } else { 1.0 };
    let e = ((r * h as f64).floor() as u64).max(1);
    let tables = if config.shared_embeddings { v * e } else { 2 * v * e };
    let proj = if e < h { h * e } else { 0 };
    let cells = match config.cell_kind {
        CellKind::Lstm => {
            let g = if config.coupling == GateCoupling::Tied { 3 } else { 4 };
            (0..config.depth as u64)
                .map(|l| {
                    let input = if l == 0 { e } else { h };
                    g * (input * h + h * h + h)
                })
                .sum::<u64>()
        }
        CellKind::Rhn => 2 * e * h + config.depth as u64 * 2 * (h * h + h),
    };
    tables + v + proj + cells
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop_oneof![Just(CellKind::Lstm), Just(CellKind::Rhn)],
        prop_oneof![Just(GateCoupling::Untied), Just(GateCoupling::Tied), Just(GateCoupling::Capped)],
        1usize..5,
        2usize..3000,
        1_000u64..3_000_000,
        0.05f64..=1.0,
        any::<bool>(),
    )
        .prop_map(|(cell_kind, coupling, depth, v, budget, r, shared)| ModelConfig {
            cell_kind,
            coupling,
            depth,
            vocab_size: v,
            budget,
            input_embedding_ratio: r,
            shared_embeddings: shared,
            ..ModelConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sizing_is_exact_and_maximal(config in arb_config()) {
        match solve_sizing(&config) {
            Ok(s) => {
                prop_assert_eq!(Some(s.hidden_dim), brute_force_hidden(&config));
                prop_assert_eq!(s.param_count, independent_count(&config, s.hidden_dim as u64));
                prop_assert!(s.param_count <= config.budget);
                prop_assert!(independent_count(&config, s.hidden_dim as u64 + 1) > config.budget);
                prop_assert_eq!(s.down_projection, s.embedding_dim < s.hidden_dim);
                let model = Model::new(config.clone(), 0).unwrap();
                prop_assert_eq!(count_parameters(&model.params), s.param_count);
            }
            Err(_) => prop_assert!(independent_count(&config, 1) > config.budget),
        }
    }
}

#[test]
fn sizing_fixtures_match_registry_walk() {
    for (v, budget, h, total) in [(10_000, 10_000_000, 655, 9_994_820), (1000, 100_000, 64, 98_024)] {
        let config = ModelConfig {
            vocab_size: v,
            budget,
            coupling: GateCoupling::Untied,
            ..ModelConfig::default()
        };
        let s = solve_sizing(&config).unwrap();
        assert_eq!((s.hidden_dim, s.param_count), (h, total));
        assert_eq!(independent_count(&config, h as u64), total);
        assert!(independent_count(&config, h as u64 + 1) > budget);
        let model = Model::new(config, 1).unwrap();
        assert_eq!(count_parameters(&model.params), total);
    }
}

#[test]
fn tied_gets_more_hidden_units_than_capped() {
    for budget in [50_000, 200_000, 1_000_000] {
        for depth in [1, 2, 3] {
            let capped = ModelConfig {
                vocab_size: 500,
                budget,
                depth,
                coupling: GateCoupling::Capped,
                input_embedding_ratio: 0.5,
                ..ModelConfig::default()
            };
            let tied = ModelConfig {
                coupling: GateCoupling::Tied,
                ..capped.clone()
            };
            let hc = solve_sizing(&capped).unwrap().hidden_dim;
            let ht = solve_sizing(&tied).unwrap().hidden_dim;
            assert!(ht >= hc, "budget {budget} depth {depth}: tied {ht} < capped {hc}");
        }
    }
}

fn small_model(cell_kind: CellKind, variant: StateDropVariant, depth: usize, rate: f64) -> Model {
    let (e, h) = (3, 5);
    let config = ModelConfig {
        cell_kind,
        depth,
        vocab_size: 7,
        budget: u64::MAX,
        input_embedding_ratio: 0.6,
        input_drop: rate,
        intra_layer_drop: if cell_kind == CellKind::Lstm { rate } else { 0.0 },
        output_drop: rate,
        state_drop: rate,
        state_drop_variant: variant,
        ..ModelConfig::default()
    };
    let sizing = SizingSolution {
        embedding_dim: e,
        hidden_dim: h,
        down_projection: true,
        param_count: config.params_for_hidden(h),
    };
    Model::with_sizing(config, sizing, 17, &CellRegistry::default()).unwrap()
}

fn model_gradcheck(model: &Model, seed: u64) -> f64 {
    let (batch, steps) = (2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..7)).collect();
    let targets: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..7)).collect();
    let mut state = model.zero_state(batch);
    for part in state.layers.iter_mut().flatten() {
        for x in part.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let plan = sample_masks(&model.config, &model.sizing, batch, steps, seed).unwrap();
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let report = check_tape_gradients(
        |tape, vars| {
            let bound = Bound::from_parts(&names, vars)?;
            let out = model.forward(
                tape,
                &bound,
                &inputs,
                &targets,
                batch,
                steps,
                &state,
                Some(&plan),
                ForwardMode::Train,
            )?;
            Ok(out.loss)
        },
        &values,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    report.max_relative_error
}

#[test]
fn full_model_gradients_with_fixed_masks() {
    for variant in [StateDropVariant::Variational, StateDropVariant::Recurrent, StateDropVariant::None] {
        let model = small_model(CellKind::Lstm, variant, 2, 0.3);
        model_gradcheck(&model, 5);
    }
}

#[test]
fn rhn_model_gradients() {
    for depth in [1, 2, 5] {
        for variant in [StateDropVariant::Variational, StateDropVariant::Recurrent] {
            let model = small_model(CellKind::Rhn, variant, depth, 0.3);
            model_gradcheck(&model, 6);
        }
    }
}

#[test]
fn zero_rates_make_modes_identical() {
    for cell_kind in [CellKind::Lstm, CellKind::Rhn] {
        let model = small_model(cell_kind, StateDropVariant::Variational, 2, 0.0);
        let state = model.zero_state(3);
        let ids: Vec<usize> = (0..12).map(|i| i % 7).collect();
        let plan = sample_masks(&model.config, &model.sizing, 3, 4, 9).unwrap();
        let run = |mode, plan| model.forward_window(&ids, &ids, 3, 4, &state, plan, mode).unwrap();
        let (mf, s1) = run(ForwardMode::MeanField, None);
        let (tr, s2) = run(ForwardMode::Train, Some(&plan));
        let (mc, s3) = run(ForwardMode::MonteCarlo, Some(&plan));
        assert_eq!(mf, tr);
        assert_eq!(mf, mc);
        assert_eq!(s1, s2);
        assert_eq!(s1, s3);
    }
}

#[test]
fn train_mode_without_plan_is_an_error() {
    let model = small_model(CellKind::Lstm, StateDropVariant::Variational, 1, 0.1);
    let state = model.zero_state(1);
    assert!(model
        .forward_window(&[0, 1], &[1, 2], 1, 2, &state, None, ForwardMode::Train)
        .is_err());
    let bad_state = model.zero_state(2);
    assert!(model
        .forward_window(&[0, 1], &[1, 2], 1, 2, &bad_state, None, ForwardMode::MeanField)
        .is_err());
}

#[test]
fn shared_table_gets_gradient_from_output_side() {
    let model = small_model(CellKind::Lstm, StateDropVariant::None, 1, 0.0);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let state = model.zero_state(1);
    // token 6 is only ever a target
    let out = model
        .forward(&mut tape, &bound, &[0, 1, 2], &[1, 2, 6], 1, 3, &state, None, ForwardMode::MeanField)
        .unwrap();
    tape.backward(out.loss).unwrap();
    let g = tape.grad(bound.var(EMBEDDING).unwrap()).unwrap();
    assert!(g.row(6).iter().any(|&x| x != 0.0));
    // token 0 is only ever an input, so its row also carries the input-side gradient
    assert!(g.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn state_mask_shared_and_step_masks_independent() {
    let config = ModelConfig {
        vocab_size: 50,
        budget: 2_000_000,
        depth: 2,
        input_embedding_ratio: 0.5,
        input_drop: 0.5,
        intra_layer_drop: 0.5,
        output_drop: 0.5,
        state_drop: 0.5,
        ..ModelConfig::default()
    };
    let sizing = SizingSolution {
        embedding_dim: 128,
        hidden_dim: 256,
        down_projection: true,
        param_count: 0,
    };
    let (batch, steps) = (2, 35);
    let plan = sample_masks(&config, &sizing, batch, steps, 42).unwrap();
    for mask in [&plan.input, &plan.intra[0], &plan.output, &plan.output_projected] {
        for t in 1..steps {
            assert_ne!(plan.at_step(mask, 0), plan.at_step(mask, t));
        }
        let kept = mask.data().iter().filter(|&&x| x != 0.0).count() as f64 / mask.len() as f64;
        assert!((kept - 0.5).abs() < 0.05);
        assert!(mask.data().iter().all(|&x| x == 0.0 || x == 2.0));
    }
    // the state mask is a single [batch, h] draw, so every step sees the same one
    assert_eq!(plan.state[0].shape(), &[batch, 256]);
    let again = sample_masks(&config, &sizing, batch, steps, 42).unwrap();
    assert_eq!(plan, again);
}
