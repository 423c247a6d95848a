use budgetlm::cells::CellRegistry;
use budgetlm::corpus::{build_vocab, Level};
use budgetlm::error::Error;
use budgetlm::evaluator::{evaluate, nll_to_ppl, EvalOptions};
use budgetlm::model::{Model, ModelConfig, SizingSolution};
use budgetlm::params::{ParamRole, ParamStore};
use budgetlm::autodiff::Tensor;
use budgetlm::trainer::*;
use proptest::prelude::*;

fn tiny_corpus() -> (Vec<usize>, usize) {
    let text = b"the quick brown fox jumps over the lazy dog while a cat naps in the sun. \
                 she sells sea shells by the sea shore and the shells she sells are surely sea shells. ";
    let text: Vec<u8> = text.iter().cycle().take(600).copied().collect();
    let vocab = build_vocab(&text, Level::Character).unwrap();
    (vocab.encode(&text, Level::Character).unwrap(), vocab.len())
}

fn small_model(v: usize, seed: u64, state_drop: f64) -> Model {
    let config = ModelConfig {
        vocab_size: v,
        budget: u64::MAX,
        depth: 2,
        input_embedding_ratio: 0.5,
        state_drop,
        output_drop: 0.1,
        input_drop: 0.1,
        ..ModelConfig::default()
    };
    let sizing = SizingSolution {
        embedding_dim: 8,
        hidden_dim: 16,
        down_projection: true,
        param_count: config.params_for_hidden(16),
    };
    Model::with_sizing(config, sizing, seed, &CellRegistry::default()).unwrap()
}

fn schedule(max_steps: u64) -> TrainSchedule {
    TrainSchedule {
        batch_size: 4,
        unroll: 10,
        checkpoint_interval: 10,
        max_steps: Some(max_steps),
        max_epochs: 1000,
        zero_state_prob: 0.2,
        valid_tokens: 100,
        ..TrainSchedule::char_level()
    }
}

fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 5e-3,
        weight_decay: 1e-5,
        ..OptimizerConfig::char_level()
    }
}

fn deterministic(log: &[LogRow]) -> Vec<(u64, u64, u64, u64)> {
    log.iter().map(LogRow::deterministic_part).collect()
}

#[test]
fn same_seed_same_log() {
    let (ids, v) = tiny_corpus();
    let run = || {
        Trainer::new(small_model(v, 1, 0.3), &ids, &ids[..200], schedule(40), optimizer(), 9, None)
            .unwrap()
            .run()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.log.len(), 4);
    assert_eq!(deterministic(&a.log), deterministic(&b.log));
    assert_eq!(a.full_valid_nll.to_bits(), b.full_valid_nll.to_bits());
    let c = Trainer::new(small_model(v, 1, 0.3), &ids, &ids[..200], schedule(40), optimizer(), 10, None)
        .unwrap()
        .run()
        .unwrap();
    assert_ne!(deterministic(&a.log), deterministic(&c.log));
}

#[test]
fn interrupted_run_matches_uninterrupted() {
    let (ids, v) = tiny_corpus();
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = Trainer::new(
        small_model(v, 2, 0.3),
        &ids,
        &ids[..200],
        schedule(100),
        optimizer(),
        4,
        Some(straight_dir.path()),
    )
    .unwrap()
    .run()
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    Trainer::new(small_model(v, 2, 0.3), &ids, &ids[..200], schedule(50), optimizer(), 4, Some(dir.path()))
        .unwrap()
        .run()
        .unwrap();
    let ck = Checkpoint::load(&dir.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.progress.step, 50);
    // a different init seed proves the parameters really come from the file
    let resumed = Trainer::resume(
        small_model(v, 77, 0.3),
        &ids,
        &ids[..200],
        schedule(100),
        optimizer(),
        &ck,
        Some(dir.path()),
    )
    .unwrap()
    .run()
    .unwrap();
    assert_eq!(deterministic(&straight.log), deterministic(&resumed.log));
    assert_eq!(straight.full_valid_nll.to_bits(), resumed.full_valid_nll.to_bits());
    let a = Checkpoint::load(&straight_dir.path().join(LATEST_CHECKPOINT)).unwrap();
    let b = Checkpoint::load(&dir.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.state, b.state);
    let file_rows = parse_log(&std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap()).unwrap();
    assert_eq!(deterministic(&file_rows), deterministic(&straight.log));
}

#[test]
fn zero_state_probability_extremes() {
    let (ids, v) = tiny_corpus();
    let mut always = schedule(12);
    always.zero_state_prob = 1.0;
    let mut t = Trainer::new(small_model(v, 3, 0.0), &ids, &ids[..200], always, optimizer(), 1, None).unwrap();
    for _ in 0..12 {
        let report = t.train_step().unwrap();
        assert_eq!(report.reset_rows, vec![0, 1, 2, 3]);
    }

    let mut never = schedule(12);
    never.zero_state_prob = 0.0;
    let mut t = Trainer::new(small_model(v, 3, 0.0), &ids, &ids[..200], never, optimizer(), 1, None).unwrap();
    for _ in 0..5 {
        let before = t.state().clone();
        let at_epoch_start = t.progress().cursor == 0;
        let report = t.train_step().unwrap();
        assert!(report.reset_rows.is_empty());
        if !at_epoch_start {
            // the state is carried, so it is not all zeros
            assert!(before.layers[0][0].data().iter().any(|&x| x != 0.0));
        }
    }
}

#[test]
fn state_resets_at_epoch_start() {
    let (ids, v) = tiny_corpus();
    let mut s = schedule(100);
    s.zero_state_prob = 0.0;
    let mut t = Trainer::new(small_model(v, 3, 0.0), &ids, &ids[..200], s, optimizer(), 1, None).unwrap();
    let per_epoch = t.windows_per_epoch();
    assert_eq!(per_epoch, (600 / 4 - 1) / 10);
    for _ in 0..per_epoch {
        t.train_step().unwrap();
    }
    assert_eq!(t.progress().epoch, 1);
    assert_eq!(t.progress().cursor, 0);
}

#[test]
fn checkpoint_files_and_corruption() {
    let (ids, v) = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let out = Trainer::new(small_model(v, 5, 0.0), &ids, &ids[..200], schedule(20), optimizer(), 2, Some(dir.path()))
        .unwrap()
        .run()
        .unwrap();
    let best = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    let mut model = small_model(v, 99, 0.0);
    load_params(&mut model, &best).unwrap();
    assert_eq!(model.params, out.best_params);
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(text.starts_with("step\ttrain_nll\tvalid_nll\tlr\twall_s\n"));
    assert!(text.lines().last().unwrap().starts_with("# full_valid_nll\t"));

    let bytes = std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&cut), Err(Error::Checkpoint { .. })));
}

#[test]
fn divergence_is_reported() {
    let (ids, v) = tiny_corpus();
    let mut model = small_model(v, 5, 0.0);
    for x in model.params.get_mut("lstm0.w").unwrap().data_mut() {
        *x = f64::NAN;
    }
    let err = Trainer::new(model, &ids, &ids[..200], schedule(5), optimizer(), 2, None)
        .unwrap()
        .run()
        .unwrap_err();
    assert!(matches!(err, Error::Diverged(_) | Error::Numeric(_)), "{err}");
}

#[test]
fn memorizes_a_small_corpus() {
    let (ids, v) = tiny_corpus();
    let config = ModelConfig {
        vocab_size: v,
        budget: u64::MAX,
        ..ModelConfig::default()
    };
    let sizing = SizingSolution {
        embedding_dim: 32,
        hidden_dim: 32,
        down_projection: false,
        param_count: config.params_for_hidden(32),
    };
    let model = Model::with_sizing(config, sizing, 0, &CellRegistry::default()).unwrap();
    let schedule = TrainSchedule {
        batch_size: 1,
        unroll: 100,
        checkpoint_interval: 50,
        zero_state_prob: 0.0,
        max_steps: Some(300),
        max_epochs: 10_000,
        valid_tokens: 1000,
        ..TrainSchedule::char_level()
    };
    let opt = OptimizerConfig {
        learning_rate: 1e-2,
        ..OptimizerConfig::word_level()
    };
    let out = Trainer::new(model, &ids, &ids, schedule, opt, 0, None).unwrap().run().unwrap();
    let best = out.log.iter().map(|r| r.valid_nll).fold(f64::INFINITY, f64::min);
    assert!(nll_to_ppl(best) < 1.5, "{:?}", out.log);
    let mut model = Model::with_sizing(
        ModelConfig {
            vocab_size: v,
            budget: u64::MAX,
            ..ModelConfig::default()
        },
        sizing,
        0,
        &CellRegistry::default(),
    )
    .unwrap();
    model.params = out.best_params.clone();
    let opts = EvalOptions {
        unroll: 100,
        ..EvalOptions::default()
    };
    let direct = evaluate(&model, &ids, "train", &opts).unwrap();
    assert_eq!(direct.mean_nll.to_bits(), out.full_valid_nll.to_bits());
}

proptest! {
    #[test]
    fn constant_gradient_steps_have_magnitude_lr(
        g in prop_oneof![-100.0f64..-1e-3, 1e-3f64..100.0],
        lr in 1e-4f64..1.0,
        beta2 in 0.9f64..0.9999,
        steps in 1usize..60,
    ) {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![0.0]), ParamRole::Weight).unwrap();
        let mut state = AdamState::new(&params);
        let config = OptimizerConfig { beta2, epsilon: 1e-12, ..OptimizerConfig::word_level() };
        let mut prev = 0.0;
        for _ in 0..steps {
            adam_step(&mut state, &mut params, &[vec![g]], &config, lr).unwrap();
            let now = params.get("w").unwrap().data()[0];
            let delta = now - prev;
            prop_assert!(((delta.abs() - lr) / lr).abs() < 1e-9, "step {} delta {}", state.step, delta);
            prop_assert!(delta.signum() == -g.signum());
            prev = now;
        }
    }

    #[test]
    fn decays_fire_every_patience_flat_checkpoints(patience in 1usize..40, flat in 0usize..200) {
        let mut history = vec![1.0];
        history.extend(std::iter::repeat_n(1.0, flat));
        let lr = maybe_decay_lr(&history, 1.0, patience, 0.5);
        prop_assert_eq!(lr, 0.5f64.powi((flat / patience) as i32));
    }
}
