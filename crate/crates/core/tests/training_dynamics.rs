//! Training-loop dynamics: descent checks over seeds and the
//! checkpoint-resume identity.

use mixprompt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mixprompt::config::RunConfig;
use mixprompt::trainer::{fit, init_model, train_epoch, World};

#[test]
fn standard_tuning_descends_within_five_epochs_across_seeds() {
    // attack eps = 0 reduces to standard prompt tuning
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 5;
    cfg.train.attack.epsilon = 0.0;
    for s in 0..5u64 {
        let mut shifted = cfg.clone();
        shifted.seeds = cfg.seeds.offset_run(s);
        let spec = shifted.dataset_spec();
        let world = World::build(&spec, shifted.encoder_dims(), shifted.train.ctx_len).unwrap();
        let state = fit(&world, &shifted.train, &shifted.seeds).unwrap();
        let first = state.history.first().unwrap().train_loss;
        let last = state.history.last().unwrap().train_loss;
        assert!(last < first, "seed {s}: loss {first:.4} -> {last:.4} did not descend");
    }
}

#[test]
fn default_adversarial_run_lowers_robust_training_loss_across_seeds() {
    // the fully-defaulted configuration: N=8, K=8, M=16, eps=4/255,
    // 30 epochs of the literal constant-step algorithm
    let cfg = RunConfig::default();
    for s in 0..5u64 {
        let mut shifted = cfg.clone();
        shifted.seeds = cfg.seeds.offset_run(s);
        let spec = shifted.dataset_spec();
        let world = World::build(&spec, shifted.encoder_dims(), shifted.train.ctx_len).unwrap();
        let state = fit(&world, &shifted.train, &shifted.seeds).unwrap();
        let first = state.history.first().unwrap().train_loss;
        let last = state.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "seed {s}: robust loss {first:.4} -> {last:.4} did not descend"
        );
    }
}

#[test]
fn checkpoint_resume_equals_uninterrupted_run() {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 3;
    let spec = cfg.dataset_spec();
    let world = World::build(&spec, cfg.encoder_dims(), cfg.train.ctx_len).unwrap();

    // uninterrupted: 4 epochs
    let mut uninterrupted = init_model(&cfg.train, &world.encoders, cfg.seeds.init).unwrap();
    let mut step = 0u64;
    for epoch in 0..4 {
        train_epoch(&mut uninterrupted, &world, &cfg.train, &cfg.seeds, epoch, &mut step).unwrap();
    }

    // interrupted: 3 epochs, checkpoint round-trip, one more epoch
    let mut resumed = init_model(&cfg.train, &world.encoders, cfg.seeds.init).unwrap();
    let mut step = 0u64;
    for epoch in 0..3 {
        train_epoch(&mut resumed, &world, &cfg.train, &cfg.seeds, epoch, &mut step).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(
        &Checkpoint {
            model: resumed.clone(),
            enc_dims: cfg.encoder_dims(),
            n_classes: spec.n_classes,
            logit_scale: cfg.train.logit_scale,
            seeds: cfg.seeds,
        },
        &path,
    )
    .unwrap();
    let mut reloaded = load_checkpoint(&path).unwrap().model;
    assert_eq!(reloaded.checksum(), resumed.checksum(), "round trip must be bit-exact");
    let mut step = 3;
    train_epoch(&mut reloaded, &world, &cfg.train, &cfg.seeds, 3, &mut step).unwrap();

    assert_eq!(
        reloaded.checksum(),
        uninterrupted.checksum(),
        "resumed run diverged from the uninterrupted run"
    );
}
