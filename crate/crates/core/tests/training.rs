use dcqe::autodiff::{Tape, Tensor};
use dcqe::codec::CodecConfig;
use dcqe::desk::{DeskConfig, DeskSet};
use dcqe::metrics::drift;
use dcqe::models::{init_params, load_checkpoint, BoundModel, FixedModel, Model, ModelParams, ModelSpec};
use dcqe::rng::{stream_rng, Stream};
use dcqe::theory::{evaluate_toy_losses, sample_pair, ToyDistribution, ToyModel};
use dcqe::training::*;

fn tiny_pool() -> PatchPool {
    let set = DeskSet::generate(&DeskConfig {
        train: 3,
        test: 0,
        size: 24,
        seed: 2,
    })
    .unwrap();
    PatchPool::from_raw_images(&set.train, &CodecConfig::new(30).unwrap(), 12, 6, 0).unwrap()
}

fn small_spec() -> ModelSpec {
    ModelSpec::dncnn_with(1, 4, 3)
}

fn cfg(mode: TrainMode, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 3,
        learning_rate: 1e-3,
        log_interval: 1,
        mode,
        ..TrainConfig::default()
    }
}

fn run(mode: TrainMode, w: &LossWeights, sc: &StraightforwardConfig, iterations: usize) -> TrainOutcome {
    let spec = small_spec();
    let params = init_params(&spec, 5).unwrap();
    train_loop(
        &spec,
        params,
        &cfg(mode, iterations),
        &mut tiny_pool(),
        w,
        sc,
        &TrainOutputs::default(),
    )
    .unwrap()
}

fn bits(m: &Model) -> Vec<u64> {
    m.params
        .tensors()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn zero_parameter_residual_model_is_the_identity() {
    let spec = small_spec();
    let zeros = ModelParams::zeros(&spec);
    let pool = tiny_pool();
    let batch = Batch::from_pairs(&pool.pairs()[..4]).unwrap();

    let mut tape = Tape::new();
    let model = BoundModel::trainable(&mut tape, &spec, &zeros);
    let c = tape.constant(batch.compressed.clone());
    let r = tape.constant(batch.raw.clone());
    let passes = forward_passes(&mut tape, &model, c, r).unwrap();
    assert_eq!(tape.value(passes.enhanced), &batch.compressed);
    assert_eq!(tape.value(passes.raw_enhanced), &batch.raw);
    assert_eq!(tape.value(passes.enhanced_twice), &batch.compressed);
    assert_eq!(tape.value(passes.enhanced_twice_outer), &batch.compressed);

    let terms = losses(&mut tape, &passes, r, &LossWeights::default(), Distance::L1).unwrap();
    for v in [terms.iden, terms.idem, terms.comp, terms.comp_tilde] {
        assert_eq!(tape.value(v).item(), 0.0);
    }
    assert_eq!(tape.value(terms.total).item(), tape.value(terms.enh).item());

    let m = Model::new(spec, zeros).unwrap();
    for (_, raw) in pool.pairs().iter().take(5) {
        assert_eq!(drift(&FixedModel(&m), raw, Distance::L1).unwrap(), 0.0);
    }
}

#[test]
fn twice_enhanced_values_agree_with_and_without_stop_gradient() {
    let spec = small_spec();
    let params = init_params(&spec, 1).unwrap();
    let batch = Batch::from_pairs(&tiny_pool().pairs()[..4]).unwrap();
    let mut tape = Tape::new();
    let model = BoundModel::trainable(&mut tape, &spec, &params);
    let c = tape.constant(batch.compressed);
    let r = tape.constant(batch.raw);
    let p = forward_passes(&mut tape, &model, c, r).unwrap();
    assert_eq!(tape.value(p.enhanced_twice), tape.value(p.enhanced_twice_outer));
}

#[test]
fn drift_is_distance_of_one_enhancement() {
    let spec = small_spec();
    let m = Model::new(spec.clone(), init_params(&spec, 4).unwrap()).unwrap();
    let pool = tiny_pool();
    let (_, raw) = &pool.pairs()[0];
    let out = dcqe::models::forward(&m.params, &spec, &raw.to_tensor()).unwrap();
    let mut tape = Tape::frozen();
    let a = tape.constant(out);
    let b = tape.constant(raw.to_tensor());
    let d = distance(&mut tape, a, b, Distance::L2).unwrap();
    assert_eq!(drift(&FixedModel(&m), raw, Distance::L2).unwrap(), tape.value(d).item());
}

#[test]
fn zero_weights_reduce_to_the_baseline() {
    let sc = StraightforwardConfig::default();
    let base = run(TrainMode::Baseline, &LossWeights::zero(), &sc, 4);
    let dc = run(TrainMode::DomainConsistent, &LossWeights::zero(), &sc, 4);
    assert_eq!(bits(&base.model), bits(&dc.model));
    for (b, d) in base.curve.iter().zip(&dc.curve) {
        assert_eq!(b.enh.to_bits(), d.enh.to_bits());
        assert_eq!(d.total.to_bits(), d.enh.to_bits());
    }
}

#[test]
fn single_unrolled_cycle_is_the_baseline() {
    let one = StraightforwardConfig { weights: vec![1.0] };
    let base = run(TrainMode::Baseline, &LossWeights::default(), &one, 4);
    let sf = run(TrainMode::Straightforward, &LossWeights::default(), &one, 4);
    assert_eq!(bits(&base.model), bits(&sf.model));
}

#[test]
fn straightforward_default_matches_two_weighted_cycles() {
    let sc = StraightforwardConfig::default();
    assert_eq!(sc.weights, vec![1.0, 0.01]);
    let spec = small_spec();
    let params = init_params(&spec, 3).unwrap();
    let batch = Batch::from_pairs(&tiny_pool().pairs()[..4]).unwrap();
    let mut tape = Tape::new();
    let model = BoundModel::trainable(&mut tape, &spec, &params);
    let c = tape.constant(batch.compressed.clone());
    let r = tape.constant(batch.raw.clone());
    let (_, total) = straightforward_objective(&mut tape, &model, c, r, &sc, Distance::L1).unwrap();

    let once = dcqe::models::forward(&params, &spec, &batch.compressed).unwrap();
    let twice = dcqe::models::forward(&params, &spec, &once).unwrap();
    let l1 = |a: &Tensor| a.data().iter().zip(batch.raw.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
    let expected = l1(&once) + 0.01 * l1(&twice);
    assert!((tape.value(total).item() - expected).abs() < 1e-12);
}

#[test]
fn fixed_seed_gives_bit_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join(format!("m{k}.ckpt"))),
            loss_csv: Some(dir.path().join(format!("l{k}.csv"))),
        };
        let c = TrainConfig {
            checkpoint_interval: 2,
            ..cfg(TrainMode::DomainConsistent, 5)
        };
        train_loop(
            &spec,
            init_params(&spec, 9).unwrap(),
            &c,
            &mut tiny_pool(),
            &LossWeights::default(),
            &StraightforwardConfig::default(),
            &out,
        )
        .unwrap();
        outputs.push(out);
    }
    let read = |p: &Option<std::path::PathBuf>| std::fs::read(p.as_ref().unwrap()).unwrap();
    assert_eq!(read(&outputs[0].checkpoint), read(&outputs[1].checkpoint));
    assert_eq!(read(&outputs[0].loss_csv), read(&outputs[1].loss_csv));
    let csv = String::from_utf8(read(&outputs[0].loss_csv)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LossRecord::CSV_HEADER);
    assert_eq!(csv.lines().count(), 6);
    let intermediate = checkpoint_at(outputs[0].checkpoint.as_ref().unwrap(), 2);
    assert!(intermediate.exists(), "{}", intermediate.display());
}

#[test]
fn resuming_without_steps_keeps_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let out = TrainOutputs {
        checkpoint: Some(path.clone()),
        loss_csv: None,
    };
    let spec = small_spec();
    let trained = train_loop(
        &spec,
        init_params(&spec, 2).unwrap(),
        &cfg(TrainMode::DomainConsistent, 3),
        &mut tiny_pool(),
        &LossWeights::default(),
        &StraightforwardConfig::default(),
        &out,
    )
    .unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&restored), bits(&trained.model));
    let trainer = Trainer::new(
        restored.spec.clone(),
        restored.params.clone(),
        cfg(TrainMode::DomainConsistent, 1),
        LossWeights::default(),
        StraightforwardConfig::default(),
    )
    .unwrap();
    assert_eq!(trainer.iteration(), 0);
    assert_eq!(bits(&trainer.model().unwrap()), bits(&restored));
}

#[test]
fn invalid_weights_and_configs_are_rejected() {
    let spec = small_spec();
    let params = init_params(&spec, 0).unwrap();
    let bad = LossWeights {
        lambda_comp: 0.01,
        ..LossWeights::default()
    };
    assert!(Trainer::new(
        spec.clone(),
        params.clone(),
        cfg(TrainMode::DomainConsistent, 1),
        bad,
        StraightforwardConfig::default()
    )
    .is_err());
    assert!(Trainer::new(
        spec.clone(),
        params.clone(),
        cfg(TrainMode::DomainConsistent, 0),
        LossWeights::default(),
        StraightforwardConfig::default()
    )
    .is_err());
    let wrong = init_params(&ModelSpec::dncnn_with(1, 5, 3), 0).unwrap();
    assert!(Trainer::new(
        spec,
        wrong,
        cfg(TrainMode::Baseline, 1),
        LossWeights::default(),
        StraightforwardConfig::default()
    )
    .is_err());
}

#[test]
fn divergence_aborts_training() {
    let spec = small_spec();
    let mut huge = cfg(TrainMode::DomainConsistent, 50);
    huge.learning_rate = 1e300;
    let run = train_loop(
        &spec,
        init_params(&spec, 0).unwrap(),
        &huge,
        &mut tiny_pool(),
        &LossWeights::default(),
        &StraightforwardConfig::default(),
        &TrainOutputs::default(),
    );
    assert!(matches!(run, Err(dcqe::Error::NonFinite(_))), "{:?}", run.err());
}

/// A residual toy MLP is exactly a residual stack of 1×1 convolutions on
/// points laid out as a 2-channel column image, so both trainers must
/// produce the same bits for every loss term.
#[test]
fn toy_and_image_trainers_share_the_loss_path() {
    let hidden = 6;
    let mut toy = ToyModel::init(hidden, true, 3).unwrap();
    let mut rng = stream_rng(1, Stream::Custom(5));
    for l in &mut toy.layers {
        for b in l.bias.data_mut() {
            *b = rand::Rng::gen_range(&mut rng, -0.1..0.1);
        }
    }
    let dist = ToyDistribution::ring(3, 0.1).unwrap();
    let (x, z) = sample_pair(&dist, 0.3, 40, 7).unwrap();

    let mut spec = ModelSpec::dncnn_with(2, hidden, 3);
    spec.kernel_sizes = vec![1, 1, 1];
    let image_model = Model::new(
        spec,
        ModelParams {
            layers: toy.layers.clone(),
        },
    )
    .unwrap();
    let batch = Batch {
        compressed: dcqe::theory::points_to_tensor(&z),
        raw: dcqe::theory::points_to_tensor(&x),
    };
    for kind in [Distance::L1, Distance::L2] {
        let w = LossWeights::default();
        let a = evaluate_toy_losses(&toy, &z, &x, &w, kind).unwrap();
        let b = evaluate_losses(&FixedModel(&image_model), &batch, &w, kind).unwrap();
        for (u, v) in [
            (a.enh, b.enh),
            (a.iden, b.iden),
            (a.idem, b.idem),
            (a.comp, b.comp),
            (a.comp_tilde, b.comp_tilde),
            (a.total, b.total),
        ] {
            assert_eq!(u.to_bits(), v.to_bits(), "{kind:?}");
        }
        assert!(a.idem > 0.0 && a.comp > 0.0);
    }
}
