use flowseg_core::data::{gen_dataset, Dataset, DomainConfig};
use flowseg_core::diffcore::{grad_check, Tape, Tensor, Var};
use flowseg_core::parallel::Execution;
use flowseg_core::pipeline::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, evaluate, fit, forward_tape, predict,
    sample_loss, train_step, Adam, Checkpoint, FitOptions, ForwardOptions, ForwardTape, Mode, Model, ModelConfig,
    ParamGroup, PipelineError, ResumeState, TrainState, Version,
};
use flowseg_core::rng::{seeded, stream};
use flowseg_core::spatial::Field2D;
use proptest::prelude::*;

fn tiny(version: Version) -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        base_channels: 2,
        flow_layers: 2,
        flow_hidden: 4,
        mc_samples: 4,
        batch_size: 2,
        ..ModelConfig::for_version(version)
    }
}

fn data(n: usize, side: usize, seed: u64) -> Dataset {
    gen_dataset(&DomainConfig::named("A").unwrap(), n, side, side, &mut seeded(seed)).unwrap()
}

fn one_hot(mask: &[u8], k: usize) -> Tensor {
    let p = mask.len();
    let mut v = vec![0.0; k * p];
    for (i, l) in mask.iter().enumerate() {
        v[usize::from(*l) * p + i] = 1.0;
    }
    Tensor::new(vec![k, p], v).unwrap()
}

fn image(tape: &mut Tape, cfg: &ModelConfig, values: &[f64]) -> Var {
    tape.constant(&[1, cfg.height, cfg.width], values.to_vec()).unwrap()
}

fn run_forward(model: &Model, values: &[f64], opts: &ForwardOptions, seed: u64) -> (Tape, ForwardTape) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let img = image(&mut tape, &model.config, values);
    let fwd = forward_tape(&mut tape, model, &bound, img, opts, &mut stream(seed, &[1])).unwrap();
    (tape, fwd)
}

fn column_sums(values: &[f64], k: usize) -> Vec<f64> {
    let p = values.len() / k;
    (0..p).map(|px| (0..k).map(|c| values[c * p + px]).sum()).collect()
}

/// Model whose flow is perturbed away from the identity so its parameters matter.
fn perturbed(version: Version) -> Model {
    let mut m = Model::new(&tiny(version)).unwrap();
    m.flow_mut().perturb_outputs(0.2, &mut seeded(77));
    m
}

/// Gradient of the full training loss w.r.t. every parameter tensor, checked
/// against central differences. Noise and the variational state are held fixed.
fn check_full_forward(version: Version) {
    let model = perturbed(version);
    let cfg = model.config.clone();
    let ds = data(1, 8, 3);
    let sample = &ds.samples[0];
    let target = one_hot(&sample.mask, cfg.num_classes);
    let (_, first) = run_forward(&model, &sample.image, &ForwardOptions::train(0.7), 5);
    let opts = ForwardOptions {
        frozen_state: Some(first.state.clone()),
        ..ForwardOptions::train(0.7)
    };

    let net_ids: Vec<_> = model.store().ids().collect();
    let flow_ids: Vec<_> = model.flow().store().ids().collect();
    let mut worst = (0.0f64, String::new());
    for (is_flow, id) in net_ids.iter().map(|i| (false, *i)).chain(flow_ids.iter().map(|i| (true, *i))) {
        let (name, x) = if is_flow {
            (model.flow().store().name(id).to_string(), model.flow().store().get(id).clone())
        } else {
            (model.store().name(id).to_string(), model.store().get(id).clone())
        };
        let err = grad_check(
            |t, v| {
                let mut bound = model.bind(t);
                if is_flow {
                    bound.flow = bound.flow.with_var(id, v);
                } else {
                    bound.net = bound.net.with_var(id, v);
                }
                let img = image(t, &cfg, &sample.image);
                let fwd = forward_tape(t, &model, &bound, img, &opts, &mut stream(5, &[1])).unwrap();
                Ok(sample_loss(t, &model, &fwd, &target, 1.0).unwrap().total)
            },
            &x,
            1e-5,
        )
        .unwrap();
        if err > worst.0 {
            worst = (err, name);
        }
    }
    assert!(worst.0 < 1e-4, "{version}: worst grad_check error {:e} on {}", worst.0, worst.1);
}

#[test]
fn full_forward_grad_check_all_components() {
    check_full_forward(Version::Ver5);
}

#[test]
fn full_forward_grad_check_baseline_and_partial_variants() {
    for v in [Version::Ver1, Version::Ver2, Version::Ver3] {
        check_full_forward(v);
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let model = perturbed(Version::Ver5);
    let ds = data(2, 8, 4);
    let mut totals = std::collections::HashMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let img = image(&mut tape, &model.config, &s.image);
        let fwd = forward_tape(&mut tape, &model, &bound, img, &ForwardOptions::train(1.0), &mut seeded(i as u64))
            .unwrap();
        let loss = sample_loss(&mut tape, &model, &fwd, &one_hot(&s.mask, 2), 1.0).unwrap();
        let g = tape.backward(loss.total).unwrap();
        let mut grads = bound.net.collect(&tape, &g);
        grads.extend(bound.flow.collect(&tape, &g));
        for ((name, _), gr) in model.named_params().iter().zip(&grads) {
            let group = Model::group_of(name);
            let m = gr.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let e = totals.entry(format!("{group:?}")).or_insert(0.0f64);
            *e = e.max(m);
        }
    }
    for group in [ParamGroup::Appearance, ParamGroup::Shape, ParamGroup::Segmentation, ParamGroup::Flow] {
        let m = totals.get(&format!("{group:?}")).copied().unwrap_or(0.0);
        assert!(m > 1e-12, "{group:?} got no gradient");
    }
}

#[test]
fn outputs_are_distributions_and_kl_terms_nonnegative() {
    let ds = data(1, 8, 6);
    for v in Version::ALL {
        for hard in [false, true] {
            let cfg = ModelConfig {
                hard_gumbel: hard,
                ..tiny(v)
            };
            let model = Model::new(&cfg).unwrap();
            for opts in [ForwardOptions::train(0.8), ForwardOptions::eval()] {
                let (tape, fwd) = run_forward(&model, &ds.samples[0].image, &opts, 7);
                let y = tape.value(fwd.y_hat);
                assert!(y.iter().all(|p| *p >= 0.0));
                assert!(column_sums(y, 2).iter().all(|s| (s - 1.0).abs() < 1e-9));
                for kl in [fwd.kl.kl_y, fwd.kl.kl_z, fwd.kl.kl_x, fwd.kl.kl_m] {
                    let k = tape.scalar(kl);
                    assert!(k.is_finite() && k >= 0.0, "{v} {k}");
                }
            }
        }
    }
}

#[test]
fn each_version_runs_its_code_path() {
    let ds = data(1, 8, 8);
    for v in Version::ALL {
        let t = v.toggles();
        assert_eq!(Version::from_name(v.name()), Some(v));
        let model = Model::new(&tiny(v)).unwrap();
        let (_, fwd) = run_forward(&model, &ds.samples[0].image, &ForwardOptions::train(1.0), 9);
        let tr = fwd.trace;
        assert!(tr.appearance && tr.shape && tr.observation && tr.segmentation);
        assert!(tr.gumbel && !tr.eval_softmax && tr.variational_updates && tr.kl_terms);
        assert_eq!(tr.flow_refinement, t.nf_posterior, "{v}");
        assert_eq!(tr.sde_sampler, t.sde_girsanov, "{v}");
        assert_eq!(tr.mc_kl, t.ncvi && t.nf_posterior, "{v}");
        assert_eq!(tr.gaussian_kl, !t.ncvi, "{v}");
        assert_eq!(fwd.coord_log_weights.is_empty(), !t.sde_girsanov, "{v}");

        let (_, ev) = run_forward(&model, &ds.samples[0].image, &ForwardOptions::eval(), 9);
        assert!(ev.trace.eval_softmax && !ev.trace.gumbel && !ev.trace.flow_refinement);
    }
}

#[test]
fn eval_is_deterministic_and_matches_low_temperature_training() {
    let ds = data(3, 16, 10);
    for v in Version::ALL {
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            ..tiny(v)
        };
        let model = Model::new(&cfg).unwrap();
        for s in &ds.samples {
            let (ta, ea) = run_forward(&model, &s.image, &ForwardOptions::eval(), 1);
            let (tb, eb) = run_forward(&model, &s.image, &ForwardOptions::eval(), 2);
            assert_eq!(ta.value(ea.y_hat), tb.value(eb.y_hat));

            let cold = ForwardOptions {
                mode: Mode::Train,
                tau: 1e-4,
                noise_scale: 0.0,
                frozen_state: None,
            };
            let (tc, ec) = run_forward(&model, &s.image, &cold, 3);
            let k = cfg.num_classes;
            let eval_labels = Field2D::new(k, 16, 16, ta.value(ea.y_hat).to_vec()).unwrap().argmax();
            let cold_labels = Field2D::new(k, 16, 16, tc.value(ec.y_hat).to_vec()).unwrap().argmax();
            let agree = eval_labels.iter().zip(&cold_labels).filter(|(a, b)| a == b).count();
            assert!(agree as f64 >= 0.99 * eval_labels.len() as f64, "{v}: {agree}/256");
        }
    }
}

#[test]
fn predict_labels_are_the_argmax_and_follow_class_permutation() {
    let cfg = ModelConfig {
        num_classes: 3,
        ..tiny(Version::Ver5)
    };
    let model = Model::new(&cfg).unwrap();
    let ds = data(1, 8, 11);
    let pred = predict(&model, &ds.samples[0].image).unwrap();
    assert_eq!(pred.labels, pred.confidence.argmax());

    // Rotate the class rows of the segmentation mean head.
    let perm = [2usize, 0, 1];
    let mut swapped = model.clone();
    for name in ["segmentation.mu.kernel", "segmentation.mu.bias"] {
        let id = swapped.store().find(name).unwrap();
        let t = swapped.store_mut().get_mut(id);
        let row = t.numel() / 3;
        let old = t.values().to_vec();
        let mut new = old.clone();
        for (dst, &src) in perm.iter().enumerate() {
            new[dst * row..(dst + 1) * row].copy_from_slice(&old[src * row..(src + 1) * row]);
        }
        t.assign(&new).unwrap();
    }
    let p2 = predict(&swapped, &ds.samples[0].image).unwrap();
    let inverse = [1u8, 2, 0];
    for (a, b) in pred.labels.iter().zip(&p2.labels) {
        assert_eq!(inverse[usize::from(*a)], *b);
    }
}

#[test]
fn wrong_input_size_is_an_error() {
    let model = Model::new(&tiny(Version::Ver1)).unwrap();
    assert!(matches!(predict(&model, &[0.0; 10]), Err(PipelineError::Shape(_))));
    let other = data(2, 16, 1);
    assert!(matches!(
        evaluate(&model, &other, Execution::Sequential),
        Err(PipelineError::ConfigMismatch { .. })
    ));
}

#[test]
fn zero_lambda_loss_of_a_perfect_prediction_is_near_zero() {
    let cfg = ModelConfig {
        lambda_bayes: 0.0,
        ..tiny(Version::Ver1)
    };
    let model = Model::new(&cfg).unwrap();
    let ds = data(1, 8, 12);
    let (mut tape, fwd) = run_forward(&model, &ds.samples[0].image, &ForwardOptions::train(1.0), 1);
    // Score the model's own hard prediction with a perfect-prediction target.
    let y = tape.value(fwd.y_hat).to_vec();
    let labels = Field2D::new(2, 8, 8, y.clone()).unwrap().argmax();
    let loss = sample_loss(&mut tape, &model, &fwd, &one_hot(&labels, 2), 1.0).unwrap();
    let seg = tape.scalar(loss.ce) + tape.scalar(loss.dice);
    assert!((tape.scalar(loss.total) - seg).abs() < 1e-12);

    let mut tape = Tape::new();
    let t = tape.constant(&[2, 64], one_hot(&labels, 2).values().to_vec()).unwrap();
    let (ce, dice) = flowseg_core::spatial::dice_ce_tape(&mut tape, t, t).unwrap();
    assert!(tape.scalar(ce) + tape.scalar(dice) < 1e-6);
}

#[test]
fn repeated_steps_on_one_sample_reduce_the_loss() {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        learning_rate: 3e-3,
        lambda_bayes: 0.0,
        batch_size: 1,
        ..tiny(Version::Ver1)
    };
    let mut model = Model::new(&cfg).unwrap();
    let mut adam = Adam::new(&model);
    let ds = data(1, 16, 13);
    let batch = [&ds.samples[0]];
    // Same step index every time: the noise is fixed, so the objective is too.
    let losses: Vec<f64> = (0..51)
        .map(|_| train_step(&mut model, &mut adam, &batch, 0, 0, Execution::Sequential).unwrap().loss)
        .collect();
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down as f64 >= 0.8 * 50.0, "{down}/50 decreasing: {losses:?}");
}

fn trajectory(exec: Execution, version: Version) -> Vec<f64> {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        batch_size: 3,
        ..tiny(version)
    };
    let mut model = Model::new(&cfg).unwrap();
    let mut adam = Adam::new(&model);
    let ds = data(6, 16, 14);
    let refs: Vec<_> = ds.samples.iter().collect();
    let mut out = Vec::new();
    for (step, batch) in refs.chunks(3).enumerate() {
        for epoch in 0..2 {
            out.push(train_step(&mut model, &mut adam, batch, epoch, step, exec).unwrap().loss);
        }
    }
    out
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    for v in [Version::Ver1, Version::Ver5] {
        let a = trajectory(Execution::Sequential, v);
        let b = trajectory(Execution::Sequential, v);
        let c = trajectory(Execution::Parallel, v);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn resumed_fit_reproduces_the_uninterrupted_run() {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        epochs: 3,
        batch_size: 4,
        checkpoint_every: 1,
        ..tiny(Version::Ver5)
    };
    let (train, val) = (data(8, 16, 15), data(3, 16, 16));
    let full = fit(Model::new(&cfg).unwrap(), &train, &val, FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = ModelConfig { epochs: 3, ..cfg.clone() };
    // Stop after one epoch by running a 1-epoch-limited copy, then resume to 3.
    let one = fit(
        Model::new(&ModelConfig { epochs: 1, ..first.clone() }).unwrap(),
        &train,
        &val,
        FitOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(one.history.len(), 1);
    let mut last = checkpoint_load(&dir.path().join("ckpt-last.dbfc")).unwrap();
    last.model.config.epochs = 3;
    let best = checkpoint_load(&dir.path().join("ckpt-best.dbfc")).unwrap();
    let resumed = fit(
        Model::new(&first).unwrap(),
        &train,
        &val,
        FitOptions {
            resume: Some(ResumeState::from_checkpoints(last, Some(best)).unwrap()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 3]);
    let joined: Vec<_> = one.history.iter().chain(&resumed.history).collect();
    for (a, b) in full.history.iter().zip(joined) {
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.dice_val, b.dice_val);
    }
    let mut best_so_far = f64::NEG_INFINITY;
    for r in &full.history {
        best_so_far = best_so_far.max(r.dice_val);
        assert_eq!(r.best_dice, best_so_far);
    }
}

fn trained_checkpoint() -> Checkpoint {
    let cfg = tiny(Version::Ver5);
    let mut model = Model::new(&cfg).unwrap();
    let mut adam = Adam::new(&model);
    let ds = data(2, 8, 17);
    let refs: Vec<_> = ds.samples.iter().collect();
    train_step(&mut model, &mut adam, &refs, 0, 0, Execution::Sequential).unwrap();
    Checkpoint {
        model,
        adam: Some(adam),
        state: TrainState {
            epochs_done: 1,
            best_dice: 0.25,
            best_epoch: 1,
        },
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint();
    let (a, b) = (dir.path().join("a.dbfc"), dir.path().join("b.dbfc"));
    checkpoint_save(&ckpt, &a).unwrap();
    let loaded = checkpoint_load(&a).unwrap();
    assert_eq!(loaded.model, ckpt.model);
    assert_eq!(loaded.adam, ckpt.adam);
    assert_eq!(loaded.state, ckpt.state);
    checkpoint_save(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint_to_bytes(&trained_checkpoint());
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = checkpoint_from_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.is_io(), "cut at {cut}: {err}");
    }
    let mut magic = bytes.clone();
    magic[1] = b'x';
    assert!(matches!(checkpoint_from_bytes(&magic), Err(PipelineError::Magic { .. })));
    let mut version = bytes.clone();
    version[4] = 0xee;
    assert!(matches!(checkpoint_from_bytes(&version), Err(PipelineError::Version { .. })));
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 40;
    flipped[mid] ^= 0x10;
    assert!(checkpoint_from_bytes(&flipped).unwrap_err().is_io());
}

#[test]
fn checkpoint_from_other_class_count_is_rejected() {
    let k2 = Model::new(&tiny(Version::Ver5)).unwrap();
    let k3 = ModelConfig {
        num_classes: 3,
        ..tiny(Version::Ver5)
    };
    match k3.check_compatible(&k2.config) {
        Err(PipelineError::ConfigMismatch { field, .. }) => assert_eq!(field, "num_classes"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let resume = ResumeState::from_checkpoints(
        Checkpoint {
            model: k2,
            adam: None,
            state: TrainState::default(),
        },
        None,
    )
    .unwrap();
    let ds = gen_dataset(
        &DomainConfig {
            classes: 3,
            ..DomainConfig::named("A").unwrap()
        },
        2,
        8,
        8,
        &mut seeded(1),
    )
    .unwrap();
    let err = fit(
        Model::new(&k3).unwrap(),
        &ds,
        &ds,
        FitOptions {
            resume: Some(resume),
            ..FitOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::ConfigMismatch { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn train_outputs_stay_on_the_simplex(seed in 0u64..10_000, tau in 0.05f64..3.0, version in 0usize..5) {
        let model = Model::new(&tiny(Version::ALL[version])).unwrap();
        let ds = data(1, 8, seed);
        let (tape, fwd) = run_forward(&model, &ds.samples[0].image, &ForwardOptions::train(tau), seed);
        for s in column_sums(tape.value(fwd.y_hat), 2) {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
