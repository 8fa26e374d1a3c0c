mod common;

use common::{tiny_dataset, tiny_model, tiny_train_config, tiny_train_data};
use specret_model::benchmark::checkpoint_bytes;
use specret_model::epsnet::gaussian_noise;
use specret_model::losses::{composite_forward, LossWeights};
use specret_model::train::{
    build_batch, schedule_weights, target_digest, train_epsnet, Precision, TrainReport, Trainer,
    WeightSchedule,
};
use specret_nn::gradcheck::{check_gradients, GradCheckOptions};
use specret_nn::graph::Graph;
use specret_nn::AdamState;

#[test]
fn schedule_endpoints_and_monotonicity() {
    let s = WeightSchedule::default();
    assert_eq!(s.omegas(0, 150), (1.0, 0.0, 0.0));
    assert_eq!(s.omegas(150, 150), (1.0, 1.0, 1.0));
    assert_eq!(s.omegas(45, 150), (1.0, 0.5, 0.0));
    assert_eq!(s.omegas(60, 150).2, 1.0);
    let mut prev = (0.0, 0.0, 0.0);
    for e in 0..=150 {
        let w = s.omegas(e, 150);
        assert!(w.0 >= prev.0 && w.1 >= prev.1 && w.2 >= prev.2);
        prev = w;
    }
    let base = LossWeights {
        shape: 2.0,
        ..Default::default()
    };
    let w = schedule_weights(30, 150, &s, &base);
    assert_eq!((w.shape, w.omega2), (2.0, 0.0));
    assert!(WeightSchedule {
        propagation_start: 0.5,
        propagation_end: 0.3,
        ..s
    }
    .validate()
    .is_err());
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset(1);
    let data = tiny_train_data(&ds);
    let run = || {
        let (m, rep) = train_epsnet(tiny_model(2), &data, &tiny_train_config(3)).unwrap();
        (checkpoint_bytes("epsnet", m.cfg(), &m.params).unwrap(), rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.records.len(), 3);
    let text = ra.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(TrainReport::from_jsonl(&text).unwrap(), ra);
}

#[test]
fn augmented_targets_never_repeat() {
    let ds = tiny_dataset(3);
    let data = tiny_train_data(&ds);
    let t = Trainer::new(tiny_model(4), &data, tiny_train_config(5)).unwrap();
    let mut seen = std::collections::HashSet::new();
    for e in 0..5 {
        for ex in t.epoch_examples(e).unwrap() {
            assert!(ex.eps.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(
                seen.insert(target_digest(&ex.eps)),
                "epoch {e} repeated a target"
            );
        }
    }
    let off = Trainer::new(
        tiny_model(4),
        &data,
        specret_model::train::TrainConfig {
            augment: None,
            ..tiny_train_config(5)
        },
    )
    .unwrap();
    assert_eq!(
        off.epoch_examples(0).unwrap(),
        off.epoch_examples(1).unwrap()
    );
}

#[test]
fn flow_is_disconnected_before_regularization() {
    let ds = tiny_dataset(5);
    let data = tiny_train_data(&ds);
    let model = tiny_model(6);
    let items = Trainer::new(model.clone(), &data, tiny_train_config(1))
        .unwrap()
        .epoch_examples(0)
        .unwrap();
    let refs: Vec<_> = items.iter().take(8).collect();
    let (inputs, targets) = build_batch(&model, &data.scenes, &data.estimates, &refs).unwrap();
    let eta = gaussian_noise(refs.len(), 4, 1);
    let weights = LossWeights {
        omega3: 0.0,
        ..Default::default()
    };
    let mut g = Graph::new();
    let v = composite_forward(
        &mut g,
        &model.net,
        &model.params,
        &inputs,
        &targets,
        &eta,
        &weights,
        false,
        false,
    )
    .unwrap();
    let grads = g.backward_named(v.composite, Some(&model.params)).unwrap();
    let flow_ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("flow"))
        .map(|(id, _, _)| id)
        .collect();
    assert!(!flow_ids.is_empty());
    for id in &flow_ids {
        if let Some(gt) = grads.param(*id) {
            assert!(gt.data.iter().all(|x| *x == 0.0));
        }
    }

    // Regularization never switches on within these epochs, so the flow stays at its initial value.
    let cfg = specret_model::train::TrainConfig {
        weight_decay: 0.0,
        schedule: WeightSchedule {
            regularization_start: 1.0,
            ..Default::default()
        },
        ..tiny_train_config(2)
    };
    let (trained, rep) = train_epsnet(model.clone(), &data, &cfg).unwrap();
    assert!(rep.records.iter().all(|r| !r.flow_active));
    for id in &flow_ids {
        assert_eq!(trained.params.get(*id), model.params.get(*id));
    }
    assert_ne!(trained.params, model.params);
}

#[test]
fn unconditioned_ablation_trains() {
    let ds = tiny_dataset(7);
    let data = tiny_train_data(&ds);
    let mut c = common::tiny_config(16, 4);
    c.conditioned = false;
    let m = specret_model::epsnet::EpsNetModel::new(c, 8).unwrap();
    let (_, rep) = train_epsnet(m, &data, &tiny_train_config(2)).unwrap();
    assert!(rep.records.iter().all(|r| r.train.is_finite()));
}

#[test]
fn non_finite_loss_aborts() {
    let ds = tiny_dataset(9);
    let data = tiny_train_data(&ds);
    let mut m = tiny_model(10);
    let id = m.params.ids().next().unwrap();
    m.params.get_mut(id).data[0] = f64::NAN;
    let err = train_epsnet(m, &data, &tiny_train_config(1)).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = tiny_dataset(11);
    let data = tiny_train_data(&ds);
    let cfg = tiny_train_config(4);
    let (full, _) = train_epsnet(tiny_model(12), &data, &cfg).unwrap();

    let mut t = Trainer::new(tiny_model(12), &data, cfg).unwrap();
    t.run_until(2).unwrap();
    let (params, adam_store) = (t.model.params.clone(), t.adam.to_store(&t.model.params));
    let mut m = tiny_model(12);
    m.params = params.clone();
    let adam = AdamState::from_store(&adam_store, &params).unwrap();
    let mut t2 = Trainer::resume(m, adam, 2, &data, cfg).unwrap();
    t2.run_until(4).unwrap();
    assert!(t2.finished());
    assert_eq!(t2.model.params, full.params);
}

#[test]
fn f32_precision_rounds_parameters() {
    let ds = tiny_dataset(13);
    let data = tiny_train_data(&ds);
    let cfg = specret_model::train::TrainConfig {
        precision: Precision::F32,
        ..tiny_train_config(1)
    };
    let (m, _) = train_epsnet(tiny_model(14), &data, &cfg).unwrap();
    assert!(m
        .params
        .iter()
        .all(|(_, _, t)| t.data.iter().all(|v| (*v as f32) as f64 == *v)));
}

/// Central differences of every term and of the composite, through the flow.
#[test]
fn composite_gradients_match_finite_differences() {
    let ds = tiny_dataset(15);
    let data = tiny_train_data(&ds);
    let model = tiny_model(16);
    let items = Trainer::new(model.clone(), &data, tiny_train_config(1))
        .unwrap()
        .epoch_examples(0)
        .unwrap();
    let refs: Vec<_> = items.iter().take(3).collect();
    let (inputs, targets) = build_batch(&model, &data.scenes, &data.estimates, &refs).unwrap();
    let eta = gaussian_noise(refs.len(), 4, 2);
    let weights = LossWeights::default();
    let opts = GradCheckOptions {
        h: 1e-5,
        max_per_tensor: Some(3),
        floor: 1e-4,
    };
    type Pick = fn(&specret_model::losses::LossVars) -> specret_nn::Var;
    let picks: [(&str, Pick); 11] = [
        ("shape", |v| v.shape),
        ("smooth", |v| v.smooth),
        ("sdev", |v| v.sdev),
        ("mean", |v| v.mean),
        ("hetero", |v| v.hetero_nll),
        ("eps", |v| v.eps),
        ("radiance", |v| v.radiance_nll),
        ("propagation", |v| v.propagation),
        ("kl", |v| v.kl),
        ("regularization", |v| v.regularization),
        ("composite", |v| v.composite),
    ];
    for (name, pick) in picks {
        let rep = check_gradients(
            &model.params,
            |g, s| {
                let v = composite_forward(
                    g, &model.net, s, &inputs, &targets, &eta, &weights, true, false,
                )?;
                Ok(pick(&v))
            },
            opts,
            None,
        )
        .unwrap();
        assert!(
            rep.passed(1e-5),
            "{name}: {} at {}",
            rep.max_rel_err,
            rep.worst
        );
    }
}
