use std::collections::HashMap;

use specret_nn::graph::Graph;
use specret_nn::{adam_step, AdamConfig, AdamState, Checkpoint, Init, ParamStore, Tensor};

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut store = ParamStore::new(1);
    let id = store.add("w", 2, 2, Init::Normal(1.0));
    let before = store.clone();
    let mut st = AdamState::new(&store);
    let grads = HashMap::from([(id, Tensor::zeros(2, 2))]);
    for _ in 0..10 {
        adam_step(&mut store, &grads, &mut st, 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn first_step_moves_by_learning_rate() {
    // bias correction makes the first update exactly lr·sign(g) up to eps
    let mut store = ParamStore::new(1);
    let id = store.add("w", 1, 3, Init::Constant(1.0));
    let mut st = AdamState::new(&store);
    let grads = HashMap::from([(id, Tensor::row(&[0.5, -20.0, 1e-3]))]);
    adam_step(&mut store, &grads, &mut st, 0.01, &AdamConfig::default()).unwrap();
    let w = &store.get(id).data;
    assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] - 1.01).abs() < 1e-9 && (w[2] - 0.99).abs() < 1e-7);
}

#[test]
fn minimizes_a_quadratic() {
    let mut store = ParamStore::new(1);
    let id = store.add("w", 1, 1, Init::Constant(2.0));
    let mut st = AdamState::new(&store);
    let cfg = AdamConfig::default();
    for epoch in 0..2000 {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let l = g.square(w);
        let grads = g.backward(l).unwrap().into_params();
        let lr = 0.1 * 0.99f64.powi(epoch);
        adam_step(&mut store, &grads, &mut st, lr, &cfg).unwrap();
    }
    assert!(
        store.get(id).item().abs() < 1e-3,
        "{}",
        store.get(id).item()
    );
}

#[test]
fn decoupled_decay_shrinks_without_gradient() {
    let mut store = ParamStore::new(1);
    let id = store.add("w", 1, 1, Init::Constant(1.0));
    let mut st = AdamState::new(&store);
    let cfg = AdamConfig {
        weight_decay: 0.5,
        ..AdamConfig::default()
    };
    adam_step(&mut store, &HashMap::new(), &mut st, 0.1, &cfg).unwrap();
    assert!((store.get(id).item() - 0.95).abs() < 1e-15);
}

#[test]
fn rejects_non_finite_gradients() {
    let mut store = ParamStore::new(1);
    let id = store.add("w", 1, 1, Init::Zeros);
    let mut st = AdamState::new(&store);
    let grads = HashMap::from([(id, Tensor::scalar(f64::NAN))]);
    assert!(adam_step(&mut store, &grads, &mut st, 0.1, &AdamConfig::default()).is_err());
    assert_eq!(st.step, 0);
}

fn populated() -> ParamStore {
    let mut s = ParamStore::new(99);
    s.add("enc/w", 3, 4, Init::FanIn(3));
    s.add("enc/b", 1, 4, Init::Zeros);
    s.add("conv/wr", 2, 2, Init::Normal(0.7));
    s.insert(
        "special",
        Tensor::row(&[f64::MIN_POSITIVE, -0.0, 1e308, std::f64::consts::PI]),
    );
    s
}

#[test]
fn initialization_depends_on_seed_and_name_only() {
    let mut a = ParamStore::new(5);
    a.add("x", 2, 2, Init::Normal(1.0));
    a.add("y", 2, 2, Init::Normal(1.0));
    let mut b = ParamStore::new(5);
    b.add("y", 2, 2, Init::Normal(1.0));
    assert_eq!(a.by_name("y"), b.by_name("y"));
    assert_ne!(a.by_name("x"), a.by_name("y"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let store = populated();
    let ck = Checkpoint::new(
        "propnet",
        serde_json::json!({"hidden": 128, "lr": 1e-3}),
        store.clone(),
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path)
        .unwrap()
        .expect_kind("propnet")
        .unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.params.seed(), 99);
    for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let b1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }
    assert!(Checkpoint::load(&path)
        .unwrap()
        .expect_kind("bgnet")
        .is_err());
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
}

#[test]
fn checkpoint_rejects_foreign_versions_and_truncation() {
    let bytes = Checkpoint::new("k", serde_json::Value::Null, populated()).to_bytes();
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    let bumped = json.replacen("\"version\":1", "\"version\":7", 1);
    assert_ne!(bumped, json);
    let mut forged = bytes[..8].to_vec();
    forged.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
    forged.extend_from_slice(bumped.as_bytes());
    forged.extend_from_slice(&bytes[12 + len..]);
    let err = Checkpoint::read_from(forged.as_slice())
        .unwrap_err()
        .to_string();
    assert!(err.contains("version 7"), "{err}");
    assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::read_from(&b"NOTACKPT0000"[..]).is_err());
}

#[test]
fn optimizer_state_survives_a_checkpoint() {
    let mut store = populated();
    let mut st = AdamState::new(&store);
    let grads: HashMap<_, _> = store
        .iter()
        .map(|(id, _, t)| (id, t.map(|v| 0.1 * v.clamp(-1.0, 1.0) + 0.01)))
        .collect();
    adam_step(&mut store, &grads, &mut st, 0.01, &AdamConfig::default()).unwrap();
    let ck = Checkpoint::new("adam", serde_json::Value::Null, st.to_store(&store));
    let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
    let st2 = AdamState::from_store(&back.params, &store).unwrap();
    assert_eq!(st, st2);
    assert!(AdamState::from_store(&ParamStore::new(0), &store).is_err());
}

#[test]
fn f32_rounding_is_idempotent() {
    let mut s = populated();
    s.round_to_f32();
    let once = s.clone();
    s.round_to_f32();
    assert_eq!(s, once);
    assert!(s
        .by_name("enc/w")
        .unwrap()
        .data
        .iter()
        .all(|&v| v == v as f32 as f64));
}
