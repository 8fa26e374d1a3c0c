use specret_nn::gradcheck::{check_gradients, GradCheckOptions};
use specret_nn::graph::Graph;
use specret_nn::{
    Activation, AttentionConfig, CrossAttention, FnoBlock, FnoBlockConfig, Init, Mlp, MlpConfig,
    ParamStore, Tensor, Var,
};

/// Max relative error between the tape gradient of `f` at `x` and central differences.
fn input_grad_error(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let xv = g.input_tracked(x.clone());
    let loss = f(&mut g, xv);
    let grads = g.backward(loss).unwrap();
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let l = f(&mut g, v);
        g.value(l).item()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut p = x.clone();
        p.data[k] += h;
        let mut m = x.clone();
        m.data[k] -= h;
        let num = (eval(&p) - eval(&m)) / (2.0 * h);
        let a = analytic.data[k];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

fn sample(rows: usize, cols: usize, seed: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * seed).sin() * 0.9)
            .collect(),
    )
}

fn weighted_sum(g: &mut Graph, y: Var) -> Var {
    // a non-uniform weighting so every output entry matters differently
    let (r, c) = g.shape(y);
    let w = g.constant(Tensor::new(
        r,
        c,
        (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect(),
    ));
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn half_squared_norm_of_linear_map() {
    // L = ½‖xW‖², ∂L/∂W = xᵀ(xW)
    let x = Tensor::row(&[0.5, -1.0, 2.0]);
    let mut store = ParamStore::new(0);
    let id = store.add("w", 3, 2, Init::FanIn(3));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.param(&store, id);
    let y = g.matmul(xv, w);
    let sq = g.square(y);
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    let grads = g.backward(loss).unwrap();
    let want = x.t_matmul(&x.matmul(store.get(id)));
    for (a, b) in grads.param(id).unwrap().data.iter().zip(&want.data) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn unary_ops_match_finite_differences() {
    let x = sample(3, 4, 1.3);
    let pos = x.map(|v| v.abs() + 0.2);
    type Op = fn(&mut Graph, Var) -> Var;
    let cases: Vec<(&str, Op, &Tensor)> = vec![
        ("neg", |g, v| g.neg(v), &x),
        ("sigmoid", |g, v| g.sigmoid(v), &x),
        ("tanh", |g, v| g.tanh(v), &x),
        ("swish", |g, v| g.swish(v), &x),
        ("softplus", |g, v| g.softplus(v), &x),
        ("exp", |g, v| g.exp(v), &x),
        ("log", |g, v| g.log(v), &pos),
        ("square", |g, v| g.square(v), &x),
        ("sqrt", |g, v| g.sqrt(v), &pos),
        ("softclamp", |g, v| g.softclamp(v, -0.7, 0.7), &x),
        ("scale", |g, v| g.scale(v, -2.5), &x),
        ("add_scalar", |g, v| g.add_scalar(v, 4.0), &x),
        ("transpose", |g, v| g.transpose(v), &x),
        ("softmax", |g, v| g.softmax_rows(v), &x),
        ("norm_rows", |g, v| g.norm_rows(v), &x),
        ("sum_rows", |g, v| g.sum_rows(v), &x),
        ("mean_cols", |g, v| g.mean_cols(v), &x),
        ("mean", |g, v| g.mean(v), &x),
        ("slice_cols", |g, v| g.slice_cols(v, 1, 2), &x),
        ("slice_rows", |g, v| g.slice_rows(v, 1, 2), &x),
    ];
    for (name, op, t) in cases {
        let err = input_grad_error(t, |g, v| {
            let y = op(g, v);
            weighted_sum(g, y)
        });
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn binary_ops_and_broadcasting_match_finite_differences() {
    let x = sample(3, 4, 0.7);
    let full = sample(3, 4, 2.1).map(|v| v + 2.0);
    let row = Tensor::row(&[1.5, -0.5, 2.0, 0.8]);
    let col = Tensor::new(3, 1, vec![0.9, -1.1, 1.7]);
    type Op = fn(&mut Graph, Var, Var) -> Var;
    let ops: Vec<(&str, Op)> = vec![
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| g.div(a, b)),
    ];
    for (name, op) in &ops {
        for other in [&full, &row, &col] {
            // gradient with respect to the left operand
            let e1 = input_grad_error(&x, |g, v| {
                let o = g.constant(other.clone());
                let y = op(g, v, o);
                weighted_sum(g, y)
            });
            // and to the (possibly broadcast) right operand
            let e2 = input_grad_error(other, |g, v| {
                let a = g.constant(x.clone());
                let y = op(g, a, v);
                weighted_sum(g, y)
            });
            assert!(
                e1 < 1e-6 && e2 < 1e-6,
                "{name} {:?}: {e1:e} {e2:e}",
                other.shape()
            );
        }
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let a = sample(3, 4, 0.9);
    let b = sample(4, 2, 1.7);
    let e = input_grad_error(&a, |g, v| {
        let bb = g.constant(b.clone());
        let y = g.matmul(v, bb);
        weighted_sum(g, y)
    });
    assert!(e < 1e-6, "matmul lhs {e:e}");
    let e = input_grad_error(&b, |g, v| {
        let aa = g.constant(a.clone());
        let y = g.matmul(aa, v);
        weighted_sum(g, y)
    });
    assert!(e < 1e-6, "matmul rhs {e:e}");
    let shared = Tensor::row(&[0.3, -0.2]);
    let e = input_grad_error(&shared, |g, v| {
        let aa = g.constant(a.clone());
        let y = g.concat_cols(&[aa, v]);
        let z = g.tanh(y);
        weighted_sum(g, z)
    });
    assert!(e < 1e-6, "concat_cols broadcast {e:e}");
    let e = input_grad_error(&a, |g, v| {
        let y = g.concat_rows(&[v, v]);
        let z = g.square(y);
        weighted_sum(g, z)
    });
    assert!(e < 1e-6, "concat_rows {e:e}");
    let other = sample(3, 4, 3.3);
    let e = input_grad_error(&a, |g, v| {
        let o = g.constant(other.clone());
        let y = g.cosine_rows(v, o);
        weighted_sum(g, y)
    });
    assert!(e < 1e-6, "cosine {e:e}");
}

#[test]
fn spectral_conv_gradients_in_all_operands() {
    for n in [8usize, 9] {
        let x = sample(2, n, 0.41);
        let m = 3;
        let wr = sample(m, m, 1.9);
        let wi = sample(m, m, 2.7);
        let ex = input_grad_error(&x, |g, v| {
            let (a, b) = (g.constant(wr.clone()), g.constant(wi.clone()));
            let y = g.spectral_conv(v, a, b);
            weighted_sum(g, y)
        });
        let er = input_grad_error(&wr, |g, v| {
            let (xx, b) = (g.constant(x.clone()), g.constant(wi.clone()));
            let y = g.spectral_conv(xx, v, b);
            weighted_sum(g, y)
        });
        let ei = input_grad_error(&wi, |g, v| {
            let (xx, a) = (g.constant(x.clone()), g.constant(wr.clone()));
            let y = g.spectral_conv(xx, a, v);
            weighted_sum(g, y)
        });
        assert!(
            ex < 1e-6 && er < 1e-6 && ei < 1e-6,
            "n={n}: {ex:e} {er:e} {ei:e}"
        );
    }
}

#[test]
fn degenerate_points_have_finite_zero_gradients() {
    let zero = Tensor::zeros(2, 3);
    let mut g = Graph::new();
    let v = g.input_tracked(zero.clone());
    let n = g.norm_rows(v);
    let o = g.constant(Tensor::filled(2, 3, 1.0));
    let c = g.cosine_rows(v, o);
    let s = g.add(n, c);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(v).unwrap().data.iter().all(|&d| d == 0.0));
}

#[test]
fn disconnected_parameters_get_no_gradient() {
    let mut store = ParamStore::new(0);
    let used = store.add("used", 1, 2, Init::Constant(1.0));
    let unused = store.add("unused", 1, 2, Init::Constant(1.0));
    let mut g = Graph::new();
    let p = g.param(&store, used);
    let _ = g.param(&store, unused);
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert!(grads.param(used).is_some());
    assert!(grads.param(unused).is_none());
}

#[test]
fn reused_parameters_accumulate() {
    let mut store = ParamStore::new(0);
    let id = store.add("w", 1, 1, Init::Constant(3.0));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let p = g.mul(a, b);
    let grads = g.backward(p).unwrap();
    assert!((grads.param(id).unwrap().item() - 6.0).abs() < 1e-15);
}

#[test]
fn non_finite_loss_names_the_op() {
    let mut store = ParamStore::new(0);
    let id = store.add("enc/w", 1, 1, Init::Constant(-1.0));
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let l = g.log(p);
    let err = g.backward_named(l, Some(&store)).err().unwrap().to_string();
    assert!(err.contains("Log") && err.contains("enc/w"), "{err}");
    let wide = g.constant(Tensor::zeros(1, 2));
    assert!(g.backward(wide).is_err());
}

fn tiny_network_loss(
    store: &ParamStore,
    mlp: &Mlp,
    fno: &FnoBlock,
    ca: &CrossAttention,
    g: &mut Graph,
) -> Var {
    let x = g.constant(sample(2, 8, 0.77));
    let h = fno.forward(g, store, x).unwrap();
    let h = g.swish(h);
    let y = mlp.forward(g, store, h).unwrap();
    let k1 = g.constant(Tensor::row(&[0.3, -0.6, 0.2]));
    let k2 = g.constant(sample(2, 3, 1.1));
    let out = ca.forward_tokens(g, store, &[y], &[k1, k2]).unwrap();
    let sq = g.square(out[0]);
    g.mean(sq)
}

#[test]
fn composite_network_passes_parameter_gradcheck() {
    let mut store = ParamStore::new(21);
    let fno = FnoBlock::new(
        &mut store,
        "fno",
        FnoBlockConfig::new(8, 6, 3, 2, Activation::Sigmoid),
    )
    .unwrap();
    let mlp = Mlp::new(
        &mut store,
        "mlp",
        MlpConfig::new(6, 5, 4, 3, Activation::Tanh),
    )
    .unwrap();
    let ca = CrossAttention::new(
        &mut store,
        "ca",
        AttentionConfig {
            query_dim: 4,
            key_dim: 3,
            model_dim: 4,
            aggregate_mean: false,
        },
    )
    .unwrap();
    // nonzero biases so their gradients are informative
    for (_, name, t) in store.clone().iter() {
        if name.ends_with("/b") {
            let id = store.id(name).unwrap();
            *store.get_mut(id) = t.map(|_| 0.05);
        }
    }
    let f = |g: &mut Graph, s: &ParamStore| Ok(tiny_network_loss(s, &mlp, &fno, &ca, g));
    let report = check_gradients(&store, f, GradCheckOptions::default(), None).unwrap();
    assert_eq!(report.n_checked, store.n_scalars());
    assert!(report.passed(1e-4), "{report:?}");
    let broken = check_gradients(&store, f, GradCheckOptions::default(), Some(1e-3)).unwrap();
    assert!(!broken.passed(1e-4));
}
