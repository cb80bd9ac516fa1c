use crate::numerics::nn::{Linear, ParamStore, TransformerBlock};
use crate::numerics::{grad_check, Graph, NodeId, RngStream, Tensor};

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Checks every input of `build` against central differences.
fn check(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let run = |x: &[f64], want_grad: bool| {
        let mut g = Graph::new();
        let mut ids = Vec::new();
        let mut off = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            ids.push(g.variable(Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap()));
            off += n;
        }
        let out = build(&mut g, &ids);
        let value = g.value(out).item();
        let grad = if want_grad {
            let gr = g.backward(out).unwrap();
            ids.iter().flat_map(|&i| gr.wrt(i).into_data()).collect()
        } else {
            vec![]
        };
        (value, grad)
    };
    let (_, analytic) = run(&flat, true);
    grad_check(|p| Ok(run(p, false).0), &analytic, &flat, 1e-5).unwrap()
}

/// A random linear functional of a node, so every output element matters.
fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x).to_vec();
    let mut rng = RngStream::new(seed, "projection");
    let w = g.constant(random(&mut rng, &shape));
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn disconnected_parameter_gets_exact_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let unused = g.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn elementwise_ops_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "elementwise");
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let err = check(vec![a, b, row], &|g, ids| {
            let m = g.mul(ids[0], ids[1]).unwrap();
            let s = g.sub(m, ids[1]).unwrap();
            let r = g.add_row(s, ids[2]).unwrap();
            let t = g.tanh(r);
            let u = g.sigmoid(t);
            let v = g.gelu(u);
            let w = g.scale(v, 1.7);
            let z = g.add(w, ids[0]).unwrap();
            project(g, z, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn matmul_and_layout_ops_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "layout");
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3, 6]);
        let err = check(vec![a, b], &|g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            let s = g.slice_cols(m, 1, 4).unwrap();
            let gr = g.gather_rows(s, &[3, 0, 0, 2]).unwrap();
            let sc = g.scatter_rows(gr, &[4, 1, 0, 2], 6).unwrap();
            let tr = g.transpose(sc).unwrap();
            let rs = g.reshape(tr, &[6, 4]).unwrap();
            let gm = g.group_mean(rs, 2).unwrap();
            let sm = g.softmax_rows(gm);
            project(g, sm, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "ln");
        let x = random(&mut rng, &[3, 8]);
        let gamma = random(&mut rng, &[8]);
        let beta = random(&mut rng, &[8]);
        let err = check(vec![x, gamma, beta], &|g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            project(g, y, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn attention_gradients_causal_and_full() {
    for seed in 0..SEEDS {
        for causal in [false, true] {
            let mut rng = RngStream::new(seed, "attn");
            let q = random(&mut rng, &[6, 8]);
            let k = random(&mut rng, &[6, 8]);
            let v = random(&mut rng, &[6, 8]);
            let err = check(vec![q, k, v], &|g, ids| {
                let o = g.attention(ids[0], ids[1], ids[2], 2, 3, causal).unwrap();
                project(g, o, seed)
            });
            assert!(err <= TOL, "seed {seed} causal {causal}: {err}");
        }
    }
}

#[test]
fn lstm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "lstm");
        let xw = random(&mut rng, &[5, 12]);
        let wh = random(&mut rng, &[3, 12]);
        let err = check(vec![xw, wh], &|g, ids| {
            let h = g.lstm(ids[0], ids[1]).unwrap();
            project(g, h, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn conv_upsample_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "conv");
        let x = random(&mut rng, &[2, 9]);
        let w = random(&mut rng, &[3, 18]);
        let b = random(&mut rng, &[3]);
        let err = check(vec![x, w, b], &|g, ids| {
            let u = g.upsample2x(ids[0], 3, 3).unwrap();
            let c = g.conv3x3(u, ids[1], ids[2], 6, 6).unwrap();
            let r = g.tanh(c);
            project(g, r, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "loss");
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let weights: Vec<f64> = (0..12).map(|i| (i % 3) as f64).collect();
        let err = check(vec![a, b], &|g, ids| {
            let l1 = g.mse(ids[0], ids[1], None).unwrap();
            let l2 = g.mse(ids[0], ids[1], Some(weights.clone())).unwrap();
            let l3 = g.mae(ids[0], ids[1]).unwrap();
            let l4 = g.cross_entropy(ids[0], &[0, 3, 1]).unwrap();
            g.add_scalars(&[l1, l2, l3, l4]).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn two_layer_net_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "mlp");
        let mut store = ParamStore::<f64>::new();
        let l1 = Linear::new(&mut store, &mut rng, "l1", 5, 7).unwrap();
        let l2 = Linear::new(&mut store, &mut rng, "l2", 7, 2).unwrap();
        let x = random(&mut rng, &[4, 5]);
        let params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let err = check(inputs, &|g, ids| {
            let h = g.matmul(ids[0], ids[1]).unwrap();
            let h = g.add_row(h, ids[2]).unwrap();
            let h = g.tanh(h);
            let o = g.matmul(h, ids[3]).unwrap();
            let o = g.add_row(o, ids[4]).unwrap();
            project(g, o, seed)
        });
        assert!(err <= TOL, "seed {seed}: {err}");
        let _ = (l1, l2);
    }
}

#[test]
fn transformer_block_gradients() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, "block");
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "blk", 8, 2, 2).unwrap();
        let x = random(&mut rng, &[6, 8]);
        let run = |xv: &[f64], want: bool| {
            let mut g = Graph::new();
            let p = g.bind(&store, |_| true);
            let xi = g.variable(Tensor::new(vec![6, 8], xv.to_vec()).unwrap());
            let y = block.forward(&mut g, &p, xi, 3, true).unwrap();
            let l = project(&mut g, y, seed);
            let v = g.value(l).item();
            (
                v,
                if want {
                    g.backward(l).unwrap().wrt(xi).into_data()
                } else {
                    vec![]
                },
            )
        };
        let (_, analytic) = run(x.data(), true);
        let err = grad_check(|p| Ok(run(p, false).0), &analytic, x.data(), 1e-5).unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn single_position_attends_to_itself() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 2], vec![1.0, 4.0]).unwrap());
    let v = g.constant(Tensor::new(vec![1, 2], vec![7.0, -3.0]).unwrap());
    let o = g.attention(q, k, v, 1, 1, true).unwrap();
    assert_eq!(g.value(o).data(), &[7.0, -3.0]);
}

#[test]
fn equal_logits_give_uniform_weights() {
    // q = 0 makes every logit equal; v = identity rows exposes the weights.
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(&[3, 3]));
    let k = g.constant(Tensor::full(&[3, 3], 1.0));
    let v = g.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let o = g.attention(q, k, v, 1, 3, true).unwrap();
    let last = g.value(o).row(2).to_vec();
    for w in last {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn causal_attention_ignores_later_positions() {
    for seed in 0..10 {
        let mut rng = RngStream::new(seed, "causal");
        let q = random(&mut rng, &[4, 4]);
        let k = random(&mut rng, &[4, 4]);
        let v = random(&mut rng, &[4, 4]);
        let run = |v: Tensor<f64>| {
            let mut g = Graph::<f32>::new();
            let (q, k, v) = (g.constant(q.cast()), g.constant(k.cast()), g.constant(v.cast()));
            let o = g.attention(q, k, v, 2, 4, true).unwrap();
            g.value(o).clone()
        };
        let base = run(v.clone());
        let mut v2 = v.clone();
        for x in &mut v2.data_mut()[12..16] {
            *x += 3.0;
        }
        let pert = run(v2);
        assert_eq!(&base.data()[..12], &pert.data()[..12]);
        assert_ne!(&base.data()[12..], &pert.data()[12..]);
    }
}

#[test]
fn indivisible_heads_is_config_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(
        g.attention(x, x, x, 4, 2, false),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = RngStream::new(2, "softmax");
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[5, 7], |_| (rng.normal() * 10.0) as f32));
    let s = g.softmax_rows(x);
    for r in 0..5 {
        let total: f32 = g.value(s).row(r).iter().sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
}
