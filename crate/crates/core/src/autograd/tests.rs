use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Central finite-difference check of `f` w.r.t. each input.
fn check_grad(inputs: Vec<ArrayD<f64>>, f: impl Fn(&Graph<f64>, &[NodeId]) -> NodeId) {
    let g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let root = f(&g, &ids);
    let grads = g.backward(root);
    let eval = |vals: &[ArrayD<f64>]| {
        let g = Graph::new();
        let ids: Vec<_> = vals.iter().map(|a| g.variable(a.clone())).collect();
        let r = f(&g, &ids);
        g.scalar(r)
    };
    let eps = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].as_slice_mut().unwrap()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[i];
            let tol = 1e-5 * (1.0 + numeric.abs());
            assert!(
                (a - numeric).abs() < tol,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Reduces any node to a scalar with a fixed random projection so every
/// output element gets a distinct upstream gradient.
fn project(g: &Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_array(&mut rng, &shape));
    let p = g.mul(x, w);
    g.sum_all(p)
}

#[test]
fn matmul_and_broadcast_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        rand_array(&mut rng, &[3, 4]),
        rand_array(&mut rng, &[4, 5]),
        rand_array(&mut rng, &[5]),
    ];
    check_grad(inputs, |g, v| {
        let y = g.matmul(v[0], v[1]);
        let y = g.add(y, v[2]);
        let y = g.tanh(y);
        project(g, y, 9)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![rand_array(&mut rng, &[2, 3, 4]), rand_array(&mut rng, &[2, 1, 4])];
    check_grad(inputs, |g, v| {
        let a = g.sigmoid(v[0]);
        let b = g.mul(a, v[1]);
        let c = g.sub(b, v[1]);
        let d = g.scale(c, 1.7);
        let e = g.relu(d);
        let f = g.add(e, a);
        project(g, f, 3)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![rand_array(&mut rng, &[2, 3, 4]), rand_array(&mut rng, &[2, 3, 2])];
    check_grad(inputs, |g, v| {
        let cat = g.concat(&[v[0], v[1]], 2);
        let p = g.permute(cat, &[2, 0, 1]);
        let r = g.reshape(p, &[6, 6]);
        let n = g.narrow(r, 0, 1, 4);
        let rows = g.gather_rows(n, &[3, 0, 0]);
        let st = g.stack(&[rows, rows], 1);
        project(g, st, 4)
    });
}

#[test]
fn embedding_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_grad(vec![rand_array(&mut rng, &[5, 3])], |g, v| {
        let e = g.embedding(v[0], &[1, 4, 1, 0]);
        project(g, e, 5)
    });
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        rand_array(&mut rng, &[2, 2, 4, 5]),
        rand_array(&mut rng, &[3, 2, 3, 3]),
        rand_array(&mut rng, &[3]),
    ];
    check_grad(inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], (1, 1));
        project(g, y, 6)
    });
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 3, 5, 6]);
    let w = rand_array(&mut rng, &[4, 3, 3, 3]);
    let b = rand_array(&mut rng, &[4]);
    let g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, wi, bi, (1, 1));
    let y = g.value(y).clone();
    for n in 0..2 {
        for o in 0..4 {
            for r in 0..5 {
                for col in 0..6 {
                    let mut acc = b[[o]];
                    for ch in 0..3 {
                        for i in 0..3 {
                            for j in 0..3 {
                                let (yy, xx) = (r as isize + i as isize - 1, col as isize + j as isize - 1);
                                if (0..5).contains(&yy) && (0..6).contains(&xx) {
                                    acc += w[[o, ch, i, j]] * x[[n, ch, yy as usize, xx as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[n, o, r, col]]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn max_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check_grad(vec![rand_array(&mut rng, &[2, 2, 4, 6])], |g, v| {
        let y = g.max_pool2d(v[0], (2, 3));
        project(g, y, 8)
    });
}

#[test]
fn batch_norm_gradients_masked_and_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        rand_array(&mut rng, &[3, 2, 2, 5]),
        rand_array(&mut rng, &[2]),
        rand_array(&mut rng, &[2]),
    ];
    check_grad(inputs.clone(), |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch, Some(&[5, 3, 1]), 1e-5);
        project(g, y, 9)
    });
    check_grad(inputs, |g, v| {
        let (y, _) = g.batch_norm(
            v[0],
            v[1],
            v[2],
            NormStats::Fixed {
                mean: &[0.1, -0.2],
                var: &[0.5, 2.0],
            },
            None,
            1e-5,
        );
        project(g, y, 10)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    check_grad(vec![rand_array(&mut rng, &[4, 3]), rand_array(&mut rng, &[3]), rand_array(&mut rng, &[3])], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch, None, 1e-5);
        project(g, y, 11)
    });
}

#[test]
fn batch_norm_ignores_masked_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&mut rng, &[2, 3, 2, 4]);
    let mut x2 = x.clone();
    // garbage in the masked tail of item 1
    for ch in 0..3 {
        for r in 0..2 {
            x2[[1, ch, r, 3]] = 100.0;
        }
    }
    let run = |x: ArrayD<f64>| {
        let g = Graph::new();
        let xi = g.constant(x);
        let gm = g.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let bt = g.constant(ArrayD::from_elem(IxDyn(&[3]), 0.5));
        let (y, st) = g.batch_norm(xi, gm, bt, NormStats::Batch, Some(&[4, 3]), 1e-5);
        let y = g.value(y).clone();
        (y, st.unwrap())
    };
    let (a, sa) = run(x);
    let (b, sb) = run(x2);
    assert_eq!(a, b);
    assert_eq!(sa.mean, sb.mean);
    assert_eq!(b[[1, 0, 0, 3]], 0.0);
}

#[test]
fn gru_gradients_with_lengths_and_initial_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![
        rand_array(&mut rng, &[2, 4, 9]),
        rand_array(&mut rng, &[2, 3]),
        rand_array(&mut rng, &[3, 9]),
        rand_array(&mut rng, &[9]),
    ];
    for reverse in [false, true] {
        check_grad(inputs.clone(), |g, v| {
            let y = g.gru(v[0], Some(v[1]), v[2], v[3], Some(&[4, 2]), reverse);
            project(g, y, 12)
        });
    }
}

/// Plain single-sequence recurrence written independently of the kernel.
fn gru_oracle(gx: &[Vec<f64>], whh: &[Vec<f64>], bhh: &[f64], h0: &[f64]) -> Vec<Vec<f64>> {
    let hid = h0.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = h0.to_vec();
    let mut outs = Vec::new();
    for x in gx {
        let hh: Vec<f64> = (0..3 * hid)
            .map(|k| bhh[k] + (0..hid).map(|i| h[i] * whh[i][k]).sum::<f64>())
            .collect();
        h = (0..hid)
            .map(|j| {
                let r = sig(x[j] + hh[j]);
                let z = sig(x[hid + j] + hh[hid + j]);
                let n = (x[2 * hid + j] + r * hh[2 * hid + j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect();
        outs.push(h.clone());
    }
    outs
}

#[test]
fn gru_matches_oracle_and_holds_past_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gx = rand_array(&mut rng, &[1, 5, 6]);
    let whh = rand_array(&mut rng, &[2, 6]);
    let bhh = rand_array(&mut rng, &[6]);
    let g = Graph::new();
    let out = g.gru(
        g.constant(gx.clone()),
        None,
        g.constant(whh.clone()),
        g.constant(bhh.clone()),
        Some(&[3]),
        false,
    );
    let out = g.value(out).clone();
    let seq: Vec<Vec<f64>> = (0..3).map(|t| (0..6).map(|k| gx[[0, t, k]]).collect()).collect();
    let w: Vec<Vec<f64>> = (0..2).map(|i| (0..6).map(|k| whh[[i, k]]).collect()).collect();
    let expect = gru_oracle(&seq, &w, bhh.as_slice().unwrap(), &[0.0, 0.0]);
    for t in 0..5 {
        for j in 0..2 {
            let e = expect[t.min(2)][j];
            assert!((out[[0, t, j]] - e).abs() < 1e-12, "t={t} j={j}");
        }
    }
}

#[test]
fn attention_pieces_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![rand_array(&mut rng, &[2, 5]), rand_array(&mut rng, &[2, 5, 3])];
    check_grad(inputs, |g, v| {
        let a = g.masked_softmax(v[0], &[5, 3]);
        let u = g.unfold1d(a, 3);
        let ctx = g.weighted_sum(a, v[1]);
        let s1 = project(g, u, 13);
        let s2 = project(g, ctx, 14);
        g.add(s1, s2)
    });
}

#[test]
fn masked_softmax_zero_outside_valid() {
    let g = Graph::<f64>::new();
    let e = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0.0, 0.0, 0.0, 50.0]).unwrap());
    let a = g.masked_softmax(e, &[3]);
    let a = g.value(a);
    assert_eq!(a[[0, 3]], 0.0);
    for i in 0..3 {
        assert!((a[[0, i]] - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn pooling_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    check_grad(vec![rand_array(&mut rng, &[2, 6, 3])], |g, v| {
        let m = g.masked_mean(v[0], &[6, 2]);
        project(g, m, 15)
    });
    check_grad(vec![rand_array(&mut rng, &[2, 3, 2, 7])], |g, v| {
        let p = g.pyramid_max_pool(v[0], &[7, 3], &[(1, 1), (2, 2), (1, 4)]);
        project(g, p, 16)
    });
}

#[test]
fn losses_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    check_grad(vec![rand_array(&mut rng, &[4, 5])], |g, v| {
        g.cross_entropy(v[0], &[1, 0, 4, 2], &[1.0, 1.0, 0.0, 1.0])
    });
    check_grad(vec![rand_array(&mut rng, &[6, 1])], |g, v| {
        let s = g.scale(v[0], 4.0);
        g.bce_with_logits(s, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    });
}

#[test]
fn grl_reverses_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_array(&mut rng, &[3, 2]);
    for lambda in [0.0, 0.5, 1.0] {
        let g = Graph::new();
        let xi = g.variable(x.clone());
        let y = g.grl(xi, lambda);
        assert_eq!(*g.value(y), x);
        let t = g.tanh(y);
        let s = project(&g, t, 17);
        let with = g.backward(s).get(xi).unwrap().clone();

        let g2 = Graph::new();
        let xi2 = g2.variable(x.clone());
        let t2 = g2.tanh(xi2);
        let s2 = project(&g2, t2, 17);
        let without = g2.backward(s2).get(xi2).unwrap().clone();
        for (a, b) in with.iter().zip(without.iter()) {
            assert_eq!(*a, -lambda * *b);
        }
    }
}
