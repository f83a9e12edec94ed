use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, MultiHeadAttention};
use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1, 2], &[3.0, 4.0]));
    let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero_b = g.leaf(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);

    let x0 = g.leaf(t(&[1, 2], &[0.0, 0.0]));
    let w = g.leaf(t(&[2, 2], &[0.3, -2.0, 7.0, 1.5]));
    let b = g.leaf(t(&[2], &[1.0, 2.0]));
    let y = g.linear(x0, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    // 1*3 + 2*4 + 0.5
    let w = g.leaf(t(&[1, 2], &[1.0, 2.0]));
    let b = g.leaf(t(&[1], &[0.5]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[11.5]);

    let bad = g.leaf(t(&[2, 3], &[0.0; 6]));
    assert!(matches!(g.linear(x, bad, None), Err(Error::Contract(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let img = t(&[1, 1, 3, 4], &(0..12).map(f64::from).collect::<Vec<_>>());
    let x = g.leaf(img.clone());
    let k = g.leaf(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);

    let ones = g.leaf(Tensor::full(vec![1, 1, 5, 5], 1.0));
    let k3 = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k3, 1, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 1, 5, 5]);
    for i in 1..4 {
        for j in 1..4 {
            assert_eq!(out.at(&[0, 0, i, j]), 9.0);
        }
    }
    // Padded corners see a 2x2 window.
    assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);

    let x4 = g.leaf(Tensor::full(vec![1, 1, 4, 4], 1.0));
    let k2 = g.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = g.conv2d(x4, k2, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);

    let k9 = g.leaf(Tensor::full(vec![1, 1, 7, 7], 1.0));
    assert!(matches!(g.conv2d(x4, k9, 1, 1), Err(Error::Contract(_))));
}

#[test]
fn conv2d_matches_direct_window_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, c, h, w, f, kh, kw, stride, pad) = (2, 3, 6, 5, 2, 3, 2, 2, 1);
    let x = Tensor::<f64>::from_fn(vec![b, c, h, w], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::<f64>::from_fn(vec![f, c, kh, kw], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let (xv, kv) = (g.leaf(x.clone()), g.leaf(k.clone()));
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    let out = g.value(y);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    assert_eq!((oh, ow), ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1));
    for bi in 0..b {
        for fi in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ii = (oi * stride + a) as isize - pad as isize;
                                let jj = (oj * stride + bb) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += x.at(&[bi, ci, ii as usize, jj as usize]) * k.at(&[fi, ci, a, bb]);
                                }
                            }
                        }
                    }
                    assert!((out.at(&[bi, fi, oi, oj]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn batchnorm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3, 1], &[2.5, 2.5, 2.5]));
    let gamma = g.leaf(t(&[1], &[3.0]));
    let beta = g.leaf(t(&[1], &[0.7]));
    let y = g.batch_norm(x, Some(gamma), Some(beta), BnStats::Batch(None)).unwrap();
    assert_eq!(g.value(y).data(), &[0.7, 0.7, 0.7]);

    let x = g.leaf(t(&[2, 1], &[-1.0, 1.0]));
    let one = g.leaf(t(&[1], &[1.0]));
    let zero = g.leaf(t(&[1], &[0.0]));
    let y = g.batch_norm(x, Some(one), Some(zero), BnStats::Batch(None)).unwrap();
    close(g.value(y).data(), &[-1.0, 1.0], 1e-4);

    let x = g.leaf(t(&[1, 1], &[3.0]));
    let two = g.leaf(t(&[1], &[2.0]));
    let y = g
        .batch_norm(x, Some(two), Some(one), BnStats::Fixed { mean: &[0.0], var: &[1.0] })
        .unwrap();
    close(g.value(y).data(), &[7.0], 1e-4);

    let x = g.leaf(t(&[1, 2], &[1.0, 2.0]));
    assert!(matches!(
        g.batch_norm(x, None, None, BnStats::Batch(None)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn batchnorm_running_stats_follow_momentum() {
    let mut store = ParamStore::<f64>::new();
    let bn = layers::BatchNorm::new(&mut store, "bn", 1, true);
    let mut g = Graph::new();
    let x = g.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 6.0]));
    let mut cx = Ctx::new(&mut g, &store, true);
    bn.forward(&mut cx, x).unwrap();
    store.apply_running_updates(&g);
    // mean 3, population variance 14/4
    close(store.get(bn.running_mean).data(), &[0.3], 1e-12);
    close(store.get(bn.running_var).data(), &[0.9 + 0.1 * 3.5], 1e-12);
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.leaf(t(&[2], &[1.0, 1.0]));
    let zeros = g.leaf(t(&[2], &[0.0, 0.0]));
    let x = g.leaf(t(&[2, 2], &[4.0, 4.0, -1.0, 1.0]));
    let y = g.layer_norm(x, ones, zeros).unwrap();
    close(g.value(y).data(), &[0.0, 0.0, -1.0, 1.0], 1e-4);

    let gz = g.leaf(t(&[2], &[0.0, 0.0]));
    let five = g.leaf(t(&[2], &[5.0, 5.0]));
    let y = g.layer_norm(x, gz, five).unwrap();
    assert_eq!(g.value(y).data(), &[5.0; 4]);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.leaf(Tensor::full(vec![3, 6], 0.25));
    let l = g.softmax_cross_entropy(uniform, &[0, 3, 5]).unwrap();
    assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-12);

    let sat = g.leaf(t(&[1, 3], &[0.0, 1000.0, 0.0]));
    let l = g.softmax_cross_entropy(sat, &[1]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);

    let two = g.leaf(t(&[1, 2], &[1.0, 0.0]));
    let l = g.softmax_cross_entropy(two, &[0]).unwrap();
    assert!((g.value(l).data()[0] - 0.313_261_687_518_222_8).abs() < 1e-12);

    assert!(matches!(
        g.softmax_cross_entropy(two, &[2]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn softmax_cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let l = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    let gr = g.backward(l).unwrap();
    let p = 1.0 / (1.0 + (-1.0f64).exp());
    close(gr.get(logits).unwrap(), &[(p - 1.0) / 2.0, (1.0 - p) / 2.0, 0.25, -0.25], 1e-12);
}

fn identity_mha(store: &mut ParamStore<f64>, dim: usize, heads: usize) -> MultiHeadAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mha = MultiHeadAttention::new(store, "mha", dim, heads, &mut rng).unwrap();
    for lin in [&mha.query, &mha.key, &mha.value, &mha.out] {
        let w = store.get_mut(lin.weight).data_mut();
        w.fill(0.0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        if let Some(b) = lin.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
    mha
}

#[test]
fn attention_scalar_softmax_oracle() {
    let mut store = ParamStore::new();
    let mha = identity_mha(&mut store, 1, 1);
    // Two queries: q = 0 gives equal weights; q = 1 weights softmax([1, -1]).
    let mut g = Graph::new();
    let q = g.leaf(t(&[2, 1], &[0.0, 1.0]));
    let tokens = g.leaf(t(&[2, 1], &[1.0, -1.0]));
    let mut cx = Ctx::new(&mut g, &store, true);
    let y = mha.forward(&mut cx, q, tokens, 1).unwrap();
    let w1 = 1f64.exp() / (1f64.exp() + (-1f64).exp());
    let expected_q1 = w1 * 1.0 + (1.0 - w1) * -1.0;
    close(g.value(y).data(), &[0.0, expected_q1], 1e-12);
}

#[test]
fn attention_single_token_is_query_independent() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let q = g.leaf(Tensor::from_fn(vec![3, 8], |_| rng.random_range(-2.0..2.0)));
    let token = Tensor::from_fn(vec![1, 8], |_| rng.random_range(-2.0..2.0));
    let tok1 = g.leaf(token.clone());
    let mut five = Vec::new();
    for _ in 0..5 {
        five.extend_from_slice(token.data());
    }
    let tok5 = g.leaf(t(&[5, 8], &five));
    let mut cx = Ctx::new(&mut g, &store, true);
    let y1 = mha.forward(&mut cx, q, tok1, 1).unwrap();
    let y5 = mha.forward(&mut cx, q, tok5, 1).unwrap();
    let out = g.value(y1).data();
    for r in 1..3 {
        close(&out[r * 8..(r + 1) * 8], &out[..8], 1e-12);
    }
    close(g.value(y5).data(), out, 1e-12);
}

#[test]
fn attention_rejects_bad_configuration() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng),
        Err(Error::Config(_))
    ));
    let mut g = Graph::<f64>::new();
    let q = g.leaf(Tensor::zeros(vec![2, 4]));
    let k = g.leaf(Tensor::zeros(vec![2, 4]));
    assert!(matches!(g.attention(q, k, k, 1, 3), Err(Error::Config(_))));
    // 2 token rows cannot be split into 4 images.
    assert!(g.attention(q, k, k, 4, 1).is_err());
}

#[test]
fn attention_is_bitwise_invariant_to_token_order() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mha = MultiHeadAttention::new(&mut store, "mha", 16, 4, &mut rng).unwrap();
    let q = Tensor::<f32>::from_fn(vec![2 * 5, 16], |_| rng.random_range(-1.0..1.0));
    let tokens = Tensor::<f32>::from_fn(vec![2 * 7, 16], |_| rng.random_range(-1.0..1.0));
    let perm = [3usize, 0, 6, 2, 5, 1, 4];
    let mut shuffled = Vec::new();
    for b in 0..2 {
        for &p in &perm {
            shuffled.extend_from_slice(&tokens.data()[(b * 7 + p) * 16..(b * 7 + p + 1) * 16]);
        }
    }
    let run = |tok: Tensor<f32>| {
        let mut g = Graph::new();
        let (qv, tv) = (g.leaf(q.clone()), g.leaf(tok));
        let mut cx = Ctx::new(&mut g, &store, true);
        let y = mha.forward(&mut cx, qv, tv, 2).unwrap();
        g.value(y).data().to_vec()
    };
    let a = run(tokens.clone());
    let b = run(Tensor::new(vec![14, 16], shuffled).unwrap());
    assert_eq!(a, b);
}

#[test]
fn finite_diff_check_of_linear_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        Tensor::from_fn(vec![4, 3], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(vec![2, 3], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(vec![2], |_| rng.random_range(-1.0..1.0)),
    ];
    let err = finite_diff_check(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.softmax_cross_entropy(y, &[0, 1, 1, 0])
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_check_of_conv_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        Tensor::from_fn(vec![1, 2, 4, 4], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.random_range(-1.0..1.0)),
    ];
    let err = finite_diff_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            let y = g.to_tokens(y)?;
            g.softmax_cross_entropy(y, &[0, 2, 1, 2])
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_check_reports_divergence() {
    let inputs = [t(&[1], &[-1.0])];
    let r = finite_diff_check(
        |g, v| {
            let w = g.leaf(t(&[1], &[f64::NAN]));
            let y = g.mul(v[0], w)?;
            Ok(g.sum(y))
        },
        &inputs,
        DEFAULT_FD_EPSILON,
    );
    assert!(matches!(r, Err(Error::Divergence(_))));
}
