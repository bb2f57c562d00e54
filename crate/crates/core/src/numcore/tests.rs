use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{lstm_cell, Linear};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_weights(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(0.5..1.5) * if r.gen() { 1.0 } else { -1.0 }).collect()
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64, scale: f64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add_uniform_scaled(*name, shape, scale, &mut r).unwrap();
    }
    s
}

fn p(tape: &mut Tape, s: &ParamStore, name: &str) -> Var {
    tape.param(s, s.id(name).unwrap())
}

/// Random-weighted sum of `out`, so every output coordinate carries gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NumError> {
    let w = rand_weights(tape.value(out).len(), &mut rng(seed));
    tape.weighted_sum(out, &w)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
    let y = t.softmax(x, 1.0).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_low_temperature_approaches_one_hot() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
    let mut last = 0.0;
    for temp in [1.0, 0.1, 0.01, 1e-9] {
        let y = t.softmax(x, temp).unwrap();
        let p0 = t.value(y).data()[0];
        assert!(p0 >= last);
        last = p0;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn affine_identity() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let b = t.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
    let x = t.leaf(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
    let y = t.affine(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 3.0]);
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    assert!(matches!(t.add(a, b), Err(NumError::Shape(_))));
    assert!(matches!(Tensor::vector(vec![f64::NAN]), Err(NumError::NonFinite(_))));
    assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(NumError::Shape(_))));
    let big = t.leaf(Tensor::vector(vec![1e200]).unwrap()).unwrap();
    assert!(matches!(t.mul(big, big), Err(NumError::NonFinite(_))));
    assert!(matches!(t.softmax(a, 0.0), Err(NumError::Domain(_))));
    let e = t.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()).unwrap();
    assert!(t.embedding(e, &[2]).is_err());
}

#[test]
fn backward_square() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(3.0)).unwrap();
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let y = t.mul(x, x).unwrap();
    t.backward(y, 1.0, &mut s).unwrap();
    assert_eq!(s.get(id).grad.data(), &[6.0]);
}

#[test]
fn backward_zero_scale_leaves_grads() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(3.0)).unwrap();
    s.get_mut(id).grad.data_mut()[0] = 0.25;
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let y = t.mul(x, x).unwrap();
    t.backward(y, 0.0, &mut s).unwrap();
    assert_eq!(s.get(id).grad.data(), &[0.25]);
}

#[test]
fn nll_of_uniform_softmax_gradient() {
    let mut s = ParamStore::new();
    let id = s.add("z", Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap()).unwrap();
    let mut t = Tape::new();
    let z = t.param(&s, id);
    let lp = t.log_softmax(z, 1.0).unwrap();
    let nll = t.nll(lp, &[Some(2)]).unwrap();
    let loss = t.sum(nll).unwrap();
    assert!((t.scalar(loss) - 4f64.ln()).abs() < 1e-15);
    t.backward(loss, 1.0, &mut s).unwrap();
    let g = s.get(id).grad.data();
    for (k, v) in g.iter().enumerate() {
        let expected = 0.25 - if k == 2 { 1.0 } else { 0.0 };
        assert!((v - expected).abs() < 1e-15, "{k}: {v}");
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(1.0)).unwrap();
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let y = t.mul(x, x).unwrap();
    t.backward(y, 1.0, &mut s).unwrap();
    assert_eq!(t.backward(y, 1.0, &mut s), Err(NumError::TapeConsumed));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let mut t = Tape::new();
    let x = t.param(&s, id);
    assert!(matches!(t.backward(x, 1.0, &mut s), Err(NumError::Shape(_))));
}

#[test]
fn gradients_accumulate_across_tapes() {
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(2.0)).unwrap();
    for _ in 0..2 {
        let mut t = Tape::new();
        let x = t.param(&s, id);
        let y = t.mul(x, x).unwrap();
        t.backward(y, 1.0, &mut s).unwrap();
    }
    assert_eq!(s.get(id).grad.data(), &[8.0]);
}

// ---- gradient checks, one per primitive ----

fn check(shapes: &[(&str, &[usize])], f: impl Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>) -> f64 {
    let mut s = store_with(shapes, 7, 1.0);
    grad_check(&mut s, EPS, f).unwrap()
}

#[test]
fn grad_check_affine() {
    let err = check(&[("x", &[3, 4]), ("w", &[5, 4]), ("b", &[5])], |t, s| {
        let (x, w, b) = (p(t, s, "x"), p(t, s, "w"), p(t, s, "b"));
        let y = t.affine(x, w, Some(b))?;
        project(t, y, 1)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_elementwise() {
    let err = check(&[("a", &[2, 3]), ("b", &[2, 3])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let sum = t.add(a, b)?;
        let diff = t.sub(a, b)?;
        let prod = t.mul(sum, diff)?;
        let th = t.tanh(prod)?;
        let sg = t.sigmoid(a)?;
        let sc = t.scale(sg, -1.7)?;
        let total = t.sum_n(&[th, sc, b])?;
        project(t, total, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_concat_slice_select_stack() {
    let err = check(&[("a", &[3, 2]), ("b", &[3, 4])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let c = t.concat(&[a, b, a])?;
        let mid = t.slice_cols(c, 1, 5)?;
        let left = t.slice_cols(b, 0, 2)?;
        let sel = t.select_rows(&[true, false, true], a, left)?;
        let st = t.stack(&[sel, a])?;
        let x = project(t, mid, 3)?;
        let y = project(t, st, 4)?;
        t.add(x, y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_embedding() {
    let err = check(&[("e", &[5, 3])], |t, s| {
        let e = p(t, s, "e");
        let y = t.embedding(e, &[4, 0, 4, 2])?;
        project(t, y, 5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_softmax_and_log_softmax_with_temperature() {
    for temp in [1.0, 0.5, 3.0] {
        let err = check(&[("z", &[2, 5])], |t, s| {
            let z = p(t, s, "z");
            let sm = t.softmax(z, temp)?;
            let ls = t.log_softmax(z, temp)?;
            let a = project(t, sm, 6)?;
            let b = project(t, ls, 7)?;
            t.add(a, b)
        });
        assert!(err < TOL, "T={temp}: {err}");
    }
}

#[test]
fn grad_check_nll() {
    let err = check(&[("z", &[3, 4])], |t, s| {
        let z = p(t, s, "z");
        let lp = t.log_softmax(z, 1.0)?;
        let n = t.nll(lp, &[Some(1), None, Some(3)])?;
        t.weighted_sum(n, &[0.7, 2.0, -1.3])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_attention() {
    let err = check(
        &[("k", &[2, 4, 3]), ("vals", &[2, 4, 5]), ("q", &[2, 3]), ("v", &[3])],
        |t, s| {
            let (k, vals, q, v) = (p(t, s, "k"), p(t, s, "vals"), p(t, s, "q"), p(t, s, "v"));
            let (ctx, _) = t.attention(k, vals, q, v, &[4, 2])?;
            project(t, ctx, 8)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_ignores_positions_past_length() {
    let mut s = store_with(&[("k", &[1, 3, 2]), ("vals", &[1, 3, 2]), ("q", &[1, 2]), ("v", &[2])], 3, 1.0);
    let mut t = Tape::new();
    let (k, vals, q, v) = (p(&mut t, &s, "k"), p(&mut t, &s, "vals"), p(&mut t, &s, "q"), p(&mut t, &s, "v"));
    let (ctx, w) = t.attention(k, vals, q, v, &[2]).unwrap();
    assert_eq!(w[2], 0.0);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    let loss = t.sum(ctx).unwrap();
    t.backward(loss, 1.0, &mut s).unwrap();
    let gv = s.get(s.id("vals").unwrap()).grad.data();
    assert_eq!(&gv[4..6], &[0.0, 0.0]);
}

#[test]
fn grad_check_sum_of_squares_and_constant() {
    let mut s = store_with(&[("x", &[4])], 9, 2.0);
    let err = grad_check(&mut s, EPS, |t, s| {
        let x = p(t, s, "x");
        let sq = t.mul(x, x)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-9, "{err}");

    let err = grad_check(&mut s, EPS, |t, _| t.leaf(Tensor::scalar(4.2))).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_lstm_cell() {
    let mut r = rng(11);
    let mut s = ParamStore::new();
    let gates = Linear::new(&mut s, "cell", 5 + 6, 4 * 6, &mut r).unwrap();
    s.add_uniform_scaled("x", &[3, 5], 1.0, &mut r).unwrap();
    s.add_uniform_scaled("h", &[3, 6], 1.0, &mut r).unwrap();
    s.add_uniform_scaled("c", &[3, 6], 1.0, &mut r).unwrap();
    let err = grad_check(&mut s, EPS, |t, s| {
        let (x, h, c) = (p(t, s, "x"), p(t, s, "h"), p(t, s, "c"));
        let (h2, c2) = lstm_cell(t, s, &gates, 6, x, h, c)?;
        let a = project(t, h2, 12)?;
        let b = project(t, c2, 13)?;
        t.add(a, b)
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps() {
    let mut s = store_with(&[("x", &[1])], 1, 1.0);
    assert!(grad_check(&mut s, 0.1, |t, s| Ok(p(t, s, "x"))).is_err());
}

// ---- optimizer ----

fn grads_store(g: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::vector(vec![0.0; g.len()]).unwrap()).unwrap();
    s.get_mut(id).grad.data_mut().copy_from_slice(g);
    s
}

#[test]
fn clip_examples() {
    let mut s = grads_store(&[3.0, 4.0]);
    assert_eq!(clip_global_norm(&mut s, 10.0).unwrap(), 1.0);
    assert_eq!(s.iter().next().unwrap().grad.data(), &[3.0, 4.0]);

    let mut s = grads_store(&[3.0, 4.0]);
    assert!((clip_global_norm(&mut s, 1.0).unwrap() - 0.2).abs() < 1e-15);
    let g = s.iter().next().unwrap().grad.data().to_vec();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

    let mut s = grads_store(&[0.0, 0.0]);
    assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), 1.0);
    assert!(clip_global_norm(&mut s, 0.0).is_err());
}

#[test]
fn sgd_examples() {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::scalar(1.0)).unwrap();
    s.get_mut(id).grad.data_mut()[0] = 2.0;
    sgd_step(&mut s, 0.5).unwrap();
    assert_eq!(s.get(id).value.data(), &[0.0]);
    assert_eq!(s.get(id).grad.data(), &[0.0]);
    sgd_step(&mut s, 0.5).unwrap();
    sgd_step(&mut s, 0.5).unwrap();
    assert_eq!(s.get(id).value.data(), &[0.0]);
}

#[test]
fn sgd_after_clip() {
    let mut s = grads_store(&[3.0, 4.0]);
    clip_global_norm(&mut s, 1.0).unwrap();
    sgd_step(&mut s, 1.0).unwrap();
    let v = s.iter().next().unwrap().value.data().to_vec();
    assert!((v[0] + 0.6).abs() < 1e-15 && (v[1] + 0.8).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite_grad() {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::scalar(1.0)).unwrap();
    s.get_mut(id).grad.data_mut()[0] = f64::INFINITY;
    assert!(matches!(sgd_step(&mut s, 0.1), Err(NumError::NonFinite(_))));
}

// ---- checkpoint ----

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut s = store_with(&[("emb", &[7, 3]), ("lstm.l0.w", &[12, 6]), ("bias", &[12])], 5, 1.0);
    s.get_mut(s.id("bias").unwrap()).value.data_mut()[0] = -0.0;
    s.get_mut(s.id("bias").unwrap()).value.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
    let bytes = to_bytes(&s);
    assert!(bytes.starts_with(b"DUALSHOT-CKPT v1\nemb\t7,3\t"));
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&back), bytes);
    for (a, b) in s.iter().zip(back.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(s.checksum(), back.checksum());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&s, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(to_bytes(&load(&path).unwrap()), bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    assert!(from_bytes(b"NOPE\n").is_err());
    let s = store_with(&[("a", &[2])], 1, 1.0);
    let bytes = to_bytes(&s);
    assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

// ---- properties ----

fn build_random_graph(t: &mut Tape, s: &ParamStore, ops: &[u8]) -> Var {
    let mut vars = vec![p(t, s, "a"), p(t, s, "b")];
    for (k, &op) in ops.iter().enumerate() {
        let x = vars[(k * 7 + op as usize) % vars.len()];
        let y = vars[(k * 3 + 1) % vars.len()];
        let v = match op % 5 {
            0 => t.add(x, y),
            1 => t.mul(x, y),
            2 => t.tanh(x),
            3 => t.sigmoid(y),
            _ => t.sub(y, x),
        }
        .unwrap();
        vars.push(v);
    }
    let all = t.sum_n(&vars).unwrap();
    t.sum(all).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_scale(scale in -5.0f64..5.0, seed in 0u64..1000) {
        let run = |sc: f64| {
            let mut s = store_with(&[("w", &[3, 4]), ("x", &[2, 4])], seed, 1.0);
            let mut t = Tape::new();
            let (w, x) = (p(&mut t, &s, "w"), p(&mut t, &s, "x"));
            let y = t.affine(x, w, None).unwrap();
            let y = t.tanh(y).unwrap();
            let l = t.sum(y).unwrap();
            t.backward(l, sc, &mut s).unwrap();
            s.iter().flat_map(|p| p.grad.data().to_vec()).collect::<Vec<_>>()
        };
        let base = run(1.0);
        let scaled = run(scale);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((scale * a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn clip_is_idempotent(g in proptest::collection::vec(-10.0f64..10.0, 1..20), c in 0.1f64..20.0) {
        let mut once = grads_store(&g);
        clip_global_norm(&mut once, c).unwrap();
        let mut twice = once.clone();
        clip_global_norm(&mut twice, c).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn replay_order_is_reverse_topological(ops in proptest::collection::vec(0u8..20, 1..40)) {
        let s = store_with(&[("a", &[2]), ("b", &[2])], 3, 0.5);
        let mut t = Tape::new();
        let loss = build_random_graph(&mut t, &s, &ops);
        let order = t.replay_order(loss);
        prop_assert_eq!(order[0], loss.index());
        let pos: std::collections::HashMap<usize, usize> =
            order.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        for w in order.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
        for &n in &order {
            for input in t.inputs(n) {
                // every input is visited after each of its consumers
                prop_assert!(pos[&input.index()] > pos[&n]);
            }
        }
    }
}
