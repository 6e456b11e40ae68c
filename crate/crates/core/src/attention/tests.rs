use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn lm(rows: &[Vec<f64>]) -> LogitMatrix<f64> {
    LogitMatrix::from_rows(rows).unwrap()
}

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn cols_of(mask: &AttentionMask, i: usize) -> Vec<usize> {
    mask.columns(i)
}

#[test]
fn identity_logits() {
    let eye = Tensor::<f64>::from_f64_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let p = scaled_logits(&eye, &eye).unwrap();
    let s = 1.0 / 2f64.sqrt();
    assert_eq!(p.tensor().data(), &[s, 0.0, 0.0, s]);
}

#[test]
fn orthogonal_query_gives_zero_row() {
    let q = Tensor::<f64>::from_f64_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
    let k = Tensor::<f64>::from_f64_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
    let p = scaled_logits(&q, &k).unwrap();
    assert_eq!(p.row(0), &[0.0, 0.0]);
}

#[test]
fn logits_match_loop_oracle() {
    // integer entries keep every partial sum exact, so any summation order agrees
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut int = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.gen_range(-4..=4) as f64).collect();
        Tensor::new(&[r, c], data).unwrap()
    };
    let (q, k) = (int(4, 8), int(6, 8));
    let p = scaled_logits(&q, &k).unwrap();
    let scale = 1.0 / 8f64.sqrt();
    for i in 0..4 {
        for j in 0..6 {
            let mut s = 0.0;
            for t in 0..8 {
                s += q.at(i, t) * k.at(j, t);
            }
            assert_eq!(p.at(i, j), s * scale);
        }
    }
    assert!(scaled_logits(&q, &int(6, 7)).is_err());
}

#[test]
fn boundary_gradient_examples() {
    let p = lm(&[vec![2.0, 2.0, 5.0, 5.0]]);
    assert_eq!(boundary_gradient(&p).row(0), &[2.0, 0.0, 3.0, 0.0]);
    let c = lm(&[vec![-1.5; 5]]);
    assert_eq!(boundary_gradient(&c).row(0), &[1.5, 0.0, 0.0, 0.0, 0.0]);
    let one = lm(&[vec![-0.25]]);
    assert_eq!(boundary_gradient(&one).row(0), &[0.25]);
}

#[test]
fn mixed_score_endpoints_and_arithmetic() {
    let p = lm(&[vec![1.0, 3.0]]);
    let pp = lm(&[vec![1.0, 2.0]]);
    assert_eq!(mixed_score(&p, &pp, 1.0).unwrap(), pp);
    assert_eq!(mixed_score(&p, &pp, 0.0).unwrap(), p);
    let m = mixed_score(&p, &pp, 0.8).unwrap();
    assert!((m.at(0, 0) - 1.0).abs() < 1e-12);
    assert!((m.at(0, 1) - 2.2).abs() < 1e-12);
    assert!(matches!(mixed_score(&p, &pp, 1.5), Err(crate::Error::Config(_))));
    assert!(mixed_score(&p, &lm(&[vec![1.0]]), 0.5).is_err());
}

#[test]
fn top_n_examples() {
    let s = lm(&[vec![0.5, 3.0, 1.0, 2.0]]);
    assert_eq!(cols_of(&top_n_mask(&s, 2).unwrap(), 0), vec![1, 3]);
    let eq = lm(&[vec![0.7; 5]]);
    assert_eq!(cols_of(&top_n_mask(&eq, 2).unwrap(), 0), vec![0, 1]);
    let clamp = top_n_mask(&s, 10).unwrap();
    assert!(clamp.is_all());
    assert!(top_n_mask(&s, 0).is_err());
}

/// Column `j` survives iff fewer than `n` columns beat it, where a column
/// beats `j` with a strictly larger score or an equal score at a smaller index.
fn rank_oracle(row: &[f64], n: usize) -> BTreeSet<usize> {
    (0..row.len())
        .filter(|&j| {
            let beaten_by = (0..row.len())
                .filter(|&o| row[o] > row[j] || (row[o] == row[j] && o < j))
                .count();
            beaten_by < n
        })
        .collect()
}

#[test]
fn top_n_matches_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        // coarse values in half the trials to force ties
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..16)
                    .map(|_| {
                        if trial % 2 == 0 {
                            rng.gen_range(-1.0..1.0)
                        } else {
                            rng.gen_range(0..4) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let mask = top_n_mask(&lm(&rows), 4).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let got: BTreeSet<usize> = cols_of(&mask, i).into_iter().collect();
            assert_eq!(got, rank_oracle(row, 4));
        }
    }
}

#[test]
fn local_mask_examples() {
    let m = local_mask(5, 5, 1);
    assert_eq!(cols_of(&m, 2), vec![1, 2, 3]);
    let d = local_mask(4, 4, 0);
    for i in 0..4 {
        assert_eq!(cols_of(&d, i), vec![i]);
    }
    assert!(local_mask(6, 6, 5).is_all());
}

#[test]
fn union_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|_| rng.gen()).collect()).collect();
    let top = top_n_mask(&lm(&rows), 2).unwrap();
    let u = union_mask(&top, &local_mask(8, 8, 1)).unwrap();
    for i in 0..8 {
        let c = u.row_count(i);
        assert!((2..=5).contains(&c), "row {i} has {c}");
    }
    assert_eq!(union_mask(&top, &AttentionMask::none(8, 8)).unwrap().as_slice(), top.as_slice());
    assert_eq!(union_mask(&top, &top).unwrap().as_slice(), top.as_slice());
    assert!(union_mask(&top, &AttentionMask::none(8, 7)).is_err());
}

#[test]
fn equidistant_examples() {
    assert_eq!(cols_of(&equidistant_mask(2, 9, 3).unwrap(), 1), vec![0, 4, 8]);
    assert!(equidistant_mask(3, 6, 6).unwrap().is_all());
    assert_eq!(cols_of(&equidistant_mask(1, 10, 4).unwrap(), 0), vec![0, 3, 6, 9]);
    assert_eq!(cols_of(&equidistant_mask(1, 5, 1).unwrap(), 0), vec![0]);
    assert!(equidistant_mask(1, 5, 0).is_err());
    assert!(equidistant_mask(1, 5, 6).is_err());
}

struct Layer {
    store: ParamStore<f64>,
    params: MultiheadParams,
}

fn layer(d: usize, heads: usize, seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = MultiheadParams::new(&mut store, "attn", d, heads, &mut rng).unwrap();
    Layer { store, params }
}

fn run(
    l: &Layer,
    q: &Tensor<f64>,
    kv: &Tensor<f64>,
    mode: AttentionMode,
) -> (Tensor<f64>, Vec<HeadTrace<f64>>) {
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let mut trace = Vec::new();
    let out = sparse_multihead(&mut g, &l.store, qv, kvv, kvv, &l.params, &mode, None, Some(&mut trace))
        .unwrap();
    (g.value(out).clone(), trace)
}

#[test]
fn single_step_vanilla_is_value_projection() {
    let l = layer(4, 1, 0);
    let x = Tensor::from_f64_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
    let (out, _) = run(&l, &x, &x, AttentionMode::Vanilla);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.param(&l.store, l.params.w_v);
    let wo = g.param(&l.store, l.params.w_o);
    let v = g.matmul(xv, wv).unwrap();
    let expect = g.matmul(v, wo).unwrap();
    assert_eq!(out.data(), g.value(expect).data());
}

#[test]
fn full_budget_boundary_is_bit_identical_to_vanilla() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = layer(8, 2, 1);
    for _ in 0..10 {
        let t = rng.gen_range(1..10);
        let x = random(&mut rng, t, 8);
        let (a, _) = run(&l, &x, &x, AttentionMode::Vanilla);
        let mode = AttentionMode::Boundary { budget: t + rng.gen_range(0..3), alpha: 0.8, radius: None };
        let (b, _) = run(&l, &x, &x, mode);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn piecewise_constant_keys_select_scenario_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = layer(8, 2, 2);
    let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rows = vec![u; 6];
    rows.extend(vec![v; 2]);
    let kv = Tensor::from_f64_rows(&rows).unwrap();
    let q = random(&mut rng, 5, 8);
    let mode = AttentionMode::Boundary { budget: 2, alpha: 1.0, radius: None };
    let (_, trace) = run(&l, &q, &kv, mode);
    assert_eq!(trace.len(), 2);
    for head in &trace {
        let mask = head.mask.as_ref().unwrap();
        for i in 0..5 {
            assert_eq!(cols_of(mask, i), vec![0, 6]);
        }
    }
}

#[test]
fn weights_are_stochastic_and_within_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let l = layer(8, 4, 3);
    for _ in 0..40 {
        let (tq, tk) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let q = random(&mut rng, tq, 8);
        let kv = random(&mut rng, tk, 8);
        let n = rng.gen_range(1..6);
        let radius = if rng.gen() { Some(rng.gen_range(0..3)) } else { None };
        let modes = [
            AttentionMode::Vanilla,
            AttentionMode::Boundary { budget: n, alpha: rng.gen(), radius },
            AttentionMode::Equidistant { budget: n },
        ];
        for mode in modes {
            let (_, trace) = run(&l, &q, &kv, mode);
            for head in &trace {
                for i in 0..tq {
                    let row = head.weights.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    let nz = row.iter().filter(|&&w| w != 0.0).count();
                    if let AttentionMode::Boundary { radius, .. } = mode {
                        match radius {
                            Some(r) => assert!(nz <= n + 2 * r + 1),
                            None => assert_eq!(nz, n.min(tk)),
                        }
                    }
                }
            }
        }
    }
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
    Tensor::from_f64_rows(&rows).unwrap()
}

#[test]
fn vanilla_is_key_permutation_equivariant_boundary_is_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let l = layer(8, 2, 5);
    let q = random(&mut rng, 4, 8);
    let kv = random(&mut rng, 7, 8);
    let perm = [6, 2, 0, 5, 1, 3, 4];
    let kv_p = permute_rows(&kv, &perm);
    let (out, tr) = run(&l, &q, &kv, AttentionMode::Vanilla);
    let (out_p, tr_p) = run(&l, &q, &kv_p, AttentionMode::Vanilla);
    for (h, hp) in tr.iter().zip(&tr_p) {
        for i in 0..4 {
            for (jp, &j) in perm.iter().enumerate() {
                assert!((h.weights.at(i, j) - hp.weights.at(i, jp)).abs() < 1e-12);
            }
        }
    }
    assert!(out.data().iter().zip(out_p.data()).all(|(a, b)| (a - b).abs() < 1e-12));

    let mode = AttentionMode::Boundary { budget: 3, alpha: 1.0, radius: None };
    let (_, tr) = run(&l, &q, &kv, mode);
    let (_, tr_p) = run(&l, &q, &kv_p, mode);
    let differs = tr.iter().zip(&tr_p).any(|(h, hp)| {
        (0..4).any(|i| {
            perm.iter()
                .enumerate()
                .any(|(jp, &j)| (h.weights.at(i, j) - hp.weights.at(i, jp)).abs() > 1e-9)
        })
    });
    assert!(differs, "boundary selection should depend on key order");
}

#[test]
fn masked_values_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let l = layer(6, 1, 6);
    let q = random(&mut rng, 3, 6);
    let v = random(&mut rng, 9, 6);
    let mode = AttentionMode::Equidistant { budget: 3 };
    let mut g = Graph::new();
    let qv = g.constant(q);
    let vv = g.input(v);
    let out = sparse_multihead(&mut g, &l.store, qv, vv, vv, &l.params, &mode, None, None).unwrap();
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    let gv = grads.of(vv).unwrap();
    for j in 0..9 {
        let row = &gv[j * 6..(j + 1) * 6];
        if [0, 4, 8].contains(&j) {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "row {j}: {row:?}");
        }
    }
}

#[test]
fn boundary_mode_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let l = layer(8, 2, 7);
    let q = random(&mut rng, 4, 8);
    let kv = random(&mut rng, 10, 8);
    let w = random(&mut rng, 4, 8);
    let mode = AttentionMode::Boundary { budget: 3, alpha: 0.8, radius: Some(1) };
    let eval = |q: &Tensor<f64>, kv: &Tensor<f64>, want: bool| {
        let mut g = Graph::new();
        let qv = if want { g.input(q.clone()) } else { g.constant(q.clone()) };
        let kvv = if want { g.input(kv.clone()) } else { g.constant(kv.clone()) };
        let wv = g.constant(w.clone());
        let mut trace = Vec::new();
        let out = sparse_multihead(&mut g, &l.store, qv, kvv, kvv, &l.params, &mode, None, Some(&mut trace))
            .unwrap();
        let p = g.mul(out, wv).unwrap();
        let loss = g.sum(p);
        let margin = trace.iter().map(|t| t.selection_margin).fold(f64::INFINITY, f64::min);
        (g, qv, kvv, loss, margin)
    };
    let (g, qv, kvv, loss, margin) = eval(&q, &kv, true);
    assert!(margin > 1e-3, "seed has a near-tie: {margin}");
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    for (which, base, var) in [(0, &q, qv), (1, &kv, kvv)] {
        let ana = grads.of(var).unwrap();
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| {
                let (g, _, _, l, _) = if which == 0 { eval(t, &kv, false) } else { eval(&q, t, false) };
                g.value(l).data()[0]
            };
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (ana[i] - num).abs() / ana[i].abs().max(num.abs()).max(1e-5);
            assert!(rel < 1e-4, "input {which} entry {i}: {} vs {num}", ana[i]);
        }
    }
}

#[test]
fn selection_is_invariant_to_positive_key_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let q = random(&mut rng, 6, 8);
        let k = random(&mut rng, 12, 8);
        let k4 = k.map(|v| v * 4.0);
        let p = scaled_logits(&q, &k).unwrap();
        let p4 = scaled_logits(&q, &k4).unwrap();
        let a = top_n_mask(&boundary_gradient(&p), 4).unwrap();
        let b = top_n_mask(&boundary_gradient(&p4), 4).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}

#[test]
fn paired_context_with_identical_rows_returns_that_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let l = layer(8, 2, 8);
    let q = random(&mut rng, 3, 8);
    let c = random(&mut rng, 3, 8);
    let mut g = Graph::new();
    let (qv, cv) = (g.constant(q.clone()), g.constant(c.clone()));
    let fused = paired_context_attention(&mut g, &l.store, qv, cv, cv, &l.params).unwrap();
    // attending a single copy: softmax over one element is 1, so the output is c W_V W_O
    let wv = g.param(&l.store, l.params.w_v);
    let wo = g.param(&l.store, l.params.w_o);
    let v = g.matmul(cv, wv).unwrap();
    let single = g.matmul(v, wo).unwrap();
    for (a, b) in g.value(fused).data().iter().zip(g.value(single).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn heads_must_divide_width() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiheadParams::new(&mut store, "x", 6, 4, &mut rng).is_err());
}
