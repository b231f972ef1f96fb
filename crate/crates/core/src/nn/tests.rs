use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Contracts `out` with a fixed random weight so every output entry matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(rand_tensor(&mut rng, r, c));
    let p = g.mul(out, w);
    g.sum_all(p)
}

fn check(ps: &ParamSet, build: impl Fn(&mut Graph, &ParamSet) -> Var) -> GradCheckReport {
    let f = |p: &ParamSet| {
        let mut g = Graph::new();
        let out = build(&mut g, p);
        let loss = project(&mut g, out, 99);
        (g.value(loss).item(), g.backward(loss, p))
    };
    grad_check(f, ps, EPS, None)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn elementwise_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    let a = ps.add("a", rand_tensor(&mut rng, 3, 4));
    let b = ps.add("b", rand_tensor(&mut rng, 3, 4));
    let row = ps.add("row", rand_tensor(&mut rng, 1, 4));
    let col = ps.add("col", rand_tensor(&mut rng, 3, 1));
    let m = ps.add("m", rand_tensor(&mut rng, 4, 2));
    let rep = check(&ps, |g, p| {
        let (a, b) = (g.param(p, a), g.param(p, b));
        let (row, col, m) = (g.param(p, row), g.param(p, col), g.param(p, m));
        let s = g.add(a, b);
        let d = g.sub(a, b);
        let t = g.tanh(s);
        let q = g.sigmoid(d);
        let e = g.exp(b);
        let x = g.mul(t, q);
        let x = g.add(x, e);
        let x = g.add_row(x, row);
        let x = g.mul_col(x, col);
        let x = g.affine(x, 0.7, -0.2);
        let y = g.matmul(x, m);
        let cat = g.concat_cols(&[y, x, col]);
        let sl = g.slice_cols(cat, 1, 5);
        let ls = g.log_softmax_rows(sl);
        let rs = g.row_sum(x);
        let rr = g.repeat_rows(rs, 2);
        let rr = g.reshape(rr, 2, 3);
        let br = g.broadcast_rows(row, 2);
        let tk = g.take_rows(ls, &[2, 0, 2]);
        let m1 = g.mean_all(rr);
        let m2 = g.sum_all(br);
        let m3 = g.mean_all(tk);
        let z = g.add(m1, m2);
        g.add(z, m3)
    });
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn binormal_gradient_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    let p = ps.add("p", rand_tensor(&mut rng, 4, 5));
    let target = rand_tensor(&mut rng, 4, 2);
    let t2 = target.clone();
    let rep = check(&ps, move |g, prm| {
        let v = g.param(prm, p);
        g.binormal_logpdf(v, t2.clone())
    });
    assert!(rep.max_rel_error < TOL, "{rep:?}");

    let mut g = Graph::new();
    let v = g.param(&ps, p);
    let out = g.binormal_logpdf(v, target.clone());
    for i in 0..4 {
        let c = Gaussian2::from_raw(ps.get(p).row(i));
        let want = c.log_pdf([target.get(i, 0), target.get(i, 1)]);
        assert!((g.value(out).get(i, 0) - want).abs() < 1e-12);
    }
}

#[test]
fn lstm_matches_straight_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let (nin, nh) = (3, 4);
    let cell = LstmCell::new(&mut ps, "l", nin, nh, &mut rng);
    *ps.get_mut(cell.b) = rand_tensor(&mut rng, 1, 4 * nh);
    let x = rand_tensor(&mut rng, 1, nin);
    let h0 = rand_tensor(&mut rng, 1, nh);
    let c0 = rand_tensor(&mut rng, 1, nh);

    let mut g = Graph::new();
    let (xv, hv, cv) = (g.input(x.clone()), g.input(h0.clone()), g.input(c0.clone()));
    let (h1, c1) = cell.step(&mut g, &ps, xv, hv, cv).unwrap();

    let w = ps.get(cell.w);
    let b = ps.get(cell.b);
    let mut input = x.data().to_vec();
    input.extend_from_slice(h0.data());
    let pre = |gate: usize, j: usize| {
        let col = gate * nh + j;
        b.get(0, col) + (0..nin + nh).map(|k| input[k] * w.get(k, col)).sum::<f64>()
    };
    for j in 0..nh {
        let i = sig(pre(0, j));
        let f = sig(pre(1, j));
        let gg = pre(2, j).tanh();
        let o = sig(pre(3, j));
        let c = f * c0.get(0, j) + i * gg;
        let h = o * c.tanh();
        assert!((g.value(c1).get(0, j) - c).abs() < 1e-12);
        assert!((g.value(h1).get(0, j) - h).abs() < 1e-12);
    }
}

#[test]
fn lstm_zero_weights_give_zero_hidden() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    let cell = LstmCell::new(&mut ps, "l", 3, 5, &mut rng);
    let ps = ps.scaled(0.0);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(2, 3));
    let (h, c) = cell.zero_state(&mut g, 2);
    let (h1, _) = cell.step(&mut g, &ps, x, h, c).unwrap();
    assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    let cell = LstmCell::new(&mut ps, "l", 3, 5, &mut rng);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(1, 4));
    let (h, c) = cell.zero_state(&mut g, 1);
    assert!(matches!(cell.step(&mut g, &ps, x, h, c), Err(NnError::Shape(_))));
}

#[test]
fn layer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::new();
    let lstm = LstmCell::new(&mut ps, "lstm", 3, 4, &mut rng);
    let gru = GruCell::new(&mut ps, "gru", 4, 3, &mut rng);
    let bi = BiLstm::new(&mut ps, "bi", 2, 3, &mut rng);
    let att = AdditiveAttention::new(&mut ps, "att", 3, 6, 5, &mut rng);
    let mlp = Mlp::new(&mut ps, "mlp", &[6, 5, 2], false, &mut rng);
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 2, 3)).collect();
    let ys: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 2, 2)).collect();
    let mask = Tensor::matrix(2, 1, vec![1.0, 0.0]);
    let rep = check(&ps, |g, p| {
        let x: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let one = g.input(Tensor::filled(2, 1, 1.0));
        let m = g.input(mask.clone());
        let h = lstm.run(g, p, &x, Some(&[one, m, one])).unwrap();
        let mut hg = g.input(Tensor::zeros(2, 3));
        hg = gru.step(g, p, h, hg).unwrap();
        hg = gru.step(g, p, h, hg).unwrap();
        let y: Vec<Var> = ys.iter().map(|t| g.input(t.clone())).collect();
        let hb = bi.run(g, p, &y).unwrap();
        let k2 = g.tanh(hg);
        let (pooled, w) = att.forward(g, p, &[hg, k2], hb).unwrap();
        let q = g.concat_cols(&[pooled, hg]);
        let o = mlp.forward(g, p, q).unwrap();
        let ws = g.row_sum(w);
        let o = g.concat_cols(&[o, ws]);
        o
    });
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn gru_matches_straight_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let (nin, nh) = (2, 3);
    let cell = GruCell::new(&mut ps, "g", nin, nh, &mut rng);
    *ps.get_mut(cell.bx) = rand_tensor(&mut rng, 1, 3 * nh);
    *ps.get_mut(cell.bh) = rand_tensor(&mut rng, 1, 3 * nh);
    let x = rand_tensor(&mut rng, 1, nin);
    let h0 = rand_tensor(&mut rng, 1, nh);
    let mut g = Graph::new();
    let (xv, hv) = (g.input(x.clone()), g.input(h0.clone()));
    let h1 = cell.step(&mut g, &ps, xv, hv).unwrap();
    let (wx, wh, bx, bh) = (ps.get(cell.wx), ps.get(cell.wh), ps.get(cell.bx), ps.get(cell.bh));
    let gx = |col: usize| bx.get(0, col) + (0..nin).map(|k| x.get(0, k) * wx.get(k, col)).sum::<f64>();
    let gh = |col: usize| bh.get(0, col) + (0..nh).map(|k| h0.get(0, k) * wh.get(k, col)).sum::<f64>();
    for j in 0..nh {
        let r = sig(gx(j) + gh(j));
        let z = sig(gx(nh + j) + gh(nh + j));
        let n = (gx(2 * nh + j) + r * gh(2 * nh + j)).tanh();
        let want = (1.0 - z) * n + z * h0.get(0, j);
        assert!((g.value(h1).get(0, j) - want).abs() < 1e-12);
    }
}

#[test]
fn attention_weights_are_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamSet::new();
    let att = AdditiveAttention::new(&mut ps, "att", 4, 3, 5, &mut rng);
    let mut g = Graph::new();
    let keys: Vec<Var> = (0..3).map(|_| g.input(rand_tensor(&mut rng, 5, 4))).collect();
    let q = g.input(rand_tensor(&mut rng, 5, 3));
    let (_, w) = att.forward(&mut g, &ps, &keys, q).unwrap();
    for r in 0..5 {
        let row = g.value(w).row(r);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn grad_check_quadratic_and_dead_parameter() {
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::row_vector(vec![1.5, -0.5, 2.0]));
    let dead = ps.add("dead", Tensor::row_vector(vec![3.0, 4.0]));
    let f = |p: &ParamSet| {
        let mut g = Graph::new();
        let v = g.param(p, x);
        let _ = g.param(p, dead);
        let sq = g.mul(v, v);
        let s = g.affine(sq, 0.5, 0.0);
        let loss = g.sum_all(s);
        (g.value(loss).item(), g.backward(loss, p))
    };
    let rep = grad_check(f, &ps, EPS, None);
    assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    let (_, grads) = f(&ps);
    assert!(grads.get(dead).data().iter().all(|&v| v == 0.0));
    assert_eq!(grads.get(x).data(), &[1.5, -0.5, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "g", 3, 8, &mut rng);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&mut rng, 4, 3));
        let mut h = g.input(Tensor::zeros(4, 8));
        for _ in 0..5 {
            h = cell.step(&mut g, &ps, x, h).unwrap();
        }
        g.value(h).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
