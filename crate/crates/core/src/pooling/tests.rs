use proptest::prelude::{any, prop_assert, proptest};

use super::*;
use crate::numerics::{sigmoid, GradCheck};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-coordinate LSTM step written out with plain loops.
fn step_oracle(params: &ParamSet<f64>, l: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let gate = |k: usize, j: usize| {
        let w = params.get(l.w[k]).data();
        let b = params.get(l.b[k]).data();
        let mut acc = b[j];
        for (q, v) in xh.iter().enumerate() {
            acc += w[j * xh.len() + q] * v;
        }
        acc
    };
    let mut h2 = vec![0.0; l.h];
    let mut c2 = vec![0.0; l.h];
    for j in 0..l.h {
        let i = sig(gate(0, j));
        let f = sig(gate(1, j));
        let o = sig(gate(2, j));
        let g = gate(3, j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

fn bilstm_oracle(params: &ParamSet<f64>, b: &BiLstm, f: &Tensor<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = f.rows();
    let h = b.hidden();
    let run = |l: &LstmParams, order: Vec<usize>| {
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        let mut trace = Vec::new();
        for t in order {
            (hs, cs) = step_oracle(params, l, f.row(t), &hs, &cs);
            trace.push(hs.clone());
        }
        (hs, trace)
    };
    let (hf, trace) = run(&b.fwd, (0..m).collect());
    let (hb, _) = run(&b.bwd, (0..m).rev().collect());
    (hf.into_iter().chain(hb).collect(), trace)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal(0.0, 1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn lstm(n: usize, h: usize, seed: u64) -> (LstmParams, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let l = LstmParams::new(n, h, &mut params, "", &mut Rng::new(seed));
    (l, params)
}

#[test]
fn forget_bias_starts_at_one() {
    let (l, params) = lstm(3, 4, 0);
    for (k, gate) in GATES.iter().enumerate() {
        let expect = if *gate == "f" { 1.0 } else { 0.0 };
        assert!(params.get(l.b[k]).data().iter().all(|&b| b == expect));
        assert_eq!(params.get(l.w[k]).shape(), &[4, 7]);
    }
}

#[test]
fn zero_weights_zero_state_stay_zero() {
    let (l, mut params) = lstm(3, 4, 0);
    for &w in &l.w {
        params.get_mut(w).data_mut().fill(0.0);
    }
    let (h, c) = lstm_step(&l, &params, &[0.0; 3], &[0.0; 4], &[0.0; 4]).unwrap();
    assert_eq!(h, vec![0.0; 4]);
    assert_eq!(c, vec![0.0; 4]);
}

#[test]
fn saturated_gates_pass_the_candidate_through() {
    let (l, mut params) = lstm(3, 4, 1);
    for k in 0..3 {
        params.get_mut(l.w[k]).data_mut().fill(0.0);
        let bias = if k == 1 { -60.0 } else { 60.0 };
        params.get_mut(l.b[k]).data_mut().fill(bias);
    }
    let mut rng = Rng::new(2);
    let x: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 1.0)).collect();
    let h: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
    let c: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 5.0)).collect();
    let (h2, _) = lstm_step(&l, &params, &x, &h, &c).unwrap();
    let wg = params.get(l.w[3]).data();
    let xh: Vec<f64> = x.iter().chain(&h).copied().collect();
    for (j, &hj) in h2.iter().enumerate() {
        let pre: f64 = (0..7).map(|q| wg[j * 7 + q] * xh[q]).sum();
        assert!((hj - pre.tanh().tanh()).abs() < 1e-12);
    }
}

#[test]
fn step_matches_loop_oracle() {
    let mut rng = Rng::new(3);
    for seed in 0..10 {
        let (l, mut params) = lstm(5, 6, seed);
        for &b in &l.b {
            *params.get_mut(b) = random(&[6], &mut rng);
        }
        let x = random(&[5], &mut rng).to_vec();
        let h = random(&[6], &mut rng).to_vec();
        let c = random(&[6], &mut rng).to_vec();
        let (h2, c2) = lstm_step(&l, &params, &x, &h, &c).unwrap();
        let (ho, co) = step_oracle(&params, &l, &x, &h, &c);
        assert!(close(&h2, &ho, 1e-12) && close(&c2, &co, 1e-12));
    }
}

#[test]
fn step_rejects_wrong_shapes() {
    let (l, params) = lstm(3, 4, 0);
    let err = lstm_step(&l, &params, &[0.0; 2], &[0.0; 4], &[0.0; 4]).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension { .. }));
}

fn bilstm(n: usize, h: usize, seed: u64) -> (BiLstm, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let b = BiLstm::new(n, h, &mut params, "bre.", &mut Rng::new(seed));
    (b, params)
}

#[test]
fn bilstm_matches_unrolled_reference() {
    let mut rng = Rng::new(4);
    for m in 1..=5 {
        let (b, params) = bilstm(4, 3, m as u64);
        let f = random(&[m, 4], &mut rng);
        let rep = bilstm_pool(&b, &params, &f).unwrap();
        let (s, trace) = bilstm_oracle(&params, &b, &f);
        assert!(close(&rep.s, &s, 1e-12));
        assert_eq!(rep.trace.len(), m);
        for (t, (h, _)) in rep.trace.iter().enumerate() {
            assert!(close(h, &trace[t], 1e-12));
        }
        let last_f = &rep.trace[m - 1].0;
        let last_b = &rep.backward_trace[m - 1].0;
        let concat: Vec<f64> = last_f.iter().chain(last_b).copied().collect();
        assert_eq!(rep.s, concat);
    }
}

#[test]
fn single_instance_bag() {
    let (b, params) = bilstm(4, 3, 9);
    let f = random(&[1, 4], &mut Rng::new(1));
    let rep = bilstm_pool(&b, &params, &f).unwrap();
    let zeros = [0.0; 3];
    let (hf, _) = lstm_step(&b.fwd, &params, f.row(0), &zeros, &zeros).unwrap();
    let (hb, _) = lstm_step(&b.bwd, &params, f.row(0), &zeros, &zeros).unwrap();
    assert_eq!(rep.s, [hf, hb].concat());
}

#[test]
fn trace_length_and_prefix_property() {
    let (b, params) = bilstm(6, 5, 2);
    let f = random(&[10, 6], &mut Rng::new(5));
    let trace = state_trace(&b, &params, &f).unwrap();
    assert_eq!(trace.len(), 10);
    assert_eq!(trace, state_trace(&b, &params, &f).unwrap());
    for t in 0..10 {
        let prefix = Tensor::new(&[t + 1, 6], f.data()[..(t + 1) * 6].to_vec()).unwrap();
        let rep = bilstm_pool(&b, &params, &prefix).unwrap();
        assert_eq!(rep.trace.last().unwrap().0, trace[t]);
    }
}

#[test]
fn representation_width_is_cardinality_free() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = Rng::new(6);
    for kind in [
        PoolingKind::Bilstm,
        PoolingKind::Attention,
        PoolingKind::GatedAttention,
        PoolingKind::Mean,
        PoolingKind::Max,
    ] {
        let pooler = Pooler::new(kind, 4, 3, 5, &mut params, &format!("{}.", kind.name()), &mut rng);
        assert_eq!(pooler.kind(), kind);
        for m in [1, 2, 7, 30] {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let f = tape.constant(random(&[m, 4], &mut rng));
            let out = pooler.forward(&p, f).unwrap();
            assert_eq!(out.s.shape(), vec![1, pooler.out_dim()]);
        }
    }
}

fn attention(gated: bool, seed: u64) -> (AttentionParams, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let a = AttentionParams::new(4, 6, gated, &mut params, "att.", &mut Rng::new(seed));
    (a, params)
}

#[test]
fn attention_on_identical_rows_is_uniform() {
    for gated in [false, true] {
        let (att, params) = attention(gated, 1);
        let row = [0.3, -1.2, 2.0, 0.7];
        let f = Tensor::from_rows(&vec![row.to_vec(); 5]);
        let (s, a) = attention_pool(&att, &params, &f).unwrap();
        assert!(a.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert!(close(&s, &row, 1e-12));
        let (s1, a1) = attention_pool(&att, &params, &Tensor::from_rows(&[row.to_vec()])).unwrap();
        assert_eq!(a1, vec![1.0]);
        assert!(close(&s1, &row, 1e-15));
    }
}

#[test]
fn gated_attention_matches_direct_formula() {
    let (att, params) = attention(true, 4);
    let f = random(&[3, 4], &mut Rng::new(8));
    let (s, a) = attention_pool(&att, &params, &f).unwrap();
    let (v, w, u) = (
        params.get(att.v).data(),
        params.get(att.w).data(),
        params.get(att.u.unwrap()).data(),
    );
    let scores: Vec<f64> = (0..3)
        .map(|k| {
            (0..6)
                .map(|j| {
                    let vf: f64 = (0..4).map(|q| v[j * 4 + q] * f.row(k)[q]).sum();
                    let uf: f64 = (0..4).map(|q| u[j * 4 + q] * f.row(k)[q]).sum();
                    w[j] * vf.tanh() * sigmoid(uf)
                })
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|x| x.exp()).sum();
    let expect_a: Vec<f64> = scores.iter().map(|x| x.exp() / z).collect();
    assert!(close(&a, &expect_a, 1e-12));
    let expect_s: Vec<f64> = (0..4).map(|q| (0..3).map(|k| expect_a[k] * f.row(k)[q]).sum()).collect();
    assert!(close(&s, &expect_s, 1e-12));
}

#[test]
fn mean_and_max_examples() {
    let f = Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
    assert_eq!(mean_pool(&f).unwrap(), vec![1.0, 1.0]);
    assert_eq!(max_pool(&f).unwrap(), vec![2.0, 2.0]);
    let same = Tensor::from_rows(&vec![vec![0.1, -3.0, 7.5]; 6]);
    assert_eq!(max_pool(&same).unwrap(), vec![0.1, -3.0, 7.5]);
    let mean = mean_pool(&same).unwrap();
    assert!(close(&mean, &[0.1, -3.0, 7.5], 1e-15));
}

#[test]
fn order_invariant_heads_ignore_permutations() {
    let mut rng = Rng::new(10);
    let (att, ap) = attention(false, 2);
    let (gat, gp) = attention(true, 3);
    let f = random(&[9, 4], &mut rng);
    let base_mean = mean_pool(&f).unwrap();
    let base_max = max_pool(&f).unwrap();
    let base_att = attention_pool(&att, &ap, &f).unwrap().0;
    let base_gat = attention_pool(&gat, &gp, &f).unwrap().0;
    for _ in 0..100 {
        let order = rng.permutation(9);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| f.row(i).to_vec()).collect();
        let pf = Tensor::from_rows(&rows);
        assert_eq!(mean_pool(&pf).unwrap(), base_mean);
        assert_eq!(max_pool(&pf).unwrap(), base_max);
        assert!(close(&attention_pool(&att, &ap, &pf).unwrap().0, &base_att, 1e-12));
        assert!(close(&attention_pool(&gat, &gp, &pf).unwrap().0, &base_gat, 1e-12));
    }
}

#[test]
fn every_pooling_head_passes_gradient_check() {
    for kind in [
        PoolingKind::Bilstm,
        PoolingKind::Attention,
        PoolingKind::GatedAttention,
        PoolingKind::Mean,
        PoolingKind::Max,
    ] {
        let mut params = ParamSet::<f64>::new();
        let mut rng = Rng::new(20);
        let pooler = Pooler::new(kind, 3, 4, 5, &mut params, "", &mut rng);
        let mut inputs = params.values().to_vec();
        inputs.push(random(&[4, 3], &mut rng));
        inputs.push(random(&[1, pooler.out_dim()], &mut rng));
        let err = GradCheck::new(1e-5)
            .run(
                |_, vars| {
                    let n = vars.len();
                    let p = Bound { vars: vars[..n - 2].to_vec() };
                    let s = pooler.forward(&p, vars[n - 2])?.s;
                    s.matmul_nt(vars[n - 1])?.tanh()?.sum()
                },
                &inputs,
            )
            .unwrap();
        assert!(err < 1e-4, "{}: {err}", kind.name());
    }
}

#[test]
fn lstm_step_gradient_check() {
    let (l, params) = lstm(3, 4, 5);
    let mut rng = Rng::new(6);
    let mut inputs = params.values().to_vec();
    inputs.extend([random(&[1, 3], &mut rng), random(&[1, 4], &mut rng), random(&[1, 4], &mut rng)]);
    let err = GradCheck::new(1e-5)
        .run(
            |_, vars| {
                let p = Bound { vars: vars[..8].to_vec() };
                let (h, c) = l.step(&p, vars[8], vars[9], vars[10])?;
                h.add(c.scale(0.5)?)?.square()?.sum()
            },
            &inputs,
        )
        .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pooling_kind_names_round_trip() {
    for kind in [
        PoolingKind::Bilstm,
        PoolingKind::Attention,
        PoolingKind::GatedAttention,
        PoolingKind::Mean,
        PoolingKind::Max,
    ] {
        assert_eq!(kind.name().parse::<PoolingKind>().unwrap(), kind);
        let json = serde_json::to_string(&kind).unwrap();
        assert_eq!(json, format!("\"{}\"", kind.name()));
    }
    assert!("lstm".parse::<PoolingKind>().is_err());
}

proptest! {
    #[test]
    fn attention_weights_form_a_distribution(seed in 0u64..10_000, m in 1usize..20, gated in any::<bool>()) {
        let (att, params) = attention(gated, seed);
        let mut rng = Rng::new(seed ^ 0xabc);
        let f = Tensor::from_fn(&[m, 4], |_| rng.normal(0.0, 3.0));
        let (_, a) = attention_pool(&att, &params, &f).unwrap();
        prop_assert!(a.iter().all(|&w| w >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
