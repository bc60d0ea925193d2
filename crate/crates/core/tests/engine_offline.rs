mod common;

use attnsketch::engine::RowKind;
use attnsketch::generate::normalize_values;
use attnsketch::report::evaluate;
use attnsketch::sketch::SketchKind;
use attnsketch::{
    exact_attention, gen_instance, CrossWeights, DenseMatrix, EngineConfig, FeatureConfig, Phase, ProblemParams,
    Profile, RngSeed, SketchState,
};
use common::{features, materialize_phi, materialize_psi, rel_diff};
use proptest::prelude::*;
use rand::Rng;

fn config(n: usize, d: usize, k: usize, degree: usize, eps2: f64, seed: u64) -> EngineConfig {
    let p = ProblemParams::new(n, d, 1.0, k, 0.5, eps2, 0.1).unwrap();
    EngineConfig::new(p, FeatureConfig::new(d, degree).unwrap(), RngSeed(seed))
}

struct Offline {
    sk_v: DenseMatrix,
    sk_u2: DenseMatrix,
    prod_u2: Vec<f64>,
    sk_dinv_u1: DenseMatrix,
    dinv_u1: DenseMatrix,
}

fn offline(st: &SketchState, cfg: &EngineConfig, q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Offline {
    let psi = materialize_psi(st.psi());
    let phi = materialize_phi(st.recovery_sketch());
    let u1 = features(q, &cfg.features);
    let u2 = features(k, &cfg.features);
    let t = u2.cols();
    let prod_u2: Vec<f64> = (0..t).map(|c| u2.column(c).iter().sum()).collect();
    let dinv_u1 = DenseMatrix::from_fn(u1.rows(), t, |r, c| {
        let d_tilde: f64 = u1.row(r).iter().zip(&prod_u2).map(|(a, b)| a * b).sum();
        u1.get(r, c) / d_tilde
    })
    .unwrap();
    Offline {
        sk_v: psi.matmul(v).unwrap(),
        sk_u2: psi.matmul(&u2).unwrap(),
        prod_u2,
        sk_dinv_u1: phi.matmul(&dinv_u1).unwrap(),
        dinv_u1,
    }
}

fn assert_matches_offline(st: &SketchState, off: &Offline, tol: f64) {
    assert!(rel_diff(st.sk_v().buffer(), off.sk_v.data()) <= tol, "sk_v");
    assert!(rel_diff(st.sk_u2().buffer(), off.sk_u2.data()) <= tol, "sk_u2");
    assert!(rel_diff(st.prod_u2(), &off.prod_u2) <= tol, "prod_u2");
    assert!(rel_diff(st.sk_dinv_u1().data(), off.sk_dinv_u1.data()) <= tol, "sk_dinv_u1");
}

#[test]
fn streamed_sketches_equal_offline_products() {
    for kind in [SketchKind::Ams, SketchKind::Gaussian] {
        let cfg = config(96, 3, 4, 4, 0.5, 11).with_sketch(kind).with_k_block(16);
        let inst = gen_instance(&cfg.params, RngSeed(5), Profile::Uniform).unwrap();
        let mut st = SketchState::new(&cfg).unwrap();
        st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
        let off = offline(&st, &cfg, &inst.q, &inst.k, &inst.v);
        assert_matches_offline(&st, &off, 1e-9);
    }
}

#[test]
fn block_size_does_not_change_sketches() {
    let inst = gen_instance(&config(50, 2, 2, 2, 0.5, 0).params, RngSeed(2), Profile::Uniform).unwrap();
    let mut bufs = Vec::new();
    for block in [1, 7, 64] {
        let cfg = config(50, 2, 2, 2, 0.5, 4).with_k_block(block);
        let mut st = SketchState::new(&cfg).unwrap();
        st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
        bufs.push(st.sk_u2().buffer().to_vec());
    }
    assert!(rel_diff(&bufs[1], &bufs[0]) < 1e-12);
    assert!(rel_diff(&bufs[2], &bufs[0]) < 1e-12);
}

#[test]
fn denominators_equal_kernel_row_sums() {
    let cfg = config(128, 2, 4, 4, 0.5, 3);
    let inst = gen_instance(&cfg.params, RngSeed(8), Profile::Uniform).unwrap();
    let mut st = SketchState::new(&cfg).unwrap();
    for (i, r) in inst.v.iter_rows().enumerate() {
        st.ingest_v_row(i, r).unwrap();
    }
    for (i, r) in inst.k.iter_rows().enumerate() {
        st.ingest_k_row(i, r).unwrap();
    }
    let oracle = exact_attention(&inst.q, &inst.k, &inst.v, &cfg.features).unwrap();
    let u1 = features(&inst.q, &cfg.features);
    for (i, row) in u1.iter_rows().enumerate() {
        let d_tilde: f64 = row.iter().zip(st.prod_u2()).map(|(a, b)| a * b).sum();
        let want = oracle.d_tilde_diag[i];
        assert!((d_tilde - want).abs() <= 1e-9 * want, "row {i}: {d_tilde} vs {want}");
    }
    assert!(oracle.row_sum_error_tilde < 1e-9);
}

/// With `k = n` every coordinate of `D̃⁻¹U1` is recovered from the bank.
#[test]
fn bank_decodes_normalized_query_features() {
    let cfg = config(64, 2, 64, 2, 0.5, 21);
    let inst = gen_instance(&cfg.params, RngSeed(13), Profile::Uniform).unwrap();
    let mut st = SketchState::new(&cfg).unwrap();
    st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
    let off = offline(&st, &cfg, &inst.q, &inst.k, &inst.v);
    let rs = st.recovery_sketch();
    let bank = st.sk_dinv_u1();
    let measurements: Vec<_> = (0..bank.columns()).map(|c| bank.column(c)).collect();
    let decoded = rs.decode_many(&measurements).unwrap();
    for (c, col) in decoded.iter().enumerate() {
        let want = off.dinv_u1.column(c);
        let got = col.to_dense(64);
        let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "feature column {c}: {worst}");
    }
}

/// `k ≥ n`: decoded output tracks the kernel-smoothed target within `2·ε2`.
#[test]
fn full_sparsity_output_tracks_kernel_output() {
    let eps2 = 0.1;
    let cfg = config(64, 2, 64, 4, eps2, 17);
    let inst = gen_instance(&cfg.params, RngSeed(31), Profile::Uniform).unwrap();
    let mut st = SketchState::new(&cfg).unwrap();
    st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
    let out = st.finalize().unwrap();
    let oracle = exact_attention(&inst.q, &inst.k, &inst.v, &cfg.features).unwrap();
    for (c, col) in out.columns.iter().enumerate() {
        let gap = col.distance_to(&oracle.y_tilde.column(c));
        assert!(gap <= 2.0 * eps2, "column {c}: {gap}");
    }
}

#[test]
fn identity_cross_weights_reproduce_plain_mode_bits() {
    let cfg = config(80, 3, 4, 4, 0.5, 99).with_k_block(8);
    let inst = gen_instance(&cfg.params, RngSeed(4), Profile::Spiky).unwrap();
    // X1 = Q, X2 = K = V: use K for both key and value streams
    let mut plain = SketchState::new(&cfg).unwrap();
    plain.stream_plain(&inst.q, &inst.k, &inst.k).unwrap();
    let mut cross = SketchState::new_cross(&cfg, CrossWeights::identity(3)).unwrap();
    cross.stream_cross(&inst.q, &inst.k).unwrap();
    assert_eq!(plain.sk_v().buffer(), cross.sk_v().buffer());
    assert_eq!(plain.sk_u2().buffer(), cross.sk_u2().buffer());
    assert_eq!(plain.prod_u2(), cross.prod_u2());
    assert_eq!(plain.sk_dinv_u1().data(), cross.sk_dinv_u1().data());
    let a = plain.finalize().unwrap();
    let b = cross.finalize().unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_x2_row_adds_only_constant_feature() {
    let cfg = config(4, 2, 1, 2, 0.5, 1);
    let mut st = SketchState::new_cross(&cfg, CrossWeights::identity(2)).unwrap();
    st.ingest_x2_row(0, &[0.0, 0.0]).unwrap();
    assert!(st.sk_v().buffer().iter().all(|&v| v == 0.0));
    assert_eq!(st.prod_u2()[0], 1.0);
    assert!(st.prod_u2()[1..].iter().all(|&v| v == 0.0));
    assert!(st.ingest_v_row(1, &[0.0, 0.0]).is_err());
    assert!(st.ingest_x1_row(0, &[0.0, 0.0]).is_err());
}

#[test]
fn cross_mode_meets_error_bound() {
    let (n, d) = (128, 4);
    let cfg = config(n, d, 8, 4, 0.1, 55);
    let mut rng = RngSeed(77).rng();
    let mut mat = |rows, scale: f64| DenseMatrix::from_fn(rows, d, |_, _| rng.random_range(-scale..=scale)).unwrap();
    let x1 = mat(n, 1.0);
    let x2 = mat(n, 1.0);
    let w_q = mat(d, 0.5);
    let w_k = mat(d, 0.5);
    let w_v_raw = mat(d, 1.0);
    let v_raw = x2.matmul(&w_v_raw).unwrap();
    let v = normalize_values(&v_raw).unwrap();
    let scale = v.max_abs() / v_raw.max_abs();
    let w_v = w_v_raw.scaled(scale).unwrap();
    let weights = CrossWeights::new(w_q.clone(), w_k.clone(), w_v.clone()).unwrap();

    let mut st = SketchState::new_cross(&cfg, weights).unwrap();
    st.stream_cross(&x1, &x2).unwrap();
    assert_eq!(st.phase(), Phase::AwaitX1);
    let out = st.finalize().unwrap();

    let q = x1.matmul(&w_q).unwrap();
    let k = x2.matmul(&w_k).unwrap();
    let v = x2.matmul(&w_v).unwrap();
    let oracle = exact_attention(&q, &k, &v, &cfg.features).unwrap();
    let report = evaluate(&out, &oracle, &cfg.params).unwrap();
    assert_eq!(report.pass_rate, 1.0, "{}", report.table());
    assert!(report.sparsity_ok);
}

#[test]
fn generic_ingest_dispatches_by_kind() {
    let cfg = config(2, 1, 1, 2, 0.5, 0);
    let mut st = SketchState::new(&cfg).unwrap();
    for kind in [RowKind::V, RowKind::K, RowKind::Q] {
        st.ingest(kind, 0, &[0.5]).unwrap();
        st.ingest(kind, 1, &[-0.5]).unwrap();
    }
    assert!(st.ingest(RowKind::X1, 0, &[0.5]).is_err());
    let out = st.finalize().unwrap();
    assert_eq!(out.columns.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Streaming accumulation equals the offline products for arbitrary data.
    #[test]
    fn streaming_equals_offline(
        n in 1usize..40,
        d in 1usize..4,
        seed in any::<u64>(),
        block in 1usize..9,
    ) {
        let cfg = config(n, d, 2, 2, 0.5, seed).with_k_block(block);
        let mut rng = RngSeed(seed ^ 0x5eed).rng();
        let mut mat = |scale: f64| DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-scale..=scale)).unwrap();
        let (q, k, v) = (mat(1.0), mat(1.0), mat(0.2));
        let mut st = SketchState::new(&cfg).unwrap();
        st.stream_plain(&q, &k, &v).unwrap();
        let off = offline(&st, &cfg, &q, &k, &v);
        prop_assert!(rel_diff(st.sk_v().buffer(), off.sk_v.data()) <= 1e-9);
        prop_assert!(rel_diff(st.sk_u2().buffer(), off.sk_u2.data()) <= 1e-9);
        prop_assert!(rel_diff(st.prod_u2(), &off.prod_u2) <= 1e-9);
        prop_assert!(rel_diff(st.sk_dinv_u1().data(), off.sk_dinv_u1.data()) <= 1e-9);
        let out = st.finalize().unwrap();
        prop_assert!(out.columns.iter().all(|c| c.nnz() <= 4));
    }

    /// Phase order: any row kind other than the expected one is rejected and
    /// leaves the state unchanged.
    #[test]
    fn wrong_phase_rejected(kind_idx in 0usize..5, rows_done in 0usize..3) {
        let cfg = config(3, 1, 1, 2, 0.5, 1);
        let mut st = SketchState::new(&cfg).unwrap();
        for i in 0..rows_done {
            st.ingest_v_row(i, &[0.1]).unwrap();
        }
        let kinds = [RowKind::V, RowKind::K, RowKind::Q, RowKind::X2, RowKind::X1];
        let kind = kinds[kind_idx];
        let before = st.counters();
        let res = st.ingest(kind, rows_done, &[0.1]);
        if kind == RowKind::V {
            prop_assert!(res.is_ok());
        } else {
            prop_assert!(res.is_err());
            prop_assert_eq!(st.counters(), before);
        }
    }
}
