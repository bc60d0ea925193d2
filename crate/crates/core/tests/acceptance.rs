//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Run with
//! `cargo test --release --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use attnsketch::features::build_feature_row;
use attnsketch::recovery::{tail_norm, RecoveryDims};
use attnsketch::sketch::{sketch_vector, SketchKind, Sketcher};
use attnsketch::{
    evaluate, exact_attention, gen_instance, jl_dim, kernel_error_bound, memory_audit, AttentionOutput,
    CrossWeights, DenseMatrix, EngineConfig, FeatureConfig, ProblemParams, Profile, RecoverySketch, RngSeed,
    SketchState,
};
use common::{features, materialize_phi, materialize_psi, rel_diff};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Largest decoded column size seen against its allowance, across all runs.
#[derive(Default)]
struct SparsityLog {
    runs: usize,
    violations: usize,
    worst: f64,
}

impl SparsityLog {
    fn record(&mut self, out: &AttentionOutput, k: usize) {
        for col in &out.columns {
            self.record_nnz(col.nnz(), k);
        }
    }

    fn record_nnz(&mut self, nnz: usize, k: usize) {
        self.runs += 1;
        if nnz > 2 * k {
            self.violations += 1;
        }
        self.worst = self.worst.max(nnz as f64 / (2 * k) as f64);
    }
}

fn end_to_end(log: &mut SparsityLog) -> Outcome {
    let (n, d, k) = (256, 4, 16);
    let p = ProblemParams::new(n, d, 1.0, k, 0.5, 0.1, 0.01).unwrap();
    let f = FeatureConfig::new(d, 6).unwrap();
    let start = Instant::now();
    let (mut passed, mut total) = (0usize, 0usize);
    let (mut rel_sum, mut max_ratio) = (0.0, 0.0f64);
    for seed in 0..100u64 {
        let inst = gen_instance(&p, RngSeed(seed), Profile::Spiky).unwrap();
        let cfg = EngineConfig::new(p, f, RngSeed(1000 + seed));
        let mut st = SketchState::new(&cfg).unwrap();
        st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
        let out = st.finalize().unwrap();
        log.record(&out, k);
        let oracle = exact_attention(&inst.q, &inst.k, &inst.v, &f).unwrap();
        let report = evaluate(&out, &oracle, &p).unwrap();
        for c in &report.columns {
            total += 1;
            passed += c.pass as usize;
            rel_sum += c.error / c.y_norm.max(f64::MIN_POSITIVE);
            max_ratio = max_ratio.max(c.ratio);
        }
    }
    let elapsed = start.elapsed();
    let rate = passed as f64 / total as f64;
    let budget = Duration::from_secs(600);
    Outcome::new(
        rate >= 0.95 && elapsed <= budget,
        format!(
            "pass rate {rate:.4} over {total} columns (need >= 0.95), max error/bound {max_ratio:.3}, \
             mean relative error {:.3}, {:.1}s (budget {}s)",
            rel_sum / total as f64,
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn streaming_equals_offline() -> Outcome {
    let (n, d) = (512, 4);
    let p = ProblemParams::new(n, d, 1.0, 8, 0.5, 0.5, 0.1).unwrap();
    let cfg = EngineConfig::new(p, FeatureConfig::new(d, 4).unwrap(), RngSeed(21));
    let inst = gen_instance(&p, RngSeed(22), Profile::Uniform).unwrap();
    let mut st = SketchState::new(&cfg).unwrap();
    st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();

    let psi = materialize_psi(st.psi());
    let phi = materialize_phi(st.recovery_sketch());
    let u1 = features(&inst.q, &cfg.features);
    let u2 = features(&inst.k, &cfg.features);
    let t = u2.cols();
    let prod_u2: Vec<f64> = (0..t).map(|c| u2.column(c).iter().sum()).collect();
    let dinv_u1 = DenseMatrix::from_fn(n, t, |r, c| {
        let d_tilde: f64 = u1.row(r).iter().zip(&prod_u2).map(|(a, b)| a * b).sum();
        u1.get(r, c) / d_tilde
    })
    .unwrap();
    let diffs = [
        ("sk(V)", rel_diff(st.sk_v().buffer(), psi.matmul(&inst.v).unwrap().data())),
        ("sk(U2)", rel_diff(st.sk_u2().buffer(), psi.matmul(&u2).unwrap().data())),
        ("sk(D^-1 U1)", rel_diff(st.sk_dinv_u1().data(), phi.matmul(&dinv_u1).unwrap().data())),
        ("prod(U2^T 1)", rel_diff(st.prod_u2(), &prod_u2)),
    ];
    let worst = diffs.iter().map(|x| x.1).fold(0.0, f64::max);
    let detail = diffs.iter().map(|(name, v)| format!("{name} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(worst <= 1e-9, format!("{detail} (need <= 1e-9)"))
}

fn kernel_accuracy() -> Outcome {
    let (d, b) = (4, 1.0);
    let f = FeatureConfig::new(d, 6).unwrap();
    let mut rng = RngSeed(31).rng();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-b..=b)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-b..=b)).collect();
        let approx = build_feature_row(&q, &f).unwrap().dot(&build_feature_row(&k, &f).unwrap());
        let exact = (q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / d as f64).exp();
        worst = worst.max((approx - exact).abs());
    }
    let bound = kernel_error_bound(b, d, 6);
    let literal = 3.88e-4;

    let p = ProblemParams::new(256, d, b, 16, 0.5, 0.1, 0.01).unwrap();
    let mut gap = 0.0f64;
    for seed in 0..10u64 {
        let profile = if seed % 2 == 0 { Profile::Spiky } else { Profile::Uniform };
        let inst = gen_instance(&p, RngSeed(seed), profile).unwrap();
        let o = exact_attention(&inst.q, &inst.k, &inst.v, &f).unwrap();
        for c in 0..d {
            let y = o.y.column(c);
            let yt = o.y_tilde.column(c);
            gap = gap.max(y.iter().zip(&yt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    Outcome::new(
        worst <= bound && worst <= literal && gap <= 1e-2,
        format!(
            "max kernel error {worst:.3e} (bound {bound:.3e}, literal {literal:.2e}); \
             max column gap {gap:.3e} (need <= 1e-2)"
        ),
    )
}

fn jl_bound() -> Outcome {
    let (n, eps, delta) = (1024, 0.25, 0.05);
    let mut rng = RngSeed(41).rng();
    let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..n).map(|i| 0.6 * u[i] + { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (exact, scale) = (dot(&u, &v), norm(&u) * norm(&v));
    let m2 = jl_dim(eps, delta, 1);
    let trials = 2000u64;
    let rate = |kind: SketchKind| {
        let bad = (0..trials)
            .filter(|&seed| {
                let sk = Sketcher::new(kind, m2, n, RngSeed(seed));
                let (su, sv) = (sketch_vector(&sk, &u).unwrap(), sketch_vector(&sk, &v).unwrap());
                (dot(&su, &sv) - exact).abs() > eps * scale
            })
            .count();
        bad as f64 / trials as f64
    };
    let (ams, gauss) = (rate(SketchKind::Ams), rate(SketchKind::Gaussian));
    Outcome::new(
        ams <= 0.07 && gauss <= 0.07,
        format!("m2 = {m2}, violation rate AMS {ams:.4}, Gaussian {gauss:.4} (need <= 0.07)"),
    )
}

fn sparse_recovery(log: &mut SparsityLog) -> Outcome {
    let (n, k, eps1) = (4096, 8, 0.5);
    let trials = 1000u64;
    let (mut l2_ok, mut exact_ok) = (0u64, 0u64);
    let mut worst_ratio = 0.0f64;
    for seed in 0..trials {
        let mut rng = RngSeed(5000 + seed).rng();
        let rs = RecoverySketch::new(k, eps1, n, RngSeed(seed)).unwrap();
        let heavy: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let mut spikes = vec![0.0; n];
        for &i in &heavy {
            let mag: f64 = rng.random_range(1.0..2.0);
            spikes[i] = if rng.random::<bool>() { mag } else { -mag };
        }

        // planted heavies plus a unit-norm dense tail
        let mut tail: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for &i in &heavy {
            tail[i] = 0.0;
        }
        let tn = tail.iter().map(|x| x * x).sum::<f64>().sqrt();
        let x: Vec<f64> = spikes.iter().zip(&tail).map(|(s, t)| s + t / tn).collect();
        let mut z = rs.new_measurement();
        for (i, &xi) in x.iter().enumerate() {
            rs.encode_update(&mut z, i, xi).unwrap();
        }
        let dec = rs.decode_topk(&z).unwrap();
        log.record_nnz(dec.nnz(), k);
        let ratio = dec.distance_to(&x) / ((1.0 + eps1) * tail_norm(&x, k));
        worst_ratio = worst_ratio.max(ratio);
        l2_ok += (ratio <= 1.0) as u64;

        let mut z = rs.new_measurement();
        for &i in &heavy {
            rs.encode_update(&mut z, i, spikes[i]).unwrap();
        }
        let dec = rs.decode_topk(&z).unwrap();
        log.record_nnz(dec.nnz(), k);
        let dense = dec.to_dense(n);
        let err = dense.iter().zip(&spikes).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        exact_ok += (err <= 1e-9) as u64;
    }
    let (l2, ex) = (l2_ok as f64 / trials as f64, exact_ok as f64 / trials as f64);
    Outcome::new(
        l2 >= 0.995 && ex >= 0.999,
        format!(
            "l2/l2 holds in {l2:.3} (need >= 0.995, worst error/bound {worst_ratio:.3}); \
             exact k-sparse recovery in {ex:.3} (need >= 0.999)"
        ),
    )
}

fn sublinear_space() -> Outcome {
    let d = 2;
    let mut breakdowns = Vec::new();
    let mut largest_ok = true;
    let mut detail = Vec::new();
    for n in [1 << 10, 1 << 12, 1 << 14] {
        let p = ProblemParams::new(n, d, 1.0, 4, 0.5, 0.5, 0.1).unwrap();
        let cfg = EngineConfig::new(p, FeatureConfig::new(d, 4).unwrap(), RngSeed(61))
            .with_dims(96, RecoveryDims::new(8, 64));
        let inst = gen_instance(&p, RngSeed(62), Profile::Uniform).unwrap();
        let mut st = SketchState::new(&cfg).unwrap();
        st.stream_plain(&inst.q, &inst.k, &inst.v).unwrap();
        let b = memory_audit(&st).breakdown;
        largest_ok &= [b.m1, b.m2, b.t, b.d].contains(&b.largest_dimension);
        largest_ok &= b.entries.iter().all(|e| e.rows < n && e.cols < n);
        detail.push(format!("n={n}: {} numbers", b.total_numbers));
        breakdowns.push(b);
    }
    let identical = breakdowns.windows(2).all(|w| w[0] == w[1]);
    Outcome::new(
        identical && largest_ok,
        format!(
            "{}; identical {identical}; largest dimension {} in {{m1, m2, t, d}}: {largest_ok}",
            detail.join(", "),
            breakdowns[0].largest_dimension
        ),
    )
}

fn cross_equivalence(log: &mut SparsityLog) -> Outcome {
    let (n, d, k) = (128, 4, 8);
    let p = ProblemParams::new(n, d, 1.0, k, 0.5, 0.2, 0.1).unwrap();
    let mut identical = 0;
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = EngineConfig::new(p, FeatureConfig::new(d, 4).unwrap(), RngSeed(70 + seed));
        let inst = gen_instance(&p, RngSeed(80 + seed), Profile::Spiky).unwrap();
        let x2 = inst.v.clone();
        let mut plain = SketchState::new(&cfg).unwrap();
        plain.stream_plain(&inst.q, &x2, &x2).unwrap();
        let mut cross = SketchState::new_cross(&cfg, CrossWeights::identity(d)).unwrap();
        cross.stream_cross(&inst.q, &x2).unwrap();
        let (a, b) = (plain.finalize().unwrap(), cross.finalize().unwrap());
        log.record(&a, k);
        log.record(&b, k);
        let bits = |o: &AttentionOutput| -> Vec<(usize, u64)> {
            o.columns.iter().flat_map(|c| c.entries().iter().map(|&(i, v)| (i, v.to_bits()))).collect()
        };
        identical += (bits(&a) == bits(&b) && a == b) as u64;
    }
    Outcome::new(identical == seeds, format!("{identical}/{seeds} runs bit-identical"))
}

fn main() -> ExitCode {
    let mut log = SparsityLog::default();
    let mut failed = 0;
    let mut emit = |id: &str, name: &str, o: Outcome| {
        println!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    };
    emit("C1", "end-to-end error guarantee", end_to_end(&mut log));
    emit("C2", "streaming equals offline", streaming_equals_offline());
    emit("C3", "kernel accuracy", kernel_accuracy());
    emit("C4", "JL inner-product bound", jl_bound());
    emit("C5", "sparse recovery", sparse_recovery(&mut log));
    emit("C6", "sublinear space", sublinear_space());
    emit("C8", "identity cross mode", cross_equivalence(&mut log));
    emit(
        "C7",
        "output sparsity",
        Outcome::new(
            log.violations == 0,
            format!(
                "{} decoded columns, {} above 2k, largest nnz/2k {:.3}",
                log.runs, log.violations, log.worst
            ),
        ),
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
