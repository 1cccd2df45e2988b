use defined_core::constellation::Scheme;
use defined_core::eval::{run_eval, EvalConfig, Method};
use num_complex::Complex64;

/// BPSK with pilots x_1..x_m: ĥ = Σ y x / (Σ x² + σ²), decide sign Re(ĥ* y).
fn straight_line_mmse(cfg: &EvalConfig, m: usize) -> f64 {
    let mut errors = 0usize;
    for i in 0..cfg.n_prompts {
        let f = cfg.frame(i).unwrap();
        let sym = |idx: usize| if idx == 0 { 1.0 } else { -1.0 };
        // constellation order: index 0 is +1
        let mut num = Complex64::new(0.0, 0.0);
        let mut den = f.task.sigma2;
        for t in 0..m {
            let x = sym(f.x_indices[t]);
            num += f.y[t][0] * x;
            den += x * x;
        }
        let h = num / den;
        let decided = if (h.conj() * f.y[m][0]).re >= 0.0 { 0 } else { 1 };
        errors += usize::from(decided != f.x_indices[m]);
    }
    errors as f64 / cfg.n_prompts as f64
}

#[test]
fn mmse_pk_matches_straight_line_oracle() {
    let mut cfg = EvalConfig::new(Method::MmsePk, Scheme::Bpsk);
    cfg.snr_db = 15.0;
    cfg.k = 1;
    cfg.n_prompts = 10_000;
    cfg.seed = 91;
    let curve = run_eval(&cfg, None).unwrap();
    for m in [1usize, 30] {
        let p = curve.point(m).unwrap();
        let oracle = straight_line_mmse(&cfg, m);
        assert!((p.ser - oracle).abs() <= 2.0 * p.stderr.max(1e-12), "m={m}: {} vs {oracle}", p.ser);
    }
}

#[test]
fn mlsd_two_slot_matches_direct_ml() {
    let mut cfg = EvalConfig::new(Method::Mlsd, Scheme::Bpsk);
    cfg.snr_db = 5.0;
    cfg.t = 2;
    cfg.n_prompts = 5000;
    cfg.seed = 92;
    let curve = run_eval(&cfg, None).unwrap();
    assert_eq!(curve.points.len(), 1);
    // with x_1 known, the likelihood of x_2 = ±1 depends only on Re(y_1 x_1 y_2* x_2)
    let mut errors = 0;
    for i in 0..cfg.n_prompts {
        let f = cfg.frame(i).unwrap();
        let x1 = if f.x_indices[0] == 0 { 1.0 } else { -1.0 };
        let score = (f.y[0][0] * x1 * f.y[1][0].conj()).re;
        let decided = if score >= 0.0 { 0 } else { 1 };
        errors += usize::from(decided != f.x_indices[1]);
    }
    let oracle = errors as f64 / cfg.n_prompts as f64;
    assert_eq!(curve.points[0].ser, oracle);
}

#[test]
fn near_noiseless_baselines_are_error_free() {
    for method in [Method::MmsePk, Method::MmseDf, Method::Mlsd] {
        let mut cfg = EvalConfig::new(method, Scheme::Bpsk);
        cfg.snr_db = 60.0;
        cfg.n_prompts = 2000;
        cfg.seed = 93;
        cfg.mlsd_cap = Some(6);
        let curve = run_eval(&cfg, None).unwrap();
        assert!(curve.points.iter().all(|p| p.ser < 1e-3), "{method}");
    }
}

#[test]
fn mlsd_over_cap_lengths_are_listed() {
    let mut cfg = EvalConfig::new(Method::Mlsd, Scheme::Qpsk);
    cfg.n_prompts = 20;
    cfg.t = 8;
    cfg.mlsd_cap = Some(4);
    let curve = run_eval(&cfg, None).unwrap();
    assert_eq!(curve.points.iter().map(|p| p.length).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(curve.omitted, vec![4, 5, 6, 7]);
    // T - 1 is missing, so the gain is undefined
    assert_eq!(curve.gain_df, None);
}

#[test]
fn curves_improve_with_context_on_average() {
    for method in [Method::MmsePk, Method::MmseDf] {
        let mut cfg = EvalConfig::new(method, Scheme::Qpsk);
        cfg.snr_db = 10.0;
        cfg.n_prompts = 4000;
        cfg.seed = 94;
        let pts = run_eval(&cfg, None).unwrap().points;
        let excess: f64 = pts.windows(2).map(|w| w[1].ser - w[0].ser - 3.0 * w[0].stderr).sum::<f64>();
        assert!(excess <= 0.0, "{method}: {excess}");
    }
}
