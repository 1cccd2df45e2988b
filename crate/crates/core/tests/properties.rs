use std::collections::BTreeMap;

use defined_core::baselines::{lmmse_estimate, mlsd_detect, PilotBlock};
use defined_core::channel::{generate_frame, sample_task, task_rng, Fading, FrameSpec, SnrRange};
use defined_core::cli::RunManifest;
use defined_core::constellation::{Constellation, Scheme};
use defined_core::eval::{gain_df, CurvePoint, EvalCurve};
use defined_core::model::{forward, load_checkpoint, save_checkpoint, ModelConfig, TrainingStage, TransformerParams};
use defined_core::training::{icl_batch, Curriculum};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(scheme: Scheme, seed: u64) -> TransformerParams {
    let cfg = ModelConfig::new(scheme, 1, 1).with_size(8, 2, 2);
    let mut p = TransformerParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.as_mut_slice() {
        *v += rng.random_range(-0.3..0.3);
    }
    p
}

fn prompt(params: &TransformerParams, len: usize, snr: f64, seed: u64) -> defined_core::model::TokenSequence {
    let cfg = params.config();
    let spec = FrameSpec {
        scheme: cfg.scheme,
        n_t: 1,
        n_r: 1,
        fading: Fading::Rayleigh,
        snr: SnrRange::fixed(snr),
        len,
        pilots: 1,
    };
    let frame = spec.frame(&Constellation::new(cfg.scheme), seed, 0).unwrap();
    icl_batch(cfg, &[frame]).unwrap().remove(0).tokens
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn outputs_are_distributions(seed in 0u64..1000, len in 2usize..10, snr in 0.0f64..40.0) {
        let params = small_model(Scheme::Qam16, seed);
        let logits = forward(&params, &prompt(&params, len, snr, seed)).unwrap();
        for t in 0..logits.rows() {
            let p = logits.probabilities(t);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn past_logits_ignore_future_tokens(seed in 0u64..1000, len in 2usize..10, cut_frac in 0.0f64..1.0, noise in -5.0f64..5.0) {
        let params = small_model(Scheme::Qpsk, seed);
        let seq = prompt(&params, len, 15.0, seed);
        let cut = ((seq.len() - 1) as f64 * cut_frac) as usize;
        let mut other = seq.clone();
        for i in cut + 1..seq.len() {
            for v in other.token_mut(i) {
                *v += noise;
            }
        }
        let a = forward(&params, &seq).unwrap();
        let b = forward(&params, &other).unwrap();
        for t in (0..a.rows()).filter(|t| 2 * t <= cut) {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }

    #[test]
    fn manifest_roundtrip(entries in proptest::collection::btree_map("[a-z][a-z0-9._-]{0,12}", "\\PC{0,20}|[ \t\\\\\r\n=#]{0,6}", 0..8)) {
        let m = RunManifest { entries: entries.into_iter().collect::<BTreeMap<_, _>>() };
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn curve_csv_roundtrip(sers in proptest::collection::vec(0.0f64..1.0, 1..31), n in 1u64..100_000) {
        let points: Vec<CurvePoint> = sers.iter().enumerate()
            .map(|(i, &p)| CurvePoint { length: i + 1, ser: p, stderr: (p * (1.0 - p) / n as f64).sqrt() })
            .collect();
        let t = points.len() + 1;
        let curve = EvalCurve { gain_df: gain_df(&points, 1, t), points, omitted: Vec::new() };
        prop_assert_eq!(EvalCurve::parse_csv(&curve.to_csv()).unwrap(), curve);
    }

    #[test]
    fn gain_formula(first in 0.0f64..1.0, last in 0.0f64..1.0) {
        let pts = [
            CurvePoint { length: 1, ser: first, stderr: 0.0 },
            CurvePoint { length: 30, ser: last, stderr: 0.0 },
        ];
        match gain_df(&pts, 1, 31) {
            None => prop_assert_eq!(first, 0.0),
            Some(g) => {
                prop_assert!((g - (first - last) / first * 100.0).abs() < 1e-9);
                prop_assert_eq!(g > 0.0, last < first);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(seed in 0u64..1000, stage in 0usize..3) {
        let params = small_model(Scheme::Bpsk, seed);
        let stage = [TrainingStage::Initialized, TrainingStage::Icl, TrainingStage::Finetuned][stage];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &params, stage).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.stage, stage);
        prop_assert_eq!(back.params.config(), params.config());
        // stored as f32
        for (a, b) in back.params.as_slice().iter().zip(params.as_slice()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn noiseless_lmmse_recovers_channel(seed in 0u64..10_000, n_t in 1usize..4, n_r in 1usize..4, extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cm = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = cm(n_r, n_t);
        let x = cm(n_t, n_t + extra);
        let gram_det = (&x * x.adjoint()).determinant().norm();
        prop_assume!(gram_det > 1e-3);
        let est = lmmse_estimate(&PilotBlock::new(x.clone(), &h * &x, 0.0).unwrap()).unwrap();
        for (a, b) in est.h_hat.iter().zip(h.iter()) {
            prop_assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn mlsd_follows_common_rotation(seed in 0u64..10_000, quarter in 0usize..4, len in 2usize..6) {
        // a global rotation of the received block and the reference symbol
        // rotates the detected sequence the same way
        let con = Constellation::new(Scheme::Qpsk);
        let mut rng = task_rng(seed, 0);
        let task = sample_task(Fading::Rayleigh, SnrRange::fixed(8.0), 1, 1, &mut rng);
        let f = generate_frame(&task, &con, len, 1, &mut rng).unwrap();
        let y: Vec<Complex64> = f.y.iter().map(|v| v[0]).collect();
        let rot = Complex64::i().powu(quarter as u32);
        let index_of = |p: Complex64| con.points().iter().position(|q| (q - p).norm() < 1e-12).unwrap();
        let base = mlsd_detect(&y, task.sigma2, &con, f.x_indices[0], 8).unwrap();
        let y_rot: Vec<Complex64> = y.iter().map(|v| v * rot).collect();
        let first_rot = index_of(con.points()[f.x_indices[0]] * rot);
        let turned = mlsd_detect(&y_rot, task.sigma2, &con, first_rot, 8).unwrap();
        let expected: Vec<usize> = base.iter().map(|&i| index_of(con.points()[i] * rot)).collect();
        prop_assert_eq!(turned, expected);
    }

    #[test]
    fn curriculum_grows_to_full_length(t_start in 2usize..31, t_step in 1usize..8, per in 1usize..4, t_max in 2usize..32) {
        prop_assume!(t_start <= t_max);
        let c = Curriculum { enabled: true, t_start, t_step, epochs_per_stage: per };
        let mut prev = 0;
        for epoch in 0..200 {
            let len = c.length_at(epoch, t_max);
            prop_assert!(len >= prev && len <= t_max && len >= t_start.min(t_max));
            prev = len;
        }
        prop_assert_eq!(prev, t_max);
        let off = Curriculum { enabled: false, ..c };
        prop_assert_eq!(off.length_at(0, t_max), t_max);
    }
}
