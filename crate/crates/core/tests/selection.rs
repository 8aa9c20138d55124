use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tspo_core::agent::{
    self, deterministic_selection, sample_selection, score_frames, select_with_noise,
    selection_log_prob, selection_log_prob_grad, AgentConfig, AgentForward, AgentParameters,
    NoiseReuse,
};
use tspo_core::numerics::{finite_difference_gradient, relative_error, AttentionParams, Matrix};

fn cfg(dim: usize, window: usize, select: usize, tau: f64) -> AgentConfig {
    AgentConfig {
        feature_dim: dim,
        window,
        temperature: tau,
        select_count: select,
        sim_fusion_weight: 1.0,
        noise_reuse: NoiseReuse::Stored,
    }
}

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, dim, data).unwrap()
}

#[test]
fn uniform_scores_select_each_frame_equally() {
    let (tc, ts, draws) = (64, 16, 100_000);
    let c = cfg(2, 1, ts, 0.025);
    let scores = vec![0.3; tc];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = vec![0usize; tc];
    for _ in 0..draws {
        for i in sample_selection(&scores, &c, &mut rng).unwrap().indices {
            counts[i] += 1;
        }
    }
    let expected = ts as f64 / tc as f64;
    for (i, &n) in counts.iter().enumerate() {
        let freq = n as f64 / draws as f64;
        assert!((freq - expected).abs() < 0.01, "frame {i}: {freq}");
    }
}

#[test]
fn dominant_score_is_almost_always_selected() {
    let tau = 0.025;
    let c = cfg(2, 1, 4, tau);
    let mut scores = vec![0.0; 32];
    scores[17] = 10.0 * tau;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hits = (0..10_000)
        .filter(|_| {
            sample_selection(&scores, &c, &mut rng)
                .unwrap()
                .indices
                .contains(&17)
        })
        .count();
    assert!(hits as f64 / 10_000.0 >= 0.999, "{hits}");
}

#[test]
fn gumbel_noise_mean_is_euler_mascheroni() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = agent::gumbel_noise(1_000_000, &mut rng);
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    assert!((mean - 0.5772).abs() < 0.01, "{mean}");
}

#[test]
fn log_prob_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let tc = rng.gen_range(2..40);
        let ts = rng.gen_range(1..=tc);
        let tau = rng.gen_range(0.02..2.0);
        let c = cfg(2, 1, ts, tau);
        let scores: Vec<f64> = (0..tc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action = sample_selection(&scores, &c, &mut rng).unwrap();
        let new_scores: Vec<f64> = scores
            .iter()
            .map(|s| s + rng.gen_range(-0.05..0.05))
            .collect();
        let logits: Vec<f64> = new_scores
            .iter()
            .zip(&action.gumbel_noise)
            .map(|(s, g)| s / tau + g)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let brute: f64 = action
            .indices
            .iter()
            .map(|&i| ((logits[i] - m).exp() / z).ln())
            .sum();
        let got = selection_log_prob(&new_scores, &action, &c).unwrap();
        assert!(
            (got - brute).abs() < 1e-12 * brute.abs().max(1.0),
            "{got} vs {brute}"
        );
    }
}

#[test]
fn uniform_log_prob_is_k_log_n() {
    let c = cfg(2, 1, 16, 0.025);
    let scores = vec![0.1; 128];
    let action = deterministic_selection(&scores, &c).unwrap();
    let lp = selection_log_prob(&scores, &action, &c).unwrap();
    assert!((lp + 16.0 * 128f64.ln()).abs() < 1e-9);
    assert_eq!(action.indices, (0..16).collect::<Vec<_>>());
}

#[test]
fn scores_equal_brute_force_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tc, d) = (10, 6);
    let frames = unit_rows(tc, d, &mut rng);
    let events = Matrix::from_vec(
        tc,
        d,
        (0..tc * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut c = cfg(d, 3, 2, 0.025);
    c.sim_fusion_weight = 0.7;
    let s = score_frames(&events, &frames, &query, &c).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
            * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for t in 0..tc {
        let e = cos(events.row(t), &query);
        let f = cos(frames.row(t), &query);
        assert!((s.sim_event[t] - e).abs() < 1e-12);
        assert!((s.sim_frame[t] - f).abs() < 1e-12);
        assert!((s.fused[t] - (e + 0.7 * f)).abs() < 1e-12);
    }
}

#[test]
fn log_prob_gradient_matches_fd_on_small_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (tc, d) = (8, 4);
    let c = cfg(d, 3, 3, 0.025);
    let frames = unit_rows(tc, d, &mut rng);
    let query: Vec<f64> = unit_rows(1, d, &mut rng).row(0).to_vec();
    let params = AgentParameters::init(d, &mut rng);
    let fwd = AgentForward::run(&frames, &query, &params, &c).unwrap();
    let action = sample_selection(fwd.fused(), &c, &mut rng).unwrap();
    let analytic = selection_log_prob_grad(&frames, &query, &params, &action, &c).unwrap();
    let fd = finite_difference_gradient(
        |flat| {
            let p = AgentParameters {
                attn: AttentionParams::from_flat(d, flat)?,
            };
            selection_log_prob(
                AgentForward::run(&frames, &query, &p, &c)?.fused(),
                &action,
                &c,
            )
        },
        &params.attn.flatten(),
        1e-6,
    )
    .unwrap();
    let err = relative_error(&analytic.flatten(), &fd);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn noise_free_reevaluation_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (tc, d) = (7, 4);
    let mut c = cfg(d, 2, 2, 0.1);
    c.noise_reuse = NoiseReuse::NoiseFree;
    let frames = unit_rows(tc, d, &mut rng);
    let query: Vec<f64> = unit_rows(1, d, &mut rng).row(0).to_vec();
    let params = AgentParameters::init(d, &mut rng);
    let fwd = AgentForward::run(&frames, &query, &params, &c).unwrap();
    let action = sample_selection(fwd.fused(), &c, &mut rng).unwrap();
    let analytic = selection_log_prob_grad(&frames, &query, &params, &action, &c).unwrap();
    let fd = finite_difference_gradient(
        |flat| {
            let p = AgentParameters {
                attn: AttentionParams::from_flat(d, flat)?,
            };
            selection_log_prob(
                AgentForward::run(&frames, &query, &p, &c)?.fused(),
                &action,
                &c,
            )
        },
        &params.attn.flatten(),
        1e-6,
    )
    .unwrap();
    assert!(relative_error(&analytic.flatten(), &fd) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_noise_sampling_is_deterministic_selection(
        scores in prop::collection::vec(-1.0f64..1.0, 1..48),
        k_frac in 0.0f64..1.0,
    ) {
        let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
        let c = cfg(2, 1, k, 0.025);
        let zero = select_with_noise(&scores, &c, vec![0.0; scores.len()]).unwrap();
        let det = deterministic_selection(&scores, &c).unwrap();
        prop_assert_eq!(&zero.indices, &det.indices);
        prop_assert_eq!(&zero.log_probs, &det.log_probs);
        prop_assert_eq!(det.clone(), deterministic_selection(&scores, &c).unwrap());
    }

    #[test]
    fn score_shift_changes_nothing(
        scores in prop::collection::vec(-1.0f64..1.0, 2..32),
        shift in -3.0f64..3.0,
    ) {
        let c = cfg(2, 1, scores.len() / 2, 0.025);
        let a = deterministic_selection(&scores, &c).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let b = deterministic_selection(&shifted, &c).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn actions_are_well_formed(scores in prop::collection::vec(-1.0f64..1.0, 1..64), seed in any::<u64>()) {
        let k = scores.len().div_ceil(3);
        let c = cfg(2, 1, k, 0.025);
        let a = sample_selection(&scores, &c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.indices.len(), k);
        prop_assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.log_probs.iter().all(|&l| l <= 0.0 && l.is_finite()));
        prop_assert!((a.sum_log_prob - a.log_probs.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert_eq!(a.sum_log_prob, selection_log_prob(&scores, &a, &c).unwrap());
    }
}
