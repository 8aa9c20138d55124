//! The event-aware temporal agent.
//!
//! Candidate frames are refined by local-window attention into event
//! features, scored against the query by two cosine similarities, and a
//! keyframe subset is drawn by Gumbel-perturbed top-K over
//! `softmax(S/τ + γ)`. The likelihood of a subset is the product of the
//! selected probabilities, handled in log space throughout.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    self, dot, local_window_attention_backward, local_window_attention_forward, norm,
    AttentionCache, AttentionParams, Matrix,
};

/// How a stored action's likelihood is recomputed under new parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseReuse {
    /// Reuse the Gumbel noise drawn at rollout time.
    #[default]
    Stored,
    /// Evaluate the plain `softmax(S/τ)`.
    NoiseFree,
}

impl NoiseReuse {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseReuse::Stored => "stored",
            NoiseReuse::NoiseFree => "noise-free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stored" => Some(NoiseReuse::Stored),
            "noise-free" => Some(NoiseReuse::NoiseFree),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub feature_dim: usize,
    /// Local attention window `w`.
    pub window: usize,
    /// Softmax temperature `τ`.
    pub temperature: f64,
    /// Number of keyframes `T_s`.
    pub select_count: usize,
    /// Weight of the frame-level similarity in the fused score.
    pub sim_fusion_weight: f64,
    pub noise_reuse: NoiseReuse,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            window: 12,
            temperature: 0.025,
            select_count: 16,
            sim_fusion_weight: 1.0,
            noise_reuse: NoiseReuse::Stored,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "feature dimension must be even and positive, got {}",
                self.feature_dim
            )));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.select_count == 0 {
            return Err(Error::invalid("select count must be at least 1"));
        }
        if !self.sim_fusion_weight.is_finite() {
            return Err(Error::invalid("fusion weight must be finite"));
        }
        Ok(())
    }

    pub fn with_select_count(&self, select_count: usize) -> Self {
        Self {
            select_count,
            ..self.clone()
        }
    }
}

/// Learnable parameters of the agent: the attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParameters {
    pub attn: AttentionParams,
}

impl AgentParameters {
    /// Near-identity start: `W_q, W_k ~ N(0, 0.02²)`, `W_v = I + N(0, 0.02²)`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |identity: bool| {
            let mut m = if identity {
                Matrix::identity(dim)
            } else {
                Matrix::zeros(dim, dim)
            };
            for v in m.as_mut_slice() {
                *v += normal.sample(rng);
            }
            m
        };
        let w_q = draw(false);
        let w_k = draw(false);
        let w_v = draw(true);
        Self {
            attn: AttentionParams { w_q, w_k, w_v },
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            attn: AttentionParams::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }
}

/// Per-frame similarities and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub sim_event: Vec<f64>,
    pub sim_frame: Vec<f64>,
    pub fused: Vec<f64>,
}

/// One sampled keyframe combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAction {
    /// Selected frames, ascending.
    pub indices: Vec<usize>,
    /// `log P` of each selected frame, aligned with `indices`.
    pub log_probs: Vec<f64>,
    /// Gumbel noise over all candidates (zeros for deterministic selection).
    pub gumbel_noise: Vec<f64>,
    pub sum_log_prob: f64,
}

/// Refined event representation `F_e`.
pub fn encode_events(
    frames: &Matrix,
    params: &AgentParameters,
    config: &AgentConfig,
) -> Result<Matrix> {
    check_frames(frames, config)?;
    Ok(local_window_attention_forward(frames, &params.attn, config.window)?.0)
}

fn check_frames(frames: &Matrix, config: &AgentConfig) -> Result<()> {
    if frames.cols() != config.feature_dim {
        return Err(Error::shape(format!(
            "frames have dimension {}, agent expects {}",
            frames.cols(),
            config.feature_dim
        )));
    }
    Ok(())
}

/// `S = cos(F_e, F_t) + weight · cos(F_f, F_t)` per frame.
pub fn score_frames(
    events: &Matrix,
    frames: &Matrix,
    query: &[f64],
    config: &AgentConfig,
) -> Result<ScoreBreakdown> {
    if events.shape() != frames.shape() {
        return Err(Error::shape(format!(
            "event features {:?} and frame features {:?} differ",
            events.shape(),
            frames.shape()
        )));
    }
    if query.len() != frames.cols() {
        return Err(Error::shape(format!(
            "query has dimension {}, frames have {}",
            query.len(),
            frames.cols()
        )));
    }
    let mut sim_event = Vec::with_capacity(frames.rows());
    let mut sim_frame = Vec::with_capacity(frames.rows());
    for t in 0..frames.rows() {
        sim_event.push(numerics::cosine_similarity(events.row(t), query)?);
        sim_frame.push(numerics::cosine_similarity(frames.row(t), query)?);
    }
    let fused = sim_event
        .iter()
        .zip(&sim_frame)
        .map(|(e, f)| e + config.sim_fusion_weight * f)
        .collect();
    Ok(ScoreBreakdown {
        sim_event,
        sim_frame,
        fused,
    })
}

/// A scored forward pass, kept so several actions can be differentiated
/// against one encoding.
#[derive(Debug, Clone)]
pub struct AgentForward {
    cache: AttentionCache,
    events: Matrix,
    query: Vec<f64>,
    pub scores: ScoreBreakdown,
}

impl AgentForward {
    pub fn run(
        frames: &Matrix,
        query: &[f64],
        params: &AgentParameters,
        config: &AgentConfig,
    ) -> Result<Self> {
        check_frames(frames, config)?;
        let (events, cache) = local_window_attention_forward(frames, &params.attn, config.window)?;
        let scores = score_frames(&events, frames, query, config)?;
        Ok(Self {
            cache,
            events,
            query: query.to_vec(),
            scores,
        })
    }

    pub fn events(&self) -> &Matrix {
        &self.events
    }

    pub fn fused(&self) -> &[f64] {
        &self.scores.fused
    }

    /// Pulls a gradient on the fused scores back to the attention
    /// parameters. Only the event similarity depends on them.
    pub fn param_gradient(&self, d_scores: &[f64]) -> Result<AttentionParams> {
        let (len, dim) = self.events.shape();
        if d_scores.len() != len {
            return Err(Error::shape(format!(
                "{} score gradients for {len} frames",
                d_scores.len()
            )));
        }
        let q_norm = norm(&self.query);
        let mut upstream = Matrix::zeros(len, dim);
        for (t, &g) in d_scores.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let e = self.events.row(t);
            let e_norm = norm(e);
            let cos = dot(e, &self.query) / (e_norm * q_norm);
            let dst = upstream.row_mut(t);
            for ((d, &qi), &ei) in dst.iter_mut().zip(&self.query).zip(e) {
                *d = g * (qi / (e_norm * q_norm) - cos * ei / (e_norm * e_norm));
            }
        }
        Ok(local_window_attention_backward(&self.cache, &upstream)?.1)
    }
}

/// Draws `γ_j ~ Gumbel(0, 1)` for each of `n` candidates.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    (0..n).map(|_| gumbel.sample(rng)).collect()
}

/// Gumbel top-K draw over the fused scores.
pub fn sample_selection<R: Rng + ?Sized>(
    scores: &[f64],
    config: &AgentConfig,
    rng: &mut R,
) -> Result<SelectionAction> {
    check_select_count(scores.len(), config)?;
    let noise = gumbel_noise(scores.len(), rng);
    select_with_noise(scores, config, noise)
}

/// Noise-free top-K used at inference.
pub fn deterministic_selection(scores: &[f64], config: &AgentConfig) -> Result<SelectionAction> {
    select_with_noise(scores, config, vec![0.0; scores.len()])
}

fn check_select_count(candidates: usize, config: &AgentConfig) -> Result<()> {
    if config.select_count > candidates {
        return Err(Error::invalid(format!(
            "cannot select {} of {candidates} candidate frames",
            config.select_count
        )));
    }
    if config.select_count == 0 {
        return Err(Error::invalid("select count must be at least 1"));
    }
    Ok(())
}

fn perturbed_logits(scores: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    scores
        .iter()
        .zip(noise)
        .map(|(s, g)| s / temperature + g)
        .collect()
}

/// Top-K of `softmax(S/τ + noise)` with a caller-supplied noise vector.
/// Ties go to the lower index.
pub fn select_with_noise(
    scores: &[f64],
    config: &AgentConfig,
    noise: Vec<f64>,
) -> Result<SelectionAction> {
    check_select_count(scores.len(), config)?;
    if noise.len() != scores.len() {
        return Err(Error::shape(format!(
            "{} noise values for {} candidates",
            noise.len(),
            scores.len()
        )));
    }
    let logits = perturbed_logits(scores, &noise, config.temperature);
    let log_p = numerics::log_softmax(&logits)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut indices = order[..config.select_count].to_vec();
    indices.sort_unstable();

    let log_probs: Vec<f64> = indices.iter().map(|&i| log_p[i]).collect();
    let sum_log_prob = log_probs.iter().sum();
    Ok(SelectionAction {
        indices,
        log_probs,
        gumbel_noise: noise,
        sum_log_prob,
    })
}

fn reevaluation_noise<'a>(
    action: &'a SelectionAction,
    len: usize,
    config: &AgentConfig,
    zeros: &'a mut Vec<f64>,
) -> Result<&'a [f64]> {
    if let Some(&bad) = action.indices.iter().find(|&&i| i >= len) {
        return Err(Error::invalid(format!(
            "selected index {bad} out of range for {len} candidates"
        )));
    }
    match config.noise_reuse {
        NoiseReuse::Stored => {
            if action.gumbel_noise.len() != len {
                return Err(Error::shape(format!(
                    "stored noise has {} entries for {len} candidates",
                    action.gumbel_noise.len()
                )));
            }
            Ok(&action.gumbel_noise)
        }
        NoiseReuse::NoiseFree => {
            *zeros = vec![0.0; len];
            Ok(zeros)
        }
    }
}

/// `Σ_i log softmax(S/τ + γ)[I_i]` for a stored action under new scores.
pub fn selection_log_prob(
    scores: &[f64],
    action: &SelectionAction,
    config: &AgentConfig,
) -> Result<f64> {
    let mut zeros = Vec::new();
    let noise = reevaluation_noise(action, scores.len(), config, &mut zeros)?;
    let log_p = numerics::log_softmax(&perturbed_logits(scores, noise, config.temperature))?;
    Ok(action.indices.iter().map(|&i| log_p[i]).sum())
}

/// `∂ selection_log_prob / ∂ S_j = (1[j ∈ I] − K·p_j) / τ`.
pub fn selection_score_gradient(
    scores: &[f64],
    action: &SelectionAction,
    config: &AgentConfig,
) -> Result<Vec<f64>> {
    let mut zeros = Vec::new();
    let noise = reevaluation_noise(action, scores.len(), config, &mut zeros)?;
    let p = numerics::softmax(&perturbed_logits(scores, noise, config.temperature))?;
    let k = action.indices.len() as f64;
    let mut grad: Vec<f64> = p.iter().map(|pj| -k * pj / config.temperature).collect();
    for &i in &action.indices {
        grad[i] += 1.0 / config.temperature;
    }
    // `1 − K·p_top` cancels badly when the top entry is nearly certain;
    // rewrite it through the complement mass.
    let top = numerics::argmax(&p);
    if action.indices.contains(&top) {
        let others: f64 = p
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, q)| q)
            .sum();
        grad[top] = (others - (k - 1.0) * p[top]) / config.temperature;
    }
    Ok(grad)
}

/// Gradient of an action's log-likelihood with respect to the attention
/// parameters, by the chain rule through softmax, cosine fusion and
/// attention.
pub fn selection_log_prob_grad(
    frames: &Matrix,
    query: &[f64],
    params: &AgentParameters,
    action: &SelectionAction,
    config: &AgentConfig,
) -> Result<AttentionParams> {
    let forward = AgentForward::run(frames, query, params, config)?;
    let d_scores = selection_score_gradient(forward.fused(), action, config)?;
    forward.param_gradient(&d_scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(dim: usize, k: usize) -> AgentConfig {
        AgentConfig {
            feature_dim: dim,
            select_count: k,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn deterministic_selection_examples() {
        let c = AgentConfig {
            temperature: 1.0,
            ..cfg(4, 2)
        };
        let a = deterministic_selection(&[3.0, 1.0, 2.0, 0.0], &c).unwrap();
        assert_eq!(a.indices, vec![0, 2]);

        let a = deterministic_selection(&[0.5; 4], &c).unwrap();
        assert_eq!(a.indices, vec![0, 1]);

        let s = [0.2, -1.0, 0.7, 0.1, 0.4];
        let a = deterministic_selection(&s, &cfg(4, 3)).unwrap();
        let lp = numerics::log_softmax(&s.map(|v| v / 0.025)).unwrap();
        for (i, &idx) in a.indices.iter().enumerate() {
            assert_eq!(a.log_probs[i], lp[idx]);
        }
        assert_eq!(a.sum_log_prob, a.log_probs.iter().sum::<f64>());
    }

    #[test]
    fn selecting_more_than_available_fails() {
        assert!(deterministic_selection(&[0.0; 3], &cfg(4, 4)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_selection(&[0.0; 3], &cfg(4, 4), &mut rng).is_err());
    }

    #[test]
    fn zero_noise_matches_deterministic() {
        let s = [0.3, 0.9, -0.2, 0.5, 0.1, 0.8];
        let c = cfg(4, 3);
        assert_eq!(
            select_with_noise(&s, &c, vec![0.0; 6]).unwrap(),
            deterministic_selection(&s, &c).unwrap()
        );
    }

    #[test]
    fn uniform_scores_log_prob() {
        let c = cfg(4, 16);
        let s = vec![0.3; 128];
        let a = deterministic_selection(&s, &c).unwrap();
        let lp = selection_log_prob(&s, &a, &c).unwrap();
        assert!((lp + 16.0 * 128f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn log_prob_consistent_with_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = cfg(4, 5);
        let a = sample_selection(&s, &c, &mut rng).unwrap();
        assert_eq!(selection_log_prob(&s, &a, &c).unwrap(), a.sum_log_prob);
        assert!(a.log_probs.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn noise_free_reevaluation_ignores_stored_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = AgentConfig {
            noise_reuse: NoiseReuse::NoiseFree,
            ..cfg(4, 3)
        };
        let a = sample_selection(&s, &c, &mut rng).unwrap();
        let lp = numerics::log_softmax(&s.iter().map(|v| v / c.temperature).collect::<Vec<_>>())
            .unwrap();
        let expected: f64 = a.indices.iter().map(|&i| lp[i]).sum();
        assert_eq!(selection_log_prob(&s, &a, &c).unwrap(), expected);
    }

    #[test]
    fn out_of_range_action_rejected() {
        let c = cfg(4, 2);
        let a = deterministic_selection(&[0.0; 6], &c).unwrap();
        let bad = SelectionAction {
            indices: vec![1, 9],
            ..a
        };
        assert!(matches!(
            selection_log_prob(&[0.0; 6], &bad, &c),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn score_examples() {
        let c = cfg(4, 1);
        let q = vec![0.2, -0.5, 0.1, 0.9];
        let f = Matrix::from_rows(&[q.clone(), vec![0.5, 0.2, 0.0, 0.0]]).unwrap();
        let e = Matrix::from_rows(&[q.clone(), q.clone()]).unwrap();
        let s = score_frames(&e, &f, &q, &c).unwrap();
        assert!((s.fused[0] - 2.0).abs() < 1e-12);
        // second frame is orthogonal to the query
        assert!((s.fused[1] - 1.0).abs() < 1e-12);
        let zero = Matrix::from_rows(&[vec![0.0; 4], q.clone()]).unwrap();
        assert!(matches!(
            score_frames(&e, &zero, &q, &c),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_params_encode_is_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f =
            Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e = encode_events(&f, &AgentParameters::zeros(4), &cfg(4, 1)).unwrap();
        let mut expected = f.clone();
        expected.add_scaled(1.0, &numerics::sinusoidal_pe(5, 4).unwrap());
        assert_eq!(e, expected);

        let one = Matrix::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let params = AgentParameters::init(4, &mut rng);
        let e = encode_events(&one, &params, &cfg(4, 1)).unwrap();
        let xp = [0.1, 1.2, 0.3, 1.4];
        let v = params.attn.w_v.mul_vec(&xp);
        for d in 0..4 {
            assert!((e.get(0, d) - (xp[d] + v[d])).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_dimension() {
        let f = Matrix::zeros(3, 6);
        assert!(matches!(
            encode_events(&f, &AgentParameters::zeros(4), &cfg(4, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn score_gradient_scales_inversely_with_temperature() {
        let s = [0.1, 0.0, -0.1, 0.05];
        let c1 = AgentConfig {
            temperature: 1.0,
            ..cfg(4, 2)
        };
        let c2 = AgentConfig {
            temperature: 2.0,
            ..c1.clone()
        };
        let a = deterministic_selection(&s, &c1).unwrap();
        // at high temperature the softmax is nearly flat, so the gradient
        // is dominated by the 1/τ factor
        let g1 = selection_score_gradient(&s.map(|v| v * 1e-9), &a, &c1).unwrap();
        let g2 = selection_score_gradient(&s.map(|v| v * 1e-9), &a, &c2).unwrap();
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - 2.0 * y).abs() < 1e-8);
        }
    }

    #[test]
    fn init_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AgentParameters::init(16, &mut rng);
        for i in 0..16 {
            assert!((p.attn.w_v.get(i, i) - 1.0).abs() < 0.15);
        }
        assert!(p.attn.w_q.as_slice().iter().all(|v| v.abs() < 0.15));
    }
}
