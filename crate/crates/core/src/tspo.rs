//! Group-relative optimization of the temporal sampling policy.
//!
//! The answering model is frozen, so its likelihood ratio is identically one
//! and the objective reduces to the selection policy alone:
//!
//! ```text
//! J(θ) = (1/G) Σ_i  π_ts(V_s,i | q, V_c; θ) / π_ts(V_s,i | q, V_c; θ_old) · A_i
//! ```
//!
//! with optional PPO-style clipping and a KL penalty against the initial
//! agent.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentConfig, AgentForward, AgentParameters, SelectionAction};
use crate::datapipe::{Dataset, SpliceSample};
use crate::error::{Error, Result};
use crate::numerics::AttentionParams;
use crate::optim::Adam;
use crate::worldsim::{self, Style};

/// Answer-accuracy reward: 1 when the predicted option is the key.
pub fn reward_answer(predicted: usize, answer_key: usize) -> f64 {
    if predicted == answer_key {
        1.0
    } else {
        0.0
    }
}

/// Temporal-locating reward: fraction of sampled frames inside the target.
pub fn reward_temporal(sampled: &[usize], target_mask: &[bool]) -> Result<f64> {
    if sampled.is_empty() {
        return Err(Error::invalid("temporal reward of an empty selection"));
    }
    let mut hits = 0usize;
    for &i in sampled {
        match target_mask.get(i) {
            Some(true) => hits += 1,
            Some(false) => {}
            None => {
                return Err(Error::invalid(format!(
                    "sampled index {i} outside a {}-frame mask",
                    target_mask.len()
                )))
            }
        }
    }
    Ok(hits as f64 / sampled.len() as f64)
}

/// `R_A + 1` for comprehensive data, `R_A + R_T` for needle data.
pub fn total_reward(style: Style, answer: f64, temporal: f64) -> f64 {
    match style {
        Style::Comprehensive => answer + 1.0,
        Style::Needle => answer + temporal,
    }
}

/// `(r_i − mean) / (population std + 1e-8)`; all zeros when the rewards are
/// identical.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Rollouts per sample `G`.
    pub group_size: usize,
    pub learning_rate: f64,
    /// Optimizer updates per rollout group `μ`.
    pub inner_epochs: usize,
    pub clip_epsilon: Option<f64>,
    /// KL weight against the initial agent.
    pub kl_beta: Option<f64>,
    /// Keyframes per rollout during training.
    pub train_select: usize,
    pub seed: u64,
    /// Record elapsed time in metrics. Off keeps metric logs reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 5e-4,
            inner_epochs: 1,
            clip_epsilon: None,
            kl_beta: None,
            train_select: 16,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid(format!(
                "group size must be >= 2, got {}",
                self.group_size
            )));
        }
        if self.inner_epochs == 0 {
            return Err(Error::invalid("inner epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid(format!(
                    "clip epsilon must be > 0, got {eps}"
                )));
            }
        }
        if let Some(beta) = self.kl_beta {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Error::invalid(format!("KL beta must be >= 0, got {beta}")));
            }
        }
        if self.train_select == 0 {
            return Err(Error::invalid("train select count must be >= 1"));
        }
        Ok(())
    }
}

/// G rollouts on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub actions: Vec<SelectionAction>,
    pub answer_rewards: Vec<f64>,
    pub temporal_rewards: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_sum_log_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: AgentParameters,
    /// Parameters that generated the current rollout group.
    pub old_params: AgentParameters,
    /// Initial parameters, the KL reference.
    pub reference: AgentParameters,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(agent: &AgentConfig, config: &TrainerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = AgentParameters::init(agent.feature_dim, &mut rng);
        Self {
            step: 0,
            old_params: params.clone(),
            reference: params.clone(),
            optimizer: Adam::new(agent.feature_dim, config.learning_rate),
            params,
            rng,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_answer_reward: f64,
    pub mean_temporal_reward: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub wall_time_s: f64,
}

/// Value of the surrogate and its derivative with respect to each new
/// log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub ratios: Vec<f64>,
    pub d_new_log_probs: Vec<f64>,
}

/// Evaluates the group objective from log-likelihoods.
///
/// `reference` holds the KL reference log-likelihoods and is required when
/// `config.kl_beta` is set. The KL term uses the unbiased estimator
/// `exp(ref − new) − (ref − new) − 1`.
pub fn tspo_objective(
    new: &[f64],
    old: &[f64],
    advantages: &[f64],
    reference: Option<&[f64]>,
    config: &TrainerConfig,
) -> Result<ObjectiveValue> {
    let g = new.len();
    if old.len() != g || advantages.len() != g || reference.is_some_and(|r| r.len() != g) {
        return Err(Error::shape("objective inputs have different lengths"));
    }
    if g == 0 {
        return Err(Error::invalid("objective over an empty group"));
    }
    if new.iter().chain(old).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    let inv_g = 1.0 / g as f64;
    let mut objective = 0.0;
    let mut ratios = Vec::with_capacity(g);
    let mut grads = Vec::with_capacity(g);
    for i in 0..g {
        let ratio = (new[i] - old[i]).exp();
        let a = advantages[i];
        let (term, d_ratio) = match config.clip_epsilon {
            None => (ratio * a, a),
            Some(eps) => {
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                if ratio * a <= clipped {
                    (ratio * a, a)
                } else {
                    (clipped, 0.0)
                }
            }
        };
        objective += inv_g * term;
        let mut d_new = inv_g * d_ratio * ratio;
        if let Some(beta) = config.kl_beta {
            let r = reference
                .ok_or_else(|| Error::invalid("KL penalty needs reference log-likelihoods"))?[i];
            let diff = r - new[i];
            objective -= inv_g * beta * (diff.exp() - diff - 1.0);
            d_new -= inv_g * beta * (1.0 - diff.exp());
        }
        ratios.push(ratio);
        grads.push(d_new);
    }
    if !objective.is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    Ok(ObjectiveValue {
        objective,
        ratios,
        d_new_log_probs: grads,
    })
}

/// Objective under `params` for a fixed rollout group, together with its
/// gradient with respect to the attention parameters.
pub fn surrogate_and_gradient(
    params: &AgentParameters,
    sample: &SpliceSample,
    group: &RolloutGroup,
    reference_log_probs: Option<&[f64]>,
    agent_cfg: &AgentConfig,
    config: &TrainerConfig,
) -> Result<(ObjectiveValue, AttentionParams)> {
    let forward = AgentForward::run(&sample.frames, &sample.query.embedding, params, agent_cfg)?;
    let new: Vec<f64> = group
        .actions
        .iter()
        .map(|a| agent::selection_log_prob(forward.fused(), a, agent_cfg))
        .collect::<Result<_>>()?;
    let value = tspo_objective(
        &new,
        &group.old_sum_log_probs,
        &group.advantages,
        reference_log_probs,
        config,
    )?;
    let mut d_scores = vec![0.0; sample.candidate_count()];
    for (action, &coef) in group.actions.iter().zip(&value.d_new_log_probs) {
        if coef == 0.0 {
            continue;
        }
        let g = agent::selection_score_gradient(forward.fused(), action, agent_cfg)?;
        crate::numerics::axpy(&mut d_scores, coef, &g);
    }
    let grad = forward.param_gradient(&d_scores)?;
    Ok((value, grad))
}

/// Draws G actions under `params` and scores them with the frozen answerer.
pub fn rollout_group(
    params: &AgentParameters,
    sample: &SpliceSample,
    agent_cfg: &AgentConfig,
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup> {
    let forward = AgentForward::run(&sample.frames, &sample.query.embedding, params, agent_cfg)?;
    let mut group = RolloutGroup {
        actions: Vec::with_capacity(config.group_size),
        answer_rewards: Vec::with_capacity(config.group_size),
        temporal_rewards: Vec::with_capacity(config.group_size),
        rewards: Vec::with_capacity(config.group_size),
        advantages: Vec::new(),
        old_sum_log_probs: Vec::with_capacity(config.group_size),
    };
    for _ in 0..config.group_size {
        let action = agent::sample_selection(forward.fused(), agent_cfg, rng)?;
        let answer = worldsim::oracle_answer(&sample.query, &action.indices, rng);
        let r_a = reward_answer(answer, sample.answer_key());
        let r_t = reward_temporal(&action.indices, &sample.target_mask)?;
        group.rewards.push(total_reward(sample.style, r_a, r_t));
        group.answer_rewards.push(r_a);
        group.temporal_rewards.push(r_t);
        group.old_sum_log_probs.push(action.sum_log_prob);
        group.actions.push(action);
    }
    group.advantages = compute_advantages(&group.rewards);
    Ok(group)
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: MetricsRecord,
    pub group: RolloutGroup,
    /// Ratios seen at each inner update, in order.
    pub ratios: Vec<Vec<f64>>,
}

/// Roll out, reward, normalize, then ascend the surrogate for `μ` updates.
pub fn train_step(
    state: &mut TrainState,
    sample: &SpliceSample,
    agent_cfg: &AgentConfig,
    config: &TrainerConfig,
) -> Result<StepOutcome> {
    let started = Instant::now();
    let rollout_cfg = agent_cfg.with_select_count(config.train_select);
    if sample.candidate_count() < config.train_select {
        return Err(Error::invalid(format!(
            "sample has {} candidates, training selects {}",
            sample.candidate_count(),
            config.train_select
        )));
    }
    state.old_params = state.params.clone();
    let group = rollout_group(
        &state.old_params,
        sample,
        &rollout_cfg,
        config,
        &mut state.rng,
    )?;

    let reference_log_probs = match config.kl_beta {
        Some(_) => {
            let fwd = AgentForward::run(
                &sample.frames,
                &sample.query.embedding,
                &state.reference,
                &rollout_cfg,
            )?;
            Some(
                group
                    .actions
                    .iter()
                    .map(|a| agent::selection_log_prob(fwd.fused(), a, &rollout_cfg))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let mut all_ratios = Vec::with_capacity(config.inner_epochs);
    let mut last = None;
    for _ in 0..config.inner_epochs {
        let (value, grad) = surrogate_and_gradient(
            &state.params,
            sample,
            &group,
            reference_log_probs.as_deref(),
            &rollout_cfg,
            config,
        )?;
        state.optimizer.ascend(&mut state.params.attn, &grad);
        all_ratios.push(value.ratios.clone());
        last = Some((value, grad.norm()));
    }
    let (value, grad_norm) = last.expect("at least one inner epoch");
    state.step += 1;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let flat = all_ratios.iter().flatten();
    let metrics = MetricsRecord {
        step: state.step,
        mean_reward: mean(&group.rewards),
        mean_answer_reward: mean(&group.answer_rewards),
        mean_temporal_reward: mean(&group.temporal_rewards),
        objective: value.objective,
        grad_norm,
        min_ratio: flat.clone().copied().fold(f64::INFINITY, f64::min),
        max_ratio: flat.copied().fold(f64::NEG_INFINITY, f64::max),
        wall_time_s: if config.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok(StepOutcome {
        metrics,
        group,
        ratios: all_ratios,
    })
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs<'a> {
    pub metrics: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    /// Also checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

/// One pass over `dataset[state.step..]` with batch size one.
///
/// A fresh run truncates the metrics log; a resumed run (`state.step > 0`)
/// appends to it.
pub fn train(
    state: &mut TrainState,
    dataset: &Dataset,
    agent_cfg: &AgentConfig,
    config: &TrainerConfig,
    outputs: &TrainOutputs<'_>,
) -> Result<Vec<MetricsRecord>> {
    agent_cfg.validate()?;
    config.validate()?;
    if dataset.feature_dim != agent_cfg.feature_dim {
        return Err(Error::shape(format!(
            "dataset has dimension {}, agent expects {}",
            dataset.feature_dim, agent_cfg.feature_dim
        )));
    }
    let mut log = match outputs.metrics {
        Some(path) => {
            let file = if state.step > 0 {
                OpenOptions::new().append(true).create(true).open(path)
            } else {
                File::create(path)
            }
            .map_err(|e| Error::io(path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut records = Vec::new();
    let start = state.step.min(dataset.len());
    for sample in &dataset.samples[start..] {
        let outcome = train_step(state, sample, agent_cfg, config)?;
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(&outcome.metrics).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(*path, e))?;
        }
        if let (Some(path), Some(every)) = (outputs.checkpoint, outputs.checkpoint_every) {
            if every > 0 && state.step.is_multiple_of(every) {
                crate::checkpoint::save_checkpoint(path, agent_cfg, state)?;
            }
        }
        records.push(outcome.metrics);
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = outputs.checkpoint {
        crate::checkpoint::save_checkpoint(path, agent_cfg, state)?;
    }
    Ok(records)
}

/// Parses a metrics log written by [`train`].
pub fn parse_metrics_log(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::at_line(i + 1, e.to_string())))
        .collect()
}
