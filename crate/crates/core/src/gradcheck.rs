//! Randomized analytic-vs-finite-difference gradient checks.
//!
//! Each trial draws a small problem (at most 8 frames, dimension at most 8,
//! window at most 5) from its own seed, so a failing trial can be replayed
//! alone with `seed = trial_seed, trials = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{self, AgentConfig, AgentForward, AgentParameters, NoiseReuse};
use crate::error::{Error, Result};
use crate::numerics::{
    finite_difference_gradient, local_window_attention_backward, local_window_attention_forward,
    relative_error, AttentionParams, Matrix,
};
use crate::worldsim::normalize;

pub const MAX_FRAMES: usize = 8;
pub const MAX_DIM: usize = 8;
pub const MAX_WINDOW: usize = 5;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

/// Which gradient a check compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    AttentionInputs,
    AttentionParams,
    SelectionLogProb,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::AttentionInputs => "attention-inputs",
            CheckKind::AttentionParams => "attention-params",
            CheckKind::SelectionLogProb => "selection-log-prob",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub frames: usize,
    pub dim: usize,
    pub window: usize,
    pub select_count: usize,
    pub temperature: f64,
    /// Largest relative error over the trial's checks, and which check.
    pub worst: (CheckKind, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub trials: Vec<TrialResult>,
}

impl GradCheckReport {
    pub fn failures(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.worst.1.is_nan() || t.worst.1 >= self.tolerance)
            .count()
    }

    pub fn passed(&self) -> bool {
        !self.trials.is_empty() && self.failures() == 0
    }

    pub fn worst(&self) -> Option<&TrialResult> {
        self.trials
            .iter()
            .max_by(|a, b| a.worst.1.total_cmp(&b.worst.1))
    }
}

pub fn run_grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.trials == 0 {
        return Err(Error::invalid("grad check needs at least one trial"));
    }
    if !(config.tolerance > 0.0 && config.tolerance.is_finite()) {
        return Err(Error::invalid(format!(
            "tolerance must be > 0, got {}",
            config.tolerance
        )));
    }
    let trials = (0..config.trials as u64)
        .map(|i| run_trial(config.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        trials,
    })
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v).is_ok() {
            return v;
        }
    }
}

/// One randomized trial, fully determined by `seed`.
pub fn run_trial(seed: u64) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.gen_range(1..=MAX_FRAMES);
    let dim = 2 * rng.gen_range(1..=MAX_DIM / 2);
    let window = rng.gen_range(1..=MAX_WINDOW);
    let select_count = rng.gen_range(1..=frames);
    // Log-uniform over [0.025, 1]; the low end is the training temperature.
    let temperature = 0.025 * 40f64.powf(rng.gen::<f64>());

    let rows: Vec<Vec<f64>> = (0..frames).map(|_| unit_vector(dim, &mut rng)).collect();
    let x = Matrix::from_rows(&rows)?;
    let query = unit_vector(dim, &mut rng);
    let params = AgentParameters {
        attn: AttentionParams::new(
            gaussian_matrix(dim, dim, 0.3, &mut rng),
            gaussian_matrix(dim, dim, 0.3, &mut rng),
            {
                let mut v = Matrix::identity(dim);
                v.add_scaled(1.0, &gaussian_matrix(dim, dim, 0.3, &mut rng));
                v
            },
        )?,
    };
    let cfg = AgentConfig {
        feature_dim: dim,
        window,
        temperature,
        select_count,
        sim_fusion_weight: rng.gen_range(0.0..2.0),
        noise_reuse: NoiseReuse::Stored,
    };

    let mut worst = (CheckKind::AttentionInputs, 0.0f64);
    let mut note = |kind: CheckKind, err: f64| {
        if err > worst.1 || err.is_nan() {
            worst = (kind, err);
        }
    };

    // Attention alone, through a random linear read-out of the output.
    let readout = gaussian_matrix(frames, dim, 1.0, &mut rng);
    let (_, cache) = local_window_attention_forward(&x, &params.attn, window)?;
    let (d_x, d_params) = local_window_attention_backward(&cache, &readout)?;
    let linear = |out: &Matrix| -> f64 {
        out.as_slice()
            .iter()
            .zip(readout.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let fd_x = finite_difference_gradient(
        |flat| {
            let x = Matrix::from_vec(frames, dim, flat.to_vec())?;
            Ok(linear(
                &local_window_attention_forward(&x, &params.attn, window)?.0,
            ))
        },
        x.as_slice(),
        FD_STEP,
    )?;
    note(
        CheckKind::AttentionInputs,
        relative_error(d_x.as_slice(), &fd_x),
    );
    let fd_params = finite_difference_gradient(
        |flat| {
            let p = AttentionParams::from_flat(dim, flat)?;
            Ok(linear(&local_window_attention_forward(&x, &p, window)?.0))
        },
        &params.attn.flatten(),
        FD_STEP,
    )?;
    note(
        CheckKind::AttentionParams,
        relative_error(&d_params.flatten(), &fd_params),
    );

    // Full chain: stored action's log-likelihood as a function of the weights.
    let forward = AgentForward::run(&x, &query, &params, &cfg)?;
    let action = agent::sample_selection(forward.fused(), &cfg, &mut rng)?;
    let analytic = agent::selection_log_prob_grad(&x, &query, &params, &action, &cfg)?;
    let fd = finite_difference_gradient(
        |flat| {
            let p = AgentParameters {
                attn: AttentionParams::from_flat(dim, flat)?,
            };
            let fwd = AgentForward::run(&x, &query, &p, &cfg)?;
            agent::selection_log_prob(fwd.fused(), &action, &cfg)
        },
        &params.attn.flatten(),
        FD_STEP,
    )?;
    note(
        CheckKind::SelectionLogProb,
        relative_error(&analytic.flatten(), &fd),
    );

    Ok(TrialResult {
        seed,
        frames,
        dim,
        window,
        select_count,
        temperature,
        worst,
    })
}
