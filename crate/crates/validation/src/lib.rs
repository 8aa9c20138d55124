//! The scaled needle-in-a-haystack learning experiment.
//!
//! A fixed world generates needle records; one agent trains on the first
//! split for a single epoch and every sampling policy is scored on a
//! held-out split drawn from the same world.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tspo_core::agent::{AgentConfig, AgentParameters};
use tspo_core::datapipe::{build_dataset, Dataset, FilterConfig, Recipe, StyleMix};
use tspo_core::evalbench::{evaluate, Policy, PolicyReport};
use tspo_core::tspo::{train, MetricsRecord, TrainOutputs, TrainState, TrainerConfig};
use tspo_core::worldsim::{OracleConfig, World, WorldConfig};
use tspo_core::Result;

#[derive(Debug, Clone)]
pub struct LearningExperiment {
    pub world: WorldConfig,
    pub oracle: OracleConfig,
    pub recipe: Recipe,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    pub eval_select: usize,
    /// Seeds the two record streams; the world keeps its own seed.
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl Default for LearningExperiment {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                feature_dim: 64,
                event_noise: 0.3,
                query_noise: 0.3,
                modality_gap_scale: 0.5,
                n_choices: 4,
                ..WorldConfig::default()
            },
            oracle: OracleConfig {
                needle_threshold: 4,
                ..OracleConfig::default()
            },
            recipe: Recipe {
                style: StyleMix::Needle,
                candidate_frames: 128,
                target_frames: 8,
                ..Recipe::default()
            },
            train_samples: 2000,
            eval_samples: 500,
            agent: AgentConfig {
                feature_dim: 64,
                window: 12,
                temperature: 0.025,
                select_count: 16,
                ..AgentConfig::default()
            },
            trainer: TrainerConfig {
                group_size: 8,
                learning_rate: 5e-4,
                inner_epochs: 1,
                train_select: 16,
                ..TrainerConfig::default()
            },
            eval_select: 16,
            data_seed: 1,
            eval_seed: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub untrained: PolicyReport,
    pub trained: PolicyReport,
    pub uniform: PolicyReport,
    pub random: PolicyReport,
    pub best_cover: PolicyReport,
    pub metrics: Vec<MetricsRecord>,
    pub seconds: f64,
}

impl LearningOutcome {
    /// Mean training reward over the first and the last `n` steps.
    pub fn reward_ends(&self, n: usize) -> (f64, f64) {
        let k = self.metrics.len();
        let n = n.min(k);
        let mean =
            |r: &[MetricsRecord]| r.iter().map(|m| m.mean_reward).sum::<f64>() / r.len() as f64;
        (mean(&self.metrics[..n]), mean(&self.metrics[k - n..]))
    }
}

fn records(world: &World, exp: &LearningExperiment, n: usize, seed: u64) -> Result<Dataset> {
    let recipe = Recipe {
        n_samples: n,
        ..exp.recipe.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(build_dataset(
        world,
        &recipe,
        &exp.oracle,
        &FilterConfig::default(),
        &mut rng,
    )?
    .0)
}

impl LearningExperiment {
    pub fn run(&self) -> Result<LearningOutcome> {
        let started = Instant::now();
        let world = World::new(self.world.clone())?;
        let train_set = records(&world, self, self.train_samples, self.data_seed)?;
        let eval_set = records(&world, self, self.eval_samples, self.eval_seed)?;

        let mut state = TrainState::new(&self.agent, &self.trainer);
        let initial: AgentParameters = state.params.clone();
        let metrics = train(
            &mut state,
            &train_set,
            &self.agent,
            &self.trainer,
            &TrainOutputs::default(),
        )?;

        let score = |params: &AgentParameters, policy: Policy| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
            evaluate(
                params,
                &self.agent,
                &eval_set,
                policy,
                self.eval_select,
                &mut rng,
            )
        };
        Ok(LearningOutcome {
            untrained: score(&initial, Policy::Tspo)?,
            trained: score(&state.params, Policy::Tspo)?,
            uniform: score(&state.params, Policy::Uniform)?,
            random: score(&state.params, Policy::Random)?,
            best_cover: score(&state.params, Policy::BestCover)?,
            metrics,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}
