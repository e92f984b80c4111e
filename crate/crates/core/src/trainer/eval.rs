use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{generate_terrain, CommandState, DrConfig, Env, EnvConfig, Termination, TerrainKind};
use crate::error::Result;
use crate::gait::N_GAITS;
use crate::policy::Policy;
use crate::rewards::{compute_rewards, RewardConfig, Stage, N_TERMS};

/// Deterministic (mean-action) rollout settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub terrain: TerrainKind,
    pub difficulty: f64,
    pub lin_vel: f64,
    pub gait: usize,
    pub steps: usize,
    /// Steps excluded from the averages while the gait settles.
    pub settle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub steps: usize,
    pub mean_weighted: Vec<f64>,
    pub mean_base_height: f64,
    /// Mean of the higher knee's height above ground.
    pub mean_knee_height: f64,
    pub distance: f64,
    pub termination: Termination,
}

impl EvalStats {
    pub fn term(&self, term: crate::rewards::Term) -> f64 {
        self.mean_weighted[term.index()]
    }
}

/// Runs `policy` with mean actions on nominal dynamics.
pub fn evaluate(
    policy: &Policy,
    env_config: &EnvConfig,
    rewards: &RewardConfig,
    stage: Stage,
    spec: &EvalSpec,
    seed: u64,
) -> Result<EvalStats> {
    let terrain = generate_terrain(spec.terrain, spec.difficulty, seed, &env_config.terrain)?;
    let mut env = Env::new(env_config.clone());
    let command = CommandState::new(spec.lin_vel, 0.0, spec.gait, N_GAITS);
    let mut obs = env.reset(terrain, DrConfig::identity(), command, seed)?;
    let mut sums = vec![0.0; N_TERMS];
    let (mut height, mut knee) = (0.0, 0.0);
    let mut counted = 0usize;
    let mut termination = Termination::None;
    for t in 0..spec.steps {
        let out = policy.act(&obs, None::<&mut ChaCha8Rng>)?;
        let result = env.step(&out.action)?;
        if t >= spec.settle {
            let b = compute_rewards(
                env.state(),
                env.commands(),
                env.action_history(),
                &env_config.robot,
                0.0,
                rewards,
                stage,
            );
            for (s, v) in sums.iter_mut().zip(&b.weighted) {
                *s += v;
            }
            height += env.state().base_height;
            knee += env.state().knee_height[0].max(env.state().knee_height[1]);
            counted += 1;
        }
        obs = result.observation;
        if result.termination.is_done() {
            termination = result.termination;
            break;
        }
    }
    let c = counted.max(1) as f64;
    Ok(EvalStats {
        steps: counted,
        mean_weighted: sums.iter().map(|s| s / c).collect(),
        mean_base_height: height / c,
        mean_knee_height: knee / c,
        distance: env.distance(),
        termination,
    })
}
