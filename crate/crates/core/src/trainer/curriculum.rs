use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TerrainKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Terrain kinds assigned round-robin over environments.
    pub terrains: Vec<TerrainKind>,
    /// Difficulty moves in steps of `1 / levels`.
    pub levels: usize,
    pub promote: f64,
    pub demote: f64,
    pub initial_level: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            terrains: vec![TerrainKind::Flat, TerrainKind::Gap, TerrainKind::Step, TerrainKind::Stair],
            levels: 10,
            promote: 0.8,
            demote: 0.4,
            initial_level: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.terrains.is_empty() || self.levels == 0 {
            return Err(Error::InvalidArgument("curriculum needs terrains and levels".into()));
        }
        if self.demote >= self.promote {
            return Err(Error::InvalidArgument("demote threshold must be below promote".into()));
        }
        Ok(())
    }
}

/// One promotion/demotion decision on a difficulty level in `0..=levels`.
pub fn update_level(level: usize, traversal: f64, config: &CurriculumConfig) -> usize {
    if traversal >= config.promote {
        (level + 1).min(config.levels)
    } else if traversal <= config.demote {
        level.saturating_sub(1)
    } else {
        level
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub kinds: Vec<TerrainKind>,
    pub levels: Vec<usize>,
    pub max_level: usize,
    pub promotions: Vec<u64>,
    pub demotions: Vec<u64>,
}

impl CurriculumState {
    pub fn new(n_envs: usize, config: &CurriculumConfig) -> Self {
        let kinds = (0..n_envs).map(|i| config.terrains[i % config.terrains.len()]).collect();
        Self {
            kinds,
            levels: vec![config.initial_level.min(config.levels); n_envs],
            max_level: config.levels,
            promotions: vec![0; n_envs],
            demotions: vec![0; n_envs],
        }
    }

    pub fn difficulty(&self, env: usize) -> f64 {
        self.levels[env] as f64 / self.max_level as f64
    }

    /// Applies the episode outcome of `env`; call only at episode boundaries.
    pub fn update(&mut self, env: usize, traversal: f64, config: &CurriculumConfig) {
        let before = self.levels[env];
        let after = update_level(before, traversal, config);
        if after > before {
            self.promotions[env] += 1;
        } else if after < before {
            self.demotions[env] += 1;
        }
        self.levels[env] = after;
    }

    pub fn mean_difficulty(&self, kind: TerrainKind) -> Option<f64> {
        let d: Vec<f64> = (0..self.levels.len())
            .filter(|&i| self.kinds[i] == kind)
            .map(|i| self.difficulty(i))
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitSchedule {
    pub period: f64,
    /// Unnormalized sampling weights per gait.
    pub distribution: Vec<f64>,
    /// Redraw the gait mid-episode every `period` seconds.
    pub transitions: bool,
}

impl Default for GaitSchedule {
    fn default() -> Self {
        Self {
            period: 4.0,
            distribution: vec![1.0, 1.0, 1.0],
            transitions: true,
        }
    }
}

impl GaitSchedule {
    pub fn period_steps(&self, dt: f64) -> u64 {
        ((self.period / dt).round() as u64).max(1)
    }

    /// Whether a new command is drawn before control step `step_count`.
    pub fn due(&self, step_count: u64, dt: f64) -> bool {
        self.transitions && step_count > 0 && step_count % self.period_steps(dt) == 0
    }
}

/// Draws a gait index from the schedule's distribution.
pub fn schedule_gait<R: Rng + ?Sized>(schedule: &GaitSchedule, rng: &mut R) -> usize {
    let total: f64 = schedule.distribution.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in schedule.distribution.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    schedule
        .distribution
        .iter()
        .rposition(|w| *w > 0.0)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn promotion_and_clamp() {
        let cfg = CurriculumConfig::default();
        assert_eq!(update_level(5, 1.0, &cfg), 6);
        assert_eq!(update_level(0, 0.0, &cfg), 0);
        assert_eq!(update_level(10, 1.0, &cfg), 10);
        assert_eq!(update_level(4, 0.6, &cfg), 4);
    }

    #[test]
    fn period_arithmetic() {
        let s = GaitSchedule::default();
        assert_eq!(s.period_steps(0.02), 200);
        assert!(s.due(200, 0.02));
        assert!(!s.due(199, 0.02));
    }

    #[test]
    fn degenerate_distribution() {
        let s = GaitSchedule {
            distribution: vec![1.0, 0.0, 0.0],
            ..GaitSchedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| schedule_gait(&s, &mut rng) == 0));
    }
}
