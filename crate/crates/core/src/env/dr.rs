//! Per-episode domain randomization.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sampled physical and sensor parameters for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrConfig {
    pub friction: f64,
    pub restitution: f64,
    /// Added base mass, kg.
    pub payload: f64,
    /// Fore-aft centre-of-mass offset from the hip, m.
    pub com_shift: f64,
    pub motor_strength: f64,
    pub kp_scale: f64,
    pub kd_scale: f64,
    pub init_joint_scale: f64,
    pub action_delay_ms: f64,
    pub action_delay_steps: usize,
    pub link_mass_scale: f64,
    /// Gaussian scan noise standard deviation, m.
    pub scan_noise: f64,
    /// Half-range of the per-frame uniform scan offset, m.
    pub scan_deviation: f64,
    pub scan_delay_ms: f64,
    pub scan_delay_steps: usize,
}

impl DrConfig {
    /// Nominal physics, no noise, no delays.
    pub fn identity() -> Self {
        Self {
            friction: 1.0,
            restitution: 0.0,
            payload: 0.0,
            com_shift: 0.0,
            motor_strength: 1.0,
            kp_scale: 1.0,
            kd_scale: 1.0,
            init_joint_scale: 1.0,
            action_delay_ms: 0.0,
            action_delay_steps: 0,
            link_mass_scale: 1.0,
            scan_noise: 0.0,
            scan_deviation: 0.0,
            scan_delay_ms: 0.0,
            scan_delay_steps: 0,
        }
    }

    /// Parameters visible to the critic, in the order they appear in e_t.
    pub fn privileged_vector(&self) -> [f64; 8] {
        [
            self.friction,
            self.restitution,
            self.payload,
            self.com_shift,
            self.motor_strength,
            self.kp_scale,
            self.kd_scale,
            self.link_mass_scale,
        ]
    }
}

impl Default for DrConfig {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrRanges {
    pub enabled: bool,
    pub friction: (f64, f64),
    pub restitution: (f64, f64),
    pub payload: (f64, f64),
    pub com_shift: (f64, f64),
    pub motor_strength: (f64, f64),
    pub kp_scale: (f64, f64),
    pub kd_scale: (f64, f64),
    pub init_joint_scale: (f64, f64),
    pub action_delay_ms: (f64, f64),
    pub link_mass_scale: (f64, f64),
    pub scan_noise: (f64, f64),
    pub scan_deviation: (f64, f64),
    pub scan_delay_ms: (f64, f64),
}

impl Default for DrRanges {
    fn default() -> Self {
        Self {
            enabled: true,
            friction: (0.5, 2.0),
            restitution: (0.0, 1.0),
            payload: (-3.0, 3.0),
            com_shift: (-0.03, 0.03),
            motor_strength: (0.8, 1.2),
            kp_scale: (0.8, 1.2),
            kd_scale: (0.8, 1.2),
            init_joint_scale: (0.5, 1.5),
            action_delay_ms: (0.0, 40.0),
            link_mass_scale: (0.8, 1.2),
            scan_noise: (0.0, 0.05),
            scan_deviation: (0.0, 0.15),
            scan_delay_ms: (0.0, 8.0),
        }
    }
}

impl DrRanges {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws every field uniformly from its range. Delays are converted to whole
/// control steps: the action delay by rounding, the sub-step scan delay by
/// stochastic rounding so it lands on 0 or 1 step with the right mean.
pub fn sample_dr<R: Rng + ?Sized>(rng: &mut R, ranges: &DrRanges, control_dt: f64) -> DrConfig {
    if !ranges.enabled {
        return DrConfig::identity();
    }
    let action_delay_ms = uniform(rng, ranges.action_delay_ms);
    let scan_delay_ms = uniform(rng, ranges.scan_delay_ms);
    let dt_ms = control_dt * 1000.0;
    let scan_steps = scan_delay_ms / dt_ms;
    let frac = scan_steps - scan_steps.floor();
    let scan_delay_steps = scan_steps.floor() as usize + usize::from(rng.random::<f64>() < frac);
    DrConfig {
        friction: uniform(rng, ranges.friction),
        restitution: uniform(rng, ranges.restitution),
        payload: uniform(rng, ranges.payload),
        com_shift: uniform(rng, ranges.com_shift),
        motor_strength: uniform(rng, ranges.motor_strength),
        kp_scale: uniform(rng, ranges.kp_scale),
        kd_scale: uniform(rng, ranges.kd_scale),
        init_joint_scale: uniform(rng, ranges.init_joint_scale),
        action_delay_ms,
        action_delay_steps: (action_delay_ms / dt_ms).round() as usize,
        link_mass_scale: uniform(rng, ranges.link_mass_scale),
        scan_noise: uniform(rng, ranges.scan_noise),
        scan_deviation: uniform(rng, ranges.scan_deviation),
        scan_delay_ms,
        scan_delay_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn friction_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ranges = DrRanges::default();
        let samples: Vec<DrConfig> = (0..10_000).map(|_| sample_dr(&mut rng, &ranges, 0.02)).collect();
        let f: Vec<f64> = samples.iter().map(|d| d.friction).collect();
        let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        assert!(min >= 0.5 && max <= 2.0);
        assert!((mean - 1.25).abs() < 0.02, "mean {mean}");
        for d in &samples {
            assert!(d.action_delay_steps <= 2);
            assert!(d.scan_delay_steps <= 1);
            assert!((-3.0..=3.0).contains(&d.payload));
            assert!((0.0..=0.05).contains(&d.scan_noise));
            assert!((0.5..=1.5).contains(&d.init_joint_scale));
        }
        let one_step = samples.iter().filter(|d| d.scan_delay_steps == 1).count() as f64 / 1e4;
        // E[delay / 20 ms] with delay ~ U[0, 8] ms is 0.2.
        assert!((one_step - 0.2).abs() < 0.03, "{one_step}");
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_dr(&mut rng, &DrRanges::disabled(), 0.02), DrConfig::identity());
        let id = DrConfig::identity();
        assert_eq!(id.motor_strength, 1.0);
        assert_eq!(id.scan_noise, 0.0);
        assert_eq!(id.action_delay_steps, 0);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let a = sample_dr(&mut ChaCha8Rng::seed_from_u64(7), &DrRanges::default(), 0.02);
        let b = sample_dr(&mut ChaCha8Rng::seed_from_u64(7), &DrRanges::default(), 0.02);
        assert_eq!(a, b);
    }
}
