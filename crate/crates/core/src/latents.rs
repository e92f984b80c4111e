//! Residual-latent export and clustering analysis: a deterministic 2-D
//! principal-component projection plus silhouette scores over gait labels.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LatentConfig;
use crate::env::{generate_terrain, CommandState, DrConfig, Env, EnvConfig, ObservationBundle, TerrainKind};
use crate::error::{Error, Result};
use crate::gait::N_GAITS;
use crate::policy::{LatentRow, Policy};
use crate::trainer::derive_seed;

pub const LATENT_VERSION: u32 = 1;

/// Mean-action rollout of `steps` control steps, one row per step. The
/// episode restarts from `reset` whenever it terminates.
pub fn export_rollout_latents(
    policy: &Policy,
    env: &mut Env,
    mut obs: ObservationBundle,
    steps: usize,
    terrain_label: &str,
    mut reset: impl FnMut(&mut Env) -> Result<ObservationBundle>,
) -> Result<Vec<LatentRow>> {
    if policy.residual.is_none() {
        return Err(Error::ModeMismatch("latent export needs a residual module".into()));
    }
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = policy.act(&obs, None::<&mut ChaCha8Rng>)?;
        rows.push(LatentRow {
            residual: out.residual.clone(),
            gait: env.commands().gait_index(),
            terrain: terrain_label.to_string(),
            gate: out.gate.clone(),
        });
        let result = env.step(&out.action)?;
        obs = if result.termination.is_done() {
            reset(env)?
        } else {
            result.observation
        };
    }
    Ok(rows)
}

/// Samples `samples_per_gait` rows for every gait on each terrain, keeping
/// every `stride`-th step.
pub fn export_residual_latents(
    policy: &Policy,
    env_config: &EnvConfig,
    cfg: &LatentConfig,
    terrains: &[(TerrainKind, f64)],
    seed: u64,
) -> Result<Vec<LatentRow>> {
    let mut env_cfg = env_config.clone();
    env_cfg.push.enabled = false;
    let mut rows = Vec::new();
    for (ti, &(kind, difficulty)) in terrains.iter().enumerate() {
        for gait in 0..N_GAITS {
            let mut episode = 0u64;
            let mut reset = |env: &mut Env| -> Result<ObservationBundle> {
                let s = derive_seed(seed, 7 + ti as u64 * N_GAITS as u64 + gait as u64, episode);
                episode += 1;
                let terrain = generate_terrain(kind, difficulty, s, &env_cfg.terrain)?;
                env.reset(terrain, DrConfig::identity(), CommandState::new(cfg.lin_vel, 0.0, gait, N_GAITS), s)
            };
            let mut env = Env::new(env_cfg.clone());
            let obs = reset(&mut env)?;
            let stride = cfg.stride.max(1);
            let all = export_rollout_latents(policy, &mut env, obs, cfg.samples_per_gait * stride, kind.as_str(), reset)?;
            rows.extend(all.into_iter().step_by(stride));
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateUsage {
    pub gait: usize,
    pub samples: usize,
    pub mean_weight: Vec<f64>,
    /// How often each expert carries the largest weight.
    pub argmax_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub format_version: u32,
    pub projection: Vec<[f64; 2]>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance: [f64; 2],
    pub labels: Vec<usize>,
    /// `None` when the latents are degenerate or fewer than two gaits appear.
    pub silhouette: Option<f64>,
    pub degenerate: bool,
    pub gate_usage: Vec<GateUsage>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over all samples (Euclidean); singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_labels];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return None;
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; n_labels];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && sizes[l] > 0)
            .map(|l| sums[l] / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / points.len() as f64)
}

/// Top-two principal axes, each flipped so its first nonzero loading is positive.
fn principal_axes(centered: &[Vec<f64>]) -> (Vec<Vec<f64>>, [f64; 2]) {
    let n = centered.len();
    let d = centered[0].len();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in centered {
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut comps = Vec::with_capacity(2);
    let mut var = [0.0; 2];
    for k in 0..2 {
        let Some(&idx) = order.get(k) else {
            comps.push(vec![0.0; d]);
            continue;
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        var[k] = eig.eigenvalues[idx].max(0.0);
        comps.push(v);
    }
    (comps, var)
}

pub fn analyze_latents(rows: &[LatentRow]) -> Result<LatentReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no latent rows".into()));
    }
    let d = rows[0].residual.len();
    if rows.iter().any(|r| r.residual.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "latent rows",
            expected: d,
            got: rows.iter().map(|r| r.residual.len()).find(|l| *l != d).unwrap_or(d),
        });
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(&r.residual) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.residual.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let spread = centered.iter().flatten().map(|v| v * v).sum::<f64>();
    let labels: Vec<usize> = rows.iter().map(|r| r.gait).collect();
    let degenerate = !(spread > 1e-20) || d == 0;
    let (components, explained_variance, projection) = if degenerate {
        (vec![vec![0.0; d]; 2], [0.0; 2], vec![[0.0; 2]; rows.len()])
    } else {
        let (comps, var) = principal_axes(&centered);
        let proj = centered
            .iter()
            .map(|c| {
                [
                    c.iter().zip(&comps[0]).map(|(a, b)| a * b).sum(),
                    c.iter().zip(&comps[1]).map(|(a, b)| a * b).sum(),
                ]
            })
            .collect();
        (comps, var, proj)
    };
    let silhouette = if degenerate {
        None
    } else {
        let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.residual.clone()).collect();
        silhouette(&raw, &labels)
    };

    let n_experts = rows[0].gate.len();
    let mut gate_usage = Vec::new();
    for gait in 0..N_GAITS.max(labels.iter().max().map_or(0, |m| m + 1)) {
        let subset: Vec<&LatentRow> = rows.iter().filter(|r| r.gait == gait).collect();
        if subset.is_empty() {
            continue;
        }
        let mut mean_weight = vec![0.0; n_experts];
        let mut argmax_counts = vec![0usize; n_experts];
        for r in &subset {
            for (m, g) in mean_weight.iter_mut().zip(&r.gate) {
                *m += g / subset.len() as f64;
            }
            if !r.gate.is_empty() {
                argmax_counts[crate::env::argmax(&r.gate)] += 1;
            }
        }
        gate_usage.push(GateUsage {
            gait,
            samples: subset.len(),
            mean_weight,
            argmax_counts,
        });
    }
    Ok(LatentReport {
        format_version: LATENT_VERSION,
        projection,
        components,
        explained_variance,
        labels,
        silhouette,
        degenerate,
        gate_usage,
    })
}
