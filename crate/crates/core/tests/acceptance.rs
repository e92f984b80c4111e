//! Acceptance checks. Prints one line per criterion and exits nonzero when
//! any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use more_core::amp::{discriminator_loss, style_from_output, AmpConfig, AmpState, ClipGait, ClipParams};
use more_core::bench::{self, outcome_from_trace, run_benchmark, summarize, trace_path};
use more_core::checkpoint;
use more_core::config::{Ablation, RunConfig, SuiteEntry};
use more_core::env::terrain::Heightfield;
use more_core::env::trace::read_trace;
use more_core::env::{BenchmarkMode, BipedState, CommandState, DrConfig, RobotModel, TerrainKind, N_JOINTS};
use more_core::gait::{Gait, N_GAITS};
use more_core::net::{Activation, DenseNet};
use more_core::policy::{gaussian_log_prob, Fusion, Policy, PolicyConfig, PolicyDims};
use more_core::rewards::{compute_rewards, RewardConfig, Stage, Term};
use more_core::trainer::{
    minibatch_loss, run_iterations, stage1_trainer, stage2_trainer, warmup_discriminators, IterationMetrics,
    PpoConfig, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const SMOKE: &str = include_str!("../../../configs/smoke.toml");
const GAP: &str = include_str!("../../../configs/gap.toml");

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z * scale
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-10)
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// Central differences of `loss` over `len` parameters addressed by `perturb`.
fn central<T: Clone>(model: &T, len: usize, perturb: impl Fn(&mut T, usize, f64), loss: impl Fn(&T) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..len)
        .map(|i| {
            let mut plus = model.clone();
            perturb(&mut plus, i, h);
            let mut minus = model.clone();
            perturb(&mut minus, i, -h);
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------- criterion 1

fn small_dims() -> PolicyDims {
    PolicyDims {
        proprio: 7,
        history: 10,
        scan: 9,
        map: 6,
        extras: 4,
        n_gaits: N_GAITS,
        n_joints: N_JOINTS,
    }
}

fn small_config() -> PolicyConfig {
    PolicyConfig {
        d_f: 4,
        d_z: 8,
        scan_hidden: vec![6],
        history_hidden: vec![6],
        trunk_hidden: vec![10],
        expert_hidden: vec![6],
        gate_hidden: vec![5],
        critic_hidden: vec![8, 8],
        init_std: 0.8,
        ..PolicyConfig::default()
    }
}

fn residual_policy(fusion: Fusion, seed: u64) -> Policy {
    let mut r = rng(seed);
    let mut p = Policy::new(small_dims(), small_config(), &mut r);
    p.attach_residual(fusion, 3, &mut r).unwrap();
    let res = p.residual.as_mut().unwrap();
    for e in &mut res.experts {
        e.init_xavier(&mut r);
    }
    p
}

fn perturb_actor(p: &mut Policy, mut i: usize, d: f64) {
    for (_, s) in p.actor_slices_mut() {
        if i < s.len() {
            s[i] += d;
            return;
        }
        i -= s.len();
    }
    panic!("actor parameter index out of range");
}

fn actor_param_groups(p: &Policy) -> Vec<(String, usize)> {
    let mut names = vec!["scan encoder", "history encoder", "trunk", "head", "log std"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    let mut g = p.zero_actor_grads();
    let n_exp = g.experts.len();
    names.extend((0..n_exp).map(|k| format!("expert {k}")));
    names.push("gate".into());
    g.slices_mut().iter().map(|s| s.len()).zip(names).map(|(n, s)| (s, n)).collect()
}

fn flat_grads(g: &mut more_core::policy::ActorGrads) -> Vec<f64> {
    g.slices_mut().iter().flat_map(|s| s.iter().copied()).collect()
}

// Per-group relative errors of an analytic/numeric actor gradient pair.
fn grouped(p: &Policy, analytic: &[f64], numeric: &[f64], prefix: &str, out: &mut Vec<(String, f64)>) {
    let mut at = 0;
    for (name, n) in actor_param_groups(p) {
        if n > 0 {
            let e = rel_err(&analytic[at..at + n], &numeric[at..at + n]);
            out.push((format!("{prefix}{name}"), e));
        }
        at += n;
    }
}

fn check_dense(out: &mut Vec<(String, f64)>) {
    use Activation::*;
    for (k, act) in [Tanh, Relu, Elu, Identity].into_iter().enumerate() {
        let mut r = rng(10 + k as u64);
        let net = DenseNet::mlp(5, &[7, 6], 3, act, if act == Identity { Tanh } else { Identity }, &mut r);
        let x = normal_vec(&mut r, 5, 1.0);
        let c = normal_vec(&mut r, 3, 1.0);
        let (_, tape) = net.forward(&x).unwrap();
        let mut g = net.zero_grad();
        let gx = net.backward(&tape, &c, &mut g).unwrap();
        let loss = |n: &DenseNet, x: &[f64]| n.infer(x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let num = central(&net, net.param_count(), |n, i, d| n.params_mut()[i] += d, |n| loss(n, &x));
        out.push((format!("dense {act:?} params"), rel_err(&g, &num)));
        let num_x = central(&x, x.len(), |v: &mut Vec<f64>, i, d| v[i] += d, |v| loss(&net, v));
        out.push((format!("dense {act:?} input"), rel_err(&gx, &num_x)));
    }
}

fn check_actor(fusion: Fusion, out: &mut Vec<(String, f64)>) {
    let p = residual_policy(fusion, 20);
    let mut r = rng(21);
    let batch: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..3)
        .map(|b| {
            (
                normal_vec(&mut r, p.dims.actor_input(), 1.0),
                one_hot(b % N_GAITS, N_GAITS),
                normal_vec(&mut r, N_JOINTS, 1.0),
            )
        })
        .collect();
    let mut g = p.zero_actor_grads();
    for (x, gait, c) in &batch {
        let pass = p.actor_pass(x, gait, true).unwrap();
        p.actor_backward(&pass, c, &mut g).unwrap();
    }
    let analytic = flat_grads(&mut g);
    let loss = |q: &Policy| {
        batch
            .iter()
            .map(|(x, gait, c)| {
                let m = q.actor_pass(x, gait, false).unwrap().mean;
                m.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
    };
    let numeric = central(&p, analytic.len(), perturb_actor, loss);
    grouped(&p, &analytic, &numeric, &format!("actor ({fusion:?}) "), out);
}

fn check_discriminator(out: &mut Vec<(String, f64)>) {
    let mut r = rng(30);
    let net = DenseNet::mlp(30, &[12, 12], 1, Activation::Elu, Activation::Identity, &mut r);
    let real: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut r, 30, 1.0)).collect();
    let fake: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut r, 30, 1.0)).collect();
    let mut g = net.zero_grad();
    let parts = discriminator_loss(&net, &real, &fake, 10.0, Some(&mut g)).unwrap();
    assert!(parts.penalty > 0.0);
    let num = central(
        &net,
        net.param_count(),
        |n, i, d| n.params_mut()[i] += d,
        |n| discriminator_loss(n, &real, &fake, 10.0, None).unwrap().total,
    );
    out.push(("discriminator with gradient penalty".into(), rel_err(&g, &num)));
}

fn ppo_batch(p: &Policy, r: &mut ChaCha8Rng) -> (Vec<Transition>, Vec<f64>, Vec<f64>) {
    let log_std = p.log_std();
    let mut batch = Vec::new();
    let mut adv = Vec::new();
    let mut ret = Vec::new();
    // Log-ratio and value offsets sit well away from the clip kinks.
    let offsets = [0.05, -0.05, 0.5, -0.5, 0.1, -0.3];
    for (k, off) in offsets.iter().enumerate() {
        let x = normal_vec(r, p.dims.actor_input(), 1.0);
        let gait = one_hot(k % N_GAITS, N_GAITS);
        let mean = p.actor_pass(&x, &gait, false).unwrap().mean;
        let action: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(r);
                m + ls.exp() * z
            })
            .collect();
        let logp = gaussian_log_prob(&action, &mean, &log_std);
        let critic_input = normal_vec(r, p.critic.net.input_dim(), 1.0);
        let v = p.critic.net.infer(&critic_input).unwrap()[0];
        batch.push(Transition {
            actor_input: x,
            critic_input,
            gait,
            action,
            log_prob: logp - off,
            mean: mean.iter().map(|m| m + 0.1).collect(),
            value: v - off,
            reward: 0.0,
            done: false,
        });
        adv.push(if k % 2 == 0 { 1.3 } else { -0.9 } * (1.0 + 0.1 * k as f64));
        ret.push(v + r.random_range(-1.0..1.0));
    }
    (batch, adv, ret)
}

fn check_ppo(out: &mut Vec<(String, f64)>) {
    let p = residual_policy(Fusion::Latent, 40);
    let mut r = rng(41);
    let (batch, adv, ret) = ppo_batch(&p, &mut r);
    let refs: Vec<&Transition> = batch.iter().collect();
    let old_log_std: Vec<f64> = p.log_std().iter().map(|l| l - 0.05).collect();
    let cfg = PpoConfig {
        entropy_coef: 0.01,
        clip_value: true,
        ..PpoConfig::default()
    };
    let (loss, mut ag, cg) = minibatch_loss(&p, &refs, &adv, &ret, &old_log_std, &cfg).unwrap();
    assert!(loss.clipped > 0, "batch must exercise the clipped branch");
    let total = |q: &Policy| minibatch_loss(q, &refs, &adv, &ret, &old_log_std, &cfg).unwrap().0.total;
    let analytic = flat_grads(&mut ag);
    let numeric = central(&p, analytic.len(), perturb_actor, total);
    grouped(&p, &analytic, &numeric, "ppo loss ", out);
    let num_c = central(&p, cg.len(), |q, i, d| q.critic.net.params_mut()[i] += d, total);
    out.push(("ppo loss critic".into(), rel_err(&cg, &num_c)));
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut errs = Vec::new();
    check_dense(&mut errs);
    check_actor(Fusion::Latent, &mut errs);
    check_actor(Fusion::Action, &mut errs);
    check_discriminator(&mut errs);
    check_ppo(&mut errs);
    let secs = start.elapsed().as_secs_f64();
    let (worst, e) = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let bad: Vec<&str> = errs.iter().filter(|(_, e)| !(*e <= 1e-4)).map(|(n, _)| n.as_str()).collect();
    ensure(
        bad.is_empty() && secs < 60.0,
        format!(
            "{} gradients checked, worst {worst} rel err {e:.2e} (tol 1e-4), failing {bad:?}, {secs:.1}s (limit 60s)",
            errs.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

// Weights as printed in the reward table; the squat row is applied as a penalty.
fn table_weight(name: &str, literal: bool) -> f64 {
    match name {
        "track_lin_vel" | "track_ang_vel" => 2.0,
        "joint_acc" => -5e-7,
        "joint_vel" => -1e-3,
        "action_rate" => -0.03,
        "action_smoothness" => -0.05,
        "ang_vel_xy" => -0.05,
        "joint_power" => -2.5e-5,
        "feet_stumble" => -1.0,
        "arm_deviation" => -0.5,
        "joint_pos_limits" => -2.0,
        "joint_vel_limits" => -1.0,
        "torque_limits" => -1.0,
        "feet_lateral_dist" => 0.5,
        "feet_slippage" => -0.25,
        "feet_force" => -2.5e-4,
        "collision" => -15.0,
        "stuck" => -1.0,
        "cheat" => -2.0,
        "y_offset" => -2.0,
        "knee_height" => 2.0,
        "squat_height" if literal => 2.0,
        "squat_height" => -2.0,
        "style" => 5.0,
        other => panic!("no table row {other}"),
    }
}

struct DualInput<'a> {
    s: &'a BipedState,
    cmd_v: f64,
    cmd_w: f64,
    gait: usize,
    a: [[f64; N_JOINTS]; 3],
    m: &'a RobotModel,
    literal: bool,
    style: f64,
}

fn dual_raw(d: &DualInput) -> BTreeMap<&'static str, f64> {
    let s = d.s;
    let m = d.m;
    let leg = |arr: &[f64; 3], j: usize| arr[j % 3];
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>();
    let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
    let mut r = BTreeMap::new();
    r.insert("track_lin_vel", (-(d.cmd_v - s.base_vel[0]).powi(2) / 0.25).exp());
    r.insert("track_ang_vel", (-(d.cmd_w - s.yaw_rate).powi(2) / 0.25).exp());
    r.insert("joint_acc", l2(&mut s.joint_acc.iter().copied()));
    r.insert("joint_vel", l2(&mut s.joint_vel.iter().copied()));
    r.insert("action_rate", l2(&mut (0..N_JOINTS).map(|j| d.a[0][j] - d.a[1][j])));
    r.insert(
        "action_smoothness",
        l2(&mut (0..N_JOINTS).map(|j| d.a[0][j] - 2.0 * d.a[1][j] + d.a[2][j])),
    );
    r.insert("ang_vel_xy", s.pitch_rate.powi(2));
    r.insert(
        "joint_power",
        (0..N_JOINTS).map(|j| (s.joint_torque[j] * s.joint_vel[j]).abs()).sum(),
    );
    let stumble = s
        .foot_force
        .iter()
        .any(|f| f[0].hypot(f[1]) > 0.0 && f[0].abs() >= 3.0 * f[1].abs());
    r.insert("feet_stumble", f64::from(u8::from(stumble)));
    r.insert("arm_deviation", 0.0);
    let pos: f64 = (0..N_JOINTS)
        .map(|j| {
            let (lo, hi) = (leg(&m.joint_lower, j), leg(&m.joint_upper, j));
            let c = (lo + hi) / 2.0;
            let half = (hi - lo) / 2.0 * m.soft_limit_fraction;
            relu((c - half) - s.joint_pos[j]) + relu(s.joint_pos[j] - (c + half))
        })
        .sum();
    r.insert("joint_pos_limits", pos);
    r.insert(
        "joint_vel_limits",
        (0..N_JOINTS)
            .map(|j| relu(s.joint_vel[j].abs() - m.soft_limit_fraction * leg(&m.velocity_limit, j)))
            .sum(),
    );
    r.insert(
        "torque_limits",
        (0..N_JOINTS)
            .map(|j| relu(s.joint_torque[j].abs() - m.soft_limit_fraction * leg(&m.torque_limit, j)))
            .sum(),
    );
    let lateral = m.hip_width - 0.18;
    r.insert("feet_lateral_dist", if d.literal { lateral } else { lateral.min(0.0) });
    r.insert(
        "feet_slippage",
        (0..2)
            .filter(|&i| s.foot_contact[i])
            .map(|i| (s.foot_vel[i][0].powi(2) + s.foot_vel[i][1].powi(2)).sqrt())
            .sum(),
    );
    let f_min = 1.5 * m.base_mass * m.gravity / 2.0;
    r.insert("feet_force", s.foot_force.iter().map(|f| relu(f[1] - f_min)).sum());
    r.insert("collision", s.collisions as f64);
    let cmd_norm = (d.cmd_v.powi(2) + d.cmd_w.powi(2)).sqrt();
    r.insert(
        "stuck",
        f64::from(u8::from(s.base_vel[0].abs() <= 0.1 && cmd_norm >= 0.2)),
    );
    r.insert("cheat", f64::from(u8::from(s.yaw.abs() > 1.0)));
    r.insert("y_offset", s.lateral.abs());
    let knee = if d.gait == 1 {
        let h = s.knee_height[0].max(s.knee_height[1]);
        (-(0.65 - h).abs() / 0.25).exp()
    } else {
        0.0
    };
    r.insert("knee_height", knee);
    r.insert("squat_height", if d.gait == 2 { (0.68 - s.base_height).powi(2) } else { 0.0 });
    r.insert("style", d.style);
    r
}

fn random_state(base: &BipedState, r: &mut ChaCha8Rng) -> BipedState {
    let mut s = base.clone();
    let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
    s.base_vel = [u(-1.0, 1.5), u(-0.5, 0.5)];
    s.pitch_rate = u(-3.0, 3.0);
    s.yaw = u(-1.5, 1.5);
    s.yaw_rate = u(-1.0, 1.0);
    s.lateral = u(-0.3, 0.3);
    for j in 0..N_JOINTS {
        s.joint_pos[j] = u(-2.5, 2.5);
        s.joint_vel[j] = u(-30.0, 30.0);
        s.joint_acc[j] = u(-800.0, 800.0);
        s.joint_torque[j] = u(-150.0, 150.0);
    }
    for i in 0..2 {
        let loaded = u(0.0, 1.0) < 0.7;
        s.foot_contact[i] = u(0.0, 1.0) < 0.6;
        s.foot_force[i] = if loaded { [u(-200.0, 200.0), u(0.0, 400.0)] } else { [0.0, 0.0] };
        if u(0.0, 1.0) < 0.1 {
            s.foot_force[i][1] = 0.0;
        }
        s.foot_vel[i] = [u(-1.0, 1.0), u(-1.0, 1.0)];
        s.knee_height[i] = u(0.1, 0.9);
    }
    s.base_height = u(0.4, 1.0);
    s.collisions = r.random_range(0..3);
    s
}

fn criterion_2() -> Check {
    let hand = [(-1.0, 0.0), (0.0, 0.75), (1.0, 1.0), (3.0, 0.0)];
    let style_bad: Vec<String> = hand
        .iter()
        .filter(|(d, v)| style_from_output(*d) != *v)
        .map(|(d, v)| format!("D={d}: {} != {v}", style_from_output(*d)))
        .collect();

    let robot = RobotModel::default();
    let hf = Heightfield::flat(0.01, 4.0, 1.0);
    let base = BipedState::standing(&robot, &hf, 1.0, robot.nominal_pose(), &DrConfig::identity());
    let mut r = rng(50);
    let mut worst = 0.0f64;
    let mut mismatches = Vec::new();
    let mut routing = Vec::new();
    for k in 0..1000 {
        let s = random_state(&base, &mut r);
        let literal = k % 5 == 0;
        let cfg = RewardConfig {
            literal_signs: literal,
            ..RewardConfig::default()
        };
        let gait = r.random_range(0..N_GAITS);
        let mut a = [[0.0; N_JOINTS]; 3];
        for row in &mut a {
            for v in row.iter_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        let (cmd_v, cmd_w) = if k % 7 == 0 {
            (0.0, r.random_range(-0.1..0.1))
        } else {
            (r.random_range(-0.2..1.0), r.random_range(-0.5..0.5))
        };
        let style = r.random_range(0.0..1.0);
        let cmd = CommandState::new(cmd_v, cmd_w, gait, N_GAITS);
        let full = compute_rewards(&s, &cmd, (&a[0], &a[1], &a[2]), &robot, style, &cfg, Stage::Full);
        let loco = compute_rewards(&s, &cmd, (&a[0], &a[1], &a[2]), &robot, style, &cfg, Stage::Locomotion);
        let dual = dual_raw(&DualInput {
            s: &s,
            cmd_v,
            cmd_w,
            gait,
            a,
            m: &robot,
            literal,
            style,
        });
        let mut total = 0.0;
        for t in Term::ALL {
            let raw = dual[t.name()];
            let w = table_weight(t.name(), literal) * raw;
            total += w;
            for (what, got, want) in [("raw", full.raw(t), raw), ("weighted", full.weighted(t), w)] {
                let e = (got - want).abs() / want.abs().max(1.0);
                worst = worst.max(e);
                if !(e <= 1e-12) && mismatches.len() < 5 {
                    mismatches.push(format!("{} {what} {got} vs {want}", t.name()));
                }
            }
        }
        let e = (full.total - total).abs() / total.abs().max(1.0);
        worst = worst.max(e);
        if !(e <= 1e-12) && mismatches.len() < 5 {
            mismatches.push(format!("total {} vs {total}", full.total));
        }
        // Routing: only the commanded gait row is live, and stage 1 carries
        // no style or gait reward at all.
        let dead: Vec<Term> = match gait {
            1 => vec![Term::SquatHeight],
            2 => vec![Term::KneeHeight],
            _ => vec![Term::KneeHeight, Term::SquatHeight],
        };
        for t in dead {
            if full.weighted(t) != 0.0 || full.raw(t) != 0.0 {
                routing.push(format!("{} live under gait {gait}", t.name()));
            }
        }
        if loco.style != 0.0 || loco.gait != 0.0 || loco.total != loco.locomotion {
            routing.push("stage-1 reward carries style or gait".into());
        }
        if loco.weighted(Term::Style) != 0.0 || loco.weighted(Term::KneeHeight) != 0.0 || loco.weighted(Term::SquatHeight) != 0.0 {
            routing.push("stage-1 style/gait rows nonzero".into());
        }
    }

    // Non-commanded discriminators cannot move the style reward.
    let mut ar = rng(51);
    let refs = vec![vec![vec![0.0; 30]]; N_GAITS];
    let mut amp = AmpState::from_references(AmpConfig::default(), refs, &mut ar).unwrap();
    let windows: Vec<Vec<f64>> = (0..200).map(|_| normal_vec(&mut ar, 30, 0.5)).collect();
    for g in 0..N_GAITS {
        let cmd = one_hot(g, N_GAITS);
        let before: Vec<f64> = windows.iter().map(|w| amp.style_reward(w, &cmd).unwrap()).collect();
        let mut other = amp.clone();
        for k in (0..N_GAITS).filter(|&k| k != g) {
            other.discriminators[k].init_xavier(&mut ar);
            other.discriminators[k].params_mut().iter_mut().for_each(|p| *p *= 7.0);
        }
        let after: Vec<f64> = windows.iter().map(|w| other.style_reward(w, &cmd).unwrap()).collect();
        if before != after {
            routing.push(format!("discriminator routing broken for gait {g}"));
        }
        amp.discriminators[g].init_xavier(&mut ar);
        let moved: Vec<f64> = windows.iter().map(|w| amp.style_reward(w, &cmd).unwrap()).collect();
        if moved == before {
            routing.push(format!("commanded discriminator {g} has no effect"));
        }
    }

    ensure(
        style_bad.is_empty() && mismatches.is_empty() && routing.is_empty(),
        format!(
            "style at D in {{-1,0,1,3}} {}; 1000 states x {} terms worst rel diff {worst:.1e} (tol 1e-12) {mismatches:?}; routing {}",
            if style_bad.is_empty() { "= (0, 0.75, 1, 0)".to_string() } else { format!("{style_bad:?}") },
            Term::ALL.len(),
            if routing.is_empty() { "exact zeros".to_string() } else { format!("{:?}", &routing[..routing.len().min(3)]) },
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let mut r = rng(60);
    let p = residual_policy(Fusion::Latent, 61);
    let in_dim = p.feature_dim();
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..200)
        .map(|k| (normal_vec(&mut r, in_dim, 1.0), one_hot(k % N_GAITS, N_GAITS)))
        .collect();
    let expert_out = |p: &Policy, k: usize, f: &[f64], g: &[f64]| {
        let mut input = f.to_vec();
        input.extend_from_slice(g);
        p.residual.as_ref().unwrap().experts[k].infer(&input).unwrap()
    };

    let mut prob_err = 0.0f64;
    let mut negative = false;
    for (f, g) in &samples {
        let (_, w) = p.residual_forward(f, g).unwrap();
        negative |= w.iter().any(|v| *v < 0.0 || !v.is_finite());
        prob_err = prob_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }

    let n = p.residual.as_ref().unwrap().experts.len();
    let mut saturated = 0.0f64;
    for k in 0..n {
        let mut q = p.clone();
        let gate = &mut q.residual.as_mut().unwrap().gate;
        let last = gate.layers().len() - 1;
        gate.layer_mut(last).1[k] += 60.0;
        for (f, g) in &samples {
            let (z, _) = q.residual_forward(f, g).unwrap();
            let e = expert_out(&q, k, f, g);
            saturated = saturated.max(z.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }

    let mut same = p.clone();
    {
        let res = same.residual.as_mut().unwrap();
        let first = res.experts[0].clone();
        for e in &mut res.experts {
            *e = first.clone();
        }
    }
    let mut reseeded = same.clone();
    reseeded.residual.as_mut().unwrap().gate.init_xavier(&mut r);
    let mut identical = 0.0f64;
    for (f, g) in &samples {
        let (z1, w1) = same.residual_forward(f, g).unwrap();
        let (z2, w2) = reseeded.residual_forward(f, g).unwrap();
        assert_ne!(w1, w2);
        let e = expert_out(&same, 0, f, g);
        for ((a, b), c) in z1.iter().zip(&z2).zip(&e) {
            identical = identical.max((a - b).abs()).max((a - c).abs());
        }
    }

    // Reverse the expert order together with the gate's output rows.
    let mut perm = p.clone();
    {
        let res = perm.residual.as_mut().unwrap();
        res.experts.reverse();
        let last = res.gate.layers().len() - 1;
        let fan_in = res.gate.layers()[last].inputs;
        let (w, b) = res.gate.layer_mut(last);
        let rows: Vec<Vec<f64>> = w.chunks(fan_in).map(<[f64]>::to_vec).rev().collect();
        for (dst, src) in w.chunks_mut(fan_in).zip(&rows) {
            dst.copy_from_slice(src);
        }
        b.reverse();
    }
    let mut permutation = 0.0f64;
    for (f, g) in &samples {
        let (z1, mut w1) = p.residual_forward(f, g).unwrap();
        let (z2, w2) = perm.residual_forward(f, g).unwrap();
        w1.reverse();
        for (a, b) in z1.iter().zip(&z2).chain(w1.iter().zip(&w2)) {
            permutation = permutation.max((a - b).abs());
        }
    }

    // The actor uses the same mixture.
    let x = normal_vec(&mut r, p.dims.actor_input(), 1.0);
    let g = one_hot(1, N_GAITS);
    let pass = p.actor_pass(&x, &g, false).unwrap();
    let (z, _) = p.residual_forward(&pass.features, &g).unwrap();
    let consistent = z == pass.residual;

    let ok = !negative && prob_err <= 1e-12 && saturated <= 1e-9 && identical <= 1e-12 && permutation <= 1e-12 && consistent;
    ensure(
        ok,
        format!(
            "gate sums to 1 within {prob_err:.1e} (nonneg {}), saturated vs single expert {saturated:.1e} (tol 1e-9), identical experts gate-independent {identical:.1e}, permutation {permutation:.1e}, actor mixture consistent {consistent}",
            !negative
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Check {
    let mut cfg = RunConfig::from_toml(SMOKE).unwrap();
    cfg.amp.warmup_updates = 0;
    let dims = PolicyDims::from_env(&cfg.train.env, N_GAITS);
    let mut r = rng(70);
    let mut base = Policy::new(dims, cfg.train.policy.clone(), &mut r);
    let rows: Vec<Vec<f64>> = (0..256).map(|_| normal_vec(&mut r, dims.actor_input(), 2.0)).collect();
    base.actor_norm.update(&rows);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_policy(dir.path(), &base).unwrap();
    let loaded = checkpoint::load_policy(dir.path()).unwrap();
    let obs: Vec<(Vec<f64>, usize)> = (0..1000)
        .map(|k| {
            let mut raw = normal_vec(&mut r, dims.actor_input(), 1.5);
            raw.iter_mut().for_each(|v| *v += 0.3);
            (raw, k % N_GAITS)
        })
        .collect();
    let mut report = Vec::new();
    let mut ok = true;
    for fusion in [Fusion::Latent, Fusion::Action] {
        for n in [2, 3, 4] {
            let mut c = cfg.clone();
            c.stage2.fusion = fusion;
            c.stage2.n_experts = n;
            let t = stage2_trainer(&c, Some(loaded.clone()), 3).unwrap();
            let mut differing = 0;
            for (raw, g) in &obs {
                let gait = one_hot(*g, N_GAITS);
                let a1 = base.act_normalized(&base.normalize_actor(raw), &gait, None::<&mut ChaCha8Rng>).unwrap();
                let x2 = t.policy.normalize_actor(raw);
                let a2 = t.policy.act_normalized(&x2, &gait, None::<&mut ChaCha8Rng>).unwrap();
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                if bits(&a1.action) != bits(&a2.action) {
                    differing += 1;
                }
            }
            ok &= differing == 0 && t.policy.residual.is_some();
            report.push(format!("{fusion:?}/{n}: {differing}"));
        }
    }
    ensure(ok, format!("1000 observations, bitwise-differing actions per fusion/experts [{}]", report.join(", ")))
}

// ---------------------------------------------------------------- criterion 5

fn disc_run(real_mu: f64, fake_mu: f64, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let dist = |mu: f64| Normal::new(mu, 0.3).unwrap();
    let sample = |r: &mut ChaCha8Rng, mu: f64, n: usize| -> Vec<Vec<f64>> {
        let d = dist(mu);
        (0..n).map(|_| (0..30).map(|_| d.sample(r)).collect()).collect()
    };
    let real = sample(&mut r, real_mu, 2048);
    let fake = sample(&mut r, fake_mu, 2048);
    let cfg = AmpConfig {
        batch_size: 64,
        ..AmpConfig::default()
    };
    let mut amp = AmpState::from_references(cfg, vec![real], &mut r).unwrap();
    amp.push_windows(&[fake]);
    amp.train(500, &mut r).unwrap();
    let eval_real = sample(&mut r, real_mu, 500);
    let eval_fake = sample(&mut r, fake_mu, 500);
    let out = |w: &[Vec<f64>]| mean(&w.iter().map(|x| amp.discriminator_output(0, x).unwrap()).collect::<Vec<_>>());
    (out(&eval_real), out(&eval_fake))
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let (sr, sf) = disc_run(0.5, -0.5, 80);
    let (ir, i_f) = disc_run(0.0, 0.0, 81);
    let secs = start.elapsed().as_secs_f64();
    let ok = sr > 0.8 && sf < -0.8 && ir.abs() < 0.1 && i_f.abs() < 0.1 && secs < 120.0;
    ensure(
        ok,
        format!(
            "separable: D(real) {sr:.3} (> 0.8), D(fake) {sf:.3} (< -0.8); identical: {ir:.3}, {i_f:.3} (|.| < 0.1); 500 steps each, {secs:.1}s (limit 120s)"
        ),
    )
}

// ---------------------------------------------------------------- criteria 6, 7

#[derive(Default)]
struct Shared {
    stage1: Option<Policy>,
    stage2: Option<Policy>,
}

fn smoke_config() -> RunConfig {
    RunConfig::from_toml(SMOKE).unwrap()
}

fn train_stage1(cfg: &RunConfig, seed: u64) -> (Policy, Vec<IterationMetrics>, f64) {
    let start = Instant::now();
    let mut t = stage1_trainer(cfg, seed).unwrap();
    let metrics = run_iterations(&mut t, cfg, cfg.train.iterations, None, 0, |_| {}).unwrap();
    (t.policy, metrics, start.elapsed().as_secs_f64())
}

fn train_stage2(cfg: &RunConfig, base: Option<Policy>, seed: u64) -> (Policy, Vec<IterationMetrics>) {
    let mut t = stage2_trainer(cfg, base, seed).unwrap();
    warmup_discriminators(&mut t).unwrap();
    let metrics = run_iterations(&mut t, cfg, cfg.stage2.iterations, None, 0, |_| {}).unwrap();
    (t.policy, metrics)
}

fn term(m: &IterationMetrics, name: &str) -> f64 {
    m.terms.get(name).copied().unwrap_or(f64::NAN)
}

fn stage1_policy(shared: &mut Shared) -> Policy {
    if shared.stage1.is_none() {
        let (p, _, _) = train_stage1(&smoke_config(), 0);
        shared.stage1 = Some(p);
    }
    shared.stage1.clone().unwrap()
}

fn criterion_6(shared: &mut Shared) -> Check {
    let cfg = smoke_config();
    let (policy, m1, secs) = train_stage1(&cfg, 0);
    shared.stage1 = Some(policy.clone());
    let tail = &m1[m1.len().saturating_sub(50)..];
    let tracking = mean(&tail.iter().map(|m| term(m, "track_lin_vel")).collect::<Vec<_>>());
    let leaked = m1
        .iter()
        .any(|m| ["style", "knee_height", "squat_height"].iter().any(|t| term(m, t) != 0.0));

    let gait = Gait::WalkRun.index();
    let (p2, m2) = train_stage2(&cfg, Some(policy), 0);
    shared.stage2 = Some(p2);
    let style: Vec<f64> = m2.iter().map(|m| m.style_per_gait[gait].unwrap_or(f64::NAN)).collect();
    let start = style[0];
    let end = mean(&style[style.len().saturating_sub(20)..]);
    let ok = tracking >= 1.8 && !leaked && start < 0.3 && end > 0.5;
    ensure(
        ok,
        format!(
            "stage 1: tracking {tracking:.3} over last 50 of {} iterations (>= 1.8), {secs:.0}s (target < 900s), stage-1 style/gait terms zero {}; stage 2: walk style {start:.3} at iteration 0 (< 0.3) -> {end:.3} over last 20 of {} (> 0.5)",
            m1.len(),
            !leaked,
            m2.len()
        ),
    )
}

fn suite(cfg: &mut RunConfig, obstacle: TerrainKind, mode: BenchmarkMode, trials: usize) {
    cfg.bench.suite = vec![SuiteEntry {
        obstacle,
        mode,
        trials,
        seed_base: 0,
    }];
    cfg.bench.gaits = vec![Gait::WalkRun.index()];
    cfg.bench.deterministic = true;
}

fn bench_cell(policy: &Policy, cfg: &RunConfig, method: &str) -> (f64, f64, usize) {
    let r = run_benchmark(policy, &cfg.train.env, &cfg.train.rewards, &cfg.bench, method, &cfg.hash(), 0, None).unwrap();
    let c = &r.cells[0];
    (c.succ, c.dist, c.trials)
}

fn criterion_7a() -> Check {
    let sighted_cfg = RunConfig::from_toml(GAP).unwrap();
    let mut blind_cfg = sighted_cfg.clone();
    Ablation::Blind.apply(&mut blind_cfg);
    let (sighted, _, _) = train_stage1(&sighted_cfg, 0);
    let (blind, _, _) = train_stage1(&blind_cfg, 0);
    assert!(blind.mode.blind && !sighted.mode.blind);
    let mut cfg = sighted_cfg.clone();
    suite(&mut cfg, TerrainKind::Gap, BenchmarkMode::Hard, 100);
    let (ss, sd, n) = bench_cell(&sighted, &cfg, "Base");
    let (bs, bd, _) = bench_cell(&blind, &cfg, "Blind");
    ensure(
        bs < ss,
        format!("gap hard, {n} trials: blind Succ. {bs:.3} (Dist. {bd:.2}) < sighted Succ. {ss:.3} (Dist. {sd:.2})"),
    )
}

fn criterion_7b(shared: &mut Shared) -> Check {
    let cfg = smoke_config();
    let staged = match shared.stage2.clone() {
        Some(p) => p,
        None => train_stage2(&cfg, Some(stage1_policy(shared)), 0).0,
    };
    let mut os_cfg = cfg.clone();
    Ablation::MoreOs.apply(&mut os_cfg);
    let (one_stage, _) = train_stage2(&os_cfg, None, 0);
    let (ss, sd, n) = bench_cell(&staged, &cfg, "MoRE");
    let (os, od, _) = bench_cell(&one_stage, &cfg, "MoRE-OS");
    let cell = &cfg.bench.suite[0];
    ensure(
        od < sd && os <= ss,
        format!(
            "smoke benchmark ({} {}, {n} trials): MoRE-OS Succ. {os:.3} Dist. {od:.2} vs staged Succ. {ss:.3} Dist. {sd:.2} (Dist. strictly lower, Succ. not higher)",
            cell.obstacle, cell.mode
        ),
    )
}

fn squat_config(target: f64) -> RunConfig {
    let mut cfg = smoke_config();
    cfg.train.gait.distribution = vec![0.0, 0.0, 1.0];
    cfg.train.rewards.squat_target = target;
    cfg.amp.clips = vec![ClipParams::preset(ClipGait::Squat)];
    cfg
}

fn criterion_7c(shared: &mut Shared) -> Check {
    let base = stage1_policy(shared);
    let mut heights = Vec::new();
    for target in [0.55, 0.60] {
        let cfg = squat_config(target);
        let (p, _) = train_stage2(&cfg, Some(base.clone()), 0);
        let v = bench::measure_gait_attribute(&p, &cfg.train.env, Gait::Squat, 0.45, 100, 500, 100, 0).unwrap();
        let n = v.len();
        heights.push((target, bench::mean_std(&v), n));
    }
    let ((lo_t, (lo_m, lo_s), lo_n), (hi_t, (hi_m, hi_s), hi_n)) = (heights[0], heights[1]);
    ensure(
        lo_m < hi_m && lo_n >= 100 && hi_n >= 100,
        format!(
            "achieved squat height: target {lo_t} -> {lo_m:.3} ± {lo_s:.3} ({lo_n} rollouts) < target {hi_t} -> {hi_m:.3} ± {hi_s:.3} ({hi_n} rollouts)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

const TINY: &str = r#"
format_version = 1

[train]
iterations = 30

[train.env]
episode_length = 1.0

[train.policy]
d_f = 8
d_z = 16
scan_hidden = [16]
history_hidden = [16]
trunk_hidden = [16]
expert_hidden = [8]
gate_hidden = [8]
critic_hidden = [16]

[train.ppo]
n_envs = 6
horizon = 32
epochs = 1
minibatches = 2

[train.curriculum]
terrains = ["gap", "step", "stair"]
levels = 4
promote = 0.001
demote = 0.0

[amp]
batch_size = 16
warmup_updates = 2
warmup_rollouts = 1

[stage2]
iterations = 3

[bench]
timeout = 3.0
gaits = [0, 2]

[[bench.suite]]
obstacle = "gap"
mode = "hard"
trials = 3
seed_base = 0

[[bench.suite]]
obstacle = "stair"
mode = "easy"
trials = 2
seed_base = 5
"#;

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
        }
    }
    out
}

struct RunBytes {
    metrics1: Vec<u8>,
    metrics2: Vec<u8>,
    ckpt1: BTreeMap<String, Vec<u8>>,
    ckpt2: BTreeMap<String, Vec<u8>>,
    report: Vec<u8>,
}

fn det_run(cfg: &RunConfig, root: &Path) -> RunBytes {
    let mut t = stage1_trainer(cfg, 11).unwrap();
    run_iterations(&mut t, cfg, 4, Some(&root.join("s1")), 0, |_| {}).unwrap();
    let mut t2 = stage2_trainer(cfg, Some(t.policy.clone()), 11).unwrap();
    warmup_discriminators(&mut t2).unwrap();
    run_iterations(&mut t2, cfg, cfg.stage2.iterations, Some(&root.join("s2")), 0, |_| {}).unwrap();
    let report = run_benchmark(
        &t2.policy,
        &cfg.train.env,
        &cfg.train.rewards,
        &cfg.bench,
        "MoRE",
        &cfg.hash(),
        11,
        Some(&root.join("traces")),
    )
    .unwrap();
    RunBytes {
        metrics1: fs::read(root.join("s1/metrics.jsonl")).unwrap(),
        metrics2: fs::read(root.join("s2/metrics.jsonl")).unwrap(),
        ckpt1: dir_bytes(&root.join("s1/checkpoint")),
        ckpt2: dir_bytes(&root.join("s2/checkpoint")),
        report: report.to_json().unwrap().into_bytes(),
    }
}

fn in_range(kind: TerrainKind, v: f64) -> bool {
    let (lo, hi) = match kind {
        TerrainKind::Gap => (0.05, 0.45),
        TerrainKind::Step => (0.05, 0.30),
        TerrainKind::Stair => (0.05, 0.15),
        _ => return true,
    };
    v >= lo - 1e-12 && v <= hi + 1e-12
}

fn criterion_8() -> Check {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = det_run(&cfg, a_dir.path());
    let b = det_run(&cfg, b_dir.path());
    let same = [
        ("stage-1 metrics", a.metrics1 == b.metrics1),
        ("stage-2 metrics", a.metrics2 == b.metrics2),
        ("stage-1 checkpoint", !a.ckpt1.is_empty() && a.ckpt1 == b.ckpt1),
        ("stage-2 checkpoint", !a.ckpt2.is_empty() && a.ckpt2 == b.ckpt2),
        ("benchmark report", a.report == b.report),
    ];
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();

    // Succ./Dist. recomputed from the written traces.
    let report = bench::BenchmarkReport::from_json(std::str::from_utf8(&a.report).unwrap()).unwrap();
    let traces = a_dir.path().join("traces");
    let mut audit = Vec::new();
    let mut cells = report.cells.iter();
    let mut n_traces = 0;
    for entry in &cfg.bench.suite {
        for &gait in &cfg.bench.gaits {
            let cell = cells.next().unwrap();
            let outcomes: Vec<_> = cell
                .seeds
                .iter()
                .map(|&s| {
                    n_traces += 1;
                    let recs = read_trace(trace_path(&traces, "MoRE", entry.obstacle, entry.mode, gait, s)).unwrap();
                    outcome_from_trace(&recs, s, report.goal).unwrap()
                })
                .collect();
            let (succ, dist) = summarize(&outcomes);
            if outcomes != cell.outcomes || succ != cell.succ || dist != cell.dist {
                audit.push(format!("{} {} g{gait}", entry.obstacle, entry.mode));
            }
        }
    }

    // Curriculum and terrain bounds over a full run.
    let mut t = stage1_trainer(&cfg, 12).unwrap();
    let mut violations = Vec::new();
    let mut max_diff = 0.0f64;
    let mut obstacles = 0usize;
    for _ in 0..cfg.train.iterations {
        let m = t.iterate().unwrap();
        for (k, d) in &m.curriculum {
            if !(0.0..=1.0).contains(d) {
                violations.push(format!("{k} mean difficulty {d}"));
            }
        }
        for (e, env) in t.envs().enumerate() {
            let d = t.curriculum.difficulty(e);
            max_diff = max_diff.max(d);
            if !(0.0..=1.0).contains(&d) {
                violations.push(format!("env {e} difficulty {d}"));
            }
            for o in &env.terrain().obstacles {
                obstacles += 1;
                if !in_range(o.kind, o.value) {
                    violations.push(format!("{} value {}", o.kind, o.value));
                }
            }
        }
    }
    let ok = differing.is_empty() && audit.is_empty() && violations.is_empty() && n_traces > 0 && max_diff > 0.0;
    ensure(
        ok,
        format!(
            "byte-identical metrics/checkpoints/report (differing {differing:?}); {n_traces} traces reproduce report Succ./Dist. (mismatched {audit:?}); {} iterations, {obstacles} obstacle checks, max difficulty {max_diff:.2}, violations {:?}",
            cfg.train.iterations,
            &violations[..violations.len().min(3)]
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id || id.starts_with(w.as_str()));
    let mut shared = Shared::default();
    let mut failed = 0;
    let criteria: Vec<(&str, &str, Box<dyn Fn(&mut Shared) -> Check>)> = vec![
        ("1", "gradient correctness", Box::new(|_: &mut Shared| criterion_1())),
        ("2", "closed-form rewards", Box::new(|_: &mut Shared| criterion_2())),
        ("3", "mixture algebra", Box::new(|_: &mut Shared| criterion_3())),
        ("4", "zero-residual equivalence", Box::new(|_: &mut Shared| criterion_4())),
        ("5", "discriminator learnability", Box::new(|_: &mut Shared| criterion_5())),
        ("6", "smoke training", Box::new(criterion_6)),
        ("7a", "blind vs sighted on hard gaps", Box::new(|_: &mut Shared| criterion_7a())),
        ("7b", "one-stage vs staged", Box::new(criterion_7b)),
        ("7c", "squat target modulation", Box::new(criterion_7c)),
        ("8", "determinism and audit", Box::new(|_: &mut Shared| criterion_8())),
    ];
    panic::set_hook(Box::new(|_| {}));
    for (id, name, f) in &criteria {
        if !run(id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| f(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {id} [PASS] {name}: {d} ({secs:.0}s)"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} [FAIL] {name}: {d} ({secs:.0}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
