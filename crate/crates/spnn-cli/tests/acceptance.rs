//! Acceptance suite. Each criterion is one test that prints a `[C#] PASS` /
//! `[C#] FAIL` line (visible with `--nocapture`); the test outcome mirrors
//! the line. The full-scale training criteria are compute-heavy and run
//! inside the normal test harness on purpose: this suite is the exit gate.
//!
//! Criteria:
//!  C1  rollout-loss gradients match central finite differences (< 1e-5)
//!  C2  exactly degenerate operator fixtures conserve the discrete energy
//!      and produce entropy
//!  C3  pendulum ground truth: energy drift < 1e-6 over the horizon and
//!      non-decreasing total entropy at every step
//!  C4  full-scale pendulum training reaches per-variable test MSE within
//!      x10 of the reference magnitudes (degeneracy MSE <= 1e-5)
//!  C5  learned pendulum rollouts: entropy non-decreasing (1e-4/step) and
//!      bounded energy wander on every test trajectory
//!  C6  dumbbell micro-solver steady moments vs the analytic oracle
//!  C7  Couette macro steady state: linear profile within 2%, startup
//!      ordering properties
//!  C8  ablation ordering over 5 seeds: spnn < unconstrained < blackbox,
//!      noisy spnn within x5 of clean
//!  C9  CLI reruns with identical flags are bit-identical
//!  C10 exact reference-table and wall-clock reproduction is documented as
//!      out of scope

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use spnn_core::dataset::{self, NoiseScope, Split, TrajectoryDataset};
use spnn_core::exec::Execution;
use spnn_core::generic::{
    integrate_step, GenericOperators, GradientOperatorPair, StateVector,
};
use spnn_core::linalg::Mat;
use spnn_core::net::{Checkpoint, Mlp, MlpGradients, NormalizationStats};
use spnn_core::train::{
    self, evaluate, rollout, trajectory_backward, trajectory_loss, Mode, TrainingConfig,
};
use rand::Rng;
use spnn_core::{oldroyd, pendulum, rng};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {}: {}",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "[{criterion}] {detail}");
}

// ---------------------------------------------------------------- C1

fn random_valid_operators(n: usize, stream: &mut impl rand::Rng) -> GenericOperators {
    let mut s = Mat::zeros(n, n);
    let mut g = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, stream.gen_range(-1.0..1.0));
            g.set(i, j, stream.gen_range(-1.0..1.0));
        }
    }
    // L = S - S^T is exactly skew; M = G^T G is symmetric PSD
    let mut l = Mat::zeros(n, n);
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            l.set(i, j, s.get(i, j) - s.get(j, i));
            let mut acc = 0.0;
            for k in 0..n {
                acc += g.get(k, i) * g.get(k, j);
            }
            m.set(i, j, 0.5 * acc);
        }
    }
    // symmetrize bit-exactly
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m.get(i, j);
            m.set(j, i, v);
        }
    }
    GenericOperators::new(l, m).unwrap()
}

#[test]
fn c1_gradient_correctness() {
    let started = Instant::now();
    let mut worst_overall: f64 = 0.0;
    for config_idx in 0..20u64 {
        let mut stream = rng::stream(1000 + config_idx, 40);
        let n = [2usize, 3, 5][(config_idx % 3) as usize];
        let n_steps = 3 + (config_idx % 3) as usize;
        let hidden_layers = 1 + (config_idx % 3) as usize;
        let width = 6 + (config_idx % 3) as usize * 7; // 6, 13, 20
        let ops = random_valid_operators(n, &mut stream);
        // moderate data weights keep the scalar loss O(1)-O(10); round-off
        // in the two loss evaluations bounds what central differences can
        // resolve, independent of gradient correctness
        let lambda_d = [1.0, 3.0, 10.0][(config_idx % 3) as usize];
        let lambda_r = 1e-5;

        // smooth synthetic trajectory
        let n_snapshots = n_steps + 1;
        let mut values = Vec::with_capacity(n_snapshots * n);
        let base: Vec<f64> = (0..n).map(|_| stream.gen_range(-1.0..1.0)).collect();
        for snap in 0..n_snapshots {
            for (i, b) in base.iter().enumerate() {
                values
                    .push(b + 0.1 * (snap as f64) * ((i + 1) as f64 * 0.3).sin());
            }
        }
        let traj = dataset::Trajectory::new(values, n_snapshots, n).unwrap();
        let stats = NormalizationStats::identity(n);
        let mut net = Mlp::feedforward(n, width, hidden_layers, 2 * n * n, &mut stream);
        // keep the rollout near-neutral, as training does: a full-magnitude
        // random output layer inflates the loss by orders of magnitude and
        // drowns the finite differences in round-off
        for w in net.layers_mut().last_mut().unwrap().weight.data_mut() {
            *w *= 0.05;
        }
        let dt = 0.05;

        let loss = |net: &Mlp| -> f64 {
            let g =
                trajectory_loss(net, &stats, &traj, &ops, dt, false, Execution::Sequential)
                    .unwrap();
            lambda_d * g.l_data + g.l_degen + lambda_r * net.weight_norm_sq()
        };
        let graph =
            trajectory_loss(&net, &stats, &traj, &ops, dt, false, Execution::Sequential).unwrap();
        let mut grads = MlpGradients::zeros_like(&net);
        trajectory_backward(
            &net,
            &graph,
            &ops,
            lambda_d,
            true,
            &mut grads,
            Execution::Sequential,
        );
        grads.add_weight_decay(&net, lambda_r);

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for layer in 0..net.layers().len() {
            let n_weights = net.layers()[layer].weight.data().len();
            for idx in (0..n_weights).step_by(7) {
                let orig = net.layers()[layer].weight.data()[idx];
                net.layers_mut()[layer].weight.data_mut()[idx] = orig + eps;
                let up = loss(&net);
                net.layers_mut()[layer].weight.data_mut()[idx] = orig - eps;
                let down = loss(&net);
                net.layers_mut()[layer].weight.data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.layers[layer].weight.data()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
            for idx in 0..net.layers()[layer].bias.len().min(5) {
                let orig = net.layers()[layer].bias[idx];
                net.layers_mut()[layer].bias[idx] = orig + eps;
                let up = loss(&net);
                net.layers_mut()[layer].bias[idx] = orig - eps;
                let down = loss(&net);
                net.layers_mut()[layer].bias[idx] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.layers[layer].bias[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
        worst_overall = worst_overall.max(worst);
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C1",
        worst_overall < 1e-5 && elapsed < 60.0,
        &format!(
            "20 configurations, worst relative gradient error {worst_overall:.2e} \
             (budget 1e-5), {elapsed:.1} s"
        ),
    );
}

// ---------------------------------------------------------------- C2

#[test]
fn c2_generic_structure_with_degenerate_fixtures() {
    let mut stream = rng::stream(2024, 41);
    let mut worst_energy: f64 = 0.0;
    let mut worst_entropy: f64 = 0.0;

    // pendulum fixtures: A z avoids the entropy slots, B z lives on them
    let ops = pendulum::operators();
    for _ in 0..50 {
        let n = 10;
        let z: Vec<f64> = (0..n).map(|_| stream.gen_range(-3.0..3.0)).collect();
        let mut a = Mat::zeros(n, n);
        let mut b = Mat::zeros(n, n);
        for i in 0..8 {
            for j in 0..n {
                a.set(i, j, stream.gen_range(-1.0..1.0));
            }
        }
        for i in 8..10 {
            for j in 0..n {
                b.set(i, j, stream.gen_range(-1.0..1.0));
            }
        }
        let (de, ds) = degenerate_increments(&z, &ops, a, b, 0.05);
        worst_energy = worst_energy.max(de);
        worst_entropy = worst_entropy.min(ds);
    }

    // Couette fixtures: columns of A in null(M), columns of B in null(L)
    let ops = oldroyd::operators();
    for _ in 0..50 {
        let n = 5;
        let z: Vec<f64> = (0..n).map(|_| stream.gen_range(-2.0..2.0)).collect();
        let null_m = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, -1.0, 0.0],
        ];
        let null_l = [
            [1.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 1.0],
        ];
        let mut a = Mat::zeros(n, n);
        let mut b = Mat::zeros(n, n);
        for col in 0..n {
            let ca: f64 = stream.gen_range(-1.0..1.0);
            let cb: f64 = stream.gen_range(-1.0..1.0);
            let cc: f64 = stream.gen_range(-1.0..1.0);
            for row in 0..n {
                a.set(
                    row,
                    col,
                    ca * null_m[0][row] + cb * null_m[1][row] + cc * null_m[2][row],
                );
                b.set(
                    row,
                    col,
                    cb * null_l[0][row] + cc * null_l[1][row] + ca * null_l[2][row],
                );
            }
        }
        let (de, ds) = degenerate_increments(&z, &ops, a, b, 0.05);
        worst_energy = worst_energy.max(de);
        worst_entropy = worst_entropy.min(ds);
    }

    report(
        "C2",
        worst_energy <= 1e-12 && worst_entropy >= -1e-12,
        &format!(
            "100 degenerate fixtures: max |(A z)^T dz| (scaled) {worst_energy:.2e}, \
             min (B z)^T dz (scaled) {worst_entropy:.2e}"
        ),
    );
}

/// Returns (scaled |energy increment|, scaled entropy increment) for one
/// degenerate fixture.
fn degenerate_increments(
    z: &[f64],
    ops: &GenericOperators,
    a: Mat,
    b: Mat,
    dt: f64,
) -> (f64, f64) {
    let n = z.len();
    let layout = spnn_core::generic::StateLayout::new(
        (0..n)
            .map(|i| spnn_core::generic::StateLayout::slot(&format!("z{i}"), 1, "-"))
            .collect(),
    );
    let grads = GradientOperatorPair::new(a, b).unwrap();
    let state = StateVector::new(z.to_vec(), layout).unwrap();

    // the fixtures are degenerate up to round-off of the null-space
    // combinations (the pendulum ones are bit-exact)
    let (r1, r2) = spnn_core::generic::degeneracy_residuals(&state, ops, &grads).unwrap();
    let residual = r1.iter().chain(&r2).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(residual <= 1e-13, "fixture residual {residual}");

    let next = integrate_step(&state, ops, &grads, dt).unwrap();
    let dz: Vec<f64> = next.values.iter().zip(z).map(|(a, b)| a - b).collect();
    let az = grads.a.matvec(z);
    let bz = grads.b.matvec(z);
    let de: f64 = az.iter().zip(&dz).map(|(x, y)| x * y).sum();
    let ds: f64 = bz.iter().zip(&dz).map(|(x, y)| x * y).sum();
    let az_norm = az.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bz_norm = bz.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dz_norm = dz.iter().map(|v| v * v).sum::<f64>().sqrt();
    (
        de.abs() / (1.0 + az_norm * dz_norm),
        ds / (1.0 + bz_norm * dz_norm),
    )
}

// ---------------------------------------------------------------- C3

#[test]
fn c3_pendulum_ground_truth_thermodynamics() {
    let started = Instant::now();
    let params = pendulum::PendulumParams::default();
    let data = pendulum::generate_dataset(&params, 7).unwrap();
    let mut worst_drift: f64 = 0.0;
    let mut worst_ds: f64 = f64::INFINITY;
    for t in &data.trajectories {
        let z0: &[f64] = t.snapshot(0);
        let e0 = pendulum::total_energy(z0.try_into().unwrap(), &params).unwrap();
        let mut prev_s = f64::NEG_INFINITY;
        for snap in 0..t.n_snapshots {
            let z: &[f64] = t.snapshot(snap);
            let e = pendulum::total_energy(z.try_into().unwrap(), &params).unwrap();
            worst_drift = worst_drift.max(((e - e0) / e0).abs());
            let s = z[8] + z[9];
            if snap > 0 {
                worst_ds = worst_ds.min(s - prev_s);
            }
            prev_s = s;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C3",
        worst_drift < 1e-6 && worst_ds >= -1e-12 && elapsed < 60.0,
        &format!(
            "50 trajectories x 60 s: worst relative energy drift {worst_drift:.2e}, \
             smallest per-step entropy increment {worst_ds:.2e}, {elapsed:.1} s"
        ),
    );
}

// ------------------------------------------------------- C4 and C5

struct FullScaleRun {
    data: TrajectoryDataset,
    checkpoint: Checkpoint,
    train_minutes: f64,
}

static FULL_SCALE: OnceLock<FullScaleRun> = OnceLock::new();

fn full_scale_run() -> &'static FullScaleRun {
    FULL_SCALE.get_or_init(|| {
        let params = pendulum::PendulumParams::default();
        let data = pendulum::generate_dataset(&params, 7).unwrap();
        let data = dataset::split(data, 0.8, 7);
        let config = TrainingConfig::defaults_for("pendulum", Mode::Spnn, 0).unwrap();
        eprintln!("[C4/C5] training the full-scale pendulum model (1800 epochs)...");
        let started = Instant::now();
        let outcome = train::train(&config, &data).unwrap();
        let train_minutes = started.elapsed().as_secs_f64() / 60.0;
        eprintln!("[C4/C5] training finished in {train_minutes:.1} min");
        FullScaleRun {
            data,
            checkpoint: outcome.checkpoint,
            train_minutes,
        }
    })
}

/// Reference per-variable test-MSE magnitudes of the original full-scale
/// experiments; the acceptance budget is x10 of each.
const REFERENCE_TEST_MSE: [(&str, f64); 10] = [
    ("q1_x", 3.87e-2),
    ("q1_y", 8.21e-2),
    ("q2_x", 3.65e-2),
    ("q2_y", 3.73e-2),
    ("p1_x", 1.33e-4),
    ("p1_y", 4.06e-3),
    ("p2_x", 9.84e-4),
    ("p2_y", 1.79e-4),
    ("s1", 3.51e-5),
    ("s2", 3.18e-5),
];

const DEGENERACY_TEST_MSE_BUDGET: f64 = 1e-5;

#[test]
fn c4_pendulum_training_reproduction() {
    let run = full_scale_run();
    let evaluation = evaluate(&run.checkpoint, &run.data, 1.0).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, reference) in REFERENCE_TEST_MSE {
        let var = evaluation
            .report
            .variables
            .iter()
            .find(|v| v.name == name)
            .expect("variable present");
        let budget = 10.0 * reference;
        let ok_data = var.mse_data_test.is_finite() && var.mse_data_test <= budget;
        let degen = var.mse_degen_test.unwrap_or(f64::NAN);
        let ok_degen = degen.is_finite() && degen <= DEGENERACY_TEST_MSE_BUDGET;
        pass &= ok_data && ok_degen;
        lines.push(format!(
            "{name}: data {:.3e} (budget {budget:.3e}{}) degen {:.3e} (budget 1e-5{})",
            var.mse_data_test,
            if ok_data { "" } else { " EXCEEDED" },
            degen,
            if ok_degen { "" } else { " EXCEEDED" },
        ));
    }
    let diverged = evaluation
        .report
        .per_trajectory
        .iter()
        .filter(|t| t.split == Split::Test && t.diverged_at.is_some())
        .count();
    if diverged > 0 {
        pass = false;
        lines.push(format!("{diverged} test rollouts diverged"));
    }
    report(
        "C4",
        pass,
        &format!(
            "full-scale run ({:.1} min train): {}",
            run.train_minutes,
            lines.join("; ")
        ),
    );
}

#[test]
fn c5_thermodynamic_consistency_of_learned_rollouts() {
    let run = full_scale_run();
    let params: pendulum::PendulumParams =
        toml::Value::Table(run.data.manifest.params.clone())
            .try_into()
            .unwrap();
    let ops = pendulum::operators();
    let energy_budget = 10.0 * 8.86e-3;
    let mut worst_ds: f64 = f64::INFINITY;
    let mut worst_de: f64 = 0.0;
    let mut pass = true;
    let mut n_rollouts = 0;
    for idx in run.data.indices_of(Split::Test) {
        let gt = &run.data.trajectories[idx];
        let r = match rollout(
            &run.checkpoint.net,
            &run.checkpoint.stats,
            Mode::Spnn,
            gt.snapshot(0),
            Some(&ops),
            run.data.dt(),
            gt.n_snapshots - 1,
        ) {
            Ok(r) => r,
            Err(e) => {
                pass = false;
                eprintln!("[C5] test rollout {idx} failed: {e}");
                continue;
            }
        };
        n_rollouts += 1;
        let e0 = pendulum::total_energy(
            r.states[0].as_slice().try_into().unwrap(),
            &params,
        )
        .unwrap();
        let mut prev_s = f64::NEG_INFINITY;
        for (snap, state) in r.states.iter().enumerate() {
            let s = state[8] + state[9];
            if snap > 0 {
                worst_ds = worst_ds.min(s - prev_s);
            }
            prev_s = s;
            let e = pendulum::total_energy(state.as_slice().try_into().unwrap(), &params)
                .unwrap();
            worst_de = worst_de.max((e - e0).abs());
        }
    }
    pass &= worst_ds >= -1e-4 && worst_de <= energy_budget;
    report(
        "C5",
        pass,
        &format!(
            "{n_rollouts} test rollouts: smallest per-step entropy increment {worst_ds:.2e} \
             (tolerance -1e-4), largest |E(t) - E(0)| {worst_de:.2e} (budget {energy_budget:.2e})"
        ),
    );
}

// ---------------------------------------------------------------- C6

#[test]
fn c6_couette_micro_solver_moments() {
    let started = Instant::now();
    let k = 10_000;
    let we = 1.0;
    let rate = 1.0;
    let dt = 6.7e-4;
    let mut stream = rng::stream(7, rng::TRAJECTORY_STREAM_BASE);
    let mut ens = oldroyd::DumbbellEnsemble::equilibrium(k, &mut stream);
    // relax into the sheared steady state
    let relax_steps = (10.0 * we / dt) as usize;
    for _ in 0..relax_steps {
        oldroyd::sde_step(&mut ens, rate, we, dt, &mut stream);
    }
    // then average the estimators over another 10 We
    let mut ry2_acc = 0.0;
    let mut rxy_acc = 0.0;
    let mut samples = 0.0;
    for step in 0..relax_steps {
        oldroyd::sde_step(&mut ens, rate, we, dt, &mut stream);
        if step % 25 == 0 {
            let (ry2, rxy) = ens.second_moments();
            ry2_acc += ry2;
            rxy_acc += rxy;
            samples += 1.0;
        }
    }
    let ry2 = ry2_acc / samples;
    let rxy = rxy_acc / samples;
    let history = [oldroyd::ShearSegment {
        duration: f64::INFINITY,
        rate,
    }];
    let (oracle_ry2, oracle_rxy) = oldroyd::moment_oracle(&history, we, 1e6);
    let elapsed = started.elapsed().as_secs_f64();
    let ok = (ry2 - oracle_ry2).abs() <= 0.03 && (rxy - oracle_rxy).abs() <= 0.05;
    report(
        "C6",
        ok && elapsed < 60.0,
        &format!(
            "K = 10^4 steady shear: <r_y^2> = {ry2:.4} (oracle {oracle_ry2:.4} +- 0.03), \
             <r_x r_y> = {rxy:.4} (oracle {oracle_rxy:.4} +- 0.05), {elapsed:.1} s"
        ),
    );
}

// ---------------------------------------------------------------- C7

#[test]
fn c7_couette_macro_steady_state() {
    let started = Instant::now();
    let params = oldroyd::CouetteParams::default();
    let mut sim = oldroyd::CouetteSim::new(&params, 7).unwrap();
    let t_end = 10.0 * params.weissenberg;
    let n_steps = (t_end / params.dt).ceil() as usize;
    let dy = params.dy();
    let v_of = |sim: &oldroyd::CouetteSim| sim.state.v.clone();

    // startup ordering checks over the first part of the transient
    let mut monotone = true;
    let mut early_profiles = Vec::new();
    for step in 0..n_steps {
        sim.step(Execution::Parallel).unwrap();
        let v = v_of(&sim);
        for j in 0..v.len() - 1 {
            if v[j + 1] < v[j] - 1e-3 * params.lid_velocity {
                monotone = false;
            }
        }
        if step == 10 {
            early_profiles = v;
        }
    }
    // progress toward the steady profile decreases away from the lid
    let progress = |j: usize| early_profiles[j] / (j as f64 * dy).max(1e-12);
    let ordering_ok = progress(99) > progress(50) && progress(50) > progress(5);

    // final profile linear within 2% of V at every node
    let v = v_of(&sim);
    let mut worst = 0.0f64;
    for (j, vj) in v.iter().enumerate() {
        let target = (j as f64) * dy / params.height * params.lid_velocity;
        worst = worst.max((vj - target).abs() / params.lid_velocity);
    }
    // steady polymer stress at the interior nodes: eps * V / H, up to the
    // Monte-Carlo noise of the K-dumbbell estimator
    let tau_target = params.viscosity_ratio * params.lid_velocity / params.height;
    let mut worst_tau = 0.0f64;
    for j in 1..params.n_nodes() - 1 {
        worst_tau = worst_tau.max((sim.stresses[j] - tau_target).abs());
    }
    let tau_ok = worst_tau <= 0.05;
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C7",
        worst <= 0.02 && monotone && ordering_ok && tau_ok,
        &format!(
            "t = 10 We: max |v - linear| = {:.3}% of V (budget 2%), monotone profile {}, \
             lid-first ordering {}, max |tau - eps V/H| = {:.3} (budget 0.05), {:.0} s",
            100.0 * worst,
            monotone,
            ordering_ok,
            worst_tau,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- C8

/// Keep `n_train` training and every test trajectory of a labeled dataset.
fn subset_for_ablation(data: &TrajectoryDataset, n_train: usize) -> TrajectoryDataset {
    let mut out = data.clone();
    let keep: Vec<usize> = {
        let train: Vec<usize> = data.indices_of(Split::Train).into_iter().take(n_train).collect();
        let test = data.indices_of(Split::Test);
        let mut all = train;
        all.extend(test);
        all.sort_unstable();
        all
    };
    out.trajectories = keep
        .iter()
        .map(|&i| data.trajectories[i].clone())
        .collect();
    out.manifest.trajectories = keep
        .iter()
        .map(|&i| data.manifest.trajectories[i].clone())
        .collect();
    out.manifest.n_trajectories = out.trajectories.len();
    out
}

fn mean_test_mse(ckpt: &Checkpoint, data: &TrajectoryDataset) -> f64 {
    let evaluation = evaluate(ckpt, data, 1.0).unwrap();
    let values: Vec<f64> = evaluation
        .report
        .per_trajectory
        .iter()
        .filter(|t| t.split == Split::Test && t.diverged_at.is_none())
        .map(|t| t.mse_data_mean)
        .collect();
    if values.is_empty() {
        f64::INFINITY
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn c8_ablation_ordering() {
    let started = Instant::now();
    let params = oldroyd::CouetteParams::default();
    let base = oldroyd::generate_dataset(&params, 7).unwrap();

    let mut spnn_mse = Vec::new();
    let mut unconstrained_mse = Vec::new();
    let mut blackbox_mse = Vec::new();
    let mut noisy_mse = Vec::new();
    for seed in 101..106u64 {
        let labeled = dataset::split(base.clone(), 0.8, seed);
        let clean = subset_for_ablation(&labeled, 20);
        let noisy = subset_for_ablation(
            &dataset::add_noise(labeled.clone(), 0.01, seed, NoiseScope::Train),
            20,
        );
        for (mode, noisy_run) in [
            (Mode::Spnn, false),
            (Mode::Unconstrained, false),
            (Mode::Blackbox, false),
            (Mode::Spnn, true),
        ] {
            let mut config = TrainingConfig::defaults_for("couette", mode, seed).unwrap();
            config.n_epochs = 300;
            config.milestones = vec![100, 200];
            let data = if noisy_run { &noisy } else { &clean };
            let outcome = train::train(&config, data).unwrap();
            let mse = mean_test_mse(&outcome.checkpoint, data);
            eprintln!("[C8] seed {seed} {mode}{}: test MSE {mse:.3e}", if noisy_run { " (noisy)" } else { "" });
            match (mode, noisy_run) {
                (Mode::Spnn, false) => spnn_mse.push(mse),
                (Mode::Unconstrained, false) => unconstrained_mse.push(mse),
                (Mode::Blackbox, false) => blackbox_mse.push(mse),
                (Mode::Spnn, true) => noisy_mse.push(mse),
                _ => unreachable!(),
            }
        }
    }
    // the trained integrator keeps producing finite states past the
    // training horizon
    let labeled = dataset::split(base.clone(), 0.8, 101);
    let clean = subset_for_ablation(&labeled, 20);
    let mut config = TrainingConfig::defaults_for("couette", Mode::Spnn, 101).unwrap();
    config.n_epochs = 300;
    config.milestones = vec![100, 200];
    let outcome = train::train(&config, &clean).unwrap();
    let extended = evaluate(&outcome.checkpoint, &clean, 1.2).unwrap();
    let extrapolation_ok = extended
        .report
        .per_trajectory
        .iter()
        .all(|t| t.diverged_at.is_none());

    let m_spnn = median(spnn_mse);
    let m_unc = median(unconstrained_mse);
    let m_bb = median(blackbox_mse);
    let m_noisy = median(noisy_mse);
    let ordering = m_spnn < m_unc && m_unc < m_bb;
    let noise_ok = m_noisy <= 5.0 * m_spnn;
    let elapsed = started.elapsed().as_secs_f64() / 60.0;
    report(
        "C8",
        ordering && noise_ok && extrapolation_ok,
        &format!(
            "medians over 5 seeds: spnn {m_spnn:.3e} < unconstrained {m_unc:.3e} < \
             blackbox {m_bb:.3e}: {ordering}; noisy spnn {m_noisy:.3e} <= 5x clean: {noise_ok}; \
             finite 1.2x-horizon rollouts: {extrapolation_ok}; {elapsed:.0} min"
        ),
    );
}

// ---------------------------------------------------------------- C9

fn run_spnn(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_spnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "spnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_dir() {
                stack.push(entry.path());
            } else {
                out.push((
                    entry
                        .path()
                        .strip_prefix(dir)
                        .unwrap()
                        .to_string_lossy()
                        .to_string(),
                    std::fs::read(entry.path()).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c9_cli_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // generate (pendulum, full default scale), train (reduced epochs),
    // evaluate; then rerun each with identical flags and compare bytes
    let gen_args = [
        "generate", "--system", "pendulum", "--seed", "7", "--out", "ds",
    ];
    let train_args = [
        "train", "--dataset", "ds", "--mode", "spnn", "--seed", "0", "--epochs", "3",
        "--out", "run",
    ];
    let eval_args = [
        "evaluate", "--checkpoint", "run/checkpoint.spnn", "--dataset", "ds",
        "--horizon-factor", "1.2", "--out", "eval",
    ];
    for args in [&gen_args[..], &train_args[..], &eval_args[..]] {
        run_spnn(args, root);
    }
    for dir in ["ds", "run", "eval"] {
        std::fs::rename(root.join(dir), root.join(format!("{dir}_first"))).unwrap();
    }
    for args in [&gen_args[..], &train_args[..], &eval_args[..]] {
        run_spnn(args, root);
    }
    let mut pass = true;
    let mut details = Vec::new();
    for dir in ["ds", "run", "eval"] {
        let same = dir_digest(&root.join(dir)) == dir_digest(&root.join(format!("{dir}_first")));
        pass &= same;
        details.push(format!("{dir}: {}", if same { "identical" } else { "DIFFERS" }));
    }
    report("C9", pass, &details.join(", "));
}

// ---------------------------------------------------------------- C10

#[test]
fn c10_documented_out_of_scope() {
    report(
        "C10",
        true,
        "exact reference-table values and wall-clock timings are out of scope by design; \
         covered by the order-of-magnitude and property criteria above",
    );
}
