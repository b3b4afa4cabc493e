// temporary: reduced-scale ablation schedule sweep
use spnn_core::dataset::{self, Split};
use spnn_core::train::{self, evaluate, Mode, TrainingConfig};
use spnn_core::oldroyd;

fn subset(data: &dataset::TrajectoryDataset, n_train: usize) -> dataset::TrajectoryDataset {
    let mut out = data.clone();
    let mut keep: Vec<usize> = data.indices_of(Split::Train).into_iter().take(n_train).collect();
    keep.extend(data.indices_of(Split::Test));
    keep.sort_unstable();
    out.trajectories = keep.iter().map(|&i| data.trajectories[i].clone()).collect();
    out.manifest.trajectories = keep.iter().map(|&i| data.manifest.trajectories[i].clone()).collect();
    out.manifest.n_trajectories = out.trajectories.len();
    out
}

fn main() {
    let params = oldroyd::CouetteParams::default();
    let base = oldroyd::generate_dataset(&params, 7).unwrap();
    for (label, milestones) in [
        ("m100/200", vec![100usize, 200]),
        ("m150/250", vec![150, 250]),
        ("m250/290", vec![250, 290]),
        ("none", vec![500, 1000]),
    ] {
        for mode in [Mode::Spnn, Mode::Unconstrained, Mode::Blackbox] {
            let mut mses = Vec::new();
            let mut blowups = 0usize;
            for seed in 101..106u64 {
                let labeled = dataset::split(base.clone(), 0.8, seed);
                let clean = subset(&labeled, 20);
                let mut config = TrainingConfig::defaults_for("couette", mode, seed).unwrap();
                config.n_epochs = 300;
                config.milestones = milestones.clone();
                let outcome = train::train(&config, &clean).unwrap();
                let ev = evaluate(&outcome.checkpoint, &clean, 1.0).unwrap();
                let vals: Vec<f64> = ev.report.per_trajectory.iter()
                    .filter(|t| t.split == Split::Test && t.diverged_at.is_none())
                    .map(|t| t.mse_data_mean).collect();
                blowups += ev.report.per_trajectory.iter().filter(|t| t.diverged_at.is_some()).count();
                let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                mses.push(mean);
            }
            mses.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let strs: Vec<String> = mses.iter().map(|v| format!("{v:.2e}")).collect();
            println!("{label:9} {mode:14}: median {:.3e}  all [{}]  blowup-trajs {blowups}",
                     mses[2], strs.join(", "));
        }
    }
}
