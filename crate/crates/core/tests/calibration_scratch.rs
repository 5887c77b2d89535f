//! Temporary calibration probe (not part of the suite; run with --ignored).

use dreamseg::eval::{binarize, iou};
use dreamseg::optim::{segment, OptimConfig, Representation, SegmentationTask};
use dreamseg::schedule::{default_schedule, ScheduleKind};
use dreamseg::score::OracleScoreModel;
use dreamseg::synth::oracle_scene;
use std::collections::BTreeMap;

fn run_once(seed: u64, config: &OptimConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let scene = oracle_scene(64, 64, seed).unwrap();
    let mut targets = BTreeMap::new();
    targets.insert(scene.caption.clone(), scene.target.clone());
    let model = OracleScoreModel::new(targets, default_schedule(ScheduleKind::CosineVp)).unwrap();
    let task = SegmentationTask::new(scene.image.clone(), vec![scene.caption.clone()]).unwrap();
    let t0 = std::time::Instant::now();
    let (mask, trace) = segment(&task, &model, config).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pred = binarize(&mask.plane(0), 0.5);
    let score = iou(&pred, &scene.gt_mask).unwrap();
    let vars = trace.variance_series();
    let means: Vec<f64> = trace
        .records
        .iter()
        .map(|r| r.loss_gravity / (64.0 * 64.0))
        .collect();
    println!(
        "seed {seed}: IoU {score:.4} in {secs:.1}s  var[50]={:.4} var[100]={:.4} var[150]={:.4} var[200]={:.4} meanmask[end]={:.3}",
        vars.get(49).unwrap_or(&f64::NAN),
        vars.get(99).unwrap_or(&f64::NAN),
        vars.get(149).unwrap_or(&f64::NAN),
        vars.last().unwrap(),
        means.last().unwrap()
    );
    (score, vars, means)
}

#[test]
#[ignore]
fn calibrate_fourier() {
    // (lr, lambda_g, n_b, t_min, t_max, n_freq, hidden, per_composite)
    let combos = [
        (0.0015, 1.0, 16, 0.4, 0.6, 32, 32, false),
        (0.002, 1.0, 16, 0.4, 0.6, 32, 32, false),
        (0.001, 1.0, 16, 0.4, 0.6, 32, 32, false),
        (0.002, 0.75, 12, 0.4, 0.6, 32, 32, false),
    ];
    for (lr, lg, nb, t0, t1, nf, hw, pcd) in combos {
        let mut config = OptimConfig::oracle_default();
        config.learning_rate = lr;
        config.weights.gravity = lg;
        config.n_b = nb;
        config.t_min = t0;
        config.t_max = t1;
        config.repr.n_freq = nf;
        config.repr.hidden_width = hw;
        config.per_composite_draws = pcd;
        println!("== fourier lr={lr} lg={lg} nb={nb} t=[{t0},{t1}] nf={nf} hw={hw} pcd={pcd}");
        for seed in 0..5 {
            let (score, vars, _) = run_once(seed, &config);
            let plateau = vars[199] - vars[99] < 0.1 * vars[99];
            println!("   -> IoU {score:.4} plateau(c6)={plateau}");
        }
    }
}

#[test]
#[ignore]
fn diagnose_dynamics() {
    use dreamseg::optim::segment;
    let mut config = OptimConfig::oracle_default();
    config.learning_rate = 0.002;
    config.weights.gravity = 0.5;
    config.n_b = 8;
    config.t_min = 0.4;
    config.t_max = 0.6;
    config.repr.n_freq = 32;
    config.repr.hidden_width = 32;
    config.snapshot_every = 20;

    for seed in [2u64, 3u64] {
        let scene = oracle_scene(64, 64, seed).unwrap();
        let mut targets = BTreeMap::new();
        targets.insert(scene.caption.clone(), scene.target.clone());
        let model =
            OracleScoreModel::new(targets, default_schedule(ScheduleKind::CosineVp)).unwrap();
        let task =
            SegmentationTask::new(scene.image.clone(), vec![scene.caption.clone()]).unwrap();
        let (_, trace) = segment(&task, &model, &config).unwrap();
        println!("== seed {seed} caption {:?}", scene.caption);
        for (iter, snap) in &trace.snapshots {
            let mut fg_sum = 0.0;
            let mut fg_n = 0.0;
            let mut bg_sum = 0.0;
            let mut bg_n = 0.0;
            let mut fg_above = 0.0;
            let mut bg_above = 0.0;
            for ((i, j), &is_fg) in scene.gt_mask.indexed_iter() {
                let v = snap.alphas[[0, i, j]];
                if is_fg {
                    fg_sum += v;
                    fg_n += 1.0;
                    if v >= 0.5 {
                        fg_above += 1.0;
                    }
                } else {
                    bg_sum += v;
                    bg_n += 1.0;
                    if v >= 0.5 {
                        bg_above += 1.0;
                    }
                }
            }
            println!(
                "  it {iter:3}: fg_mean {:.3} bg_mean {:.3} | fg>=.5 {:.2} bg>=.5 {:.3}",
                fg_sum / fg_n,
                bg_sum / bg_n,
                fg_above / fg_n,
                bg_above / bg_n
            );
        }
    }
}

#[test]
#[ignore]
fn calibrate_pixel() {
    let mut config = OptimConfig::oracle_default();
    config.representation = Representation::Pixel;
    println!("== pixel, oracle_default");
    for seed in 0..3 {
        let (_, vars, _) = run_once(seed, &config);
        // Strictness over the last 100 iterations.
        let mut violations = 0;
        for i in 100..vars.len() {
            if vars[i] <= vars[i - 1] {
                violations += 1;
            }
        }
        println!("  strictness violations in last 100: {violations}");
    }
}
