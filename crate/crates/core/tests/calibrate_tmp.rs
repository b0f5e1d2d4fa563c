// Temporary calibration harness; removed before release.
use std::time::Instant;

use prunelab_core::model::ModelConfig;
use prunelab_core::plan::{
    make_plan, PlanStep, PrunePlan, RewindTo, RunMode, Technique, TransformKind,
};
use prunelab_core::runner::{execute_plan, NullObserver, TrainSettings};
use prunelab_core::optim::AdamParams;

fn base_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 256,
        max_seq_len: 16,
        seed: 1,
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 32,
        n_heads: 2,
        n_layers: 1,
        d_ff: 128,
        max_seq_len: 16,
        seed: 1,
    }
}

fn settings() -> TrainSettings {
    TrainSettings {
        seq_len: 8,
        batch_size: 8,
        ..TrainSettings::default()
    }
}

/// dense + single jump to 50% with a chosen transform
fn ablation_plan(steps: u64, transform: TransformKind) -> PrunePlan {
    PrunePlan {
        technique: Technique::Clt,
        steps: vec![
            PlanStep {
                run_steps: steps,
                target_sparsity: 0.0,
                rewind_to: RewindTo::None,
                transform: TransformKind::None,
                mode: RunMode::FixedMask,
            },
            PlanStep {
                run_steps: steps,
                target_sparsity: 0.5,
                rewind_to: RewindTo::EarlyOfPreviousRun,
                transform,
                mode: RunMode::FixedMask,
            },
        ],
        rewind_step: (steps / 20).max(1),
    }
}

#[test]
#[ignore]
fn calibrate_sign_ablation() {
    for steps in [600u64, 1000] {
        let mut clt_accs = Vec::new();
        let mut rs_accs = Vec::new();
        let t0 = Instant::now();
        for seed in [1u64, 2, 3, 4, 5] {
            let clt = execute_plan(
                &ablation_plan(steps, TransformKind::Clt),
                &small_cfg(),
                &settings(),
                seed,
                &mut NullObserver,
            )
            .unwrap();
            let rs = execute_plan(
                &ablation_plan(steps, TransformKind::RandomSign),
                &small_cfg(),
                &settings(),
                seed,
                &mut NullObserver,
            )
            .unwrap();
            clt_accs.push(clt.records[1].best_accuracy);
            rs_accs.push(rs.records[1].best_accuracy);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "steps={steps}: CLT accs {:?} mean {:.4} | RS accs {:?} mean {:.4} | {:.0}s",
            clt_accs.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            mean(&clt_accs),
            rs_accs.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(),
            mean(&rs_accs),
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn calibrate_dense_mp_slt() {
    let steps = 1500u64;
    let t0 = Instant::now();
    let slt = execute_plan(
        &make_plan(Technique::Slt, 0.5, steps, (steps as f64 * 0.05) as u64).unwrap(),
        &base_cfg(),
        &settings(),
        1,
        &mut NullObserver,
    )
    .unwrap();
    let t1 = t0.elapsed().as_secs_f64();
    let mp = execute_plan(
        &make_plan(Technique::Mp, 0.5, steps, (steps as f64 * 0.05) as u64).unwrap(),
        &base_cfg(),
        &settings(),
        1,
        &mut NullObserver,
    )
    .unwrap();
    let t2 = t0.elapsed().as_secs_f64();
    println!(
        "dense acc {:.4}; slt ladder accs {:?}; mp@0.5 acc {:.4}",
        slt.records[0].best_accuracy,
        slt.records
            .iter()
            .map(|r| (r.target_sparsity, (r.best_accuracy * 1000.0).round() / 10.0))
            .collect::<Vec<_>>(),
        mp.records[0].best_accuracy
    );
    println!("slt plan {t1:.0}s, mp plan {:.0}s, total {t2:.0}s", t2 - t1);

    // mp hand-off sanity: adam defaults
    let _ = AdamParams::default();
}
