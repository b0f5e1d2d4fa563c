//! Plan execution: trains each run of a [`PrunePlan`], saves rewind
//! checkpoints, computes masks from converged models, and rewinds with
//! bit-exact semantics. Every run starts with a fresh optimizer (t = 0) so
//! the warmup plateau is repeated, and masked weights are re-zeroed after
//! every optimizer step.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{backward, build_model, forward_loss, ModelConfig, ParamRegistry};
use crate::optim::{optimizer_step, AdamParams, OptimizerState};
use crate::plan::{PrunePlan, RewindTo, RunMode, TransformKind};
use crate::pruning::{
    apply_mask, apply_mask_with_moments, clt_transform, enforce_mask_after_step, magnitude_mask,
    random_sign_transform, target_sparsity, MaskSet,
};
use crate::sparse::report_model_memory;
use crate::tasks::{dev_stream_seed, generate_task_batch, train_stream_seed, TaskKind};

/// Training knobs shared by every run of a plan.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub task: TaskKind,
    pub seq_len: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    /// Warmup length as a fraction of each run's steps.
    pub warmup_fraction: f64,
    /// Held-out batches per evaluation.
    pub eval_batches: usize,
    /// Steps between evaluations; defaults to run_steps / 20.
    pub eval_interval: Option<u64>,
    pub value_width: usize,
    pub index_width: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            task: TaskKind::Copy,
            seq_len: 8,
            batch_size: 8,
            adam: AdamParams::default(),
            warmup_fraction: 0.02,
            eval_batches: 8,
            eval_interval: None,
            value_width: 4,
            index_width: 4,
        }
    }
}

/// Metrics captured at one evaluation checkpoint of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub token_accuracy: f64,
    pub sparsity: f64,
    pub max_abs_weight: f64,
    pub mean_abs_weight: f64,
    pub memory_bytes: u64,
}

/// Per-run outcome: the evaluation trail plus the selected best checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub target_sparsity: f64,
    pub mode: String,
    pub rows: Vec<MetricsRow>,
    pub best_step: u64,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub final_sparsity: f64,
}

pub struct PlanOutcome {
    pub records: Vec<RunRecord>,
    pub final_checkpoint: Checkpoint,
}

/// Callbacks for artifact writing and white-box inspection during execution.
pub trait RunObserver {
    fn on_initial_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_run_start(
        &mut self,
        _run_index: usize,
        _reg: &ParamRegistry,
        _mask: &MaskSet,
        _opt: &OptimizerState,
    ) -> Result<()> {
        Ok(())
    }
    fn on_rewind_checkpoint(&mut self, _run_index: usize, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_run_complete(
        &mut self,
        _run_index: usize,
        _record: &RunRecord,
        _final_ckpt: &Checkpoint,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

/// Weight transform applied at rewind time.
#[derive(Debug, Clone, Copy)]
pub enum Transform {
    None,
    Clt,
    RandomSign { seed: u64 },
}

/// Restore theta_t from a checkpoint, apply the mask (and optional
/// transform), and pair it with a zeroed optimizer (t = 0).
pub fn rewind(
    ckpt: &Checkpoint,
    mask: &MaskSet,
    transform: Transform,
) -> Result<(ParamRegistry, OptimizerState)> {
    let mut reg = ckpt.params.clone();
    reg.zero_grads();
    apply_mask(&mut reg, mask)?;
    match transform {
        Transform::None => {}
        Transform::Clt => clt_transform(&mut reg, mask)?,
        Transform::RandomSign { seed } => random_sign_transform(&mut reg, mask, seed)?,
    }
    let opt = OptimizerState::new(&reg, ckpt.optimizer.params, ckpt.optimizer.warmup);
    Ok((reg, opt))
}

/// Next-iteration mask from a converged model, chained on the prior mask.
/// Requires a strict sparsity increase.
pub fn mask_from_converged(
    converged: &ParamRegistry,
    next_sparsity: f64,
    prior: &MaskSet,
) -> Result<MaskSet> {
    if next_sparsity <= prior.sparsity() {
        return Err(Error::MaskMonotonicity {
            requested: next_sparsity,
            prior: prior.sparsity(),
        });
    }
    magnitude_mask(converged, next_sparsity, prior)
}

/// Max and mean |weight| over the surviving prunable entries.
fn weight_stats(reg: &ParamRegistry, mask: &MaskSet) -> (f64, f64) {
    let mut max_abs = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for entry in reg.prunable_entries() {
        let m = mask.get(&entry.name).expect("mask covers registry");
        for (&v, &keep) in entry.tensor.values().iter().zip(m) {
            if keep == 1.0 {
                let a = v.abs();
                max_abs = max_abs.max(a);
                sum += a;
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (max_abs, sum / count as f64)
    }
}

/// Held-out loss and token accuracy over the dev stream.
fn evaluate(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    dev_seed: u64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for counter in 0..settings.eval_batches {
        let batch = generate_task_batch(
            settings.task,
            dev_seed,
            counter as u64,
            settings.batch_size,
            settings.seq_len,
            cfg.vocab_size,
        );
        let fp = forward_loss(reg, cfg, &batch)?;
        loss_sum += fp.loss_value();
        acc_sum += fp.token_accuracy();
    }
    let n = settings.eval_batches as f64;
    Ok((loss_sum / n, acc_sum / n))
}

fn snapshot_params(reg: &ParamRegistry) -> ParamRegistry {
    let mut copy = reg.clone();
    copy.zero_grads();
    copy
}

const SIGN_TRANSFORM_SALT: u64 = 0x51c4_0000_0000_0000;

/// Execute every run of a plan. `seed` drives model init, the per-run
/// training streams, and any random-sign transforms; identical seeds give
/// bitwise identical outcomes.
pub fn execute_plan(
    plan: &PrunePlan,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    seed: u64,
    observer: &mut dyn RunObserver,
) -> Result<PlanOutcome> {
    let mut cfg = *model_cfg;
    cfg.seed = seed;
    if settings.seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: settings.seq_len,
            max: cfg.max_seq_len,
        });
    }
    let dev_seed = dev_stream_seed(seed);

    let mut reg = build_model(&cfg)?;
    let mut mask = MaskSet::all_ones(&reg);
    let initial_ckpt = Checkpoint::new(
        "initial",
        "",
        0,
        snapshot_params(&reg),
        OptimizerState::new(&reg, settings.adam, 1),
        None,
    )?;
    observer.on_initial_checkpoint(&initial_ckpt)?;

    let mut first_rewind_ckpt: Option<Checkpoint> = None;
    let mut prev_rewind_ckpt: Option<Checkpoint> = None;
    let mut prev_final_id = "initial".to_string();
    let mut records = Vec::with_capacity(plan.steps.len());
    let mut final_ckpt: Option<Checkpoint> = None;

    for (run_idx, step) in plan.steps.iter().enumerate() {
        // Mask for this run: fixed-mask sparse runs compute it from the
        // previous run's converged model; gradual MP runs grow the prior
        // mask in-training.
        if matches!(step.mode, RunMode::FixedMask) && step.target_sparsity > mask.sparsity() {
            mask = mask_from_converged(&reg, step.target_sparsity, &mask)?;
        }

        let warmup = ((step.run_steps as f64 * settings.warmup_fraction).round() as u64).max(1);
        let mut opt;
        match step.rewind_to {
            RewindTo::None => {
                reg.zero_grads();
                apply_mask(&mut reg, &mask)?;
            }
            source => {
                let ckpt = match source {
                    RewindTo::Initial => &initial_ckpt,
                    RewindTo::EarlyOfPreviousRun => prev_rewind_ckpt.as_ref().ok_or_else(|| {
                        Error::Contract(format!("run {run_idx}: no previous rewind checkpoint"))
                    })?,
                    RewindTo::EarlyOfFirstRun => first_rewind_ckpt.as_ref().ok_or_else(|| {
                        Error::Contract(format!("run {run_idx}: no first-run rewind checkpoint"))
                    })?,
                    RewindTo::None => unreachable!(),
                };
                let transform = match step.transform {
                    TransformKind::None => Transform::None,
                    TransformKind::Clt => Transform::Clt,
                    TransformKind::RandomSign => Transform::RandomSign {
                        seed: crate::tasks::derive_seed(
                            seed,
                            SIGN_TRANSFORM_SALT + run_idx as u64,
                        ),
                    },
                };
                let (r, _) = rewind(ckpt, &mask, transform)?;
                reg = r;
            }
        }
        opt = OptimizerState::new(&reg, settings.adam, warmup);
        observer.on_run_start(run_idx, &reg, &mask, &opt)?;

        let run_id = format!("run-{run_idx}");
        let stream_seed = train_stream_seed(seed, run_idx);
        let eval_interval = settings
            .eval_interval
            .unwrap_or_else(|| (step.run_steps / 20).max(1));
        let mut rows: Vec<MetricsRow> = Vec::new();
        let mut rewind_ckpt_this_run: Option<Checkpoint> = None;

        for t in 0..step.run_steps {
            if let RunMode::MpGradual(sched) = &step.mode {
                if t % sched.prune_interval == 0 {
                    let s_t = target_sparsity(t, sched);
                    let next = magnitude_mask(&reg, s_t, &mask)?;
                    if next != mask {
                        mask = next;
                        apply_mask_with_moments(&mut reg, &mask, &mut opt)?;
                    }
                }
            }

            let batch = generate_task_batch(
                settings.task,
                stream_seed,
                t,
                settings.batch_size,
                settings.seq_len,
                cfg.vocab_size,
            );
            let mut fp = forward_loss(&reg, &cfg, &batch)?;
            backward(&mut fp, &mut reg)?;
            optimizer_step(&mut reg, &mut opt)?;
            enforce_mask_after_step(&mut reg, &mask)?;
            reg.zero_grads();

            let done = t + 1;
            if done == plan.rewind_step {
                let ckpt = Checkpoint::new(
                    format!("{run_id}-rewind"),
                    prev_final_id.clone(),
                    done,
                    snapshot_params(&reg),
                    opt.clone(),
                    Some(mask.clone()),
                )?;
                observer.on_rewind_checkpoint(run_idx, &ckpt)?;
                rewind_ckpt_this_run = Some(ckpt);
            }
            if done % eval_interval == 0 || done == step.run_steps {
                let (loss, acc) = evaluate(&reg, &cfg, settings, dev_seed)?;
                let (max_abs, mean_abs) = weight_stats(&reg, &mask);
                let memory =
                    report_model_memory(&reg, &mask, settings.value_width, settings.index_width)?
                        .chosen_total;
                if rows.last().map(|r: &MetricsRow| r.step) != Some(done) {
                    rows.push(MetricsRow {
                        step: done,
                        loss,
                        token_accuracy: acc,
                        sparsity: reg.measured_sparsity(),
                        max_abs_weight: max_abs,
                        mean_abs_weight: mean_abs,
                        memory_bytes: memory,
                    });
                }
            }
        }

        // Close any rounding gap between the last in-run prune event and the
        // schedule's final target.
        if let RunMode::MpGradual(sched) = &step.mode {
            let s_end = target_sparsity(step.run_steps, sched);
            let next = magnitude_mask(&reg, s_end, &mask)?;
            if next != mask {
                mask = next;
                apply_mask_with_moments(&mut reg, &mask, &mut opt)?;
                let (loss, acc) = evaluate(&reg, &cfg, settings, dev_seed)?;
                let (max_abs, mean_abs) = weight_stats(&reg, &mask);
                let memory =
                    report_model_memory(&reg, &mask, settings.value_width, settings.index_width)?
                        .chosen_total;
                rows.pop();
                rows.push(MetricsRow {
                    step: step.run_steps,
                    loss,
                    token_accuracy: acc,
                    sparsity: reg.measured_sparsity(),
                    max_abs_weight: max_abs,
                    mean_abs_weight: mean_abs,
                    memory_bytes: memory,
                });
            }
        }

        // Best-model selection: MP runs only consider the last 4 saved
        // checkpoints (earlier ones have not reached the target sparsity);
        // fixed-mask runs consider all. Ties keep the earliest step.
        let eligible: &[MetricsRow] = match step.mode {
            RunMode::MpGradual(_) => {
                let start = rows.len().saturating_sub(4);
                &rows[start..]
            }
            RunMode::FixedMask => &rows[..],
        };
        let best = eligible
            .iter()
            .fold(None::<&MetricsRow>, |acc, row| match acc {
                Some(b) if b.token_accuracy >= row.token_accuracy => Some(b),
                _ => Some(row),
            })
            .ok_or_else(|| Error::Contract("run produced no evaluation rows".into()))?;

        let record = RunRecord {
            run_index: run_idx,
            target_sparsity: step.target_sparsity,
            mode: match &step.mode {
                RunMode::FixedMask => "fixed-mask".to_string(),
                RunMode::MpGradual(_) => "mp-gradual".to_string(),
            },
            best_step: best.step,
            best_accuracy: best.token_accuracy,
            best_loss: best.loss,
            final_sparsity: reg.measured_sparsity(),
            rows,
        };

        let ckpt = Checkpoint::new(
            format!("{run_id}-final"),
            prev_final_id.clone(),
            step.run_steps,
            snapshot_params(&reg),
            opt.clone(),
            Some(mask.clone()),
        )?;
        observer.on_run_complete(run_idx, &record, &ckpt)?;
        records.push(record);

        prev_final_id = format!("{run_id}-final");
        if run_idx == 0 {
            first_rewind_ckpt = rewind_ckpt_this_run.clone();
        }
        prev_rewind_ckpt = rewind_ckpt_this_run;
        final_ckpt = Some(ckpt);
    }

    Ok(PlanOutcome {
        records,
        final_checkpoint: final_ckpt
            .ok_or_else(|| Error::Contract("plan has no steps".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{make_plan, PlanStep, PrunePlan, Technique};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_seq_len: 8,
            seed: 0,
        }
    }

    fn quick_settings() -> TrainSettings {
        TrainSettings {
            seq_len: 5,
            batch_size: 2,
            eval_batches: 2,
            // Short smoke runs: a longer warmup fraction keeps the plateau
            // learning rate tame.
            warmup_fraction: 0.25,
            ..TrainSettings::default()
        }
    }

    /// Observer that captures run-start states and rewind checkpoints.
    #[derive(Default)]
    struct Capture {
        starts: Vec<(usize, ParamRegistry, MaskSet, u64)>,
        rewinds: Vec<(usize, Checkpoint)>,
    }

    impl RunObserver for Capture {
        fn on_run_start(
            &mut self,
            run_index: usize,
            reg: &ParamRegistry,
            mask: &MaskSet,
            opt: &OptimizerState,
        ) -> Result<()> {
            self.starts
                .push((run_index, reg.clone(), mask.clone(), opt.t));
            Ok(())
        }

        fn on_rewind_checkpoint(&mut self, run_index: usize, ckpt: &Checkpoint) -> Result<()> {
            self.rewinds.push((run_index, ckpt.clone()));
            Ok(())
        }
    }

    #[test]
    fn slt_start_params_equal_masked_rewind_checkpoint() {
        let plan = make_plan(Technique::Slt, 0.2, 60, 3).unwrap();
        let mut cap = Capture::default();
        let outcome =
            execute_plan(&plan, &tiny_cfg(), &quick_settings(), 7, &mut cap).unwrap();
        assert_eq!(outcome.records.len(), 3);
        for (run_idx, reg, mask, opt_t) in &cap.starts {
            assert_eq!(*opt_t, 0, "optimizer counter must be 0 at run start");
            if *run_idx == 0 {
                continue;
            }
            let (_, src_ckpt) = cap
                .rewinds
                .iter()
                .find(|(i, _)| i == &(run_idx - 1))
                .expect("previous run saved a rewind checkpoint");
            let (expect, _) = rewind(src_ckpt, mask, Transform::None).unwrap();
            assert!(
                reg.bitwise_eq(&expect),
                "run {run_idx} start params must equal theta_t masked"
            );
        }
    }

    #[test]
    fn lt_rewinds_to_initialization() {
        let plan = make_plan(Technique::Lt, 0.1, 40, 2).unwrap();
        let mut cap = Capture::default();
        let cfg = tiny_cfg();
        execute_plan(&plan, &cfg, &quick_settings(), 3, &mut cap).unwrap();
        let mut init = build_model(&ModelConfig { seed: 3, ..cfg }).unwrap();
        let (_, _, mask, _) = &cap.starts[1];
        apply_mask(&mut init, mask).unwrap();
        assert!(cap.starts[1].1.bitwise_eq(&init));
    }

    #[test]
    fn mp_reaches_target_sparsity() {
        let plan = make_plan(Technique::Mp, 0.5, 100, 5).unwrap();
        let outcome = execute_plan(
            &plan,
            &tiny_cfg(),
            &quick_settings(),
            11,
            &mut NullObserver,
        )
        .unwrap();
        let record = &outcome.records[0];
        let total = outcome.final_checkpoint.params.prunable_params() as f64;
        assert!(
            (record.final_sparsity - 0.5).abs() <= 1.0 / total + 1e-9,
            "final sparsity {} vs target 0.5",
            record.final_sparsity
        );
        // masked entries are exactly zero in the final checkpoint
        outcome.final_checkpoint.check_mask_respected().unwrap();
    }

    #[test]
    fn execution_is_bitwise_deterministic() {
        let plan = make_plan(Technique::Slt, 0.1, 30, 2).unwrap();
        let run = || {
            execute_plan(
                &plan,
                &tiny_cfg(),
                &quick_settings(),
                99,
                &mut NullObserver,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a
            .final_checkpoint
            .params
            .bitwise_eq(&b.final_checkpoint.params));
        assert_eq!(
            a.final_checkpoint.to_bytes(),
            b.final_checkpoint.to_bytes()
        );
    }

    #[test]
    fn clt_transform_applied_at_rewind() {
        let plan = make_plan(Technique::Clt, 0.1, 30, 2).unwrap();
        let mut cap = Capture::default();
        execute_plan(&plan, &tiny_cfg(), &quick_settings(), 5, &mut cap).unwrap();
        let (_, reg, mask, _) = &cap.starts[1];
        for entry in reg.prunable_entries() {
            let alpha = crate::pruning::alpha_for_layer(entry.fan_in, entry.fan_out);
            let m = mask.get(&entry.name).unwrap();
            for (&v, &keep) in entry.tensor.values().iter().zip(m) {
                if keep == 1.0 {
                    assert!((v.abs() - alpha).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_from_converged_requires_strict_increase() {
        let reg = build_model(&tiny_cfg()).unwrap();
        let prior = MaskSet::all_ones(&reg);
        let m = magnitude_mask(&reg, 0.5, &prior).unwrap();
        assert!(matches!(
            mask_from_converged(&reg, 0.5, &m),
            Err(Error::MaskMonotonicity { .. })
        ));
        let next = mask_from_converged(&reg, 0.6, &m).unwrap();
        // keep-sets chain monotonically
        for name in m.names() {
            for (a, b) in m.get(name).unwrap().iter().zip(next.get(name).unwrap()) {
                assert!(b <= a);
            }
        }
    }

    #[test]
    fn custom_dense_plan_trains_without_pruning() {
        let plan = PrunePlan {
            technique: Technique::Slt,
            steps: vec![PlanStep {
                run_steps: 30,
                target_sparsity: 0.0,
                rewind_to: RewindTo::None,
                transform: TransformKind::None,
                mode: RunMode::FixedMask,
            }],
            rewind_step: 2,
        };
        let outcome = execute_plan(
            &plan,
            &tiny_cfg(),
            &quick_settings(),
            1,
            &mut NullObserver,
        )
        .unwrap();
        assert_eq!(outcome.records[0].final_sparsity, 0.0);
    }
}
