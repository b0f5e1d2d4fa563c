//! Experiment plans: each pruning technique expressed as an ordered list of
//! training runs with a sparsity target, a rewind source, and an optional
//! weight transform.
//!
//! Run counts per technique (target s on the ladder):
//!   MP                      1 gradual run
//!   LT / SLT / CLT          1 dense run + one fixed-mask run per ladder level
//!   SLT-MP                  dense + SLT@50% + SLT@60% + one gradual MP run
//!   MP-SLT                  MP to 60% + fixed-mask runs up the remaining ladder

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{sparsity_ladder, PruneSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technique {
    Mp,
    Lt,
    Slt,
    Clt,
    SltMp,
    MpSlt,
    CltRandomSign,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::Mp => "mp",
            Technique::Lt => "lt",
            Technique::Slt => "slt",
            Technique::Clt => "clt",
            Technique::SltMp => "slt-mp",
            Technique::MpSlt => "mp-slt",
            Technique::CltRandomSign => "clt-random-sign",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Technique::Mp),
            "lt" => Ok(Technique::Lt),
            "slt" => Ok(Technique::Slt),
            "clt" => Ok(Technique::Clt),
            "slt-mp" => Ok(Technique::SltMp),
            "mp-slt" => Ok(Technique::MpSlt),
            "clt-random-sign" => Ok(Technique::CltRandomSign),
            other => Err(Error::Config(format!(
                "unknown technique '{other}' (expected mp, lt, slt, clt, slt-mp, mp-slt, clt-random-sign)"
            ))),
        }
    }
}

/// Where a run's starting parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewindTo {
    /// Keep the current parameters (first run of a plan).
    None,
    /// The untrained initialization.
    Initial,
    /// The early checkpoint of the most recent pruning iteration.
    EarlyOfPreviousRun,
    /// The early checkpoint of the first (dense) run; the variant used by
    /// the original stabilized-lottery-ticket recipe.
    EarlyOfFirstRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    None,
    Clt,
    RandomSign,
}

/// Fixed-mask training or gradual magnitude pruning under a cubic schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum RunMode {
    FixedMask,
    MpGradual(PruneSchedule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub run_steps: u64,
    pub target_sparsity: f64,
    pub rewind_to: RewindTo,
    pub transform: TransformKind,
    pub mode: RunMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub technique: Technique,
    pub steps: Vec<PlanStep>,
    /// Step within each run at which the rewind checkpoint is saved.
    pub rewind_step: u64,
}

impl PrunePlan {
    pub fn run_count(&self) -> usize {
        self.steps.len()
    }

    fn check(self) -> Result<Self> {
        let mut prev = -1.0;
        for (i, step) in self.steps.iter().enumerate() {
            if step.target_sparsity <= prev {
                return Err(Error::Contract(format!(
                    "plan step {i}: target sparsity {} does not increase past {prev}",
                    step.target_sparsity
                )));
            }
            prev = step.target_sparsity;
            if step.run_steps == 0 {
                return Err(Error::Config(format!("plan step {i}: zero run_steps")));
            }
            if self.rewind_step == 0 || self.rewind_step >= step.run_steps {
                return Err(Error::Config(format!(
                    "rewind step {} outside run of {} steps",
                    self.rewind_step, step.run_steps
                )));
            }
        }
        Ok(self)
    }
}

impl fmt::Display for PrunePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "plan {}: {} run(s), rewind checkpoint at step {}",
            self.technique.name(),
            self.steps.len(),
            self.rewind_step
        )?;
        for (i, s) in self.steps.iter().enumerate() {
            let mode = match &s.mode {
                RunMode::FixedMask => "fixed-mask".to_string(),
                RunMode::MpGradual(sched) => format!(
                    "mp-gradual (s0={}, ramp={}, interval={})",
                    sched.s0, sched.ramp_steps, sched.prune_interval
                ),
            };
            let rewind = match s.rewind_to {
                RewindTo::None => "none",
                RewindTo::Initial => "initial",
                RewindTo::EarlyOfPreviousRun => "early(previous run)",
                RewindTo::EarlyOfFirstRun => "early(first run)",
            };
            let transform = match s.transform {
                TransformKind::None => "none",
                TransformKind::Clt => "clt",
                TransformKind::RandomSign => "random-sign",
            };
            writeln!(
                f,
                "  run {i:>2}: target {:>5.2}% steps {} rewind {rewind} transform {transform} mode {mode}",
                s.target_sparsity * 100.0,
                s.run_steps
            )?;
        }
        Ok(())
    }
}

/// Options resolved by the harness; the defaults mirror the experimental
/// protocol (ramp over 80% of a run, prune every 2% of a run).
#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    pub mp_ramp_fraction: f64,
    pub prune_interval: Option<u64>,
    /// Rewind SLT-style runs to the first (dense) run's early checkpoint
    /// instead of the most recent pruning iteration.
    pub slt_rewind_from_first_run: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            mp_ramp_fraction: 0.8,
            prune_interval: None,
            slt_rewind_from_first_run: false,
        }
    }
}

/// Sparsity at which SLT hands over to MP (and MP to SLT).
pub const HANDOFF_SPARSITY: f64 = 0.6;
/// First SLT jump of the SLT-MP plan goes straight to 50%.
pub const SLT_MP_FIRST_JUMP: f64 = 0.5;

pub fn make_plan(
    technique: Technique,
    target_sparsity: f64,
    run_steps: u64,
    rewind_step: u64,
) -> Result<PrunePlan> {
    make_plan_with(
        technique,
        target_sparsity,
        run_steps,
        rewind_step,
        PlanOptions::default(),
    )
}

pub fn make_plan_with(
    technique: Technique,
    target_sparsity: f64,
    run_steps: u64,
    rewind_step: u64,
    opts: PlanOptions,
) -> Result<PrunePlan> {
    let ladder = sparsity_ladder(target_sparsity)?;
    let mp_schedule = |s0: f64, s_final: f64| -> Result<PruneSchedule> {
        let ramp = ((run_steps as f64 * opts.mp_ramp_fraction).round() as u64)
            .clamp(1, run_steps);
        let interval = opts
            .prune_interval
            .unwrap_or_else(|| ((run_steps as f64 * 0.02).round() as u64).max(1))
            .min(ramp);
        PruneSchedule::new(s0, s_final, ramp, interval)
    };
    let slt_rewind = if opts.slt_rewind_from_first_run {
        RewindTo::EarlyOfFirstRun
    } else {
        RewindTo::EarlyOfPreviousRun
    };
    let dense_step = PlanStep {
        run_steps,
        target_sparsity: 0.0,
        rewind_to: RewindTo::None,
        transform: TransformKind::None,
        mode: RunMode::FixedMask,
    };

    let steps = match technique {
        Technique::Mp => vec![PlanStep {
            run_steps,
            target_sparsity,
            rewind_to: RewindTo::None,
            transform: TransformKind::None,
            mode: RunMode::MpGradual(mp_schedule(0.0, target_sparsity)?),
        }],
        Technique::Lt | Technique::Slt | Technique::Clt | Technique::CltRandomSign => {
            let rewind_to = if technique == Technique::Lt {
                RewindTo::Initial
            } else {
                slt_rewind
            };
            let transform = match technique {
                Technique::Clt => TransformKind::Clt,
                Technique::CltRandomSign => TransformKind::RandomSign,
                _ => TransformKind::None,
            };
            let mut steps = vec![dense_step];
            for level in ladder {
                steps.push(PlanStep {
                    run_steps,
                    target_sparsity: level,
                    rewind_to,
                    transform,
                    mode: RunMode::FixedMask,
                });
            }
            steps
        }
        Technique::SltMp => {
            if target_sparsity <= HANDOFF_SPARSITY {
                return Err(Error::Config(format!(
                    "slt-mp needs a target above the {HANDOFF_SPARSITY} hand-off, got {target_sparsity}"
                )));
            }
            vec![
                dense_step,
                PlanStep {
                    run_steps,
                    target_sparsity: SLT_MP_FIRST_JUMP,
                    rewind_to: slt_rewind,
                    transform: TransformKind::None,
                    mode: RunMode::FixedMask,
                },
                PlanStep {
                    run_steps,
                    target_sparsity: HANDOFF_SPARSITY,
                    rewind_to: slt_rewind,
                    transform: TransformKind::None,
                    mode: RunMode::FixedMask,
                },
                PlanStep {
                    run_steps,
                    target_sparsity,
                    rewind_to: RewindTo::EarlyOfPreviousRun,
                    transform: TransformKind::None,
                    mode: RunMode::MpGradual(mp_schedule(HANDOFF_SPARSITY, target_sparsity)?),
                },
            ]
        }
        Technique::MpSlt => {
            // The gradual MP phase always stops at the hand-off sparsity;
            // for targets at or below it the plan degenerates to plain MP.
            let mp_target = target_sparsity.min(HANDOFF_SPARSITY);
            let mut steps = vec![PlanStep {
                run_steps,
                target_sparsity: mp_target,
                rewind_to: RewindTo::None,
                transform: TransformKind::None,
                mode: RunMode::MpGradual(mp_schedule(0.0, mp_target)?),
            }];
            for level in ladder
                .into_iter()
                .filter(|&l| l > HANDOFF_SPARSITY + 1e-9)
            {
                steps.push(PlanStep {
                    run_steps,
                    target_sparsity: level,
                    rewind_to: slt_rewind,
                    transform: TransformKind::None,
                    mode: RunMode::FixedMask,
                });
            }
            steps
        }
    };

    PrunePlan {
        technique,
        steps,
        rewind_step,
    }
    .check()
}
