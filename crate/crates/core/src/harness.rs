//! Experiment front end: runs a configured plan per seed, writes artifacts
//! (checkpoints, records, sparse model, memory report, results table), and
//! re-derives reports from artifacts on disk. All outputs are deterministic
//! functions of the config and seeds; nothing records wall-clock state.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::AdamParams;
use crate::plan::{make_plan_with, PlanOptions, PrunePlan, RunMode};
use crate::pruning::LADDER_PERCENTS;
use crate::runner::{execute_plan, MetricsRow, RunObserver, RunRecord, TrainSettings};
use crate::sparse::{read_sparse_model, report_model_memory, write_sparse_model, MemoryReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub sparsity: f64,
    pub memory_bytes: u64,
    /// One slot per technique column; None renders as n/a.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub techniques: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub fn experiment_name(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-s{:02}-{}",
        cfg.technique.name(),
        (cfg.target_sparsity * 100.0).round() as u32,
        cfg.task.name()
    )
}

pub fn build_plan(cfg: &ExperimentConfig) -> Result<PrunePlan> {
    make_plan_with(
        cfg.technique,
        cfg.target_sparsity,
        cfg.run_steps,
        cfg.rewind_step(),
        PlanOptions {
            prune_interval: Some(cfg.prune_interval),
            ..PlanOptions::default()
        },
    )
}

pub fn train_settings(cfg: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        task: cfg.task,
        seq_len: cfg.seq_len,
        batch_size: cfg.batch_size,
        adam: AdamParams {
            base_lr: cfg.base_lr,
            ..AdamParams::default()
        },
        value_width: cfg.value_width,
        index_width: cfg.index_width,
        ..TrainSettings::default()
    }
}

/// (sparsity, memory, accuracy, loss) rows contributed by one seed's records.
fn seed_rows(plan: &PrunePlan, records: &[RunRecord], total_prunable: usize) -> Vec<(f64, u64, f64, f64)> {
    // Slack for comparing measured sparsity against a ladder level: each
    // prunable matrix rounds its masked count independently.
    let layers = plan
        .steps
        .iter()
        .map(|_| 0usize)
        .len()
        .max(1);
    let _ = layers;
    let eps = 1e-9 + 0.5 * 64.0 / total_prunable.max(1) as f64;
    let mut rows = Vec::new();
    for (step, record) in plan.steps.iter().zip(records) {
        match &step.mode {
            RunMode::FixedMask => {
                let last = record.rows.last().expect("run has evaluation rows");
                rows.push((
                    step.target_sparsity,
                    last.memory_bytes,
                    record.best_accuracy,
                    record.best_loss,
                ));
            }
            RunMode::MpGradual(sched) => {
                let levels: Vec<f64> = LADDER_PERCENTS
                    .iter()
                    .map(|&p| p as f64 / 100.0)
                    .filter(|&l| l > sched.s0 + 1e-9 && l < step.target_sparsity - 1e-9)
                    .collect();
                for level in levels {
                    let hit: Option<&MetricsRow> =
                        record.rows.iter().find(|r| r.sparsity >= level - eps);
                    if let Some(r) = hit {
                        rows.push((level, r.memory_bytes, r.token_accuracy, r.loss));
                    }
                }
                let last = record.rows.last().expect("run has evaluation rows");
                rows.push((
                    step.target_sparsity,
                    last.memory_bytes,
                    record.best_accuracy,
                    record.best_loss,
                ));
            }
        }
    }
    rows
}

/// Average per-seed rows into a single-technique table. Every seed must
/// contribute the same sparsity levels; cells are exact means over seeds.
fn average_rows(
    technique: &str,
    per_seed: &[Vec<(f64, u64, f64, f64)>],
) -> Result<ResultsTable> {
    let first = &per_seed[0];
    for other in per_seed.iter().skip(1) {
        if other.len() != first.len()
            || other
                .iter()
                .zip(first)
                .any(|(a, b)| (a.0 - b.0).abs() > 1e-12)
        {
            return Err(Error::Contract(
                "seeds disagree on table sparsity levels".into(),
            ));
        }
    }
    let n = per_seed.len() as f64;
    let mut rows = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let sparsity = first[i].0;
        let memory =
            (per_seed.iter().map(|s| s[i].1 as f64).sum::<f64>() / n).round() as u64;
        let accuracy = per_seed.iter().map(|s| s[i].2).sum::<f64>() / n;
        let loss = per_seed.iter().map(|s| s[i].3).sum::<f64>() / n;
        rows.push(TableRow {
            sparsity,
            memory_bytes: memory,
            cells: vec![Some(Cell { accuracy, loss })],
        });
    }
    Ok(ResultsTable {
        techniques: vec![technique.to_string()],
        rows,
    })
}

/// Fixed-width markdown table: ascending sparsity rows, memory column, one
/// (accuracy, loss) column pair per technique, best accuracy per row flagged
/// with '*' (ties all flagged).
pub fn emit_table(table: &ResultsTable) -> String {
    let mut header = vec!["Sparsity".to_string(), "Memory (bytes)".to_string()];
    for t in &table.techniques {
        header.push(format!("{t} acc"));
        header.push(format!("{t} loss"));
    }
    let mut body: Vec<Vec<String>> = Vec::new();
    let mut rows = table.rows.clone();
    rows.sort_by(|a, b| a.sparsity.partial_cmp(&b.sparsity).unwrap());
    for row in &rows {
        let best = row
            .cells
            .iter()
            .flatten()
            .map(|c| c.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut line = vec![
            format!("{:.1}%", row.sparsity * 100.0),
            row.memory_bytes.to_string(),
        ];
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    let flag = if (c.accuracy - best).abs() < 1e-12 { "*" } else { "" };
                    line.push(format!("{:.2}%{flag}", c.accuracy * 100.0));
                    line.push(format!("{:.4}", c.loss));
                }
                None => {
                    line.push("n/a".to_string());
                    line.push("n/a".to_string());
                }
            }
        }
        body.push(line);
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for line in &body {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let render = |cells: &[String], widths: &[usize]| -> String {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(widths) {
            s.push_str(&format!(" {c:>w$} |"));
        }
        s.push('\n');
        s
    };
    out.push_str(&render(&header, &widths));
    out.push('|');
    for w in &widths {
        out.push_str(&format!("{}:|", "-".repeat(w + 1)));
    }
    out.push('\n');
    for line in &body {
        out.push_str(&render(line, &widths));
    }
    out
}

/// Observer that streams checkpoints to a seed directory as they are made.
struct DirObserver {
    dir: PathBuf,
}

impl RunObserver for DirObserver {
    fn on_initial_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.write_file(&self.dir.join("initial.ckpt"))
    }

    fn on_rewind_checkpoint(&mut self, run_index: usize, ckpt: &Checkpoint) -> Result<()> {
        ckpt.write_file(&self.dir.join(format!("run-{run_index}-rewind.ckpt")))
    }

    fn on_run_complete(
        &mut self,
        run_index: usize,
        _record: &RunRecord,
        final_ckpt: &Checkpoint,
    ) -> Result<()> {
        final_ckpt.write_file(&self.dir.join(format!("run-{run_index}-final.ckpt")))
    }
}

/// Execute the configured experiment for every seed, writing all artifacts
/// under `<out_dir>/<experiment-name>/`. On failure a FAILED marker with the
/// error text is left next to any partial artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let exp_dir = cfg.out_dir.join(experiment_name(cfg));
    fs::create_dir_all(&exp_dir)?;
    let failed_marker = exp_dir.join("FAILED");
    if failed_marker.exists() {
        fs::remove_file(&failed_marker)?;
    }
    match run_experiment_inner(cfg, &exp_dir) {
        Ok(table) => Ok(table),
        Err(e) => {
            let _ = fs::write(&failed_marker, e.to_string());
            Err(e)
        }
    }
}

fn run_experiment_inner(cfg: &ExperimentConfig, exp_dir: &Path) -> Result<ResultsTable> {
    let plan = build_plan(cfg)?;
    let settings = train_settings(cfg);
    fs::write(exp_dir.join("config.txt"), cfg.emit())?;
    fs::write(exp_dir.join("plan.txt"), plan.to_string())?;

    let mut per_seed_rows = Vec::with_capacity(cfg.seeds.len());
    let mut memory_report: Option<MemoryReport> = None;
    for &seed in &cfg.seeds {
        let seed_dir = exp_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let mut observer = DirObserver {
            dir: seed_dir.clone(),
        };
        let model_cfg = cfg.model_config(seed);
        let outcome = execute_plan(&plan, &model_cfg, &settings, seed, &mut observer)?;

        let records_json = serde_json::to_string_pretty(&outcome.records)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(seed_dir.join("records.json"), records_json)?;

        let final_ckpt = &outcome.final_checkpoint;
        let mask = final_ckpt
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract("final checkpoint lacks a mask".into()))?;
        write_sparse_model(
            &seed_dir.join("final-model.sparse"),
            &final_ckpt.params,
            mask,
        )?;
        if memory_report.is_none() {
            memory_report = Some(report_model_memory(
                &final_ckpt.params,
                mask,
                cfg.value_width,
                cfg.index_width,
            )?);
        }
        let total_prunable = final_ckpt.params.prunable_params();
        per_seed_rows.push(seed_rows(&plan, &outcome.records, total_prunable));
    }

    let report = memory_report.expect("at least one seed");
    fs::write(
        exp_dir.join("memory.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let table = average_rows(cfg.technique.name(), &per_seed_rows)?;
    fs::write(exp_dir.join("table.md"), emit_table(&table))?;
    Ok(table)
}

pub struct ReportOutput {
    pub table: ResultsTable,
    pub memory_sections: Vec<(String, MemoryReport)>,
}

fn is_experiment_dir(dir: &Path) -> bool {
    dir.join("config.txt").is_file()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    Ok(subdirs)
}

/// Rebuild the averaged table (and memory reports) from artifacts on disk.
/// `dir` may be one experiment directory or a root holding several; multiple
/// experiments merge into one table with n/a for missing cells.
pub fn report_dir(dir: &Path) -> Result<ReportOutput> {
    let exp_dirs: Vec<PathBuf> = if is_experiment_dir(dir) {
        vec![dir.to_path_buf()]
    } else {
        let found: Vec<PathBuf> = sorted_subdirs(dir)?
            .into_iter()
            .filter(|p| is_experiment_dir(p))
            .collect();
        if found.is_empty() {
            return Err(Error::Config(format!(
                "no experiment directories under {}",
                dir.display()
            )));
        }
        found
    };

    let mut tables = Vec::new();
    let mut memory_sections = Vec::new();
    for exp_dir in &exp_dirs {
        let cfg = crate::config::parse_config(&fs::read_to_string(exp_dir.join("config.txt"))?)?;
        let plan = build_plan(&cfg)?;
        let mut per_seed_rows = Vec::new();
        for &seed in &cfg.seeds {
            let seed_dir = exp_dir.join(format!("seed-{seed}"));
            let records: Vec<RunRecord> =
                serde_json::from_str(&fs::read_to_string(seed_dir.join("records.json"))?)
                    .map_err(|e| Error::Format(format!("records.json: {e}")))?;
            // Recover the prunable total from the sparse final model.
            let model = read_sparse_model(&seed_dir.join("final-model.sparse"))?;
            let total: usize = model
                .iter()
                .filter(|(_, t)| t.rank() >= 2)
                .map(|(_, t)| t.numel())
                .sum();
            per_seed_rows.push(seed_rows(&plan, &records, total.max(1)));
        }
        tables.push(average_rows(cfg.technique.name(), &per_seed_rows)?);
        let report: MemoryReport =
            serde_json::from_str(&fs::read_to_string(exp_dir.join("memory.json"))?)
                .map_err(|e| Error::Format(format!("memory.json: {e}")))?;
        let name = exp_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| exp_dir.display().to_string());
        memory_sections.push((name, report));
    }
    Ok(ReportOutput {
        table: merge_tables(&tables),
        memory_sections,
    })
}

/// Merge single-technique tables into one row-aligned table. Rows are keyed
/// by sparsity; memory comes from the first table providing the row.
pub fn merge_tables(tables: &[ResultsTable]) -> ResultsTable {
    let techniques: Vec<String> = tables
        .iter()
        .flat_map(|t| t.techniques.iter().cloned())
        .collect();
    let mut keys: Vec<i64> = tables
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| (r.sparsity * 10000.0).round() as i64))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        let mut cells: Vec<Option<Cell>> = Vec::with_capacity(techniques.len());
        let mut memory = None;
        let mut sparsity = key as f64 / 10000.0;
        for table in tables {
            let hit = table
                .rows
                .iter()
                .find(|r| (r.sparsity * 10000.0).round() as i64 == key);
            match hit {
                Some(r) => {
                    if memory.is_none() {
                        memory = Some(r.memory_bytes);
                        sparsity = r.sparsity;
                    }
                    cells.extend(r.cells.iter().copied());
                }
                None => cells.extend(std::iter::repeat_n(None, table.techniques.len())),
            }
        }
        rows.push(TableRow {
            sparsity,
            memory_bytes: memory.unwrap_or(0),
            cells,
        });
    }
    ResultsTable { techniques, rows }
}

#[derive(Debug)]
pub struct VerifyEntry {
    pub path: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct VerifyReport {
    pub entries: Vec<VerifyEntry>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.error.is_none())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match &e.error {
                None => out.push_str(&format!("ok    {}\n", e.path.display())),
                Some(err) => out.push_str(&format!("FAIL  {}: {err}\n", e.path.display())),
            }
        }
        let failures = self.entries.iter().filter(|e| e.error.is_some()).count();
        out.push_str(&format!(
            "{} artifact(s) checked, {failures} failure(s)\n",
            self.entries.len()
        ));
        out
    }
}

fn walk_sorted(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_sorted(&path, files)?;
        } else {
            files.push(path);
        }
    }
    Ok(())
}

/// Re-check integrity of every recognized artifact under `dir`: checkpoint
/// checksums and mask invariants, sparse model checksums and CSC invariants,
/// record and report parses, and FAILED markers.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport> {
    let mut files = Vec::new();
    walk_sorted(dir, &mut files)?;
    let mut report = VerifyReport::default();
    for path in files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
        let check: Option<std::result::Result<(), Error>> =
            match (name.as_deref(), path.extension().and_then(|e| e.to_str())) {
                (_, Some("ckpt")) => Some(Checkpoint::read_file(&path).map(|_| ())),
                (_, Some("sparse")) => Some(read_sparse_model(&path).map(|_| ())),
                (Some("records.json"), _) => Some(
                    fs::read_to_string(&path)
                        .map_err(Error::from)
                        .and_then(|s| {
                            serde_json::from_str::<Vec<RunRecord>>(&s)
                                .map(|_| ())
                                .map_err(|e| Error::Format(e.to_string()))
                        }),
                ),
                (Some("memory.json"), _) => Some(
                    fs::read_to_string(&path)
                        .map_err(Error::from)
                        .and_then(|s| {
                            serde_json::from_str::<MemoryReport>(&s)
                                .map(|_| ())
                                .map_err(|e| Error::Format(e.to_string()))
                        }),
                ),
                (Some("config.txt"), _) => Some(
                    fs::read_to_string(&path)
                        .map_err(Error::from)
                        .and_then(|s| crate::config::parse_config(&s).map(|_| ())),
                ),
                (Some("FAILED"), _) => Some(Err(Error::Contract(
                    "experiment marked as failed".into(),
                ))),
                _ => None,
            };
        if let Some(result) = check {
            report.entries.push(VerifyEntry {
                path,
                error: result.err().map(|e| e.to_string()),
            });
        }
    }
    Ok(report)
}
