//! Experiment configuration: a flat key-value text format with one canonical
//! serialization. Parsing validates every field and reports all problems in
//! a single aggregated error with line references.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::plan::Technique;
use crate::pruning::sparsity_ladder;
use crate::tasks::TaskKind;

/// Base learning-rate scale, tuned once on the dense toy baseline.
/// The effective rate is base_lr / max(t, warmup).
pub const DEFAULT_BASE_LR: f64 = 0.1;

pub const DEFAULT_RUN_STEPS: u64 = 2000;
pub const DEFAULT_SEEDS: [u64; 2] = [1, 2];
pub const DEFAULT_REWIND_FRACTION: f64 = 0.05;
/// Prune-interval default: 2% of the run, mirroring the 10k-of-500k rule.
pub const DEFAULT_PRUNE_INTERVAL_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub technique: Technique,
    pub target_sparsity: f64,
    pub task: TaskKind,
    pub run_steps: u64,
    pub rewind_fraction: f64,
    pub prune_interval: u64,
    pub seeds: Vec<u64>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub value_width: usize,
    pub index_width: usize,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for everything except technique and target, which have no
    /// sensible default and must come from the config text.
    fn defaults(technique: Technique, target_sparsity: f64) -> Self {
        let run_steps = DEFAULT_RUN_STEPS;
        ExperimentConfig {
            technique,
            target_sparsity,
            task: TaskKind::Copy,
            run_steps,
            rewind_fraction: DEFAULT_REWIND_FRACTION,
            prune_interval: default_prune_interval(run_steps),
            seeds: DEFAULT_SEEDS.to_vec(),
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            vocab_size: 32,
            max_seq_len: 16,
            seq_len: 8,
            batch_size: 8,
            base_lr: DEFAULT_BASE_LR,
            value_width: 4,
            index_width: 4,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }

    pub fn rewind_step(&self) -> u64 {
        ((self.run_steps as f64 * self.rewind_fraction).round() as u64)
            .clamp(1, self.run_steps.saturating_sub(1).max(1))
    }

    /// Full validation; used after parsing and after CLI overrides.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = sparsity_ladder(self.target_sparsity) {
            problems.push(e.to_string());
        }
        if self.run_steps < 20 {
            problems.push(format!(
                "run_steps must be at least 20, got {}",
                self.run_steps
            ));
        }
        if !(self.rewind_fraction > 0.0 && self.rewind_fraction <= 0.5) {
            problems.push(format!(
                "rewind_fraction must be in (0, 0.5], got {}",
                self.rewind_fraction
            ));
        }
        if self.prune_interval == 0 || self.prune_interval > self.run_steps {
            problems.push(format!(
                "prune_interval must be in [1, run_steps], got {}",
                self.prune_interval
            ));
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            problems.push("seeds must be distinct".to_string());
        }
        if let Err(e) = self.model_config(0).validate() {
            problems.push(e.to_string());
        }
        if self.seq_len == 0 || self.seq_len > self.max_seq_len {
            problems.push(format!(
                "seq_len must be in [1, max_seq_len={}], got {}",
                self.max_seq_len, self.seq_len
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.base_lr > 0.0) {
            problems.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        for (name, w) in [
            ("value_width", self.value_width),
            ("index_width", self.index_width),
        ] {
            if !matches!(w, 2 | 4 | 8) {
                problems.push(format!("{name} must be one of 2, 4, 8, got {w}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Canonical serialization: fixed key order, shortest round-trip floats.
    /// parse_config(emit(cfg)) reproduces the config exactly.
    pub fn emit(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "technique = {}\n\
             target_sparsity = {}\n\
             task = {}\n\
             run_steps = {}\n\
             rewind_fraction = {}\n\
             prune_interval = {}\n\
             seeds = {}\n\
             d_model = {}\n\
             n_heads = {}\n\
             n_layers = {}\n\
             d_ff = {}\n\
             vocab_size = {}\n\
             max_seq_len = {}\n\
             seq_len = {}\n\
             batch_size = {}\n\
             base_lr = {}\n\
             value_width = {}\n\
             index_width = {}\n\
             out_dir = {}\n",
            self.technique.name(),
            self.target_sparsity,
            self.task.name(),
            self.run_steps,
            self.rewind_fraction,
            self.prune_interval,
            seeds,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
            self.seq_len,
            self.batch_size,
            self.base_lr,
            self.value_width,
            self.index_width,
            self.out_dir.display(),
        )
    }
}

pub fn default_prune_interval(run_steps: u64) -> u64 {
    ((run_steps as f64 * DEFAULT_PRUNE_INTERVAL_FRACTION).round() as u64).max(1)
}

struct Issues {
    list: Vec<String>,
}

impl Issues {
    fn push(&mut self, line: usize, msg: impl std::fmt::Display) {
        self.list.push(format!("line {line}: {msg}"));
    }

    fn push_error(&mut self, line: usize, e: Error) {
        // Strip the generic prefix; the aggregate report is already a
        // config error.
        match e {
            Error::Config(m) => self.push(line, m),
            other => self.push(line, other),
        }
    }
}

/// Parse the flat key-value format. Unknown keys, duplicate keys, malformed
/// values, and semantic violations are all collected and reported together.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut issues = Issues { list: Vec::new() };
    let mut technique: Option<Technique> = None;
    let mut target: Option<f64> = None;
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    let mut seen: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            issues.push(lineno, format!("expected 'key = value', got '{line}'"));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if seen.contains(&key) {
            issues.push(lineno, format!("duplicate key '{key}'"));
            continue;
        }
        seen.push(key.clone());
        pairs.push((lineno, key, value));
    }

    // First pass: the two mandatory keys that anchor the defaults. Parsing
    // continues with placeholders so every problem is reported at once.
    let mut technique_given = false;
    let mut target_given = false;
    for (lineno, key, value) in &pairs {
        match key.as_str() {
            "technique" => {
                technique_given = true;
                match Technique::parse(value) {
                    Ok(t) => technique = Some(t),
                    Err(e) => issues.push_error(*lineno, e),
                }
            }
            "target_sparsity" => {
                target_given = true;
                match value.parse::<f64>() {
                    Ok(v) => target = Some(v),
                    Err(_) => issues.push(*lineno, format!("invalid float '{value}'")),
                }
            }
            _ => {}
        }
    }
    if !technique_given {
        issues.list.push("missing required key 'technique'".to_string());
    }
    if !target_given {
        issues
            .list
            .push("missing required key 'target_sparsity'".to_string());
    }
    let placeholders = technique.is_none() || target.is_none();
    let mut cfg =
        ExperimentConfig::defaults(technique.unwrap_or(Technique::Mp), target.unwrap_or(0.5));
    let mut explicit_interval = false;
    let mut explicit_steps = false;

    macro_rules! parse_into {
        ($lineno:expr, $value:expr, $field:expr, $ty:ty) => {
            match $value.parse::<$ty>() {
                Ok(v) => $field = v,
                Err(_) => issues.push($lineno, format!("invalid value '{}'", $value)),
            }
        };
    }

    for (lineno, key, value) in &pairs {
        let lineno = *lineno;
        match key.as_str() {
            "technique" | "target_sparsity" => {}
            "task" => match TaskKind::parse(value) {
                Ok(t) => cfg.task = t,
                Err(e) => issues.push_error(lineno, e),
            },
            "run_steps" => {
                explicit_steps = true;
                parse_into!(lineno, value, cfg.run_steps, u64)
            }
            "rewind_fraction" => parse_into!(lineno, value, cfg.rewind_fraction, f64),
            "prune_interval" => {
                explicit_interval = true;
                parse_into!(lineno, value, cfg.prune_interval, u64)
            }
            "seeds" => {
                let parsed: std::result::Result<Vec<u64>, _> =
                    value.split(',').map(|s| s.trim().parse::<u64>()).collect();
                match parsed {
                    Ok(s) if !s.is_empty() => cfg.seeds = s,
                    _ => issues.push(lineno, format!("invalid seed list '{value}'")),
                }
            }
            "d_model" => parse_into!(lineno, value, cfg.d_model, usize),
            "n_heads" => parse_into!(lineno, value, cfg.n_heads, usize),
            "n_layers" => parse_into!(lineno, value, cfg.n_layers, usize),
            "d_ff" => parse_into!(lineno, value, cfg.d_ff, usize),
            "vocab_size" => parse_into!(lineno, value, cfg.vocab_size, usize),
            "max_seq_len" => parse_into!(lineno, value, cfg.max_seq_len, usize),
            "seq_len" => parse_into!(lineno, value, cfg.seq_len, usize),
            "batch_size" => parse_into!(lineno, value, cfg.batch_size, usize),
            "base_lr" => parse_into!(lineno, value, cfg.base_lr, f64),
            "value_width" => parse_into!(lineno, value, cfg.value_width, usize),
            "index_width" => parse_into!(lineno, value, cfg.index_width, usize),
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            other => issues.push(lineno, format!("unknown key '{other}'")),
        }
    }
    if explicit_steps && !explicit_interval {
        cfg.prune_interval = default_prune_interval(cfg.run_steps);
    }
    if !placeholders {
        if let Err(e) = cfg.validate() {
            match e {
                Error::Config(m) => issues.list.push(m),
                other => issues.list.push(other.to_string()),
            }
        }
    }
    if issues.list.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues.list.join("\n")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config("technique = slt\ntarget_sparsity = 0.5\n").unwrap();
        assert_eq!(cfg.technique, Technique::Slt);
        assert_eq!(cfg.target_sparsity, 0.5);
        assert_eq!(cfg.rewind_fraction, 0.05);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.task, TaskKind::Copy);
        assert_eq!(cfg.prune_interval, default_prune_interval(cfg.run_steps));
    }

    #[test]
    fn off_ladder_sparsity_is_rejected() {
        let err = parse_config("technique = slt\ntarget_sparsity = 0.93\n").unwrap_err();
        assert!(err.to_string().contains("ladder"), "{err}");
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = parse_config(
            "technique = mp\ntarget_sparsity = 0.8\ntask = sort\nrun_steps = 500\nseeds = 3,4,5\n",
        )
        .unwrap();
        let emitted = cfg.emit();
        let reparsed = parse_config(&emitted).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(emitted, reparsed.emit());
    }

    #[test]
    fn errors_are_aggregated_with_line_numbers() {
        let text = "technique = warp\n\
                    target_sparsity = 0.93\n\
                    task = juggle\n\
                    bogus_key = 1\n";
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn missing_required_keys_reported() {
        let err = parse_config("task = copy\n").unwrap_err().to_string();
        assert!(err.contains("technique"), "{err}");
        assert!(err.contains("target_sparsity"), "{err}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = parse_config("technique = mp\ntechnique = slt\ntarget_sparsity = 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn prune_interval_follows_run_steps_default() {
        let cfg = parse_config("technique = mp\ntarget_sparsity = 0.5\nrun_steps = 1000\n")
            .unwrap();
        assert_eq!(cfg.prune_interval, 20);
        let cfg = parse_config(
            "technique = mp\ntarget_sparsity = 0.5\nrun_steps = 1000\nprune_interval = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.prune_interval, 7);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config(
            "# an experiment\n\ntechnique = clt\n# interior comment\ntarget_sparsity = 0.3\n",
        )
        .unwrap();
        assert_eq!(cfg.technique, Technique::Clt);
    }
}
