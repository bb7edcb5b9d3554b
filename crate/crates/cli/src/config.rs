//! Flat `key = value` experiment configuration with `#` comments and optional
//! `[section]` headers that prefix the keys that follow (`[tuner]` + `step`
//! is the same as a bare `tuner.step`).

use std::path::Path;

use ensteer_core::baselines::{PenaltyConfig, QFoldedConfig};
use ensteer_core::tuner::TunerConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMethod {
    QFolded,
    ScratchPhase1,
}

impl TrainMethod {
    fn as_str(&self) -> &'static str {
        match self {
            TrainMethod::QFolded => "qfolded",
            TrainMethod::ScratchPhase1 => "scratch-phase1",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub nbar: usize,
    pub n_out: usize,
    pub steps: usize,
    pub horizon: f64,
    pub q: usize,
    pub j: usize,

    pub data_seed: u64,
    pub data_margin: f64,
    pub data_box_halfwidth: f64,
    pub init_seed: u64,

    pub train_method: TrainMethod,
    pub train_step: f64,
    pub train_max_iters: usize,
    pub train_residual_threshold: f64,
    pub train_reg: f64,
    pub train_armijo: bool,

    pub tuner_step: f64,
    pub tuner_armijo: bool,
    pub tuner_contraction: f64,
    pub tuner_slope: f64,
    pub tuner_threshold: f64,
    pub tuner_max_inner: usize,
    pub tuner_passes: usize,
    pub tuner_rounds: usize,
    pub tuner_rank_tol: f64,
    pub tuner_reg_tol: f64,
    pub tuner_drift_factor: f64,
    pub tuner_recompute_every: usize,
    pub tuner_max_step: f64,

    pub penalty_lambdas: Vec<f64>,
    pub penalty_step: f64,
    pub penalty_iters: usize,
    pub penalty_armijo: bool,

    pub scaling_n_list: Vec<usize>,
    pub scaling_q_list: Vec<usize>,
    pub scaling_steps: usize,
    pub scaling_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 2,
            nbar: 8,
            n_out: 1,
            steps: 10,
            horizon: 1.0,
            q: 16,
            j: 8,
            data_seed: 1,
            data_margin: 0.1,
            data_box_halfwidth: 2.0,
            init_seed: 42,
            train_method: TrainMethod::QFolded,
            train_step: 0.1,
            train_max_iters: 5000,
            train_residual_threshold: 0.02,
            train_reg: 1e-3,
            train_armijo: true,
            tuner_step: 0.1,
            tuner_armijo: true,
            tuner_contraction: 0.5,
            tuner_slope: 1e-4,
            tuner_threshold: 1e-4,
            tuner_max_inner: 2000,
            tuner_passes: 1,
            tuner_rounds: 2,
            tuner_rank_tol: 1e-10,
            tuner_reg_tol: 1e-6,
            tuner_drift_factor: 2.0,
            tuner_recompute_every: 1,
            tuner_max_step: f64::INFINITY,
            penalty_lambdas: vec![1.0],
            penalty_step: 0.05,
            penalty_iters: 2000,
            penalty_armijo: true,
            scaling_n_list: vec![32],
            scaling_q_list: vec![1, 4, 8, 16, 32],
            scaling_steps: 10,
            scaling_seed: 7,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {}", path.display(), e)))?;
            config.apply_text(&text)?;
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects key=value, got {:?}", item)))?;
            config.set_key(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut prefix = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                prefix = format!("{}.", section.trim());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            let full = format!("{}{}", prefix, key.trim());
            self.set_key(&full, value.trim())
                .map_err(|e| config_err(format!("line {}: {}", lineno + 1, e)))?;
        }
        Ok(())
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
            value
                .parse::<T>()
                .map_err(|_| config_err(format!("bad value {:?} for key {}", value, key)))
        }
        fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
            value
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<T>()
                        .map_err(|_| config_err(format!("bad list value {:?} for key {}", tok, key)))
                })
                .collect()
        }
        match key {
            "n" => self.n = parse(key, value)?,
            "nbar" => self.nbar = parse(key, value)?,
            "n_out" => self.n_out = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "q" => self.q = parse(key, value)?,
            "j" => self.j = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "data.margin" => self.data_margin = parse(key, value)?,
            "data.box_halfwidth" => self.data_box_halfwidth = parse(key, value)?,
            "init.seed" => self.init_seed = parse(key, value)?,
            "train.method" => {
                self.train_method = match value {
                    "qfolded" => TrainMethod::QFolded,
                    "scratch-phase1" => TrainMethod::ScratchPhase1,
                    other => {
                        return Err(config_err(format!(
                            "train.method must be qfolded or scratch-phase1, got {:?}",
                            other
                        )))
                    }
                }
            }
            "train.step" => self.train_step = parse(key, value)?,
            "train.max_iters" => self.train_max_iters = parse(key, value)?,
            "train.residual_threshold" => self.train_residual_threshold = parse(key, value)?,
            "train.reg" => self.train_reg = parse(key, value)?,
            "train.armijo" => self.train_armijo = parse(key, value)?,
            "tuner.step" => self.tuner_step = parse(key, value)?,
            "tuner.armijo" => self.tuner_armijo = parse(key, value)?,
            "tuner.contraction" => self.tuner_contraction = parse(key, value)?,
            "tuner.slope" => self.tuner_slope = parse(key, value)?,
            "tuner.threshold" => self.tuner_threshold = parse(key, value)?,
            "tuner.max_inner" => self.tuner_max_inner = parse(key, value)?,
            "tuner.passes" => self.tuner_passes = parse(key, value)?,
            "tuner.rounds" => self.tuner_rounds = parse(key, value)?,
            "tuner.rank_tol" => self.tuner_rank_tol = parse(key, value)?,
            "tuner.reg_tol" => self.tuner_reg_tol = parse(key, value)?,
            "tuner.drift_factor" => self.tuner_drift_factor = parse(key, value)?,
            "tuner.recompute_every" => self.tuner_recompute_every = parse(key, value)?,
            "tuner.max_step" => self.tuner_max_step = parse(key, value)?,
            "penalty.lambdas" => self.penalty_lambdas = parse_list(key, value)?,
            "penalty.step" => self.penalty_step = parse(key, value)?,
            "penalty.iters" => self.penalty_iters = parse(key, value)?,
            "penalty.armijo" => self.penalty_armijo = parse(key, value)?,
            "scaling.n_list" => self.scaling_n_list = parse_list(key, value)?,
            "scaling.q_list" => self.scaling_q_list = parse_list(key, value)?,
            "scaling.steps" => self.scaling_steps = parse(key, value)?,
            "scaling.seed" => self.scaling_seed = parse(key, value)?,
            other => return Err(config_err(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.q == 0 {
            return Err(config_err("q must be at least 1"));
        }
        if self.j > self.q {
            return Err(config_err(format!("j = {} exceeds q = {}", self.j, self.q)));
        }
        if self.nbar < self.n {
            return Err(config_err(format!(
                "nbar = {} is smaller than the input dimension n = {}",
                self.nbar, self.n
            )));
        }
        if self.n_out == 0 || self.n_out > self.nbar {
            return Err(config_err("n_out must lie in 1..=nbar"));
        }
        if self.steps == 0 || !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(config_err("steps and horizon must be positive"));
        }
        if self.penalty_lambdas.iter().any(|&l| l < 0.0) {
            return Err(config_err("penalty lambdas must be nonnegative"));
        }
        Ok(())
    }

    /// Sorted `key = value` lines of the fully resolved configuration.
    pub fn echo(&self) -> String {
        let join_f = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let join_u = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut pairs: Vec<(String, String)> = vec![
            ("n".into(), self.n.to_string()),
            ("nbar".into(), self.nbar.to_string()),
            ("n_out".into(), self.n_out.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("horizon".into(), self.horizon.to_string()),
            ("q".into(), self.q.to_string()),
            ("j".into(), self.j.to_string()),
            ("data.seed".into(), self.data_seed.to_string()),
            ("data.margin".into(), self.data_margin.to_string()),
            ("data.box_halfwidth".into(), self.data_box_halfwidth.to_string()),
            ("init.seed".into(), self.init_seed.to_string()),
            ("train.method".into(), self.train_method.as_str().into()),
            ("train.step".into(), self.train_step.to_string()),
            ("train.max_iters".into(), self.train_max_iters.to_string()),
            (
                "train.residual_threshold".into(),
                self.train_residual_threshold.to_string(),
            ),
            ("train.reg".into(), self.train_reg.to_string()),
            ("train.armijo".into(), self.train_armijo.to_string()),
            ("tuner.step".into(), self.tuner_step.to_string()),
            ("tuner.armijo".into(), self.tuner_armijo.to_string()),
            ("tuner.contraction".into(), self.tuner_contraction.to_string()),
            ("tuner.slope".into(), self.tuner_slope.to_string()),
            ("tuner.threshold".into(), self.tuner_threshold.to_string()),
            ("tuner.max_inner".into(), self.tuner_max_inner.to_string()),
            ("tuner.passes".into(), self.tuner_passes.to_string()),
            ("tuner.rounds".into(), self.tuner_rounds.to_string()),
            ("tuner.rank_tol".into(), self.tuner_rank_tol.to_string()),
            ("tuner.reg_tol".into(), self.tuner_reg_tol.to_string()),
            ("tuner.drift_factor".into(), self.tuner_drift_factor.to_string()),
            (
                "tuner.recompute_every".into(),
                self.tuner_recompute_every.to_string(),
            ),
            ("tuner.max_step".into(), self.tuner_max_step.to_string()),
            ("penalty.lambdas".into(), join_f(&self.penalty_lambdas)),
            ("penalty.step".into(), self.penalty_step.to_string()),
            ("penalty.iters".into(), self.penalty_iters.to_string()),
            ("penalty.armijo".into(), self.penalty_armijo.to_string()),
            ("scaling.n_list".into(), join_u(&self.scaling_n_list)),
            ("scaling.q_list".into(), join_u(&self.scaling_q_list)),
            ("scaling.steps".into(), self.scaling_steps.to_string()),
            ("scaling.seed".into(), self.scaling_seed.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{} = {}\n", k, v));
        }
        out
    }

    pub fn tuner_config(&self) -> TunerConfig {
        TunerConfig {
            step_size: self.tuner_step,
            armijo: self.tuner_armijo,
            armijo_contraction: self.tuner_contraction,
            armijo_slope: self.tuner_slope,
            convergence_cost_threshold: self.tuner_threshold,
            max_inner_iterations: self.tuner_max_inner,
            refinement_passes: self.tuner_passes,
            rounds: self.tuner_rounds,
            rank_tolerance: self.tuner_rank_tol,
            regularization_target_tolerance: self.tuner_reg_tol,
            drift_budget_factor: self.tuner_drift_factor,
            block_recompute_every: self.tuner_recompute_every,
            max_step_norm: self.tuner_max_step,
        }
    }

    pub fn qfolded_config(&self) -> QFoldedConfig {
        QFoldedConfig {
            step_size: self.train_step,
            residual_threshold: self.train_residual_threshold,
            max_iterations: self.train_max_iters,
            reg_coeff: self.train_reg,
            armijo: self.train_armijo,
        }
    }

    pub fn penalty_config(&self, lambda: f64) -> PenaltyConfig {
        PenaltyConfig {
            lambda,
            step_size: self.penalty_step,
            max_iterations: self.penalty_iters,
            armijo: self.penalty_armijo,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let mut config = ExperimentConfig::default();
        config
            .apply_text(
                "# experiment\nq = 32\nj = 4 # inline comment\n[tuner]\nrounds = 3\n[penalty]\nlambdas = 0.5, 2\n",
            )
            .unwrap();
        assert_eq!(config.q, 32);
        assert_eq!(config.j, 4);
        assert_eq!(config.tuner_rounds, 3);
        assert_eq!(config.penalty_lambdas, vec![0.5, 2.0]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut config = ExperimentConfig::default();
        assert!(config.apply_text("bogus = 1\n").is_err());
        assert!(config.apply_text("q = many\n").is_err());
    }

    #[test]
    fn validates_cross_field_constraints() {
        let mut config = ExperimentConfig::default();
        config.j = config.q + 1;
        assert!(config.validate().is_err());
        let config = ExperimentConfig {
            q: 0,
            ..ExperimentConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn echo_is_sorted_and_stable() {
        let config = ExperimentConfig::default();
        let echo = config.echo();
        let mut lines: Vec<&str> = echo.lines().collect();
        let original = lines.clone();
        lines.sort();
        assert_eq!(lines, original);
        assert_eq!(echo, config.echo());
    }
}
