//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tolerances};
use crate::optim::{AdamHyper, LrKind, LrSchedule};
use crate::peso::{
    run_galore_baseline, run_lora_baseline, run_peso_generic, run_peso_lora_r, run_peso_lora_t,
    AdamWOptimizer, ExploitationKind, ExplorationKind, FullGradientRestart, NoExploration, PesoConfig,
    RunResult, SgdOptimizer, SubspaceMap, SubspaceOptimizer, SubspaceState, UpdateSubspace, WarmStartBases,
};
use crate::problems::{mlp_objective, quadratic_objective, MlpConfig, NoiseModel, Objective};
use crate::subspace::SmoothingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `‖W − a·diag(1,…,1,0,…)‖²` with `r_ones` leading ones, `n×n`.
    Quadratic { a: f64, n: usize, r_ones: usize },
    Mlp {
        #[serde(default = "d_input")]
        input_dim: usize,
        #[serde(default = "d_hidden")]
        hidden_dim: usize,
        #[serde(default = "d_output")]
        output_dim: usize,
        #[serde(default = "d_samples")]
        samples: usize,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
    },
}

fn d_input() -> usize {
    MlpConfig::default().input_dim
}
fn d_hidden() -> usize {
    MlpConfig::default().hidden_dim
}
fn d_output() -> usize {
    MlpConfig::default().output_dim
}
fn d_samples() -> usize {
    MlpConfig::default().samples
}
fn d_data_seed() -> u64 {
    MlpConfig::default().data_seed
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::Quadratic {
            a: 10.0,
            n: 16,
            r_ones: 4,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Box<dyn Objective>> {
        match *self {
            ProblemSpec::Quadratic { a, n, r_ones } => {
                if r_ones == 0 {
                    return Err(Error::config("problem.r_ones", "must be >= 1"));
                }
                let q = quadratic_objective(a, n, r_ones - 1)
                    .map_err(|e| Error::config("problem", e.to_string()))?;
                Ok(Box::new(q))
            }
            ProblemSpec::Mlp {
                input_dim,
                hidden_dim,
                output_dim,
                samples,
                data_seed,
            } => {
                let cfg = MlpConfig {
                    input_dim,
                    hidden_dim,
                    output_dim,
                    samples,
                    data_seed,
                    zero_inputs: false,
                };
                let o = mlp_objective(&cfg).map_err(|e| Error::config("problem", e.to_string()))?;
                Ok(Box::new(o))
            }
        }
    }

    /// The loss floor a rank-deficient adapter cannot beat, when known.
    pub fn low_rank_floor(&self) -> Option<f64> {
        match self {
            ProblemSpec::Quadratic { a, .. } => Some(a * a),
            ProblemSpec::Mlp { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Lora,
    PesoLoraR,
    PesoLoraT,
    Galore,
    /// The generic loop over a two-sided SVD subspace `W̃ + U·C·V`.
    PesoSubspace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    #[serde(rename = "K")]
    pub k: u64,
    pub r: usize,
    pub gamma: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub beta2_min: f64,
    pub smoothing: bool,
    pub alignment: bool,
    pub exploration: ExplorationKind,
    pub exploitation: ExploitationKind,
    pub max_restarts: Option<usize>,
    pub galore_adam: bool,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            kind: MethodKind::PesoLoraR,
            k: 100,
            r: 3,
            gamma: 2.0,
            tau1: 0.9,
            tau2: 0.9,
            beta2_min: 0.95,
            smoothing: true,
            alignment: true,
            exploration: ExplorationKind::FullGradientRestart,
            exploitation: ExploitationKind::AdamW,
            max_restarts: None,
            galore_adam: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrKind,
    pub warmup_ratio: f64,
    /// Restart step-size schedule, indexed by restart count.
    pub restart_schedule: LrKind,
    /// Base restart step `η₀`; defaults to `1/γ`.
    pub restart_lr: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            lr: 1e-2,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            schedule: LrKind::Constant,
            warmup_ratio: 0.03,
            restart_schedule: LrKind::Constant,
            restart_lr: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Bound `C` on the total gradient-noise variance.
    #[serde(rename = "C")]
    pub c: f64,
}

/// One run, as read from a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub problem: ProblemSpec,
    pub method: MethodSpec,
    pub optimizer: OptimizerSpec,
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    pub total_steps: u64,
    /// Trace file name, relative to the output directory.
    pub output: Option<String>,
    pub record_wall_time: bool,
    pub tolerances: Tolerances,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            method: MethodSpec::default(),
            optimizer: OptimizerSpec::default(),
            noise: None,
            seed: 0,
            total_steps: 5000,
            output: None,
            record_wall_time: false,
            tolerances: Tolerances::default(),
        }
    }
}

fn schedule(kind: LrKind, base: f64, warmup_ratio: f64, total: u64) -> LrSchedule {
    LrSchedule {
        kind,
        base_lr: base,
        warmup_ratio,
        total_steps: total,
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Driver configuration; validated against the problem's shape.
    pub fn peso_config(&self, shape: (usize, usize)) -> Result<PesoConfig> {
        let m = &self.method;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.warmup_ratio) {
            return Err(Error::config("optimizer.warmup_ratio", "must lie in [0, 1)"));
        }
        let noise = match self.noise {
            Some(n) => {
                Some(NoiseModel::new(n.c, self.seed).map_err(|e| Error::config("noise.C", e.to_string()))?)
            }
            None => None,
        };
        let restart_lr = match (o.restart_schedule, o.restart_lr) {
            (LrKind::Constant, None) => None,
            (kind, base) => {
                let base = base.unwrap_or(1.0 / m.gamma);
                if !(base > 0.0) || !base.is_finite() {
                    return Err(Error::config("optimizer.restart_lr", "must be > 0"));
                }
                // restart count never exceeds the step budget
                Some(schedule(kind, base, o.warmup_ratio, self.total_steps))
            }
        };
        let cfg = PesoConfig {
            frequency: m.k,
            total_steps: self.total_steps,
            exploration: m.exploration,
            exploitation: m.exploitation,
            rank: m.r,
            gamma: m.gamma,
            smoothing: m.smoothing.then_some(SmoothingConfig {
                tau1: m.tau1,
                tau2: m.tau2,
            }),
            alignment: m.alignment,
            beta2_min: m.beta2_min,
            adam: AdamHyper {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
            inner_lr: schedule(o.schedule, o.lr, o.warmup_ratio, self.total_steps),
            restart_lr,
            noise,
            seed: self.seed,
            max_restarts: m.max_restarts,
            galore_adam: m.galore_adam,
            record_wall_time: self.record_wall_time,
            tolerances: self.tolerances.clone(),
        };
        cfg.validate(shape)?;
        Ok(cfg)
    }

    /// Builds the objective and driver config without running anything.
    pub fn prepare(&self) -> Result<(Box<dyn Objective>, PesoConfig)> {
        let objective = self.problem.build()?;
        let cfg = self.peso_config(objective.shape())?;
        Ok((objective, cfg))
    }

    pub fn execute(&self) -> Result<RunResult> {
        let (objective, cfg) = self.prepare()?;
        run_method(self.method.kind, objective.as_ref(), &cfg)
    }
}

/// Dispatches to the driver for `kind`.
pub fn run_method(kind: MethodKind, objective: &dyn Objective, cfg: &PesoConfig) -> Result<RunResult> {
    match kind {
        MethodKind::Lora => run_lora_baseline(objective, cfg),
        MethodKind::PesoLoraR => run_peso_lora_r(objective, cfg),
        MethodKind::PesoLoraT => run_peso_lora_t(objective, cfg),
        MethodKind::Galore => run_galore_baseline(objective, cfg),
        MethodKind::PesoSubspace => {
            let (m, n) = objective.shape();
            let r = cfg.rank;
            let init = SubspaceState::new(
                objective.initial_point(),
                SubspaceMap::TwoSided {
                    u: Matrix::identity(m).first_columns(r),
                    v: Matrix::identity(n).first_rows(r),
                },
                vec![Matrix::zeros(r, r)],
            )?;
            let eta = cfg
                .restart_lr
                .unwrap_or_else(|| LrSchedule::constant(1.0 / cfg.gamma));
            let mut explorer: Box<dyn UpdateSubspace> = match cfg.exploration {
                ExplorationKind::FullGradientRestart => Box::new(FullGradientRestart::new(r, eta, false)),
                ExplorationKind::MuonRestart => Box::new(FullGradientRestart::new(r, eta, true)),
                ExplorationKind::WarmStartBases => Box::new(WarmStartBases { lr: cfg.inner_lr }),
                ExplorationKind::None => Box::new(NoExploration),
            };
            let mut opt: Box<dyn SubspaceOptimizer> = match cfg.exploitation {
                ExploitationKind::Sgd => Box::new(SgdOptimizer { lr: cfg.inner_lr }),
                ExploitationKind::AdamW => Box::new(AdamWOptimizer::new(cfg.adam, cfg.inner_lr)),
            };
            run_peso_generic(objective, cfg, init, explorer.as_mut(), opt.as_mut())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfigFile::default();
        assert_eq!(RunConfigFile::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfigFile::from_json(r#"{"method": {"kind": "lora", "bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(RunConfigFile::from_json(
            r#"{"problem": {"kind": "quadratic", "a": 1, "n": 4, "r_ones": 2, "x": 0}}"#
        )
        .is_err());
        assert!(RunConfigFile::from_json(r#"{"extra": 0}"#).is_err());
    }

    #[test]
    fn zero_k_names_the_field() {
        let c = RunConfigFile::from_json(r#"{"method": {"K": 0}}"#).unwrap();
        match c.prepare() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "method.K"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("K = 0 accepted"),
        }
    }

    #[test]
    fn mlp_problem_parses_with_defaults() {
        let c = RunConfigFile::from_json(r#"{"problem": {"kind": "mlp", "hidden_dim": 6}}"#).unwrap();
        let (obj, _) = c.prepare().unwrap();
        assert_eq!(obj.shape(), (6, MlpConfig::default().input_dim));
    }

    #[test]
    fn small_run_has_full_length() {
        let c = RunConfigFile::from_json(
            r#"{"method": {"kind": "lora"}, "total_steps": 25, "problem": {"kind": "quadratic", "a": 2, "n": 5, "r_ones": 2}}"#,
        )
        .unwrap();
        assert_eq!(c.execute().unwrap().trace.len(), 25);
    }
}
