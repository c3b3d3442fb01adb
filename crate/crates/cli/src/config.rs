//! The JSON run configuration. Unknown keys are rejected; every run persists
//! the resolved document next to its outputs.

use serde::{Deserialize, Serialize};

use maha_core::aggregate::{AggMethod, SolverConfig, TargetKind};
use maha_core::heatmap::HeatmapFormat;
use maha_core::pyramid::DownsampleKind;
use maha_core::toymodel::{TaskKind, ToyModelConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub solver: SolverSection,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n: usize,
    pub d: usize,
    pub d_k: usize,
    pub l: usize,
    pub r: usize,
    pub downsample_kind: DownsampleKind,
    /// Reserved; the implementation is single-head.
    pub heads: usize,
    pub include_base_scale: bool,
    pub gating: bool,
    pub dilated: bool,
    pub dilation: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n: 32,
            d: 32,
            d_k: 8,
            l: 4,
            r: 2,
            downsample_kind: DownsampleKind::StridedConv,
            heads: 1,
            include_base_scale: false,
            gating: true,
            dilated: true,
            dilation: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub method: AggMethod,
    pub lambda: f64,
    pub iters: usize,
    pub step: f64,
    pub target_kind: TargetKind,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: AggMethod::Co,
            lambda: 0.1,
            iters: 50,
            step: 0.1,
            target_kind: TargetKind::ValuePathway,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: String,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { task: "copy".to_string(), lr: 0.25, steps: 500, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Both,
    Proportional,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    Both,
    ScoreEntries,
    FullMacs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub policy: PolicyChoice,
    pub metric: MetricChoice,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024, 2048, 4096],
            policy: PolicyChoice::Both,
            metric: MetricChoice::Both,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<HeatmapFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: "out".to_string(), formats: vec![HeatmapFormat::Pgm, HeatmapFormat::Csv] }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.heads != 1 {
            return Err(CliError::Config(format!(
                "heads is reserved and must be 1, got {}",
                self.model.heads
            )));
        }
        if self.model.dilation == 0 {
            return Err(CliError::Config("dilation must be >= 1".into()));
        }
        self.task_kind()?;
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output.formats must not be empty".into()));
        }
        self.solver_config().validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.train.task.as_str() {
            "copy" => Ok(TaskKind::Copy),
            "pattern_classify" => Ok(TaskKind::PatternClassify),
            other => Err(CliError::Config(format!(
                "unknown task {other:?} (expected copy or pattern_classify)"
            ))),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            lambda: self.solver.lambda,
            max_iters: self.solver.iters,
            step: self.solver.step,
            tol: 1e-8,
            target: self.solver.target_kind,
        }
    }

    pub fn toy_config(&self) -> Result<ToyModelConfig> {
        Ok(ToyModelConfig {
            layers: 2,
            d: self.model.d,
            d_k: self.model.d_k,
            vocab: 16,
            n: self.model.n,
            r: self.model.r,
            depth: self.model.l,
            downsample: self.model.downsample_kind,
            include_base_scale: self.model.include_base_scale,
            gating: self.model.gating,
            dilated: self.model.dilated,
            dilation: self.model.dilation,
            method: self.solver.method,
            solver: self.solver_config(),
            lr: self.train.lr,
            steps: self.train.steps,
            batch: 8,
            seed: self.train.seed,
        })
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"model": {"n": 64, "mystery": 3}}"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = r#"{"model": {"n": 64}, "train": {"steps": 10}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.model.n, 64);
        assert_eq!(cfg.model.r, 2);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.solver.lambda, 0.1);
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.resolved_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.resolved_json(), text);
    }

    #[test]
    fn reserved_heads_field_guarded() {
        let mut cfg = RunConfig::default();
        cfg.model.heads = 2;
        assert!(cfg.validate().is_err());
    }
}
