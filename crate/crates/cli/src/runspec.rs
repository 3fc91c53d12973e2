//! RunSpec: the JSON document that fully determines a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use moeflow_core::compile::{
    compile_chain, compile_moe, CompileOptions, Compiled, MoeGraphKind,
};
use moeflow_core::graph::ShapeConfig;
use moeflow_core::routing::{balanced_plan, natural_plan, RoutingPlan};
use moeflow_core::sim::{CostModel, DispatchMode, SimMode};
use moeflow_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Forward,
    Backward,
    SwigluAdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingSpec {
    Balanced,
    Natural { seed: u64, skew: f64 },
}

impl Default for RoutingSpec {
    fn default() -> Self {
        RoutingSpec::Balanced
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Pipelined,
    SerialBaseline,
}

impl Default for ModeSpec {
    fn default() -> Self {
        ModeSpec::Pipelined
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchSpec {
    Static,
    Dynamic,
}

impl Default for DispatchSpec {
    fn default() -> Self {
        DispatchSpec::Static
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub m: usize,
    pub hidden_in: usize,
    #[serde(default)]
    pub block: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub graph: GraphKind,
    #[serde(default)]
    pub shape_config: Option<ShapeConfig>,
    #[serde(default)]
    pub chain: Option<ChainSpec>,
    #[serde(default)]
    pub routing: RoutingSpec,
    /// Path to a CostModel JSON document; defaults apply when absent.
    #[serde(default)]
    pub cost_model: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub ratr: bool,
    #[serde(default = "default_true")]
    pub ratr_combine: bool,
    #[serde(default = "default_true")]
    pub interleave: bool,
    #[serde(default)]
    pub strict_single_trigger: bool,
    #[serde(default)]
    pub mode: ModeSpec,
    #[serde(default)]
    pub dispatch: DispatchSpec,
    /// Seed for the numeric input/weight draws in `verify`.
    #[serde(default)]
    pub input_seed: u64,
    pub output_dir: PathBuf,
}

impl RunSpec {
    pub fn load(path: &std::path::Path) -> Result<RunSpec> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ParseError(format!("runspec: {e}")))
    }

    pub fn options(&self) -> CompileOptions {
        CompileOptions {
            strict_single_trigger: self.strict_single_trigger,
            ratr: self.ratr,
            ratr_combine: self.ratr_combine,
            interleave: self.interleave,
        }
    }

    pub fn sim_mode(&self) -> SimMode {
        match self.mode {
            ModeSpec::Pipelined => SimMode::Pipelined,
            ModeSpec::SerialBaseline => SimMode::SerialBaseline,
        }
    }

    pub fn dispatch_mode(&self) -> DispatchMode {
        match self.dispatch {
            DispatchSpec::Static => DispatchMode::Static,
            DispatchSpec::Dynamic => DispatchMode::Dynamic,
        }
    }

    /// Routing plan with the HPMOE_SEED environment override applied.
    pub fn plan(&self, cfg: &ShapeConfig) -> Result<RoutingPlan> {
        let env_seed = std::env::var("HPMOE_SEED").ok().and_then(|s| s.parse::<u64>().ok());
        match &self.routing {
            RoutingSpec::Balanced => balanced_plan(cfg),
            RoutingSpec::Natural { seed, skew } => {
                natural_plan(cfg, env_seed.unwrap_or(*seed), *skew)
            }
        }
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        match &self.cost_model {
            None => Ok(CostModel::default()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| {
                    Error::ConfigError(format!("cannot read {}: {e}", p.display()))
                })?;
                CostModel::from_json(&bytes)
            }
        }
    }

    /// Compile the configured graph; returns the compilation and, for MoE
    /// graphs, the routing plan used.
    pub fn compile(&self) -> Result<(Compiled, Option<RoutingPlan>)> {
        let opts = self.options();
        match self.graph {
            GraphKind::Forward | GraphKind::Backward => {
                let cfg = self.shape_config.clone().ok_or_else(|| {
                    Error::ConfigError("forward/backward graphs require shape_config".into())
                })?;
                cfg.validate()?;
                let plan = self.plan(&cfg)?;
                let kind = if self.graph == GraphKind::Forward {
                    MoeGraphKind::Forward
                } else {
                    MoeGraphKind::Backward
                };
                let compiled = compile_moe(kind, &cfg, &plan, &opts)?;
                Ok((compiled, Some(plan)))
            }
            GraphKind::SwigluAdd => {
                let chain = self.chain.clone().ok_or_else(|| {
                    Error::ConfigError("swiglu_add graphs require a chain section".into())
                })?;
                let compiled = compile_chain(chain.m, chain.hidden_in, chain.block, &opts)?;
                Ok((compiled, None))
            }
        }
    }
}
