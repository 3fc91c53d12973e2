//! Simulated machine parameters: worker counts, memory/link timings,
//! per-kind compute costs, and dispatch overheads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ResourceClass;
use crate::taskgen::{TaskDescriptor, TaskType};

/// Affine compute-time model: fixed_us + per_element_us * elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindCost {
    pub fixed_us: f64,
    pub per_element_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub aic_workers: usize,
    pub aiv_workers: usize,
    pub l2_capacity_bytes: usize,
    pub l2_read_time_per_byte: f64,
    pub hbm_read_time_per_byte: f64,
    /// Per task-type compute costs, keyed by the serialized type name.
    pub compute: BTreeMap<String, KindCost>,
    pub comm_latency_alpha: f64,
    pub ingress_bytes_per_microsecond: f64,
    pub signal_delay: f64,
    pub dispatch_overhead_static: f64,
    pub dispatch_overhead_dynamic: f64,
    pub kernel_launch_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        let mut compute = BTreeMap::new();
        let cube = KindCost { fixed_us: 0.5, per_element_us: 2.0e-5 };
        let vector = KindCost { fixed_us: 0.3, per_element_us: 1.0e-5 };
        for t in [
            TaskType::Gmm1,
            TaskType::Gmm2,
            TaskType::GmmActGrad,
            TaskType::GmmW2Grad,
            TaskType::GmmGateGrad,
            TaskType::GmmW1Grad,
        ] {
            compute.insert(type_key(t), cube);
        }
        for t in [TaskType::Swiglu, TaskType::SwigluGrad, TaskType::ElemAdd, TaskType::CombineReduce] {
            compute.insert(type_key(t), vector);
        }
        CostModel {
            aic_workers: 25,
            aiv_workers: 50,
            l2_capacity_bytes: 192 << 20,
            l2_read_time_per_byte: 1.0e-5,
            hbm_read_time_per_byte: 4.0e-5,
            compute,
            comm_latency_alpha: 1.0,
            ingress_bytes_per_microsecond: 2000.0,
            signal_delay: 0.0,
            dispatch_overhead_static: 0.1,
            dispatch_overhead_dynamic: 2.36,
            kernel_launch_overhead: 5.0,
        }
    }
}

fn type_key(t: TaskType) -> String {
    serde_json::to_value(t).unwrap().as_str().unwrap().to_string()
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let times = [
            self.l2_read_time_per_byte,
            self.hbm_read_time_per_byte,
            self.comm_latency_alpha,
            self.signal_delay,
            self.dispatch_overhead_static,
            self.dispatch_overhead_dynamic,
            self.kernel_launch_overhead,
        ];
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::ConfigError("cost model times must be >= 0".into()));
        }
        if self.aic_workers == 0 || self.aiv_workers == 0 {
            return Err(Error::ConfigError("worker counts must be positive".into()));
        }
        if !(self.ingress_bytes_per_microsecond > 0.0) {
            return Err(Error::ConfigError("ingress bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn workers(&self, class: ResourceClass) -> usize {
        match class {
            ResourceClass::Cube => self.aic_workers,
            ResourceClass::Vector => self.aiv_workers,
        }
    }

    pub fn dispatch_overhead(&self, dynamic: bool) -> f64 {
        if dynamic {
            self.dispatch_overhead_dynamic
        } else {
            self.dispatch_overhead_static
        }
    }

    pub fn kind_cost(&self, t: TaskType) -> KindCost {
        self.compute
            .get(&type_key(t))
            .copied()
            .unwrap_or(KindCost { fixed_us: 0.0, per_element_us: 0.0 })
    }

    /// Modeled work size: GMM tasks cost rows x K x N, vector tasks cost
    /// their output element count.
    pub fn element_count(&self, td: &TaskDescriptor) -> usize {
        match td.task_type.resource_class() {
            ResourceClass::Cube => {
                let rows = td
                    .inputs
                    .iter()
                    .find(|s| !s.is_metadata() && s.extents.len() == 2)
                    .map(|s| s.extents[0]);
                let kn = td
                    .inputs
                    .iter()
                    .find(|s| !s.is_metadata() && s.extents.len() == 3)
                    .map(|s| s.extents[1] * s.extents[2]);
                match (rows, kn) {
                    (Some(r), Some(kn)) => r * kn,
                    _ => td.outputs.first().map_or(0, |o| o.volume()),
                }
            }
            ResourceClass::Vector => td.outputs.first().map_or(0, |o| o.volume()),
        }
    }

    pub fn compute_time(&self, td: &TaskDescriptor) -> f64 {
        let kc = self.kind_cost(td.task_type);
        kc.fixed_us + kc.per_element_us * self.element_count(td) as f64
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self).map_err(|e| Error::ParseError(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<CostModel> {
        let cm: CostModel =
            serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
        cm.validate()?;
        Ok(cm)
    }
}
