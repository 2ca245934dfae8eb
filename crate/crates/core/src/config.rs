//! Experiment configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostConfig, OmegaSchedule};
use crate::error::{Error, Result};
use crate::grid::SpatialRelation;
use crate::sim::SimConfig;
use crate::sto::{SpatialSpec, StoConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Entropic solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub eps_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub target_sigma: Option<f64>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        let s = StoConfig::default();
        TransportConfig {
            eps_reg: s.eps_reg,
            tol: s.tol,
            max_iter: s.max_iter,
            target_sigma: s.target_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Write a PGM of every token map at every step.
    pub dump_pgm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sim: SimConfig,
    pub cost: CostConfig,
    pub omega: OmegaSchedule,
    pub transport: TransportConfig,
    pub specs: Vec<SpatialSpec>,
    pub seeds: Vec<u64>,
    /// Give seed `s` the relation `[left, right, above, below][(s / 2) % 4]`,
    /// overriding the relation of the first spec.
    pub cycle_relations: bool,
    pub out_dir: Option<String>,
    pub export: ExportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            sim: SimConfig::default(),
            cost: CostConfig::default(),
            omega: OmegaSchedule::default(),
            transport: TransportConfig::default(),
            specs: vec![SpatialSpec::new(0, 1, SpatialRelation::Left)],
            seeds: vec![0],
            cycle_relations: false,
            out_dir: None,
            export: ExportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for spec in &self.specs {
            spec.validate(self.sim.tokens).map_err(Error::Config)?;
        }
        if self.cycle_relations && self.specs.is_empty() {
            return Err(Error::Config("cycle_relations needs at least one spec".into()));
        }
        self.sim_config(self.seeds[0]).validate().map_err(Error::Config)
    }

    pub fn sto_config(&self) -> StoConfig {
        StoConfig {
            cost: self.cost,
            eps_reg: self.transport.eps_reg,
            tol: self.transport.tol,
            max_iter: self.transport.max_iter,
            target_sigma: self.transport.target_sigma,
        }
    }

    /// Simulator settings for one seed.
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            seed,
            omega: self.omega,
            sto: self.sto_config(),
            ..self.sim.clone()
        }
    }

    /// The specs used for `seed`.
    pub fn specs_for(&self, seed: u64) -> Vec<SpatialSpec> {
        let mut specs = self.specs.clone();
        if self.cycle_relations {
            if let Some(first) = specs.first_mut() {
                first.relation = cycled_relation(seed);
            }
        }
        specs
    }
}

/// Relation assigned to `seed` when relations are cycled. Antithetic seed
/// pairs share a relation.
pub fn cycled_relation(seed: u64) -> SpatialRelation {
    SpatialRelation::DIRECTIONAL[((seed / 2) % 4) as usize]
}
