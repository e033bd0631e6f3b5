use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Maneuver, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardField {
    TauMin,
    EgoSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Lt,
    Gt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardCondition {
    pub field: GuardField,
    pub cmp: Comparison,
    pub threshold: f64,
}

impl GuardCondition {
    pub fn holds(&self, tau_min: f64, ego_speed: f64) -> bool {
        let v = match self.field {
            GuardField::TauMin => tau_min,
            GuardField::EgoSpeed => ego_speed,
        };
        match self.cmp {
            Comparison::Lt => v < self.threshold,
            Comparison::Gt => v > self.threshold,
        }
    }
}

/// Forbids one maneuver in one scenario while every guard condition holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRule {
    pub scenario_kind: ScenarioKind,
    pub forbidden_action: Maneuver,
    pub guard: Vec<GuardCondition>,
}

impl ConstraintRule {
    pub fn validate(&self) -> Result<()> {
        if self.guard.is_empty() {
            return Err(Error::parse("constraint rule", "guard must have at least one condition"));
        }
        if let Some(c) = self.guard.iter().find(|c| !c.threshold.is_finite()) {
            return Err(Error::parse(
                "constraint rule",
                format!("non-finite threshold on {:?}", c.field),
            ));
        }
        Ok(())
    }

    pub fn active(&self, kind: ScenarioKind, tau_min: f64, ego_speed: f64) -> bool {
        self.scenario_kind == kind && self.guard.iter().all(|c| c.holds(tau_min, ego_speed))
    }
}

/// Maneuvers forbidden by any rule whose guard currently holds.
pub fn forbidden(rules: &[ConstraintRule], kind: ScenarioKind, tau_min: f64, ego_speed: f64) -> Vec<Maneuver> {
    let mut out: Vec<Maneuver> = rules
        .iter()
        .filter(|r| r.active(kind, tau_min, ego_speed))
        .map(|r| r.forbidden_action)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
