//! Scenario files: everything one simulated iteration needs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dock::{ComputeModel, DockConfig};
use crate::domain::{validate_layout, ClusterSpec, CoreError, ModelSpec, ParallelLayout, RLConfig, WorkerStateId};
use crate::reshard::Executor;

/// Which resharding executor runs before generation, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReshardChoice {
    None,
    Naive,
    #[default]
    AllgatherSwap,
}

impl ReshardChoice {
    pub fn executor(self) -> Option<Executor> {
        match self {
            ReshardChoice::None => None,
            ReshardChoice::Naive => Some(Executor::Naive),
            ReshardChoice::AllgatherSwap => Some(Executor::AllgatherSwap),
        }
    }
}

impl fmt::Display for ReshardChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReshardChoice::None => "none",
            ReshardChoice::Naive => "naive",
            ReshardChoice::AllgatherSwap => "allgather-swap",
        })
    }
}

impl FromStr for ReshardChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(ReshardChoice::None);
        }
        match s.parse::<Executor>()? {
            Executor::Naive => Ok(ReshardChoice::Naive),
            Executor::AllgatherSwap => Ok(ReshardChoice::AllgatherSwap),
        }
    }
}

/// Per-state compute models. States not listed take no compute time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan(pub BTreeMap<WorkerStateId, ComputeModel>);

impl StagePlan {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with(mut self, state: WorkerStateId, model: ComputeModel) -> Self {
        self.0.insert(state, model);
        self
    }

    pub fn get(&self, state: WorkerStateId) -> ComputeModel {
        self.0.get(&state).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for (s, m) in &self.0 {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(m.fixed_s) || !ok(m.per_token_s) {
                return Err(CoreError::Invalid { what: "stages", reason: format!("{s}: coefficients must be finite and >= 0") });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub cluster: ClusterSpec,
    pub layout_update: ParallelLayout,
    pub layout_generation: ParallelLayout,
    pub model: ModelSpec,
    pub rl: RLConfig,
    pub dock: DockConfig,
    #[serde(default, skip_serializing_if = "StagePlan::is_empty")]
    pub stages: StagePlan,
    #[serde(default)]
    pub reshard: ReshardChoice,
}

impl ScenarioConfig {
    /// Checks everything that does not need a simulator.
    pub fn validate(&self) -> Result<(), CoreError> {
        self.cluster.validate()?;
        self.rl.validate()?;
        self.stages.validate()?;
        let world = self.cluster.world_size() as u64;
        for l in [&self.layout_update, &self.layout_generation] {
            validate_layout(l, world).map_err(|v| CoreError::Invalid {
                what: "layout",
                reason: format!("{l}: {}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")),
            })?;
        }
        if self.reshard != ReshardChoice::None {
            self.model.validate()?;
            self.model.check_layout(&self.layout_update)?;
            self.model.check_layout(&self.layout_generation)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{cost_row_config, T100_BW};
    use crate::dock::DockMode;

    fn sample() -> ScenarioConfig {
        ScenarioConfig {
            cluster: ClusterSpec::with_inter_bw(2, 4, T100_BW),
            layout_update: ParallelLayout::new(4, 1, 2, 1, 1),
            layout_generation: ParallelLayout::new(2, 1, 4, 1, 1),
            model: ModelSpec::dense(crate::ByteSize::mib(1), crate::ByteSize::mib(8)),
            rl: cost_row_config(0).unwrap(),
            dock: DockConfig::centralized().with_mode(DockMode::TransferDock, 2),
            stages: StagePlan::default().with(WorkerStateId::RewardScore, ComputeModel { fixed_s: 0.5, per_token_s: 1e-6 }),
            reshard: ReshardChoice::Naive,
        }
    }

    #[test]
    fn json_round_trip_is_identity() {
        let s = sample();
        let text = s.to_json();
        let back = ScenarioConfig::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json(), text);
        assert!(text.contains("\"reward_score\""));
    }

    #[test]
    fn unknown_fields_and_bad_layouts_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());

        let mut s = sample();
        s.layout_generation = ParallelLayout::new(3, 1, 2, 1, 1);
        assert!(s.validate().is_err());
        assert!(sample().validate().is_ok());
    }

    #[test]
    fn reshard_choice_parses() {
        for c in [ReshardChoice::None, ReshardChoice::Naive, ReshardChoice::AllgatherSwap] {
            assert_eq!(c.to_string().parse::<ReshardChoice>().unwrap(), c);
        }
        assert_eq!("swap".parse::<ReshardChoice>().unwrap(), ReshardChoice::AllgatherSwap);
        assert!("copy".parse::<ReshardChoice>().is_err());
    }
}
