//! Named scenarios with the values they are expected to reproduce.

use serde::{Deserialize, Serialize};

use crate::config::{ReshardChoice, ScenarioConfig, StagePlan};
use crate::costmodel::{cost_row_config, tcv_per_warehouse, T100_BW, T1K_BW, COST_ROWS};
use crate::dock::DockConfig;
use crate::domain::{ClusterSpec, ModelSpec, ParallelLayout, RLConfig};
use crate::units::{Bandwidth, ByteSize, GIB};

/// One expected value and how close a measurement must land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    Near {
        metric: String,
        value: f64,
        #[serde(default)]
        rel_tol: f64,
        #[serde(default)]
        abs_tol: f64,
    },
    AtMost { metric: String, value: f64 },
    AtLeast { metric: String, value: f64 },
}

impl Expectation {
    pub fn near(metric: &str, value: f64, rel_tol: f64, abs_tol: f64) -> Self {
        Expectation::Near { metric: metric.into(), value, rel_tol, abs_tol }
    }

    pub fn metric(&self) -> &str {
        match self {
            Expectation::Near { metric, .. } | Expectation::AtMost { metric, .. } | Expectation::AtLeast { metric, .. } => {
                metric
            }
        }
    }

    pub fn holds(&self, got: f64) -> bool {
        match self {
            Expectation::Near { value, rel_tol, abs_tol, .. } => {
                (got - value).abs() <= (rel_tol * value.abs()).max(*abs_tol)
            }
            Expectation::AtMost { value, .. } => got <= *value,
            Expectation::AtLeast { value, .. } => got >= *value,
        }
    }

    /// Same check with all slack removed.
    pub fn strict(&self) -> Self {
        match self {
            Expectation::Near { metric, value, .. } => Expectation::near(metric, *value, 0.0, 0.0),
            other => other.clone(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Expectation::Near { metric, value, rel_tol, abs_tol } => {
                format!("{metric} = {value} (rel {rel_tol}, abs {abs_tol})")
            }
            Expectation::AtMost { metric, value } => format!("{metric} <= {value}"),
            Expectation::AtLeast { metric, value } => format!("{metric} >= {value}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPreset {
    pub name: String,
    pub description: String,
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expected: Vec<Expectation>,
}

impl ScenarioPreset {
    pub fn expectation(&self, metric: &str) -> Option<&Expectation> {
        self.expected.iter().find(|e| e.metric() == metric)
    }
}

/// Published cost table values: TCV (GiB), T100 (s), T1K (s).
pub const PUBLISHED_COSTS: [(f64, f64, f64); 6] = [
    (0.96, 9.92, 0.97),
    (3.81, 39.0, 3.81),
    (15.2, 156.1, 15.2),
    (97.0, 993.3, 97.0),
    (388.0, 3900.0, 388.0),
    (3100.0, 31000.0, 3100.0),
];

/// The same cells as typeset, K meaning thousands.
pub const PUBLISHED_COST_TEXT: [[&str; 3]; 6] = [
    ["0.96", "9.92", "0.97"],
    ["3.81", "39.0", "3.81"],
    ["15.2", "156.1", "15.2"],
    ["97.0", "993.3", "97.0"],
    ["388.0", "3.9K", "388.0"],
    ["3.1K", "31K", "3.1K"],
];

/// Whether `value` is what `text` shows once cut or rounded to the digits
/// `text` keeps.
pub fn display_agrees(text: &str, value: f64) -> bool {
    let (mantissa, scale) = match text.strip_suffix('K') {
        Some(m) => (m, 1000.0),
        None => (text, 1.0),
    };
    let Ok(shown) = mantissa.parse::<f64>() else { return false };
    let decimals = mantissa.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
    let step = 10f64.powi(-decimals) * scale;
    let shown = shown * scale;
    let cut = value >= shown && value < shown + step;
    let rounded = (value - shown).abs() <= step / 2.0;
    cut || rounded
}

pub fn is_thousands(text: &str) -> bool {
    text.ends_with('K')
}

/// Table-row tolerance: 1% relative, or 0.05 GiB for entries below 1 GiB.
fn table_check(metric: &str, value: f64) -> Expectation {
    let abs = if value < 1.0 { 0.05 } else { 0.0 };
    Expectation::near(metric, value, 0.01, abs)
}

fn flow_cluster(nodes: u32, per_node: u32, bw: Bandwidth) -> ClusterSpec {
    ClusterSpec::with_inter_bw(nodes, per_node, bw)
}

fn flow_scenario(cluster: ClusterSpec, rl: RLConfig, dock: DockConfig) -> ScenarioConfig {
    let world = cluster.world_size();
    ScenarioConfig {
        cluster,
        layout_update: ParallelLayout::data_parallel(world),
        layout_generation: ParallelLayout::data_parallel(world),
        model: ModelSpec::empty(),
        rl,
        dock,
        stages: StagePlan::default(),
        reshard: ReshardChoice::None,
    }
}

fn table_row(row: usize) -> ScenarioPreset {
    let rl = cost_row_config(row).expect("six rows");
    let mut dock = DockConfig::centralized();
    dock.central_node = 0;
    dock.worker_nodes = Some(vec![1]);
    let (tcv, t100, t1k) = PUBLISHED_COSTS[row];
    let mut expected = vec![table_check("tcv_gib", tcv), table_check("t100_s", t100), table_check("t1k_s", t1k)];
    if row < 3 {
        expected.push(Expectation::near("ete_s", t100, 0.02, 0.0));
    }
    ScenarioPreset {
        name: format!("cost_row{}_centralized", row + 1),
        description: format!(
            "Sample flow of cost row {} through a centralized buffer on node 0, workers on node 1, 100 MiB/s",
            row + 1
        ),
        scenario: flow_scenario(flow_cluster(2, 1, T100_BW), rl, dock),
        expected,
    }
}

fn table_row1_transfer_dock() -> ScenarioPreset {
    let rl = cost_row_config(0).expect("row 1");
    let dock = DockConfig::transfer_dock(5, 4);
    let per_wh = tcv_per_warehouse(&rl, 5, 4).expect("row 1 fits");
    ScenarioPreset {
        name: "cost_row1_transfer_dock".into(),
        description: "Cost row 1 through four warehouses on four nodes, 100 MiB/s".into(),
        scenario: flow_scenario(flow_cluster(4, 1, T100_BW), rl, dock),
        expected: vec![Expectation::near("max_warehouse_gib", per_wh, 0.01, 0.0), Expectation::AtMost {
            metric: "ete_s".into(),
            value: PUBLISHED_COSTS[0].1,
        }],
    }
}

fn small_rl() -> RLConfig {
    RLConfig {
        global_batch: 8,
        responses_per_prompt: 4,
        dtype_bytes: 4,
        prompt_len: 2048,
        response_len: 8192,
        response_like_items: 5,
        scalar_items: 3,
    }
}

fn moe_preset() -> ScenarioPreset {
    let unit = 4 * 1024;
    let model = ModelSpec {
        common_bytes: ByteSize(unit),
        tp_sharded_bytes: ByteSize(2 * unit),
        expert_bytes: ByteSize(4 * unit),
        num_experts: 4,
        num_layers: 1,
    };
    let update = ParallelLayout::new(2, 1, 2, 2, 1);
    let generation = ParallelLayout::new(1, 1, 4, 4, 1);
    // GDP x (TW/UTP + EW/GEP)
    let redundant = 4.0 * ((2 * unit) as f64 / 2.0 + (4 * unit) as f64 / 4.0);
    let mut cluster = flow_cluster(1, 4, Bandwidth::gib_per_s(25));
    cluster.device_memory = ByteSize::gib(1);
    ScenarioPreset {
        name: "moe_reshard".into(),
        description: "MoE resharding from TP2 EP2 DP2 to TP1 EP4 DP4 on four devices".into(),
        scenario: ScenarioConfig {
            cluster,
            layout_update: update,
            layout_generation: generation,
            model,
            rl: small_rl(),
            dock: DockConfig::transfer_dock(5, 1),
            stages: StagePlan::default(),
            reshard: ReshardChoice::AllgatherSwap,
        },
        expected: vec![Expectation::near("redundant_bytes_total", redundant, 0.0, 0.0)],
    }
}

fn dense_preset() -> ScenarioPreset {
    let mut cluster = flow_cluster(2, 8, T1K_BW);
    cluster.device_memory = ByteSize::gib(128);
    ScenarioPreset {
        name: "dense_profile".into(),
        description: "Dense TP8 DP2 to TP4 DP4 on two nodes of eight devices, 64 GiB of TP weights".into(),
        scenario: ScenarioConfig {
            cluster,
            layout_update: ParallelLayout::new(8, 1, 2, 1, 1),
            layout_generation: ParallelLayout::new(4, 1, 4, 1, 1),
            model: ModelSpec::dense(ByteSize::gib(4), ByteSize::gib(64)),
            rl: RLConfig { global_batch: 16, ..small_rl() },
            dock: DockConfig::transfer_dock(5, 2),
            stages: StagePlan::default(),
            reshard: ReshardChoice::AllgatherSwap,
        },
        // one TP blob is TW / lcm(8, 4) = 8 GiB
        expected: vec![Expectation::near("redundant_bytes_per_device", (8 * GIB) as f64, 0.0, (8 * GIB) as f64)],
    }
}

fn linearity_preset() -> ScenarioPreset {
    ScenarioPreset {
        name: "linearity_sweep".into(),
        description: "Fixed load of 64 prompts per node at 300 MiB/s, swept over node counts".into(),
        scenario: flow_scenario(
            flow_cluster(1, 8, Bandwidth::mib_per_s(300)),
            RLConfig { global_batch: 64, ..small_rl() },
            DockConfig::transfer_dock(5, 1),
        ),
        expected: vec![
            Expectation::AtMost { metric: "transfer_dock_dispatch_growth".into(), value: 1.10 },
            Expectation::AtLeast { metric: "centralized_dispatch_growth".into(), value: 4.0 },
        ],
    }
}

pub fn presets() -> Vec<ScenarioPreset> {
    let mut out: Vec<ScenarioPreset> = (0..COST_ROWS.len()).map(table_row).collect();
    out.push(table_row1_transfer_dock());
    out.push(moe_preset());
    out.push(dense_preset());
    out.push(linearity_preset());
    out
}

pub fn preset(name: &str) -> Option<ScenarioPreset> {
    presets().into_iter().find(|p| p.name == name)
}

pub fn preset_names() -> Vec<String> {
    presets().into_iter().map(|p| p.name).collect()
}

/// Per-node prompt count and node counts of the scaling sweep.
pub const LINEARITY_NODES: [u32; 4] = [1, 2, 4, 8];
pub const LINEARITY_PROMPTS_PER_NODE: u64 = 64;
