//! Run records: the per-run summary JSON tying together metrics, parameter
//! accounting, and the config hash.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use msloc_core::metrics::SceneMetrics;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetricsRecord {
    pub scene: String,
    pub median_trans_m: f64,
    pub median_rot_deg: f64,
    pub acc_5cm5deg: f64,
    pub n_frames: usize,
}

impl From<&SceneMetrics> for SceneMetricsRecord {
    fn from(m: &SceneMetrics) -> Self {
        Self {
            scene: m.scene.clone(),
            median_trans_m: m.median_trans_m,
            median_rot_deg: m.median_rot_deg,
            acc_5cm5deg: m.acc_5cm5deg,
            n_frames: m.n_frames,
        }
    }
}

/// Parameter accounting. `specific` excludes heads (they are broken out
/// into `heads`); `total = shared + sum(specific) + sum(heads)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub shared: usize,
    pub specific: BTreeMap<String, usize>,
    pub heads: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParamsRecord {
    pub fn closes(&self) -> bool {
        self.shared + self.specific.values().sum::<usize>() + self.heads.values().sum::<usize>() == self.total
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizeRecord {
    pub base_checkpoint: String,
    pub new_scene: String,
    pub frozen_shared_hash_equal: bool,
    pub increased_params: usize,
    pub old_scenes_unchanged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub verb: String,
    pub config_hash: String,
    pub strategy: String,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub scenes: Vec<SceneMetricsRecord>,
    pub params: ParamsRecord,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalize: Option<GeneralizeRecord>,
}

impl RunRecord {
    pub fn mean_accuracy(&self) -> f64 {
        if self.scenes.is_empty() {
            return 0.0;
        }
        self.scenes.iter().map(|s| s.acc_5cm5deg).sum::<f64>() / self.scenes.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}
