//! Run reports and content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::eval::EvalReport;
use super::train::EpochLog;
use crate::synthgen::DatasetManifest;

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the manifest exactly as written to `manifest.json`.
pub fn manifest_hash(m: &DatasetManifest) -> String {
    blob_hash(&serde_json::to_vec_pretty(m).expect("manifest serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub manifest_hash: String,
    pub epochs: Vec<EpochLog>,
    pub eval: Vec<EvalReport>,
    /// Seconds; left out under the determinism flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Hash of the report with the wall-clock field removed.
    pub fn content_hash(&self) -> String {
        let canon = RunReport { wall_clock_s: None, ..self.clone() };
        sha256_hex(&serde_json::to_vec(&canon).expect("report serializes"))
    }
}
