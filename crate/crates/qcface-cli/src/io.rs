//! Artifact serialization. All real numbers in CSV output carry 17
//! significant digits so every f64 round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qcface_core::analysis::ProjectionRow;
use qcface_core::train::HistoryRow;

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const HISTORY_HEADER: &str = "epoch,phase,mean_lsm,mean_lreg,mean_pd,lr";
pub const MAGNITUDES_HEADER: &str = "sample_id,class,noise_sigma,mislabeled,p_d,magnitude,cos_to_proxy";
pub const PROJECTION_HEADER: &str = "sample_id,x,y,magnitude,p_d";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            fmt_real(r.mean_lsm),
            fmt_real(r.mean_lreg),
            fmt_real(r.mean_pd),
            fmt_real(r.lr),
        ));
    }
    out
}

/// One dataset sample in the final embedding, with its guidance value and
/// alignment to the labeled proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeRow {
    pub sample_id: usize,
    pub class: usize,
    pub noise_sigma: f64,
    pub mislabeled: bool,
    pub p_d: f64,
    pub magnitude: f64,
    pub cos_to_proxy: f64,
}

pub fn magnitudes_csv(rows: &[MagnitudeRow]) -> String {
    let mut out = String::from(MAGNITUDES_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id,
            r.class,
            fmt_real(r.noise_sigma),
            r.mislabeled,
            fmt_real(r.p_d),
            fmt_real(r.magnitude),
            fmt_real(r.cos_to_proxy),
        ));
    }
    out
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from(PROJECTION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id,
            fmt_real(r.x),
            fmt_real(r.y),
            fmt_real(r.magnitude),
            fmt_real(r.p_d),
        ));
    }
    out
}

/// Final-state summary statistics. The correlation fields are null when a
/// column is constant and the coefficient is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsJson {
    pub tar_at_far: BTreeMap<String, f64>,
    pub auc: f64,
    pub rank_k: BTreeMap<usize, f64>,
    pub pearson_pd_mag: Option<f64>,
    pub pearson_noise_mag: Option<f64>,
}

/// Checksums of everything a planner run wrote, plus the effective seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_sha256: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub seed_override: Option<u64>,
    pub tool_version: String,
    pub files: BTreeMap<String, String>,
}

/// Writes artifacts under one run directory, recording a checksum per
/// file so the manifest can be assembled at the end.
pub struct Emitter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Emitter {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> std::io::Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(path)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }
}

pub fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}
