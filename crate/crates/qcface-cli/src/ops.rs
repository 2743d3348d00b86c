//! The work behind each subcommand: planner runs, artifact recomputation,
//! gradient verification, and sweeps.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use qcface_core::analysis::{
    identification_metrics, pearson, projection_export, verification_metrics, DEFAULT_FAR_GRID,
};
use qcface_core::geometry::{cosine_similarity, FeatureBatch, ProxyMatrix};
use qcface_core::grad::gradient_check_suite;
use qcface_core::margin::guidance_value;
use qcface_core::synth::generate_synthetic;
use qcface_core::train::{HistoryRow, PlanState};
use qcface_core::Error;

use crate::config::{EmitKind, ExperimentConfig};
use crate::io::{
    self, history_csv, magnitudes_csv, pretty_json, projection_csv, Emitter, MagnitudeRow,
    MetricsJson, RunManifest,
};
use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Analytic and numeric gradients must agree to this relative tolerance
/// for the check command to exit clean.
pub const GRAD_TOL: f64 = 1e-6;

/// Full trainer state plus the config that produced it, as stored in
/// state.json. `failure` is set when the run aborted mid-schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredRun {
    pub config: ExperimentConfig,
    pub state: PlanState,
    pub failure: Option<String>,
}

pub struct PlanOutcome {
    pub dir: PathBuf,
    pub state_path: PathBuf,
    pub failure: Option<String>,
    pub last_row: Option<HistoryRow>,
    pub pearson_pd_mag: Option<f64>,
}

fn fs_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{context}: {e}"))
}

/// Generates the dataset, runs the schedule, and writes the run directory:
/// state.json always; history.csv, magnitudes.csv and manifest.json only
/// when the run finished. A numeric abort still leaves the state dump so
/// the blow-up can be inspected.
pub fn run_plan(
    config: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<PlanOutcome, CliError> {
    let mut cfg = config.clone();
    if let Some(seed) = seed_override {
        cfg.apply_seed_override(seed);
    }
    let resolved = cfg.resolve()?;
    let data = generate_synthetic(&resolved.data)?;
    let report = qcface_core::train::run_schedule(&resolved.train, &data)?;

    let mut emitter = Emitter::new(&cfg.output_dir)
        .map_err(|e| fs_err(&format!("cannot create {}", cfg.output_dir.display()), e))?;
    let stored = StoredRun {
        config: cfg.clone(),
        state: report.state.clone(),
        failure: report.failure.as_ref().map(|e| e.to_string()),
    };
    let state_path = emitter
        .write("state.json", &pretty_json(&stored))
        .map_err(|e| fs_err("cannot write state.json", e))?;
    if stored.failure.is_some() {
        return Ok(PlanOutcome {
            dir: cfg.output_dir.clone(),
            state_path,
            failure: stored.failure,
            last_row: None,
            pearson_pd_mag: None,
        });
    }

    emitter
        .write("history.csv", &history_csv(&report.history))
        .map_err(|e| fs_err("cannot write history.csv", e))?;
    let batch = report.state.embeddings(&data)?;
    let rows = magnitude_rows(&batch, &report.state.proxies, resolved.train.spec.s)?;
    emitter
        .write("magnitudes.csv", &magnitudes_csv(&rows))
        .map_err(|e| fs_err("cannot write magnitudes.csv", e))?;

    let pd: Vec<f64> = rows.iter().map(|r| r.p_d).collect();
    let mags: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    let pearson_pd_mag = pearson(&pd, &mags).ok().map(|c| c.pearson_r);

    let manifest = RunManifest {
        config_sha256: io::sha256_hex(cfg.to_json().as_bytes()),
        data_seed: resolved.data.seed,
        train_seed: resolved.train.seed,
        seed_override,
        tool_version: TOOL_VERSION.to_string(),
        files: emitter.files().clone(),
    };
    fs::write(cfg.output_dir.join("manifest.json"), pretty_json(&manifest))
        .map_err(|e| fs_err("cannot write manifest.json", e))?;

    Ok(PlanOutcome {
        dir: cfg.output_dir.clone(),
        state_path,
        failure: None,
        last_row: report.history.last().copied(),
        pearson_pd_mag,
    })
}

/// Per-sample magnitude table for the final state.
pub fn magnitude_rows(
    batch: &FeatureBatch,
    proxies: &ProxyMatrix,
    s: f64,
) -> Result<Vec<MagnitudeRow>, CliError> {
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let z = batch.feature(i);
        let label = batch.label(i);
        let meta = batch.meta(i);
        rows.push(MagnitudeRow {
            sample_id: i,
            class: label,
            noise_sigma: meta.noise_sigma,
            mislabeled: meta.mislabeled,
            p_d: guidance_value(z, label, proxies, s)?,
            magnitude: z.magnitude(),
            cos_to_proxy: cosine_similarity(z.as_slice(), proxies.row(label).as_slice())?,
        });
    }
    Ok(rows)
}

fn subset(batch: &FeatureBatch, idx: &[usize]) -> Result<FeatureBatch, Error> {
    FeatureBatch::new(
        idx.iter().map(|&i| batch.feature(i).clone()).collect(),
        idx.iter().map(|&i| batch.label(i)).collect(),
        idx.iter().map(|&i| *batch.meta(i)).collect(),
    )
}

/// Splits a batch into a one-exemplar-per-label gallery (first occurrence
/// wins) and the remaining probes.
fn split_gallery(batch: &FeatureBatch) -> Result<(FeatureBatch, FeatureBatch), CliError> {
    let mut seen = BTreeSet::new();
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for i in 0..batch.len() {
        if seen.insert(batch.label(i)) {
            gallery.push(i);
        } else {
            probes.push(i);
        }
    }
    if probes.is_empty() {
        return Err(CliError::Usage(
            "identification needs at least two samples of some label".into(),
        ));
    }
    Ok((subset(batch, &gallery)?, subset(batch, &probes)?))
}

/// Verification, identification, and correlation summaries of the final
/// embedding. Verification scores every unordered sample pair by cosine;
/// identification keys the first exemplar of each label as gallery.
pub fn compute_metrics(
    batch: &FeatureBatch,
    proxies: &ProxyMatrix,
    s: f64,
) -> Result<MetricsJson, CliError> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..batch.len() {
        for j in (i + 1)..batch.len() {
            let score =
                cosine_similarity(batch.feature(i).as_slice(), batch.feature(j).as_slice())?;
            if batch.label(i) == batch.label(j) {
                genuine.push(score);
            } else {
                impostor.push(score);
            }
        }
    }
    let ver = verification_metrics(&genuine, &impostor, &DEFAULT_FAR_GRID)?;

    let classes = batch.labels().iter().collect::<BTreeSet<_>>().len();
    let mut ranks: Vec<usize> = vec![1, 5, classes];
    ranks.sort_unstable();
    ranks.dedup();
    let (gallery, probes) = split_gallery(batch)?;
    let id = identification_metrics(&gallery, &probes, &ranks)?;

    let rows = magnitude_rows(batch, proxies, s)?;
    let pd: Vec<f64> = rows.iter().map(|r| r.p_d).collect();
    let mags: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    let noise: Vec<f64> = rows.iter().map(|r| r.noise_sigma).collect();

    Ok(MetricsJson {
        tar_at_far: ver
            .tar_at_far
            .iter()
            .map(|&(far, tar)| (format!("{far:e}"), tar))
            .collect(),
        auc: ver.auc,
        rank_k: id.into_iter().collect(),
        pearson_pd_mag: pearson(&pd, &mags).ok().map(|c| c.pearson_r),
        pearson_noise_mag: pearson(&noise, &mags).ok().map(|c| c.pearson_r),
    })
}

/// Reads a stored run and regenerates the requested artifacts in place.
/// Only the requested files are touched; the manifest is not rewritten.
pub fn run_analyze(
    run_dir: &Path,
    emit: Option<Vec<EmitKind>>,
) -> Result<Vec<PathBuf>, CliError> {
    let state_path = run_dir.join("state.json");
    if !state_path.exists() {
        return Err(CliError::Missing(format!(
            "{} not found; run the planner first",
            state_path.display()
        )));
    }
    let text = fs::read_to_string(&state_path)
        .map_err(|e| fs_err(&format!("cannot read {}", state_path.display()), e))?;
    let stored: StoredRun = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("corrupt state file: {e}")))?;
    if let Some(failure) = &stored.failure {
        return Err(CliError::Usage(format!(
            "stored run aborted ({failure}); nothing to analyze"
        )));
    }

    let kinds = emit.unwrap_or_else(|| stored.config.emit.clone());
    let resolved = stored.config.resolve()?;
    let data = generate_synthetic(&resolved.data)?;
    let batch = stored.state.embeddings(&data)?;
    let proxies = &stored.state.proxies;
    let s = resolved.train.spec.s;

    let mut written = Vec::new();
    for kind in kinds {
        let contents = match kind {
            EmitKind::History => history_csv(&stored.state.history),
            EmitKind::Magnitudes => magnitudes_csv(&magnitude_rows(&batch, proxies, s)?),
            EmitKind::Projection => {
                projection_csv(&projection_export(&batch, proxies, (0, 1), s)?)
            }
            EmitKind::Metrics => pretty_json(&compute_metrics(&batch, proxies, s)?),
        };
        let path = run_dir.join(kind.file_name());
        fs::write(&path, contents)
            .map_err(|e| fs_err(&format!("cannot write {}", path.display()), e))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the analytic-vs-central-difference suite and renders the report.
/// Returns the CSV text and whether every case stayed under tolerance.
pub fn run_check_grad(
    seed: u64,
    instances: usize,
    perturb: f64,
) -> Result<(String, bool), CliError> {
    let outcomes = gradient_check_suite(seed, instances, perturb)?;
    let mut out = String::from("case,instances,max_rel_error,worst_coordinate,step\n");
    let mut pass = true;
    for o in &outcomes {
        pass &= o.worst.max_rel_error < GRAD_TOL;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            o.name,
            o.instances,
            io::fmt_real(o.worst.max_rel_error),
            o.worst.worst_coordinate,
            io::fmt_real(o.worst.step),
        ));
    }
    Ok((out, pass))
}

fn lookup_mut<'a>(root: &'a mut Value, path: &str) -> Result<&'a mut Value, CliError> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(|| {
                CliError::Usage(format!("config has no field {seg:?} along {path:?}"))
            })?,
            Value::Array(arr) => {
                let idx: usize = seg.parse().map_err(|_| {
                    CliError::Usage(format!("{seg:?} is not an array index in {path:?}"))
                })?;
                arr.get_mut(idx).ok_or_else(|| {
                    CliError::Usage(format!("index {idx} out of range in {path:?}"))
                })?
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "{path:?} descends below a scalar field"
                )))
            }
        };
    }
    Ok(cur)
}

/// Parses `raw` with the same JSON type as the value it replaces.
fn typed_value(current: &Value, raw: &str, param: &str) -> Result<Value, CliError> {
    let parsed = match current {
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number),
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::String(_) => Some(Value::String(raw.to_string())),
        _ => None,
    };
    parsed.ok_or_else(|| {
        CliError::Usage(format!(
            "cannot parse {raw:?} as a value for {param:?} (type must match the field)"
        ))
    })
}

fn sanitize_component(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One planner run per value of a single config field, each in its own
/// subdirectory of the base output dir, plus a summary table.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &str,
    seed_override: Option<u64>,
) -> Result<PathBuf, CliError> {
    let vals: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if vals.is_empty() {
        return Err(CliError::Usage("no sweep values given".into()));
    }
    let tree = serde_json::to_value(base)
        .map_err(|e| CliError::Usage(format!("config does not serialize: {e}")))?;

    // Build and validate every child before running any of them, so a bad
    // path or value is a pure usage error.
    let mut children = Vec::new();
    for v in &vals {
        let mut child_tree = tree.clone();
        let slot = lookup_mut(&mut child_tree, param)?;
        *slot = typed_value(slot, v, param)?;
        let mut child: ExperimentConfig = serde_json::from_value(child_tree)
            .map_err(|e| CliError::Usage(format!("value {v:?} does not fit {param:?}: {e}")))?;
        child.output_dir = base
            .output_dir
            .join(format!("{}_{}", param.replace('.', "_"), sanitize_component(v)));
        child.resolve()?;
        children.push(child);
    }

    let mut out = String::from("param,value,final_mean_pd,final_mean_lsm,final_mean_lreg,pearson_pd_mag\n");
    for (v, child) in vals.iter().zip(&children) {
        let outcome = run_plan(child, seed_override)?;
        if let Some(message) = outcome.failure {
            return Err(CliError::Numeric {
                message: format!("sweep value {v:?}: {message}"),
                state_path: Some(outcome.state_path),
            });
        }
        let last = outcome.last_row.expect("finished run has history");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            param,
            v,
            io::fmt_real(last.mean_pd),
            io::fmt_real(last.mean_lsm),
            io::fmt_real(last.mean_lreg),
            outcome
                .pearson_pd_mag
                .map(io::fmt_real)
                .unwrap_or_else(|| "nan".into()),
        ));
    }

    fs::create_dir_all(&base.output_dir)
        .map_err(|e| fs_err(&format!("cannot create {}", base.output_dir.display()), e))?;
    let summary = base.output_dir.join("summary.csv");
    fs::write(&summary, out).map_err(|e| fs_err("cannot write summary.csv", e))?;
    Ok(summary)
}
