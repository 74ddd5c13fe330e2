//! TOML run configuration shared by the command-line subcommands.
//!
//! ```toml
//! [model]
//! preset = "7b"            # or spell out every field below
//! seq_len = 32768
//! global_batch_tokens = 4194304
//!
//! [cluster]
//! total_gpus = 64
//! gpus_per_node = 8
//! gpu_memory_capacity_bytes = 80000000000
//!
//! [compute]                # optional
//! peak_flops = 312e12
//! efficiency = 0.5
//! layer_times = "layer_times.csv"
//!
//! [overlap]                # optional
//! slowdown_ratio = 1.3
//!
//! [paths]                  # optional; a synthetic A100 profile otherwise
//! bandwidth_profile = "profile.csv"
//!
//! [search]                 # optional
//! top_k = 10
//! memory_slack = 1.0
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::cluster::{BandwidthProfile, ClusterConfig};
use crate::cost::{ComputeModel, EstimatorSettings, LayerTimeTable, OssVariant, OverlapModel};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::search::SearchOptions;
use crate::strategy::SearchBounds;

pub const DEFAULT_PRESET_SEQ_LEN: u64 = 4096;
pub const DEFAULT_PRESET_GLOBAL_BATCH: u64 = 4 * 1024 * 1024;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<RawModel>,
    cluster: RawCluster,
    compute: Option<RawCompute>,
    overlap: Option<RawOverlap>,
    paths: Option<RawPaths>,
    search: Option<RawSearch>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    hidden_dim: Option<u64>,
    layers: Option<u64>,
    heads: Option<u64>,
    vocab: Option<u64>,
    seq_len: Option<u64>,
    global_batch_tokens: Option<u64>,
    bytes_per_element: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    total_gpus: Option<u64>,
    gpus_per_node: Option<u64>,
    gpu_memory_capacity_bytes: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompute {
    peak_flops: Option<f64>,
    efficiency: Option<f64>,
    layer_times: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverlap {
    slowdown_ratio: Option<f64>,
    update_bandwidth: Option<f64>,
    oss_variant: Option<OssVariant>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    bandwidth_profile: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSearch {
    top_k: Option<usize>,
    memory_slack: Option<f64>,
    max_pp: Option<u64>,
    max_sp: Option<u64>,
    max_micro_batch: Option<u64>,
    max_ps: Option<u64>,
    max_oss: Option<u64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seq_len: Option<u64>,
    pub global_batch: Option<u64>,
    pub bandwidth_profile: Option<PathBuf>,
    pub top_k: Option<usize>,
    pub memory_slack: Option<f64>,
    pub slowdown_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub compute: ComputeModel,
    pub settings: EstimatorSettings,
    pub profile: BandwidthProfile,
    /// `None` when the synthetic profile is in use.
    pub profile_path: Option<PathBuf>,
    pub search: SearchOptions,
}

pub fn load_config(path: impl AsRef<Path>, overrides: &Overrides) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, path, base, overrides)
}

/// Parses and validates `text`; `origin` names the source in errors and
/// `base` anchors relative paths.
pub fn parse_config(text: &str, origin: &Path, base: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), message };
    if text.trim().is_empty() {
        return Err(parse_err("configuration is empty".into()));
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let mut errors = Vec::new();

    let model = resolve_model(raw.model.unwrap_or_default(), overrides, &mut errors);
    let cluster = resolve_cluster(raw.cluster, &mut errors);

    let rc = raw.compute.unwrap_or_default();
    let a100 = ComputeModel::a100();
    let mut compute = ComputeModel {
        peak_flops: rc.peak_flops.unwrap_or(a100.peak_flops),
        efficiency: rc.efficiency.unwrap_or(a100.efficiency),
        profile: None,
    };
    if let Err(e) = compute.validate() {
        errors.push(e.to_string());
    }
    if let Some(p) = rc.layer_times {
        match LayerTimeTable::load_csv(base.join(&p)) {
            Ok(t) => compute.profile = Some(t),
            Err(e) => errors.push(format!("compute.layer_times {}: {e}", p.display())),
        }
    }

    let ro = raw.overlap.unwrap_or_default();
    let mut settings = EstimatorSettings::default();
    match OverlapModel::new(overrides.slowdown_ratio.or(ro.slowdown_ratio).unwrap_or(settings.overlap.slowdown_ratio)) {
        Ok(o) => settings.overlap = o,
        Err(_) => errors.push("overlap.slowdown_ratio must be >= 1".into()),
    }
    if let Some(w) = ro.update_bandwidth {
        if w.is_finite() && w > 0.0 {
            settings.update_bandwidth = w;
        } else {
            errors.push("overlap.update_bandwidth must be positive".into());
        }
    }
    if let Some(v) = ro.oss_variant {
        settings.oss_variant = v;
    }

    let profile_path = overrides
        .bandwidth_profile
        .clone()
        .or_else(|| raw.paths.and_then(|p| p.bandwidth_profile.map(|p| base.join(p))));
    let profile = match &profile_path {
        Some(p) => BandwidthProfile::load_csv(p).unwrap_or_else(|e| {
            errors.push(format!("paths.bandwidth_profile {}: {e}", p.display()));
            BandwidthProfile::default()
        }),
        None => BandwidthProfile::synthetic_a100(),
    };

    let rs = raw.search.unwrap_or_default();
    let mut search = SearchOptions {
        bounds: SearchBounds {
            max_pp: rs.max_pp,
            max_sp: rs.max_sp,
            max_micro_batch: rs.max_micro_batch,
            max_ps: rs.max_ps,
            max_oss: rs.max_oss,
        },
        settings,
        ..SearchOptions::default()
    };
    if let Some(k) = overrides.top_k.or(rs.top_k) {
        if k == 0 {
            errors.push("search.top_k must be at least 1".into());
        }
        search.top_k = k;
    }
    if let Some(slack) = overrides.memory_slack.or(rs.memory_slack) {
        if !(slack.is_finite() && slack > 0.0) {
            errors.push("search.memory_slack must be positive".into());
        }
        search.memory_slack = slack;
    }

    match (model, cluster) {
        (Some(model), Some(cluster)) if errors.is_empty() => Ok(RunConfig {
            model,
            cluster,
            compute,
            settings,
            profile,
            profile_path,
            search,
        }),
        _ => Err(Error::Validation(errors)),
    }
}

fn resolve_model(raw: RawModel, overrides: &Overrides, errors: &mut Vec<String>) -> Option<ModelConfig> {
    let preset = match (overrides.preset, &raw.preset) {
        (Some(p), _) => Some(p),
        (None, Some(name)) => match name.parse::<Preset>() {
            Ok(p) => Some(p),
            Err(e) => {
                errors.push(format!("model.preset: {e}"));
                return None;
            }
        },
        (None, None) => None,
    };
    let base = preset.map(|p| p.config(DEFAULT_PRESET_SEQ_LEN, DEFAULT_PRESET_GLOBAL_BATCH));
    let before = errors.len();
    let mut field = |name: &str, value: Option<u64>, fallback: Option<u64>| {
        value.or(fallback).unwrap_or_else(|| {
            errors.push(format!("model.{name} is required"));
            0
        })
    };
    let model = ModelConfig {
        hidden_dim: field("hidden_dim", raw.hidden_dim, base.map(|b| b.hidden_dim)),
        layers: field("layers", raw.layers, base.map(|b| b.layers)),
        heads: field("heads", raw.heads, base.map(|b| b.heads)),
        vocab: field("vocab", raw.vocab, base.map(|b| b.vocab)),
        seq_len: field("seq_len", overrides.seq_len.or(raw.seq_len), base.map(|b| b.seq_len)),
        global_batch: field(
            "global_batch_tokens",
            overrides.global_batch.or(raw.global_batch_tokens),
            base.map(|b| b.global_batch),
        ),
        bytes_per_element: raw.bytes_per_element.unwrap_or(2),
    };
    if errors.len() > before {
        return None;
    }
    match model.validate() {
        Ok(()) => Some(model),
        Err(Error::InvalidModel(es)) => {
            errors.extend(es.into_iter().map(|e| format!("model.{e}")));
            None
        }
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    }
}

fn resolve_cluster(raw: RawCluster, errors: &mut Vec<String>) -> Option<ClusterConfig> {
    let mut missing = false;
    let mut field = |name: &str, v: Option<u64>| {
        v.unwrap_or_else(|| {
            errors.push(format!("cluster.{name} is required"));
            missing = true;
            0
        })
    };
    let cluster = ClusterConfig::new(
        field("total_gpus", raw.total_gpus),
        field("gpus_per_node", raw.gpus_per_node),
        field("gpu_memory_capacity_bytes", raw.gpu_memory_capacity_bytes),
    );
    if missing {
        return None;
    }
    match cluster.validate() {
        Ok(()) => Some(cluster),
        Err(Error::InvalidCluster(es)) => {
            errors.extend(es.into_iter().map(|e| format!("cluster.{e}")));
            None
        }
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CLUSTER: &str = "[cluster]\ntotal_gpus = 8\ngpus_per_node = 8\ngpu_memory_capacity_bytes = 80000000000\n";

    fn parse(text: &str, o: &Overrides) -> Result<RunConfig> {
        parse_config(text, Path::new("test.toml"), Path::new("."), o)
    }

    #[test]
    fn preset_flag_with_minimal_cluster() {
        let o = Overrides { preset: Some(Preset::B7), ..Overrides::default() };
        let c = parse(CLUSTER, &o).unwrap();
        assert_eq!(
            (c.model.hidden_dim, c.model.layers, c.model.heads, c.model.vocab),
            (4096, 32, 32, 100_000)
        );
        assert_eq!(c.search.top_k, 10);
        assert!(c.profile_path.is_none());
    }

    #[test]
    fn empty_is_parse_error() {
        assert!(matches!(parse("", &Overrides::default()), Err(Error::Parse { .. })));
        assert!(matches!(parse("  \n", &Overrides::default()), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{CLUSTER}[model]\npreset = \"7b\"\nhiden_dim = 3\n");
        let err = parse(&text, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("hiden_dim"), "{err}");
    }

    #[test]
    fn all_failures_reported_together() {
        let text = "[model]\npreset = \"7b\"\nhidden_dim = 0\n[cluster]\ntotal_gpus = 12\ngpus_per_node = 8\n\
                    gpu_memory_capacity_bytes = 1\n[overlap]\nslowdown_ratio = 0.5\n";
        let Err(Error::Validation(errs)) = parse(text, &Overrides::default()) else {
            panic!("expected validation error")
        };
        let all = errs.join("\n");
        assert!(all.contains("hidden_dim"), "{all}");
        assert!(all.contains("total_gpus"), "{all}");
        assert!(all.contains("slowdown_ratio"), "{all}");
    }

    #[test]
    fn flags_win() {
        let text = format!("{CLUSTER}[model]\npreset = \"13b\"\nseq_len = 1024\n[search]\ntop_k = 3\n");
        let o = Overrides { seq_len: Some(2048), top_k: Some(5), ..Overrides::default() };
        let c = parse(&text, &o).unwrap();
        assert_eq!(c.model.seq_len, 2048);
        assert_eq!(c.model.hidden_dim, 5120);
        assert_eq!(c.search.top_k, 5);
    }

    #[test]
    fn missing_profile_file_is_validation_error() {
        let text = format!("{CLUSTER}[model]\npreset = \"7b\"\n[paths]\nbandwidth_profile = \"/nonexistent.csv\"\n");
        assert!(matches!(parse(&text, &Overrides::default()), Err(Error::Validation(_))));
    }
}
