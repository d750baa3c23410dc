//! Experiment plumbing: layered TOML configuration, held-out evaluation of
//! each mode, bandwidth sweeps, CSV output and model checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult, Prediction};
use crate::interaction::InteractionConfig;
use crate::nn::{Activation, Rng};
use crate::pipeline::{
    run_frame, train, visibility_info, FrameConfig, Mode, ModelBundle, ModelConfig, SimConfig, TrainConfig, TrainOutcome,
    BUNDLE_NETS,
};
use crate::query::Requirement;
use crate::scenario::{generate_scene, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub test_scenes: usize,
    /// Seed of the held-out scene set; kept apart from training seeds.
    pub test_seed: u64,
    pub iou_thresholds: Vec<f64>,
    /// Worker threads for evaluation; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { test_scenes: 100, test_seed: 0x7E57, iou_thresholds: vec![0.3, 0.5], threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            dropouts: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub interaction: InteractionConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub requirement: Requirement,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            interaction: InteractionConfig::default(),
            train: TrainConfig::default(),
            channel: ChannelConfig::default(),
            requirement: Requirement::threshold(0.3),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of a `--set` override: any TOML value, or a
/// bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::Parse(format!("{path}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::Parse(format!("unknown config key {path}")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(|| Error::Parse(format!("unknown config key {path}")))?;
    }
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, overlaid with `text` (may be partial), then with
    /// `key.path=value` overrides.
    pub fn from_layers(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(ExperimentConfig::default()).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(text) = text {
            let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
            merge(&mut root, toml::Value::Table(file));
        }
        for o in overrides {
            let (key, value) =
                o.split_once('=').ok_or_else(|| Error::Parse(format!("override {o:?} is not key=value")))?;
            let value = parse_override_value(value.trim());
            // region_mask is optional and absent from the defaults
            if key.trim() == "requirement.region_mask" {
                root.as_table_mut().and_then(|t| t.get_mut("requirement")).and_then(|r| r.as_table_mut()).map(|r| {
                    r.insert("region_mask".into(), value.clone())
                });
                continue;
            }
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::from_layers(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.interaction.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        self.requirement.validate()?;
        if self.eval.iou_thresholds.is_empty() || self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Invalid("iou thresholds must lie in (0, 1]".into()));
        }
        for t in &self.sweep.thresholds {
            Requirement::threshold(*t).validate()?;
        }
        for p in &self.sweep.dropouts {
            ChannelConfig { dropout_ratio: *p, seed: 0 }.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig { sim: self.sim.clone(), interaction: self.interaction, channel: self.channel, requirement: self.requirement }
    }
}

pub fn test_scenes(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    let mut rng = Rng::new(cfg.eval.test_seed ^ 0x7465_7374_0000_0000);
    (0..cfg.eval.test_scenes).map(|_| generate_scene(&cfg.sim.scene, rng.next_u64())).collect()
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<ModelBundle> {
    ModelBundle::init(&cfg.model, &cfg.interaction, cfg.train.seed)
}

/// Trains a fresh model for `mode` from the configured seed.
pub fn train_mode(cfg: &ExperimentConfig, mode: Mode) -> Result<TrainOutcome> {
    let tcfg = TrainConfig { mode, ..cfg.train.clone() };
    train(init_model(cfg)?, &cfg.sim, &cfg.interaction, &tcfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeResult {
    pub mode: Mode,
    pub eval: EvalResult,
    /// Mean bytes per frame put on the link.
    pub mean_bytes: f64,
    pub mean_queries_sent: f64,
    pub predictions: Vec<Vec<Prediction>>,
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { auto } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Maps `f` over `items` on scoped threads; results come back in input
/// order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = worker_count(threads, items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    })
}

pub fn evaluate_mode(
    model: &ModelBundle,
    mode: Mode,
    scenes: &[Scene],
    frame: &FrameConfig,
    eval_cfg: &EvalConfig,
) -> Result<ModeResult> {
    let outputs = parallel_map(scenes, eval_cfg.threads, |s| run_frame(s, model, mode, frame));
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let vis: Vec<_> = scenes.iter().map(|s| visibility_info(s, &frame.sim)).collect();
    let n = scenes.len().max(1) as f64;
    let mean_bytes = outputs.iter().map(|o| o.report.bytes_sent as f64).sum::<f64>() / n;
    let mean_queries_sent = outputs.iter().map(|o| o.report.queries_sent as f64).sum::<f64>() / n;
    let predictions: Vec<Vec<Prediction>> = outputs.into_iter().map(|o| o.predictions).collect();
    let eval = evaluate(&predictions, scenes, &eval_cfg.iou_thresholds, &vis, &frame.sim.range)?;
    Ok(ModeResult { mode, eval, mean_bytes, mean_queries_sent, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: Mode,
    /// Threshold or dropout ratio.
    pub x: f64,
    pub result: ModeResult,
}

pub fn sweep_threshold(
    models: &[(Mode, &ModelBundle)],
    scenes: &[Scene],
    cfg: &ExperimentConfig,
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(mode, model) in models {
        for &t in thresholds {
            let frame = FrameConfig { requirement: Requirement { min_confidence: t, ..cfg.requirement }, ..cfg.frame_config() };
            rows.push(SweepRow { mode, x: t, result: evaluate_mode(model, mode, scenes, &frame, &cfg.eval)? });
        }
    }
    Ok(rows)
}

pub fn sweep_dropout(
    models: &[(Mode, &ModelBundle)],
    scenes: &[Scene],
    cfg: &ExperimentConfig,
    dropouts: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(mode, model) in models {
        for &p in dropouts {
            let frame = FrameConfig { channel: ChannelConfig { dropout_ratio: p, ..cfg.channel }, ..cfg.frame_config() };
            rows.push(SweepRow { mode, x: p, result: evaluate_mode(model, mode, scenes, &frame, &cfg.eval)? });
        }
    }
    Ok(rows)
}

/// CSV text with a header row and a trailing comment recording the config
/// hash and crate version.
pub fn csv_text(header: &[&str], rows: &[Vec<String>], config_hash: &str) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    let _ = writeln!(out, "# config_hash={config_hash} version={}", env!("CARGO_PKG_VERSION"));
    out
}

pub const RESULT_HEADER: [&str; 9] =
    ["mode", "x", "ap_bev_0.3", "ap_bev_0.5", "recall", "recall_occluded", "mean_bytes", "mean_queries_sent", "num_gt"];

pub fn result_row(mode: Mode, x: f64, r: &ModeResult) -> Vec<String> {
    let ap = |t: f64| r.eval.ap_at(t).map_or_else(String::new, |a| format!("{a:.6}"));
    vec![
        mode.name().to_string(),
        format!("{x}"),
        ap(0.3),
        ap(0.5),
        format!("{:.6}", r.eval.recall_total),
        format!("{:.6}", r.eval.recall_occluded_from_vehicle),
        format!("{:.1}", r.mean_bytes),
        format!("{:.2}", r.mean_queries_sent),
        r.eval.num_gt.to_string(),
    ]
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"QCKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetManifest {
    pub name: String,
    pub dims: Vec<usize>,
    pub activations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub mode: Mode,
    pub config_hash: String,
    pub model: ModelConfig,
    pub interaction: InteractionConfig,
    pub nets: Vec<NetManifest>,
}

impl CheckpointManifest {
    pub fn describe(model: &ModelBundle, mode: Mode, cfg: &ExperimentConfig) -> Self {
        let nets = BUNDLE_NETS
            .iter()
            .zip(model.nets())
            .map(|(name, n)| NetManifest {
                name: name.to_string(),
                dims: n.dims(),
                activations: n.activations().iter().map(|a| a.tag().to_string()).collect(),
            })
            .collect();
        CheckpointManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode,
            config_hash: cfg.hash(),
            model: cfg.model,
            interaction: cfg.interaction,
            nets,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// `QCKP`, u32 LE manifest length, TOML manifest, then the parameter body.
pub fn checkpoint_bytes(model: &ModelBundle, manifest: &CheckpointManifest) -> Vec<u8> {
    let text = manifest.to_toml();
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&model.to_qcp());
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelBundle, CheckpointManifest)> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedPacket { needed: 8, available: bytes.len() });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: *CHECKPOINT_MAGIC, found: bytes[..4].try_into().unwrap() });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_at = 8 + len;
    if bytes.len() < body_at {
        return Err(Error::TruncatedPacket { needed: body_at, available: bytes.len() });
    }
    let text = std::str::from_utf8(&bytes[8..body_at]).map_err(|e| Error::Parse(e.to_string()))?;
    let manifest: CheckpointManifest = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut model = ModelBundle::init(&manifest.model, &manifest.interaction, 0)?;
    for (net, m) in model.nets().iter().zip(&manifest.nets) {
        let acts: Vec<String> = net.activations().iter().map(|a| a.tag().to_string()).collect();
        if net.dims() != m.dims || acts != m.activations {
            return Err(Error::Parse(format!("checkpoint net {} does not match its manifest", m.name)));
        }
        if m.activations.iter().any(|a| Activation::from_tag(a).is_none()) {
            return Err(Error::Parse(format!("unknown activation in {}", m.name)));
        }
    }
    model.load_qcp(&bytes[body_at..])?;
    Ok((model, manifest))
}

pub fn save_checkpoint(path: &Path, model: &ModelBundle, manifest: &CheckpointManifest) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, manifest)).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}
