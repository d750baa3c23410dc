use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quest_core::channel::{decode_header, decode_packet, encode_packet, packet_bytes, TRAILER_BYTES};
use quest_core::experiment::{
    csv_text, evaluate_mode, load_checkpoint, result_row, save_checkpoint, sweep_dropout, sweep_threshold,
    test_scenes, train_mode, CheckpointManifest, ExperimentConfig, SweepRow, RESULT_HEADER,
};
use quest_core::pipeline::{detect_both, Mode, ModelBundle};
use quest_core::query::select_by_requirement;
use quest_core::scenario::{generate_scene, scene_to_text};
use quest_core::Error;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config: {0}")]
    Config(Error),
    #[error("training diverged: {0}")]
    Diverged(Error),
    #[error("missing checkpoint {0}; run `quest train` first")]
    MissingCheckpoint(PathBuf),
    #[error("{}: {}", path.display(), named(err))]
    Corrupt { path: PathBuf, err: Error },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::Corrupt { .. } => 5,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DivergedLoss { .. } => CliError::Diverged(e),
            e => CliError::Core(e),
        }
    }
}

/// Error text led by the variant name, which decode errors already carry.
fn named(e: &Error) -> String {
    let text = e.to_string();
    if text.starts_with(e.name()) {
        text
    } else {
        format!("{}: {text}", e.name())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "quest", version, about = "Query-stream cooperative perception experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; keys not given keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for checkpoints and CSV files.
    #[arg(long, short, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(CliError::Config(Error::Parse(format!("{}: no such file", p.display()))));
            }
        }
        ExperimentConfig::load(self.config.as_deref(), &self.overrides).map_err(CliError::Config)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Io(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode (or `all`) and write checkpoints and loss traces.
    Train {
        #[command(flatten)]
        common: Common,
        /// vehicle_only, result_coop, quest_f, quest or all; defaults to train.mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate trained checkpoints on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "vehicle_only,result_coop,quest_f,quest")]
        modes: Vec<String>,
    },
    /// AP and bytes across transmission thresholds.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "quest")]
        mode: String,
        /// Defaults to sweep.thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
    },
    /// AP and bytes across per-query dropout ratios.
    SweepDropout {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "quest")]
        mode: String,
        /// Defaults to sweep.dropouts.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// Write scenes (and optionally infrastructure query packets) to disk.
    GenScenes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the infrastructure query packet of each scene.
        #[arg(long)]
        packets: bool,
        /// Model used to encode packet features; an untrained model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump a query packet and check its framing and crc.
    CodecInspect {
        packet: PathBuf,
        /// Print every record instead of the first ten.
        #[arg(long)]
        all: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode> {
    s.parse().map_err(CliError::Config)
}

fn checkpoint_path(out: &Path, mode: Mode) -> PathBuf {
    out.join(format!("{}.qcp", mode.name()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_model(out: &Path, mode: Mode) -> Result<ModelBundle> {
    let path = checkpoint_path(out, mode);
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path));
    }
    Ok(load_checkpoint(&path)?.0)
}

fn cmd_train(common: &Common, mode: Option<&str>) -> Result<()> {
    let cfg = common.config()?;
    let modes = match mode {
        Some("all") => Mode::ALL.to_vec(),
        Some(m) => vec![parse_mode(m)?],
        None => vec![cfg.train.mode],
    };
    let out = common.out_dir()?;
    for mode in modes {
        let outcome = train_mode(&cfg, mode)?;
        let manifest = CheckpointManifest::describe(&outcome.model, mode, &cfg);
        save_checkpoint(&checkpoint_path(out, mode), &outcome.model, &manifest)?;
        write(&out.join(format!("{}.manifest.toml", mode.name())), manifest.to_toml())?;
        let rows: Vec<Vec<String>> =
            outcome.loss_trace.iter().enumerate().map(|(e, l)| vec![e.to_string(), format!("{l:.6}")]).collect();
        write(&out.join(format!("{}_loss.csv", mode.name())), csv_text(&["epoch", "loss"], &rows, &cfg.hash()))?;
        let last = outcome.loss_trace.last().map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}"));
        println!("{}: {} epochs, final loss {last}, checkpoint {}", mode.name(), outcome.loss_trace.len(), checkpoint_path(out, mode).display());
    }
    Ok(())
}

fn cmd_eval(common: &Common, modes: &[String]) -> Result<()> {
    let cfg = common.config()?;
    let modes = modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>>>()?;
    let out = common.out_dir()?;
    let models = modes.iter().map(|m| load_model(out, *m)).collect::<Result<Vec<_>>>()?;
    let scenes = test_scenes(&cfg)?;
    let mut rows = Vec::new();
    for (mode, model) in modes.iter().zip(&models) {
        let r = evaluate_mode(model, *mode, &scenes, &cfg.frame_config(), &cfg.eval)?;
        rows.push(result_row(*mode, cfg.requirement.min_confidence, &r));
    }
    emit(out, "eval.csv", &csv_text(&RESULT_HEADER, &rows, &cfg.hash()))
}

const SWEEP_HEADER: [&str; 6] = ["ap_bev_0.3", "ap_bev_0.5", "bytes_mean", "queries_mean", "recall", "recall_occluded"];

fn sweep_csv(x_name: &str, rows: &[SweepRow], hash: &str) -> String {
    let mut header = vec![x_name];
    header.extend(SWEEP_HEADER);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let ap = |t: f64| r.result.eval.ap_at(t).map_or_else(String::new, |a| format!("{a:.6}"));
            vec![
                format!("{}", r.x),
                ap(0.3),
                ap(0.5),
                format!("{:.1}", r.result.mean_bytes),
                format!("{:.2}", r.result.mean_queries_sent),
                format!("{:.6}", r.result.eval.recall_total),
                format!("{:.6}", r.result.eval.recall_occluded_from_vehicle),
            ]
        })
        .collect();
    csv_text(&header, &body, hash)
}

fn emit(out: &Path, name: &str, text: &str) -> Result<()> {
    print!("{text}");
    write(&out.join(name), text)
}

fn cmd_sweep(common: &Common, mode: &str, values: &[f64], threshold: bool) -> Result<()> {
    let cfg = common.config()?;
    let mode = parse_mode(mode)?;
    let values = match (values.is_empty(), threshold) {
        (false, _) => values.to_vec(),
        (true, true) => cfg.sweep.thresholds.clone(),
        (true, false) => cfg.sweep.dropouts.clone(),
    };
    // reject out-of-range values as config errors before any work
    let check = ExperimentConfig {
        sweep: if threshold {
            quest_core::experiment::SweepConfig { thresholds: values.clone(), ..cfg.sweep.clone() }
        } else {
            quest_core::experiment::SweepConfig { dropouts: values.clone(), ..cfg.sweep.clone() }
        },
        ..cfg.clone()
    };
    check.validate().map_err(CliError::Config)?;
    let out = common.out_dir()?;
    let model = load_model(out, mode)?;
    let scenes = test_scenes(&cfg)?;
    let (name, rows, x) = if threshold {
        ("sweep_threshold.csv", sweep_threshold(&[(mode, &model)], &scenes, &cfg, &values)?, "threshold")
    } else {
        ("sweep_dropout.csv", sweep_dropout(&[(mode, &model)], &scenes, &cfg, &values)?, "dropout")
    };
    emit(out, name, &sweep_csv(x, &rows, &cfg.hash()))
}

fn cmd_gen_scenes(common: &Common, count: usize, seed: u64, packets: bool, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir()?;
    let model = match checkpoint {
        Some(p) if !p.exists() => return Err(CliError::MissingCheckpoint(p.to_path_buf())),
        Some(p) => load_checkpoint(p)?.0,
        None => quest_core::experiment::init_model(&cfg)?,
    };
    let mut rng = quest_core::nn::Rng::new(seed);
    for i in 0..count {
        let scene = generate_scene(&cfg.sim.scene, rng.next_u64())?;
        write(&out.join(format!("scene_{i:04}.txt")), scene_to_text(&scene))?;
        if packets {
            let (_, inf) = detect_both(&scene, &model, &cfg.sim)?;
            let sel = select_by_requirement(&inf.batch, &cfg.requirement, &scene.veh_pose);
            write(&out.join(format!("scene_{i:04}.qstr")), encode_packet(&sel)?)?;
        }
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn inspect_text(path: &Path, bytes: &[u8], all: bool) -> Result<String> {
    let corrupt = |err: Error| CliError::Corrupt { path: path.to_path_buf(), err };
    let header = decode_header(bytes).map_err(corrupt)?;
    let batch = decode_packet(bytes).map_err(corrupt)?;
    let mut s = String::new();
    let _ = writeln!(s, "file        {}", path.display());
    let _ = writeln!(s, "bytes       {} (expected {})", bytes.len(), packet_bytes(header.query_count as usize, header.feature_dim as usize));
    let _ = writeln!(s, "agent       {}", header.agent_id);
    let _ = writeln!(s, "frame       {}", header.frame_id);
    let t = header.pose.translation;
    let _ = writeln!(s, "pose        yaw {:.4} rad, translation [{:.3}, {:.3}, {:.3}]", header.pose.yaw(), t[0], t[1], t[2]);
    let _ = writeln!(s, "queries     {}", header.query_count);
    let _ = writeln!(s, "feature_dim {}", header.feature_dim);
    let shown = if all { batch.queries.len() } else { batch.queries.len().min(10) };
    for q in &batch.queries[..shown] {
        let norm = q.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = writeln!(
            s,
            "  #{:<4} class {} conf {:.4} ref [{:.2}, {:.2}, {:.2}] |f| {:.3}",
            q.query_id, q.class_id, q.confidence, q.ref_point[0], q.ref_point[1], q.ref_point[2], norm
        );
    }
    if shown < batch.queries.len() {
        let _ = writeln!(s, "  ... {} more", batch.queries.len() - shown);
    }
    let crc = u32::from_le_bytes(bytes[bytes.len() - TRAILER_BYTES..].try_into().expect("trailer length"));
    let _ = writeln!(s, "crc         {crc:#010x} OK");
    Ok(s)
}

fn cmd_codec_inspect(path: &Path, all: bool) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    print!("{}", inspect_text(path, &bytes, all)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, mode } => cmd_train(common, mode.as_deref()),
        Command::Eval { common, modes } => cmd_eval(common, modes),
        Command::SweepThreshold { common, mode, thresholds } => cmd_sweep(common, mode, thresholds, true),
        Command::SweepDropout { common, mode, ratios } => cmd_sweep(common, mode, ratios, false),
        Command::GenScenes { common, count, seed, packets, checkpoint } => {
            cmd_gen_scenes(common, *count, *seed, *packets, checkpoint.as_deref())
        }
        Command::CodecInspect { packet, all } => cmd_codec_inspect(packet, *all),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use quest_core::experiment::checkpoint_bytes;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(Error::Parse("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::DivergedLoss { epoch: 0, value: f64::NAN }).exit_code(), 3);
        assert_eq!(CliError::MissingCheckpoint("a".into()).exit_code(), 4);
        let e = CliError::Corrupt { path: "p".into(), err: Error::CrcMismatch { stored: 1, computed: 2 } };
        assert_eq!(e.exit_code(), 5);
        assert!(e.to_string().starts_with("p: CrcMismatch"));
    }

    #[test]
    fn checkpoint_bytes_are_reproducible() {
        let cfg = ExperimentConfig::from_layers(None, &["train.epochs=1".into(), "train.scenes_per_epoch=2".into()]).unwrap();
        let a = train_mode(&cfg, Mode::Quest).unwrap().model;
        let b = train_mode(&cfg, Mode::Quest).unwrap().model;
        let m = CheckpointManifest::describe(&a, Mode::Quest, &cfg);
        assert_eq!(checkpoint_bytes(&a, &m), checkpoint_bytes(&b, &m));
    }
}
