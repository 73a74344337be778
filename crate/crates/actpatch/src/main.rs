// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actpatch::config::ExperimentConfig;
use actpatch::error::{RunError, RunResult};
use actpatch::{io, report, runner};
use actpatch_core::{ModelConfig, Weights};
use clap::{Parser, Subcommand};

/// Activation patching experiments on GPT-2 style models.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config, load the model and build the prompt pairs without sweeping.
    Validate { config: PathBuf },
    /// Re-render heatmaps from an effects CSV (written next to it).
    Render {
        effects: PathBuf,
        /// Output directory (defaults to the CSV's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a random toy model (config.json + model.safetensors).
    InitToy {
        dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 50257)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        attn_only: bool,
    },
}

fn run(config: &Path) -> RunResult<()> {
    let out = runner::run(config)?;
    let m = &out.manifest;
    println!(
        "{} prompts, {} targets, {:.1}s",
        m.prompts.used, m.targets, m.wall_clock_seconds
    );
    for d in &out.detections {
        println!(
            "{}: mean {:.4} sd {:.4} positive [{}] negative [{}]",
            d.metric.as_str(),
            d.mean,
            d.sd,
            d.positive_labels().join(", "),
            d.negative_labels().join(", ")
        );
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn validate(path: &Path) -> RunResult<()> {
    let config = ExperimentConfig::load(path)?;
    let prepared = runner::prepare(&config)?;
    let c = prepared.model.config();
    println!(
        "ok: {} layers × {} heads, {} {} pairs ({} generated, {} rejected, {} filtered), noise scale {:.6}",
        c.n_layers,
        c.n_heads,
        prepared.pairs.len(),
        config.task.name(),
        prepared.generated,
        prepared.rejected.len(),
        prepared.filtered_out,
        prepared.noise_scale
    );
    Ok(())
}

fn render(effects: &Path, out: Option<&Path>) -> RunResult<()> {
    let text = io::read_text(effects)?;
    let matrix = report::parse_effects_csv(&text).map_err(|e| RunError::format(effects, e))?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| effects.parent().unwrap_or(Path::new(".")).to_path_buf());
    let stem = effects
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut files = Vec::new();
    for &m in &matrix.metrics {
        let svg = report::heatmap_svg(&matrix, m, &format!("{stem} / {}", m.as_str()))
            .map_err(RunError::Config)?;
        files.push((runner::heatmap_file(m), svg.into_bytes()));
    }
    for f in runner::write_atomically(&dir, &files)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn init_toy(dir: &Path, config: ModelConfig, seed: u64) -> RunResult<()> {
    config
        .validate()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let weights = Weights::random(&config, seed);
    let files = vec![
        (
            "config.json".to_string(),
            serde_json::to_vec_pretty(&config).expect("config serializes"),
        ),
        (
            "model.safetensors".to_string(),
            io::weights_to_bytes(&config, &weights),
        ),
    ];
    for f in runner::write_atomically(dir, &files)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::Validate { config } => validate(config),
        Command::Render { effects, out } => render(effects, out.as_deref()),
        Command::InitToy {
            dir,
            layers,
            heads,
            d_model,
            vocab_size,
            seed,
            attn_only,
        } => {
            let mut config = ModelConfig::toy(*layers, *heads, *d_model, *vocab_size);
            config.attn_only = *attn_only;
            init_toy(dir, config, *seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
