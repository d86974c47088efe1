//! Command-line surface: train, eval, infer, dump-embeddings,
//! visualize, and a synthetic-dataset generator. On failure the binary
//! exits nonzero and prints `{"error": {"kind", "message"}}` on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array3};

use crate::archive::NamedArchive;
use crate::backbone::Backbone;
use crate::config::{load_config, RunConfig};
use crate::data::{export_index, index_dataset, synth_blobs, DatasetIndex, DatasetLayout};
use crate::error::{GlocalError, Result};
use crate::prompt::{load_checkpoint, PromptBank};
use crate::text::encode_all;
use crate::train::{embeddings_to_json, evaluate, infer_image, train, EvaluatedSample};
use crate::viz::{save_composite_png, save_heatmap_png};

#[derive(Parser)]
#[command(
    name = "glocal",
    version,
    about = "Prompt-learned anomaly detection and localization over frozen dual-encoder backbones"
)]
pub struct Cli {
    /// Backbone provider: `toy` or `archive:PATH`.
    #[arg(long, global = true, default_value = "toy")]
    backbone: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    /// `<class>/test/<defect>/*` with `<class>/ground_truth/` masks.
    Mvtec,
    /// `index.jsonl` with one `{image, mask, label, class}` per line.
    FlatJsonl,
}

impl From<LayoutArg> for DatasetLayout {
    fn from(value: LayoutArg) -> Self {
        match value {
            LayoutArg::Mvtec => DatasetLayout::MvTec,
            LayoutArg::FlatJsonl => DatasetLayout::FlatJsonl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the prompt bank on a dataset and write checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LayoutArg::Mvtec)]
        layout: LayoutArg,
        /// Output directory for checkpoints and the loss history.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write a report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LayoutArg::Mvtec)]
        layout: LayoutArg,
        /// Trained prompt checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Report directory (JSON, table, per-sample archive).
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a single image and write its heatmaps.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the four prompt embeddings as labeled JSON vectors.
    DumpEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of per-epoch checkpoints to dump as snapshots.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Render heatmap and composite PNGs from an eval report.
    Visualize {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize a synthetic blob-defect dataset on disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        normal: usize,
        #[arg(long, default_value_t = 64)]
        anomalous: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel size as HxW, e.g. 32x32.
        #[arg(long, default_value = "32x32")]
        resolution: String,
    },
}

fn load_backbone(spec: &str) -> Result<Backbone> {
    if spec == "toy" {
        return Ok(Backbone::toy());
    }
    if let Some(path) = spec.strip_prefix("archive:") {
        return Backbone::load(Path::new(path));
    }
    Err(GlocalError::InvalidConfig {
        constraint: "backbone is `toy` or `archive:PATH`".to_string(),
        detail: spec.to_string(),
    })
}

fn parse_resolution(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split('x').collect();
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| GlocalError::InvalidConfig {
            constraint: "resolution is HxW".to_string(),
            detail: text.to_string(),
        })
    };
    match parts.as_slice() {
        [h, w] => Ok((parse(h)?, parse(w)?)),
        _ => Err(GlocalError::InvalidConfig {
            constraint: "resolution is HxW".to_string(),
            detail: text.to_string(),
        }),
    }
}

/// The prompt shapes a checkpoint was trained with must match the
/// config it is used under.
fn check_prompt_shapes(cfg: &RunConfig, ckpt_cfg: &RunConfig) -> Result<()> {
    let same = cfg.normal_prompt_len == ckpt_cfg.normal_prompt_len
        && cfg.anomaly_prompt_len == ckpt_cfg.anomaly_prompt_len
        && cfg.deep_prompt_len == ckpt_cfg.deep_prompt_len
        && cfg.deep_prompt_depth == ckpt_cfg.deep_prompt_depth;
    if same {
        Ok(())
    } else {
        Err(GlocalError::InvalidConfig {
            constraint: "prompt shapes match the checkpoint".to_string(),
            detail: format!(
                "config ({}, {}, {}, {}) vs checkpoint ({}, {}, {}, {})",
                cfg.normal_prompt_len,
                cfg.anomaly_prompt_len,
                cfg.deep_prompt_len,
                cfg.deep_prompt_depth,
                ckpt_cfg.normal_prompt_len,
                ckpt_cfg.anomaly_prompt_len,
                ckpt_cfg.deep_prompt_len,
                ckpt_cfg.deep_prompt_depth
            ),
        })
    }
}

const SAMPLES_ARCHIVE: &str = "samples.gar";

fn write_report(report_dir: &Path, samples: &[EvaluatedSample], report_json: String, table: String) -> Result<()> {
    fs::create_dir_all(report_dir)?;
    fs::write(report_dir.join("report.json"), report_json)?;
    fs::write(report_dir.join("report.txt"), table)?;

    let mut archive = NamedArchive::new();
    let mut manifest = Vec::new();
    for sample in samples {
        manifest.push(serde_json::json!({
            "stem": sample.stem,
            "class": sample.class,
            "label": sample.label,
            "score": sample.scored.score,
            "p_anomaly": sample.scored.p_anomaly,
        }));
        let key = |part: &str| format!("sample.{}.{part}", sample.stem);
        archive.insert(&key("map"), sample.scored.map.fused.clone());
        archive.insert(&key("mask"), sample.mask.clone());
        archive.insert(&key("input"), sample.raw.clone());
    }
    archive.set_meta(serde_json::json!({ "samples": manifest }));
    archive.save(&report_dir.join(SAMPLES_ARCHIVE))
}

fn run_visualize(report_dir: &Path, out_dir: &Path) -> Result<()> {
    let archive = NamedArchive::load(&report_dir.join(SAMPLES_ARCHIVE))?;
    let manifest = archive.meta()["samples"]
        .as_array()
        .cloned()
        .ok_or_else(|| GlocalError::ArchiveFormat {
            path: report_dir.join(SAMPLES_ARCHIVE),
            detail: "missing samples manifest".to_string(),
        })?;
    fs::create_dir_all(out_dir)?;
    for item in manifest {
        let stem = item["stem"].as_str().unwrap_or("sample");
        let key = |part: &str| format!("sample.{stem}.{part}");
        let map = to_2d(archive.require(&key("map"))?)?;
        let mask = to_2d(archive.require(&key("mask"))?)?;
        let input = to_3d(archive.require(&key("input"))?)?;
        save_heatmap_png(&map, &out_dir.join(format!("{stem}_heatmap.png")))?;
        save_composite_png(
            &input,
            &map,
            Some(&mask),
            &out_dir.join(format!("{stem}_composite.png")),
        )?;
    }
    Ok(())
}

fn to_2d(array: &ndarray::ArrayD<f64>) -> Result<Array2<f64>> {
    array
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| GlocalError::Other("expected a 2-d array".to_string()))
}

fn to_3d(array: &ndarray::ArrayD<f64>) -> Result<Array3<f64>> {
    array
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| GlocalError::Other("expected a 3-d array".to_string()))
}

fn load_for_inference(
    backbone_spec: &str,
    config: &Path,
    ckpt: &Path,
) -> Result<(Backbone, RunConfig, PromptBank)> {
    let backbone = load_backbone(backbone_spec)?;
    let cfg = load_config(config)?;
    let (bank, ckpt_cfg) = load_checkpoint(ckpt)?;
    check_prompt_shapes(&cfg, &ckpt_cfg)?;
    Ok((backbone, cfg, bank))
}

fn dump_embeddings(
    backbone: &Backbone,
    ckpt: &Path,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    let snapshot = |path: &Path| -> Result<serde_json::Value> {
        let (bank, cfg) = load_checkpoint(path)?;
        let emb = encode_all(&backbone.text, &bank, &cfg)?;
        Ok(embeddings_to_json(&emb))
    };
    let payload = match history {
        None => snapshot(ckpt)?,
        Some(dir) => {
            let mut checkpoints: Vec<PathBuf> = fs::read_dir(dir)?
                .map(|e| Ok(e?.path()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.extension().map(|e| e == "gar").unwrap_or(false))
                .collect();
            checkpoints.sort();
            let mut snapshots = Vec::new();
            for path in checkpoints {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("checkpoint")
                    .to_string();
                snapshots.push(serde_json::json!({
                    "checkpoint": name,
                    "embeddings": snapshot(&path)?,
                }));
            }
            serde_json::Value::Array(snapshots)
        }
    };
    fs::write(out, serde_json::to_string_pretty(&payload)?)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            layout,
            out,
        } => {
            let backbone = load_backbone(&cli.backbone)?;
            let cfg = load_config(&config)?;
            let index = index_dataset(&data, layout.into())?;
            let result = train(&cfg, &backbone, &index, &out)?;
            let last = result.history.epochs.last();
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": result.checkpoint,
                    "epochs": result.history.epochs.len(),
                    "final_total_loss": last.map(|r| r.total),
                })
            );
            Ok(())
        }
        Command::Eval {
            config,
            data,
            layout,
            ckpt,
            report,
        } => {
            let (backbone, cfg, bank) = load_for_inference(&cli.backbone, &config, &ckpt)?;
            let index = index_dataset(&data, layout.into())?;
            let (eval_report, samples) = evaluate(&cfg, &backbone, &bank, &index)?;
            let json = serde_json::to_string_pretty(&eval_report)?;
            let table = eval_report.render_table();
            write_report(&report, &samples, json, table.clone())?;
            print!("{table}");
            Ok(())
        }
        Command::Infer {
            config,
            ckpt,
            image,
            out,
        } => {
            let (backbone, cfg, bank) = load_for_inference(&cli.backbone, &config, &ckpt)?;
            let result = infer_image(&cfg, &backbone, &bank, &image)?;
            fs::create_dir_all(&out)?;
            save_heatmap_png(
                &result.scored.map.fused,
                &out.join(format!("{}_heatmap.png", result.stem)),
            )?;
            save_composite_png(
                &result.raw,
                &result.scored.map.fused,
                None,
                &out.join(format!("{}_composite.png", result.stem)),
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "image": image,
                    "score": result.scored.score,
                    "p_anomaly": result.scored.p_anomaly,
                })
            );
            Ok(())
        }
        Command::DumpEmbeddings { ckpt, out, history } => {
            let backbone = load_backbone(&cli.backbone)?;
            dump_embeddings(&backbone, &ckpt, &out, history.as_deref())
        }
        Command::Visualize { report, out } => run_visualize(&report, &out),
        Command::Synth {
            out,
            normal,
            anomalous,
            seed,
            resolution,
        } => {
            let resolution = parse_resolution(&resolution)?;
            let index: DatasetIndex = synth_blobs(normal, anomalous, resolution, seed);
            fs::create_dir_all(&out)?;
            let jsonl = export_index(&index, &out)?;
            println!(
                "{}",
                serde_json::json!({ "index": jsonl, "entries": index.len() })
            );
            Ok(())
        }
    }
}

/// Parse arguments and run; the caller turns the error into the exit
/// code and stderr JSON.
pub fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(GlocalError::Other(format!("usage: {e}")));
        }
    };
    dispatch(cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_spec_parses() {
        assert!(load_backbone("toy").is_ok());
        assert!(load_backbone("nonsense").is_err());
        // Archive path that does not exist surfaces as an I/O error.
        assert!(load_backbone("archive:/does/not/exist.gar").is_err());
    }

    #[test]
    fn resolution_strings_parse() {
        assert_eq!(parse_resolution("32x32").unwrap(), (32, 32));
        assert_eq!(parse_resolution("518x644").unwrap(), (518, 644));
        assert!(parse_resolution("32").is_err());
        assert!(parse_resolution("axb").is_err());
    }

    #[test]
    fn mismatched_prompt_shapes_are_rejected() {
        let a = RunConfig::toy();
        let mut b = RunConfig::toy();
        assert!(check_prompt_shapes(&a, &b).is_ok());
        b.deep_prompt_len += 1;
        assert!(check_prompt_shapes(&a, &b).is_err());
    }
}
