use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csra::checkpoint::Checkpoint;
use csra::config::TrainConfig;
use csra::data::{derive_labels_from_mask, load_manifest, DatasetManifest, LabelVocabulary,
    MaskIdMap, Sample};
use csra::error::{Error, Result};
use csra::metrics::{EvaluationBatch, MetricsReport};
use csra::train::{evaluate_checkpoint, predict_images, train_model};

#[derive(Parser)]
#[command(name = "csra", about = "Multi-label image classification with class-specific residual attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a manifest and write report files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict labels for individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Derive a multi-label manifest from segmentation masks.
    ConvertMasks {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        id_map: PathBuf,
        #[arg(long, default_value_t = 50)]
        min_pixels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric suite from score and truth tables.
    Metrics {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truths: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::Config(format!("cannot read {config:?}: {e}")))?;
            let config = TrainConfig::from_toml(&text)?;
            let manifest = load_manifest(&data)?;
            let record = train_model(&config, &manifest, Some(&out))?;
            println!("config_hash: {}", record.config_hash);
            println!("seed: {}", record.seed);
            for (epoch, (loss, report)) in record
                .train_losses
                .iter()
                .zip(&record.epoch_reports)
                .enumerate()
            {
                println!(
                    "epoch {epoch}: loss {loss:.6} mAP {:.4} OF1 {:.4}",
                    report.map, report.overall.of1
                );
            }
            println!(
                "best epoch {} (mAP {:.4}); artifacts in {}",
                record.best_epoch,
                record.best_map(),
                out_display(&record)
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            threshold,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let (report, skipped) = evaluate_checkpoint(&ckpt, &manifest, threshold)?;
            let names = manifest.vocabulary.names().to_vec();
            print!("{}", report.to_text(Some(&names)));
            if skipped > 0 {
                println!("skipped_images: {skipped}");
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.txt"), report.to_text(Some(&names)))?;
                std::fs::write(dir.join("report.csv"), report.to_csv(Some(&names)))?;
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            images,
            threshold,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let rows = predict_images(&ckpt, &images, threshold)?;
            println!("image,{}", ckpt.vocabulary.join(","));
            let mut failures = 0usize;
            for row in &rows {
                match (&row.probabilities, &row.labels) {
                    (Some(p), Some(y)) => {
                        let cells: Vec<String> = p
                            .iter()
                            .zip(y)
                            .map(|(pi, yi)| format!("{pi:.4}:{yi}"))
                            .collect();
                        println!("{},{}", row.image.display(), cells.join(","));
                    }
                    _ => {
                        failures += 1;
                        println!(
                            "{},FAILED ({})",
                            row.image.display(),
                            row.error.as_deref().unwrap_or("unknown")
                        );
                    }
                }
            }
            if failures > 0 {
                Err(Error::Numerical(format!(
                    "{failures} of {} images failed to decode",
                    rows.len()
                )))
            } else {
                Ok(())
            }
        }
        Command::ConvertMasks {
            masks,
            id_map,
            min_pixels,
            out,
        } => convert_masks(&masks, &id_map, min_pixels, &out),
        Command::Metrics {
            scores,
            truths,
            threshold,
        } => {
            let (n, c, scores) = load_numeric_csv(&scores)?;
            let (tn, tc, truths) = load_numeric_csv(&truths)?;
            if (tn, tc) != (n, c) {
                return Err(Error::Data(format!(
                    "scores are {n}x{c} but truths are {tn}x{tc}"
                )));
            }
            let predictions: Vec<f64> = scores
                .iter()
                .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
                .collect();
            let batch = EvaluationBatch::new(n, c, scores, truths, predictions)?;
            let report = MetricsReport::compute(&batch)?;
            print!("{}", report.to_text(None));
            Ok(())
        }
    }
}

fn out_display(record: &csra::train::RunRecord) -> String {
    record
        .best_checkpoint
        .as_ref()
        .and_then(|p| p.parent())
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| ".".into())
}

/// Plain numeric CSV without header, one row per sample.
fn load_numeric_csv(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {path:?}: {e}")))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("{path:?} line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(cells.len()),
            Some(c) if c != cells.len() => {
                return Err(Error::Data(format!(
                    "{path:?} line {} has {} cells, expected {c}",
                    i + 1,
                    cells.len()
                )))
            }
            _ => {}
        }
        values.extend(cells);
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), values))
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct IdMapFile {
    vocabulary: Vec<String>,
    id_map: std::collections::HashMap<String, String>,
    #[serde(default)]
    ignore: Vec<u32>,
    #[serde(default)]
    image_dir: Option<PathBuf>,
    #[serde(default)]
    image_extension: Option<String>,
}

fn convert_masks(masks: &Path, id_map_path: &Path, min_pixels: usize, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(id_map_path)
        .map_err(|e| Error::Config(format!("cannot read {id_map_path:?}: {e}")))?;
    let spec: IdMapFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("id-map parse: {e}")))?;
    let vocabulary = LabelVocabulary::new(spec.vocabulary)?;
    let mut id_map = MaskIdMap::default();
    for (id, class) in &spec.id_map {
        let id: u32 = id
            .parse()
            .map_err(|_| Error::Config(format!("mask id {id:?} is not an integer")))?;
        let index = vocabulary
            .index_of(class)
            .ok_or_else(|| Error::Config(format!("id_map targets unknown class {class:?}")))?;
        id_map.map.insert(id, index);
    }
    id_map.ignore = spec.ignore.into_iter().collect();

    let mut mask_paths: Vec<PathBuf> = std::fs::read_dir(masks)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    mask_paths.sort();
    if mask_paths.is_empty() {
        return Err(Error::Data(format!("no PNG masks found in {masks:?}")));
    }

    let mut samples = Vec::new();
    for mask_path in &mask_paths {
        let ids = load_mask_ids(mask_path)?;
        let label = derive_labels_from_mask(&ids, &id_map, min_pixels, vocabulary.len())
            .map_err(|e| Error::Data(format!("{mask_path:?}: {e}")))?;
        let image = match &spec.image_dir {
            Some(dir) => {
                let stem = mask_path.file_stem().unwrap_or_default();
                let ext = spec.image_extension.as_deref().unwrap_or("png");
                dir.join(format!("{}.{ext}", stem.to_string_lossy()))
            }
            None => mask_path.clone(),
        };
        samples.push(Sample { image, label });
    }
    let mut manifest = DatasetManifest::new(vocabulary, samples)?;
    manifest
        .provenance
        .push(format!("derived from masks in {masks:?} with min_pixels {min_pixels}"));
    manifest.save(out)?;
    println!("wrote {} rows to {}", manifest.len(), out.display());
    Ok(())
}

/// Single-channel class-id raster from a PNG (8- or 16-bit).
fn load_mask_ids(path: &Path) -> Result<Vec<u32>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot decode {path:?}: {e}")))?;
    Ok(match img {
        image::DynamicImage::ImageLuma16(im) => im.into_raw().iter().map(|&v| v as u32).collect(),
        other => other.to_luma8().into_raw().iter().map(|&v| v as u32).collect(),
    })
}
