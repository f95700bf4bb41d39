use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use scene_parse::cover::{train_stage2, Stage2Options};
use scene_parse::dataset::{
    read_image_png, read_index_png, write_index_png, write_palette_png, Dataset, VOID_LABEL,
};
use scene_parse::metrics::{evaluate, merge_metrics, Metrics};
use scene_parse::model::ModelBundle;
use scene_parse::msnet::{extract_features, train_stage1, NetConfig, Sampling, Stage1Options};
use scene_parse::pipeline::{parse_image, ParseMode, ParseOutput};
use scene_parse::seghier::{build_merge_tree, build_pixel_graph, remove_small, volume_filter};
use scene_parse::synth::{synth_generate, SynthConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "scene-parse",
    version,
    about = "Pixelwise scene labeling with multiscale convnet features and entropy-minimal segment covers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Natural,
    Balanced,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset in the standard on-disk layout.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Stage 1: train the multiscale feature extractor with a per-pixel
    /// linear head.
    TrainFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        preset: PresetArg,
        /// Pyramid scale count; defaults to the preset's value.
        #[arg(long)]
        scales: Option<usize>,
        #[arg(long, value_enum, default_value = "balanced")]
        sampling: SamplingArg,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 1e-7)]
        weight_decay: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "off")]
        jitter: Switch,
        #[arg(long, default_value_t = 64)]
        pixels_per_image: usize,
    },
    /// Stage 2: freeze the features and train the segment purity
    /// classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 model to extend.
        #[arg(long)]
        model: PathBuf,
        /// Output path; defaults to overwriting --model.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        grid: usize,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, default_value_t = 100)]
        min_component: u32,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 1e-6)]
        weight_decay: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Label one image or every image in a directory.
    Parse {
        #[arg(long)]
        model: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the stage-1 per-pixel head instead of the segment cover.
        #[arg(long)]
        baseline: bool,
        /// Also write per-pixel class distributions (.dist files).
        #[arg(long)]
        dump_dist: bool,
        #[arg(long)]
        min_component: Option<u32>,
    },
    /// Compare predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Class count; inferred from the maps when omitted.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the brute-force oracle suites.
    Selftest {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::SynthGen {
            out,
            count,
            size,
            classes,
            seed,
        } => {
            let cfg = SynthConfig {
                seed,
                count,
                image_size: size,
                n_classes: classes,
            };
            let (dataset, stats) = synth_generate(&cfg)?;
            dataset.save(&out, "synth")?;
            println!(
                "wrote {count} images of {size}x{size} with {classes} classes to {}",
                out.display()
            );
            if stats.shape_shortfalls > 0 {
                println!(
                    "note: {} shapes dropped after placement retries",
                    stats.shape_shortfalls
                );
            }
            Ok(0)
        }
        Cmd::TrainFeatures {
            data,
            model,
            preset,
            scales,
            sampling,
            epochs,
            lr,
            weight_decay,
            seed,
            jitter,
            pixels_per_image,
        } => {
            let dataset = Dataset::load(&data).context("loading training data")?;
            let mut config = match preset {
                PresetArg::Toy => NetConfig::toy(),
                PresetArg::Paper => NetConfig::paper(),
            };
            if let Some(n) = scales {
                config.n_scales = n;
            }
            let opts = Stage1Options {
                sampling: match sampling {
                    SamplingArg::Natural => Sampling::Natural,
                    SamplingArg::Balanced => Sampling::Balanced,
                },
                epochs,
                lr,
                weight_decay,
                seed,
                pixels_per_image,
                jitter: matches!(jitter, Switch::On),
            };
            println!(
                "stage 1: {} images, {} classes, {} epochs",
                dataset.len(),
                dataset.n_classes(),
                epochs
            );
            let result = train_stage1(&dataset, &config, &opts)?;
            for (i, loss) in result.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}  loss {loss:.6}", i + 1);
            }
            let bundle = ModelBundle {
                net_config: config,
                params: result.params,
                linear: Some(result.linear),
                classifier: None,
                n_classes: dataset.n_classes(),
                class_names: dataset.class_names.clone(),
                grid: 3,
                hidden: 0,
                min_component: 100,
            };
            bundle.save(&model)?;
            println!("saved stage-1 model to {}", model.display());
            Ok(0)
        }
        Cmd::TrainClassifier {
            data,
            model,
            out,
            grid,
            hidden,
            min_component,
            epochs,
            lr,
            weight_decay,
            seed,
        } => {
            let dataset = Dataset::load(&data).context("loading training data")?;
            let mut bundle = ModelBundle::load(&model).context("loading stage-1 model")?;
            if dataset.n_classes() != bundle.n_classes {
                bail!(
                    "dataset has {} classes but the model was trained with {}",
                    dataset.n_classes(),
                    bundle.n_classes
                );
            }
            // the full-size preset wants a wider hidden layer
            let hidden = hidden.unwrap_or(if bundle.net_config.per_scale_channels() >= 256 {
                512
            } else {
                32
            });
            println!(
                "stage 2: {} images, grid {grid}, hidden {hidden}, min component {min_component}",
                dataset.len()
            );
            // features and hierarchies are frozen: precompute examples in
            // parallel across images
            let per_image: Vec<_> = dataset
                .pairs
                .par_iter()
                .map(|(image, labels)| -> Result<_> {
                    let features = extract_features(image, &bundle.params, &bundle.net_config)?;
                    let tree = remove_small(
                        &volume_filter(&build_merge_tree(&build_pixel_graph(image))),
                        min_component,
                    );
                    Ok(scene_parse::cover::stage2_examples(
                        &features.full,
                        &tree,
                        labels,
                        bundle.n_classes,
                        grid,
                    )?)
                })
                .collect();
            let mut examples = Vec::new();
            for part in per_image {
                examples.extend(part?);
            }
            println!("collected {} training components", examples.len());
            let opts = Stage2Options {
                hidden,
                epochs,
                lr,
                weight_decay,
                seed,
            };
            let (classifier, losses) = train_stage2(&examples, bundle.n_classes, &opts)?;
            for (i, loss) in losses.iter().enumerate() {
                println!("epoch {:>3}  kl {loss:.6}", i + 1);
            }
            bundle.classifier = Some(classifier);
            bundle.grid = grid;
            bundle.hidden = hidden;
            bundle.min_component = min_component;
            let target = out.unwrap_or(model);
            bundle.save(&target)?;
            println!("saved full model to {}", target.display());
            Ok(0)
        }
        Cmd::Parse {
            model,
            input,
            out,
            baseline,
            dump_dist,
            min_component,
        } => {
            let bundle = ModelBundle::load(&model).context("loading model")?;
            std::fs::create_dir_all(&out)?;
            let mode = if baseline {
                ParseMode::Baseline
            } else {
                ParseMode::Cover
            };
            let inputs = collect_pngs(&input)?;
            if inputs.is_empty() {
                bail!("no PNG inputs under {}", input.display());
            }
            let outputs: Vec<_> = inputs
                .par_iter()
                .map(|path| -> Result<(PathBuf, ParseOutput)> {
                    let image = read_image_png(path)?;
                    let result = parse_image(&bundle, &image, mode, min_component, dump_dist)?;
                    Ok((path.clone(), result))
                })
                .collect();
            for item in outputs {
                let (path, result) = item?;
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .context("bad input file name")?;
                write_palette_png(&result.labels, &out.join(format!("{stem}_labels.png")))?;
                write_index_png(&result.labels, &out.join(format!("{stem}_ids.png")))?;
                if let Some(dist) = &result.dist {
                    write_dist(dist, &out.join(format!("{stem}.dist")))?;
                }
                println!("{stem}: {:.0} ms", result.millis);
            }
            Ok(0)
        }
        Cmd::Eval {
            pred,
            truth,
            classes,
        } => {
            let truth_maps = load_label_dir(&truth)?;
            let pred_maps = load_label_dir(&pred)?;
            let n_classes = match classes {
                Some(n) => n,
                None => {
                    let max = truth_maps
                        .iter()
                        .chain(&pred_maps)
                        .flat_map(|(_, m)| m.labels().iter())
                        .filter(|&&l| l != VOID_LABEL)
                        .max()
                        .copied()
                        .unwrap_or(0);
                    max as usize + 1
                }
            };
            let mut parts: Vec<Metrics> = Vec::new();
            for (stem, truth_map) in &truth_maps {
                let Some((_, pred_map)) = pred_maps.iter().find(|(s, _)| s == stem) else {
                    bail!("no prediction for {stem}");
                };
                parts.push(evaluate(pred_map, truth_map, n_classes)?);
            }
            let total = merge_metrics(&parts)?;
            println!(
                "pixel accuracy {:.2}%  class accuracy {:.2}%  ({} valid pixels, {} images)",
                total.pixel_accuracy * 100.0,
                total.class_accuracy * 100.0,
                total.valid_pixels,
                parts.len()
            );
            Ok(0)
        }
        Cmd::Gradcheck { seed } => {
            println!("running finite-difference gradient checks (seed {seed})");
            let ok = scene_parse::selftest::gradient_suite(seed).is_ok();
            let conv = scene_parse::selftest::conv_suite(seed).is_ok();
            if ok && conv {
                println!("all gradients within 1e-4 of central differences");
                Ok(0)
            } else {
                println!("gradient check FAILED");
                Ok(1)
            }
        }
        Cmd::Selftest { seed } => {
            if scene_parse::selftest::run_all(seed) {
                Ok(0)
            } else {
                Ok(1)
            }
        }
    }
}

fn collect_pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(input)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every index PNG in a directory, keyed by stem with any
/// `_ids`/`_labels` suffix stripped so parse output matches dataset
/// labels. Palette renderings (`*_labels.png`) are skipped.
fn load_label_dir(dir: &Path) -> Result<Vec<(String, scene_parse::dataset::LabelMap)>> {
    let mut out = Vec::new();
    for path in collect_pngs(dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("bad file name")?
            .to_string();
        if stem.ends_with("_labels") {
            continue;
        }
        let stem = stem.trim_end_matches("_ids").to_string();
        out.push((stem, read_index_png(&path)?));
    }
    if out.is_empty() {
        bail!("no label PNGs under {}", dir.display());
    }
    Ok(out)
}

/// Raw little-endian dump: magic, class count, dims, then f32 values in
/// (class, row, col) order.
fn write_dist(dist: &scene_parse::FeatureVolume, path: &Path) -> Result<()> {
    let (c, h, w) = dist.shape();
    let mut buf = Vec::with_capacity(16 + dist.data().len() * 4);
    buf.extend_from_slice(b"SPDD");
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in dist.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}
