//! Command-line interface. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ConfigFile;
use super::metaimage::{read_mask, read_volume, write_mask, write_volume, ElementType};
use super::metrics::{evaluate_masks, report_row, EvalResult, REPORT_HEADER};
use super::phantom::make_phantoms;
use super::pipeline::{segment_detailed, PipelineBundle, PipelineConfig};
use super::training::{list_volumes, load_cases, read_augment_keys, Stage, StageSettings};
use crate::augment::{augment_sample, AugmentConfig};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::shapemodel::{ShapeModel, MAX_MODES};
use crate::train::{cross_validate, difficulty_weights, train};

#[derive(Debug, Parser)]
#[command(name = "twostage", version, about = "Two-stage volumetric organ segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantoms to OUT/images and OUT/masks.
    MakePhantoms {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a shape model from every mask in a directory.
    BuildShapeModel {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MAX_MODES)]
        max_modes: usize,
    },
    /// Train a global or local network.
    Train {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        shape_model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cross-validation CSV; its Dice scores become sampling weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-fold cross-validation; writes per-image held-out Dice.
    CrossValidate {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        shape_model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble a pipeline bundle directory.
    MakeBundle {
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        shape_model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image with a bundle.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_global_prob: Option<PathBuf>,
        #[arg(long)]
        emit_box: Option<PathBuf>,
    },
    /// Dice and extent errors of predictions against ground truth (files or directories).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV report path (directory mode).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write augmented copies of one image/mask pair.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        shape_model: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn stage_settings(stage: Stage, config: Option<&Path>) -> Result<StageSettings> {
    match config {
        Some(p) => StageSettings::from_config(stage, &ConfigFile::read(p)?),
        None => Ok(StageSettings::defaults(stage)),
    }
}

fn load_model(path: Option<&Path>) -> Result<Option<ShapeModel>> {
    path.map(ShapeModel::load).transpose()
}

/// Sampling weights from a cross-validation CSV with `id` and `dice` columns.
fn weights_from_csv(path: &Path, ids: &[String]) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column {name}") })
    };
    let (ci, cd) = (col("id")?, col("dice")?);
    let mut scores = std::collections::HashMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Parse { line: n + 2, msg: format!("malformed row {line:?}") };
        let id = f.get(ci).ok_or_else(bad)?.to_string();
        let d: f64 = f.get(cd).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        scores.insert(id, d);
    }
    let dice: Vec<f64> = ids
        .iter()
        .map(|id| scores.get(id).copied().ok_or_else(|| Error::invalid(format!("{}: no score for {id}", path.display()))))
        .collect::<Result<_>>()?;
    difficulty_weights(&dice)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::MakePhantoms { n, out: dir, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases = make_phantoms(n as usize, &mut rng)?;
            for (i, (img, mask)) in cases.iter().enumerate() {
                let name = format!("case_{i:03}.mhd");
                write_volume(img, &dir.join("images").join(&name), ElementType::Float)?;
                write_mask(mask, &dir.join("masks").join(&name))?;
            }
            emit(out, format!("wrote {n} phantoms to {}", dir.display()))
        }
        Command::BuildShapeModel { masks, out: path, max_modes } => {
            let list = list_volumes(&masks)?;
            let ms = list.iter().map(|(_, p)| read_mask(p)).collect::<Result<Vec<_>>>()?;
            let model = ShapeModel::build(&ms, max_modes)?;
            model.save(&path)?;
            let ratio = model.explained_variance_ratio();
            emit(out, format!("masks={} modes={}", ms.len(), model.num_modes()))?;
            emit(out, format!("explained_variance={:.6}", ratio.get(model.num_modes().wrapping_sub(1)).copied().unwrap_or(0.0)))
        }
        Command::Train { images, masks, stage, shape_model, config, weights, out: path } => {
            let mut settings = stage_settings(stage, config.as_deref())?;
            let model = load_model(shape_model.as_deref())?;
            let cases = load_cases(&images, &masks)?;
            let ids: Vec<String> = cases.iter().map(|c| c.0.clone()).collect();
            let pairs: Vec<_> = cases.into_iter().map(|(_, v, m)| (v, m)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
            let samples = settings.samples(&pairs, &mut rng)?;
            drop(pairs);
            let w = match &weights {
                Some(p) => weights_from_csv(p, &ids)?,
                None => vec![1.0; samples.len()],
            };
            if settings.train.checkpoint_every > 0 {
                settings.train.checkpoint_dir = Some(with_suffix(&path, ".checkpoints"));
                let d = settings.train.checkpoint_dir.as_ref().expect("just set");
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut net = Network::build(settings.network_spec(), &mut rng)?;
            let report = train(&mut net, &samples, &w, &settings.train, model.as_ref())?;
            net.save(&path)?;
            write_text(&with_suffix(&path, ".report.txt"), &report.to_text())?;
            write_text(&with_suffix(&path, ".history.csv"), &report.history_csv())?;
            out.write_all(report.to_text().as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::CrossValidate { images, masks, stage, k, shape_model, config, out: path } => {
            let settings = stage_settings(stage, config.as_deref())?;
            let model = load_model(shape_model.as_deref())?;
            let cases = load_cases(&images, &masks)?;
            let ids: Vec<String> = cases.iter().map(|c| c.0.clone()).collect();
            let pairs: Vec<_> = cases.into_iter().map(|(_, v, m)| (v, m)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
            let samples = settings.samples(&pairs, &mut rng)?;
            let cv = cross_validate(&samples, k, settings.network_spec(), &settings.train, model.as_ref())?;
            let mut csv = String::from("id,fold,dice\n");
            for (i, id) in ids.iter().enumerate() {
                csv.push_str(&format!("{id},{},{:.6}\n", cv.fold[i], cv.dice[i]));
            }
            write_text(&path, &csv)?;
            let mean = cv.dice.iter().sum::<f64>() / cv.dice.len() as f64;
            emit(out, format!("folds={k} images={} mean_dice={mean:.6}", ids.len()))
        }
        Command::MakeBundle { global, local, shape_model, config, out: dir } => {
            let cfg = match config {
                Some(p) => PipelineConfig::from_config(&ConfigFile::read(&p)?)?,
                None => PipelineConfig::default(),
            };
            let bundle = PipelineBundle::new(Network::load(&global)?, Network::load(&local)?, ShapeModel::load(&shape_model)?, cfg)?;
            bundle.save(&dir)?;
            emit(out, format!("bundle written to {}", dir.display()))
        }
        Command::Infer { image, bundle, out: path, emit_global_prob, emit_box } => {
            let b = PipelineBundle::load(&bundle)?;
            let img = read_volume(&image)?;
            let seg = segment_detailed(&b, &img)?;
            write_mask(&seg.mask, &path)?;
            if let Some(p) = emit_global_prob {
                write_volume(seg.global_prob.as_volume(), &p, ElementType::Float)?;
            }
            let bx = seg.bbox;
            let box_text = format!(
                "start = {} {} {}\nend = {} {} {}\n",
                bx.start[0], bx.start[1], bx.start[2], bx.end[0], bx.end[1], bx.end[2]
            );
            if let Some(p) = emit_box {
                write_text(&p, &box_text)?;
            }
            emit(out, format!("voxels={} fit_objective={:.6}", seg.mask.count(), seg.fit.objective))?;
            out.write_all(box_text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::Eval { pred, gt, out: report } => {
            if pred.is_dir() {
                let mut csv = String::from(REPORT_HEADER);
                csv.push('\n');
                let mut results: Vec<EvalResult> = Vec::new();
                for (id, p) in list_volumes(&pred)? {
                    let g = gt.join(p.file_name().expect("listed file"));
                    let r = evaluate_masks(&read_mask(&p)?, &read_mask(&g)?)?;
                    csv.push_str(&report_row(&id, &r));
                    csv.push('\n');
                    results.push(r);
                }
                if results.is_empty() {
                    return Err(Error::InsufficientData(format!("no masks in {}", pred.display())));
                }
                match report {
                    Some(p) => write_text(&p, &csv)?,
                    None => out.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
                }
                let mean = results.iter().map(|r| r.dice).sum::<f64>() / results.len() as f64;
                emit(out, format!("cases={} mean_dice={mean:.6}", results.len()))
            } else {
                let r = evaluate_masks(&read_mask(&pred)?, &read_mask(&gt)?)?;
                emit(out, format!("dice={:.6}", r.dice))?;
                if let Some(e) = r.extent {
                    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
                        emit(out, format!("{axis}: start={:.3} end={:.3} size={:.3}", e.start[a], e.end[a], e.size[a]))?;
                    }
                }
                if let Some(p) = report {
                    write_text(&p, &format!("{REPORT_HEADER}\n{}\n", report_row("case", &r)))?;
                }
                Ok(())
            }
        }
        Command::Augment { image, mask, shape_model, n, out: dir, seed, config } => {
            let mut cfg = AugmentConfig::default();
            if let Some(p) = config {
                let c = ConfigFile::read(&p)?;
                let mut r = c.reader();
                read_augment_keys(&mut r, &mut cfg)?;
                r.finish()?;
            }
            let model = ShapeModel::load(&shape_model)?;
            let img = read_volume(&image)?;
            let m = read_mask(&mask)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                let (a, b, rec) = augment_sample(&img, &m, Some(&model), &cfg, &mut rng)?;
                write_volume(&a, &dir.join(format!("aug_{i:03}_image.mhd")), ElementType::Float)?;
                write_mask(&b, &dir.join(format!("aug_{i:03}_mask.mhd")))?;
                emit(out, format!("aug_{i:03} deformed={} shift={:?}", rec.deformed, rec.shift))?;
            }
            Ok(())
        }
    }
}
