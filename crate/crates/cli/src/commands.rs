use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mkis_core::checks::{gradcheck_suite, SuiteOptions, TOLERANCE};
use mkis_core::data::{
    augment_training_set, decode_image, load_manifest, write_gray16_png, write_gray8_png, write_rgb_png, ManifestSource,
    Padded,
};
use mkis_core::eval::{predict_sample, render_accuracy_map, reports_csv, render_table, Evaluator, Prediction};
use mkis_core::model::{complexity_report, load_model, save_model};
use mkis_core::training::{load_checkpoint, median_frequency_weights, Trainer};
use mkis_core::{Float, Model, Sample, SampleSource, TrainLog};
use rayon::prelude::*;

use crate::config::{parse_resolution, RunConfig};
use crate::error::{io_error, CliError};

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn manifest_source(path: Option<&Path>, what: &str, channels: usize) -> Result<ManifestSource, CliError> {
    let path = path.ok_or_else(|| CliError::Config(format!("no {what} manifest given")))?;
    Ok(ManifestSource::new(load_manifest(path)?, channels))
}

// ---------------------------------------------------------------- train

pub struct TrainOptions {
    pub resume: Option<PathBuf>,
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<(), CliError> {
    if cfg.f64 {
        train_as::<f64>(cfg, opts)
    } else {
        train_as::<f32>(cfg, opts)
    }
}

fn train_as<T: Float>(cfg: &RunConfig, opts: &TrainOptions) -> Result<(), CliError> {
    let source = manifest_source(cfg.train_manifest.as_deref(), "training", cfg.model.in_channels)?;
    let classes = cfg.model.num_classes;
    // weights come from the source images; rotations and gains barely move them
    let weights = median_frequency_weights(&source, classes)?;
    println!(
        "class weights: {}",
        weights.as_slice().iter().map(|w| format!("{w:.5}")).collect::<Vec<_>>().join(", ")
    );

    let augmented;
    let data: &dyn SampleSource = if cfg.use_augmentation {
        augmented = augment_training_set(&source, cfg.augment.clone())?;
        &augmented
    } else {
        &source
    };
    let padded = Padded {
        source: data,
        multiple: cfg.model.size_multiple(),
    };
    println!("training on {} samples", padded.len());

    let mut model = Model::<T>::build(cfg.model.clone(), cfg.seed)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let checkpoint = load_checkpoint::<T>(path)?;
            if checkpoint.model.config() != &cfg.model {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written for a different model configuration",
                    path.display()
                )));
            }
            let t = Trainer::resume(&mut model, checkpoint);
            println!("resuming at step {}", t.progress().global_step);
            t
        }
        None => Trainer::new(&mut model),
    };
    let checkpoint = cfg.out.join("checkpoint.mkis");
    let log = trainer.run(&padded, &cfg.train, &weights, Some(&checkpoint))?;
    write_log(&cfg.out.join("train_log.csv"), &log, opts.resume.is_some())?;
    let model_path = cfg.out.join("model.mkis");
    save_model(trainer.model(), &model_path)?;
    if let Some(last) = log.records.last() {
        println!("final loss {:.6} after {} steps", last.loss, last.step);
    }
    println!("model written to {}", model_path.display());
    Ok(())
}

/// A resumed run appends to the existing log.
fn write_log(path: &Path, log: &TrainLog, append: bool) -> Result<(), CliError> {
    if append && path.exists() {
        let csv = log.to_csv();
        let body = csv.split_once('\n').map_or("", |(_, rest)| rest);
        let mut text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        text.push_str(body);
        write(path, &text)
    } else {
        write(path, &log.to_csv())
    }
}

// ---------------------------------------------------------------- eval

pub struct EvalOptions {
    pub model: PathBuf,
    pub manifest: Option<PathBuf>,
}

pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<(), CliError> {
    if cfg.f64 {
        eval_as::<f64>(cfg, opts)
    } else {
        eval_as::<f32>(cfg, opts)
    }
}

fn to_u16(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_prediction(dir: &Path, pred: &Prediction) -> Result<(), CliError> {
    let binary = pred.label.iter().map(|&l| l * 255).collect();
    write_gray8_png(&dir.join(format!("{}_pred.png", pred.id)), pred.height, pred.width, binary)?;
    let prob = pred.foreground.iter().map(|&p| to_u16(p)).collect();
    write_gray16_png(&dir.join(format!("{}_prob.png", pred.id)), pred.height, pred.width, prob)?;
    Ok(())
}

fn eval_as<T: Float>(cfg: &RunConfig, opts: &EvalOptions) -> Result<(), CliError> {
    let model = load_model::<T>(&opts.model)?;
    let manifest = opts.manifest.as_deref().or(cfg.test_manifest.as_deref());
    let source = manifest_source(manifest, "test", model.config().in_channels)?;
    let maps = cfg.out.join("maps");
    let preds = cfg.out.join("predictions");
    create_dir(&maps)?;
    create_dir(&preds)?;
    let model_name = opts
        .model
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let mut ev = Evaluator::new(&source.manifest().dataset, model_name, model.num_parameters());
    let mut failures = Vec::new();
    for i in 0..source.len() {
        let record_id = &source.manifest().records[i].id;
        let result = (|| -> Result<(), CliError> {
            let sample = source.get(i)?;
            let pred = predict_sample(&model, &sample)?;
            ev.add(&sample, &pred)?;
            let colours = render_accuracy_map(&pred.label, sample.label(), sample.fov_mask())?;
            let rgb = colours.into_iter().flatten().collect();
            write_rgb_png(&maps.join(format!("{}.png", pred.id)), pred.height, pred.width, rgb)?;
            write_prediction(&preds, &pred)
        })();
        if let Err(e) = result {
            eprintln!("sample {record_id}: {e}");
            failures.push((record_id.clone(), e));
        }
    }
    let total = source.len();
    let result = ev.finish()?;
    write(&cfg.out.join("metrics.csv"), &reports_csv(std::slice::from_ref(&result.pooled)))?;
    write(&cfg.out.join("per_image.csv"), &result.per_image_csv())?;
    print!("{}", render_table(std::slice::from_ref(&result.pooled)));
    let m = &result.macro_metrics;
    println!(
        "per-image mean: Se {:.4}  Sp {:.4}  Acc {:.4}  AUC {:.4}  F1 {:.4}  Jaccard {:.4}",
        m.se, m.sp, m.acc, result.macro_auc, m.f1, m.jaccard
    );
    if failures.is_empty() {
        return Ok(());
    }
    eprintln!("{} of {total} samples failed:", failures.len());
    for (id, e) in &failures {
        eprintln!("  {id}: {e}");
    }
    // the worst class of failure decides the exit code
    let worst = failures.into_iter().map(|(_, e)| e).max_by_key(CliError::exit_code).expect("non-empty");
    Err(worst)
}

// ---------------------------------------------------------------- predict

pub struct PredictOptions {
    pub model: PathBuf,
    pub image: PathBuf,
}

pub fn predict(cfg: &RunConfig, opts: &PredictOptions) -> Result<(), CliError> {
    if cfg.f64 {
        predict_as::<f64>(cfg, opts)
    } else {
        predict_as::<f32>(cfg, opts)
    }
}

fn predict_as<T: Float>(cfg: &RunConfig, opts: &PredictOptions) -> Result<(), CliError> {
    let model = load_model::<T>(&opts.model)?;
    let img = decode_image(&opts.image, model.config().in_channels)?;
    let id = opts
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    let plane = img.height * img.width;
    let sample = Sample::new(id, (img.height, img.width, img.channels), img.data, vec![0; plane], None)?;
    let pred = predict_sample(&model, &sample)?;
    create_dir(&cfg.out)?;
    write_prediction(&cfg.out, &pred)?;
    let fg = pred.label.iter().filter(|&&l| l == 1).count();
    println!(
        "{}: {} of {plane} pixels foreground, maps in {}",
        pred.id,
        fg,
        cfg.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- summary

pub fn summary(cfg: &RunConfig, resolution: &str) -> Result<String, CliError> {
    let (h, w) = parse_resolution(resolution)?;
    let m = cfg.model.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let report = complexity_report(&cfg.model, ph, pw)?;
    let mut s = String::new();
    let params = report.trainable_params;
    let _ = writeln!(s, "trainable parameters  {} ({:.3} M)", group(params as u64), params as f64 / 1e6);
    let bytes = report.model_size_bytes;
    let _ = writeln!(s, "serialized size       {} bytes ({:.3} MB, 32-bit)", group(bytes as u64), bytes as f64 / 1e6);
    let padded = if (ph, pw) == (h, w) {
        String::new()
    } else {
        format!(", padded to {ph}x{pw}")
    };
    let total = report.madds.total;
    let _ = writeln!(
        s,
        "multiply-adds         {} ({:.3} B) at {h}x{w}{padded}",
        group(total),
        total as f64 / 1e9
    );
    for (stage, v) in &report.madds.stages {
        let _ = writeln!(s, "  {stage:<12} {:>16}", group(*v));
    }
    let rf = &report.receptive_field;
    let branches: Vec<String> = rf.input_branches.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "receptive field       input branches {}", branches.join(", "));
    for (stage, v) in &rf.stages {
        let _ = writeln!(s, "  {stage:<12} {v:>16}");
    }
    Ok(s)
}

/// `151538` → `151,538`.
fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

// ---------------------------------------------------------------- gradcheck

pub struct GradcheckOptions {
    pub size: usize,
    pub coords: usize,
    pub broken: bool,
}

pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<String, CliError> {
    let checks = gradcheck_suite(&SuiteOptions {
        size: opts.size,
        seed: cfg.seed,
        network_coords: opts.coords,
        include_broken: opts.broken,
    })?;
    let mut s = format!("{:<28} {:>12} {:>8} {:>8}  status\n", "op", "max rel err", "checked", "skipped");
    for c in &checks {
        let _ = writeln!(
            s,
            "{:<28} {:>12.3e} {:>8} {:>8}  {}",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failing: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.to_string()).collect();
    if failing.is_empty() {
        let _ = writeln!(s, "all {} checks below {TOLERANCE:e}", checks.len());
        Ok(s)
    } else {
        print!("{s}");
        Err(CliError::GradCheck(failing))
    }
}

// ---------------------------------------------------------------- augment

pub struct AugmentOptions {
    pub manifest: Option<PathBuf>,
    pub force: bool,
    pub count_only: bool,
}

fn is_empty_dir(path: &Path) -> Result<bool, CliError> {
    match std::fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(io_error(path, e)),
    }
}

/// Refuses to write into a populated directory unless forced.
pub fn check_augment_target(cfg: &RunConfig, opts: &AugmentOptions) -> Result<(), CliError> {
    if !opts.count_only && !opts.force && !is_empty_dir(&cfg.out)? {
        return Err(CliError::Config(format!(
            "output directory {} is not empty; pass --force to write into it",
            cfg.out.display()
        )));
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_sample(dir: &Path, s: &Sample) -> Result<String, CliError> {
    let (h, w) = (s.height(), s.width());
    let id = s.id();
    let image = format!("images/{id}.png");
    let pixels: Vec<u8> = s.image().iter().map(|&v| to_u8(v)).collect();
    if s.channels() == 3 {
        write_rgb_png(&dir.join(&image), h, w, pixels)?;
    } else {
        write_gray8_png(&dir.join(&image), h, w, pixels)?;
    }
    let label = format!("labels/{id}.png");
    write_gray8_png(&dir.join(&label), h, w, s.label().iter().map(|&l| l * 255).collect())?;
    let mut line = format!("{id}\t{image}\t{label}");
    if let Some(m) = s.fov_mask() {
        let mask = format!("masks/{id}.png");
        write_gray8_png(&dir.join(&mask), h, w, m.iter().map(|&b| if b { 255 } else { 0 }).collect())?;
        line.push('\t');
        line.push_str(&mask);
    }
    Ok(line)
}

pub fn augment(cfg: &RunConfig, opts: &AugmentOptions) -> Result<usize, CliError> {
    let manifest = opts.manifest.as_deref().or(cfg.train_manifest.as_deref());
    let source = manifest_source(manifest, "training", cfg.model.in_channels)?;
    let set = augment_training_set(&source, cfg.augment.clone())?;
    let n = set.len();
    if opts.count_only {
        return Ok(n);
    }
    for sub in ["images", "labels", "masks"] {
        create_dir(&cfg.out.join(sub))?;
    }
    let lines: Vec<String> = (0..n)
        .into_par_iter()
        .map(|i| write_sample(&cfg.out, &set.get(i)?))
        .collect::<Result<_, CliError>>()?;
    let m = source.manifest();
    let mut text = format!("# augmented from {}\ndataset={} split=train resize=native\n", m.path.display(), m.dataset);
    for line in lines {
        text.push_str(&line);
        text.push('\n');
    }
    write(&cfg.out.join("manifest.tsv"), &text)?;
    Ok(n)
}
