//! The five commands: train, eval, infer, gradcheck, make-synthetic.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ccsbesr_core::checkpoint;
use ccsbesr_core::data::{augment, extract_patches, synthetic_stereo, StereoSample};
use ccsbesr_core::gradcheck::GradReport;
use ccsbesr_core::loss::LossBreakdown;
use ccsbesr_core::model::{Model, ModelConfig};
use ccsbesr_core::suite::{run_suite, SuiteOptions};
use ccsbesr_core::train::{evaluate_sample, Batch, Quality, Trainer};
use ccsbesr_core::{AdamConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{load_all, load_manifest, DatasetManifest, MANIFEST_FILE};
use crate::image_io::{read_png, write_png};
use crate::logs::{self, CsvLog, EPOCH_HEADER, EVAL_HEADER, STEP_HEADER};
use crate::THREADS_ENV;

/// Worker count: the configured value, capped by `CCSBESR_THREADS` when set.
pub fn worker_threads(cfg: &RunConfig) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
            Ok(cfg.threads.min(cap))
        }
        Err(_) => Ok(cfg.threads),
    }
}

/// `count` generated pairs at the configured HR extents and scale. Pair `i`
/// has its own texture seed and a disparity cycling through
/// `1..=synthetic_max_disparity`.
pub fn synthetic_samples(cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<StereoSample>> {
    let max_d = cfg.synthetic_max_disparity.max(1);
    (0..count)
        .map(|i| {
            let pair_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let d = 1 + i % max_d;
            Ok(synthetic_stereo(pair_seed, cfg.synthetic_h, cfg.synthetic_w, d, cfg.model.scale)?)
        })
        .collect()
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<StereoSample>> {
    let dir = cfg
        .data_dir
        .as_ref()
        .context("no dataset: set data_dir in the config or pass --synthetic")?;
    let manifest = load_manifest(dir, split)?;
    load_all(&manifest, cfg.model.scale, worker_threads(cfg)?)
}

fn mean_quality(model: &Model<f32>, samples: &[StereoSample]) -> Result<(Quality, Quality)> {
    let mut acc = [0.0f64; 4];
    for s in samples {
        let (m, b) = evaluate_sample(model, s)?;
        acc[0] += m.psnr;
        acc[1] += m.ssim;
        acc[2] += b.psnr;
        acc[3] += b.ssim;
    }
    let n = samples.len().max(1) as f64;
    Ok((
        Quality {
            psnr: acc[0] / n,
            ssim: acc[1] / n,
        },
        Quality {
            psnr: acc[2] / n,
            ssim: acc[3] / n,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: usize,
    pub log_path: PathBuf,
    pub epoch_log_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_val_psnr: f64,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub model: Model<f32>,
}

fn model_fields_match(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

/// Trains on the configured dataset (or generated pairs when `synthetic`),
/// writing a per-step CSV log, a per-epoch validation log, one checkpoint per
/// epoch and `best.ckpt` by validation PSNR.
pub fn train(cfg: &RunConfig, synthetic: bool, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = if synthetic {
        let train = synthetic_samples(cfg, cfg.model.seed, cfg.synthetic_count)?;
        let val = synthetic_samples(cfg, cfg.model.seed.wrapping_add(0x5a17), cfg.synthetic_val_count)?;
        (train, val)
    } else {
        (load_split(cfg, &cfg.train_split)?, load_split(cfg, &cfg.val_split)?)
    };
    ensure!(!train_set.is_empty(), "dataset empty: no training pairs");
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };

    let model = match resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if !model_fields_match(&ck.config, &cfg.model) {
                bail!(
                    "{}: checkpoint config ({}) is incompatible with the run config ({})",
                    path.display(),
                    ck.config.to_text().trim().replace('\n', ", "),
                    cfg.model.to_text().trim().replace('\n', ", ")
                );
            }
            ck
        }
        None => Model::new(cfg.model.clone())?,
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(model, adam, cfg.weights);

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("{}: cannot create", cfg.out_dir.display()))?;
    let provenance = cfg.to_text();
    let log_path = cfg.out_dir.join(&cfg.log_file);
    let epoch_log_path = cfg.out_dir.join("epochs.csv");
    let mut log = CsvLog::create(&log_path, &provenance, &STEP_HEADER)?;
    let mut epoch_log = CsvLog::create(&epoch_log_path, &provenance, &EPOCH_HEADER)?;

    let s = cfg.model.scale;
    let bs = cfg.batch_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ 0x7472_6169_6e00);
    let mut first = None;
    let mut last = LossBreakdown::default();
    let mut best = f64::NEG_INFINITY;
    let best_checkpoint = cfg.out_dir.join("best.ckpt");
    let mut last_checkpoint = PathBuf::new();
    let mut epochs_run = 0;
    let started = Instant::now();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut items = Vec::new();
        for sample in &train_set {
            if cfg.patch_h == 0 {
                items.push(sample.clone());
            } else {
                let stride = if cfg.patch_stride == 0 { cfg.patch_w.min(cfg.patch_h) } else { cfg.patch_stride };
                let patches = extract_patches(sample, cfg.patch_h * s, cfg.patch_w * s, stride * s, &mut rng)
                    .with_context(|| format!("patches from {:?}", sample.id))?;
                items.extend(patches.into_iter().map(|p| p.sample));
            }
        }
        if cfg.augment {
            items = items.iter().map(|x| augment(x, &mut rng)).collect();
        }
        items.shuffle(&mut rng);
        for chunk in items.chunks(bs) {
            let refs: Vec<&StereoSample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs).context("samples in a batch must share extents")?;
            let b = trainer.step(&batch)?;
            let step = trainer.steps_taken();
            log.row(logs::step_row(step, &b))?;
            if first.is_none() {
                first = Some(b.clone());
            }
            last = b;
            if cfg.max_steps > 0 && step >= cfg.max_steps as u64 {
                epochs_run = epoch;
                finish_epoch(cfg, &trainer, &val_set, epoch, &mut epoch_log, &mut best, &best_checkpoint, &mut last_checkpoint, &provenance)?;
                break 'epochs;
            }
        }
        epochs_run = epoch;
        finish_epoch(cfg, &trainer, &val_set, epoch, &mut epoch_log, &mut best, &best_checkpoint, &mut last_checkpoint, &provenance)?;
        eprintln!(
            "epoch {epoch}/{} step {} [{:.1}s] {}",
            cfg.epochs,
            trainer.steps_taken(),
            started.elapsed().as_secs_f64(),
            last.summary()
        );
    }
    Ok(TrainOutcome {
        steps: trainer.steps_taken(),
        epochs: epochs_run,
        log_path,
        epoch_log_path,
        last_checkpoint,
        best_checkpoint,
        best_val_psnr: best,
        first: first.expect("at least one step"),
        last,
        model: trainer.model,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    cfg: &RunConfig,
    trainer: &Trainer,
    val_set: &[StereoSample],
    epoch: usize,
    epoch_log: &mut CsvLog,
    best: &mut f64,
    best_path: &Path,
    last_path: &mut PathBuf,
    provenance: &str,
) -> Result<()> {
    let (q, b) = mean_quality(&trainer.model, val_set)?;
    let path = cfg.out_dir.join(format!("epoch-{epoch:03}.ckpt"));
    write_checkpoint(&path, &trainer.model, provenance)?;
    if q.psnr > *best {
        *best = q.psnr;
        write_checkpoint(best_path, &trainer.model, provenance)?;
    }
    epoch_log.row([
        epoch.to_string(),
        trainer.steps_taken().to_string(),
        logs::num(q.psnr),
        logs::num(q.ssim),
        logs::num(b.psnr),
        logs::num(b.ssim),
        path.display().to_string(),
    ])?;
    *last_path = path;
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &Model<f32>, provenance: &str) -> Result<()> {
    fs::write(path, checkpoint::encode(model, provenance)).with_context(|| format!("{}: cannot write", path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).with_context(|| format!("{}: cannot read", path.display()))?;
    Ok(checkpoint::decode::<f32>(&bytes)
        .with_context(|| format!("{}: cannot load checkpoint", path.display()))?
        .model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub model: Quality,
    pub bicubic: Quality,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub csv_path: PathBuf,
}

/// Mean PSNR/SSIM over both views of every pair, for the model and for the
/// bicubic baseline.
pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, explicit_scale: Option<usize>, synthetic: bool) -> Result<EvalReport> {
    let model = read_checkpoint(checkpoint_path)?;
    if let Some(s) = explicit_scale {
        if s != model.config.scale {
            bail!(
                "scale mismatch: checkpoint {} is ×{}, dataset requested at ×{}",
                checkpoint_path.display(),
                model.config.scale,
                s
            );
        }
    }
    let mut cfg = cfg.clone();
    cfg.model.scale = model.config.scale;
    let samples = if synthetic {
        synthetic_samples(&cfg, cfg.model.seed.wrapping_add(0x5a17), cfg.synthetic_val_count.max(1))?
    } else {
        load_split(&cfg, &cfg.eval_split)?
    };
    ensure!(!samples.is_empty(), "dataset empty: nothing to evaluate");
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let (m, b) = evaluate_sample(&model, s).with_context(|| format!("evaluating {:?}", s.id))?;
        rows.push(EvalRow {
            id: s.id.clone(),
            model: m,
            bicubic: b,
        });
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = EvalRow {
        id: "mean".into(),
        model: Quality {
            psnr: avg(|r| r.model.psnr),
            ssim: avg(|r| r.model.ssim),
        },
        bicubic: Quality {
            psnr: avg(|r| r.bicubic.psnr),
            ssim: avg(|r| r.bicubic.ssim),
        },
    };
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("{}: cannot create", cfg.out_dir.display()))?;
    let csv_path = cfg.out_dir.join("eval_report.csv");
    let provenance = format!("checkpoint = {}\n{}", checkpoint_path.display(), model.config.to_text());
    let mut out = CsvLog::create(&csv_path, &provenance, &EVAL_HEADER)?;
    for r in rows.iter().chain(std::iter::once(&mean)) {
        out.row([
            r.id.clone(),
            logs::num(r.model.psnr),
            logs::num(r.model.ssim),
            logs::num(r.bicubic.psnr),
            logs::num(r.bicubic.ssim),
        ])?;
    }
    Ok(EvalReport { rows, mean, csv_path })
}

/// Super-resolves one stereo pair into `out_dir/sr_left.png` and
/// `out_dir/sr_right.png`.
pub fn infer(checkpoint_path: &Path, left: &Path, right: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let model = read_checkpoint(checkpoint_path)?;
    let l = read_png(left)?;
    let r = read_png(right)?;
    if l.shape() != r.shape() {
        bail!(
            "{} is {:?} but {} is {:?}",
            left.display(),
            l.shape(),
            right.display(),
            r.shape()
        );
    }
    let lb = Tensor::stack(&[&l])?;
    let rb = Tensor::stack(&[&r])?;
    let (sl, sr) = model
        .infer(&lb, &rb)
        .with_context(|| format!("{} / {}", left.display(), right.display()))?;
    fs::create_dir_all(out_dir).with_context(|| format!("{}: cannot create", out_dir.display()))?;
    let (pl, pr) = (out_dir.join("sr_left.png"), out_dir.join("sr_right.png"));
    write_png(&pl, &sl.index_first(0)?)?;
    write_png(&pr, &sr.index_first(0)?)?;
    Ok((pl, pr))
}

pub fn gradcheck(seed: u64, fault: Option<&'static str>) -> Result<Vec<GradReport>> {
    Ok(run_suite(&SuiteOptions {
        seed,
        fault,
        ..SuiteOptions::default()
    })?)
}

/// Writes `count` generated pairs as `left/<id>.png`, `right/<id>.png` and a
/// manifest.
pub fn make_synthetic(cfg: &RunConfig, seed: u64, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = synthetic_samples(cfg, seed, count)?;
    for sub in ["left", "right"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("{}: cannot create", d.display()))?;
    }
    let mut manifest = String::new();
    for s in &samples {
        let l = format!("left/{}.png", s.id);
        let r = format!("right/{}.png", s.id);
        write_png(&out_dir.join(&l), &s.hr_left)?;
        write_png(&out_dir.join(&r), &s.hr_right)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", s.id, l, r));
    }
    let mp = out_dir.join(MANIFEST_FILE);
    fs::write(&mp, manifest).with_context(|| format!("{}: cannot write", mp.display()))?;
    load_manifest(out_dir, "")
}
