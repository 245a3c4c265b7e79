//! File-level orchestration of the toolkit phases. The command-line binary is
//! a thin wrapper over these functions; tests drive them directly so whole
//! runs stay reproducible byte-for-byte.

use std::path::{Path, PathBuf};

use crate::bench::{
    aggregate_report, curves_csv, run_benchmark, summary_csv, BenchConfig, TargetRule,
};
use crate::data::{make_dataset, write_imgr, DatasetName, DeskDataset};
use crate::diffusion::{sample_chunked, DiffusionSchedule, EmaModel, EMA_DECAY};
use crate::io::{
    load_condense_config, load_learngene, load_model_checkpoint, save_learngene, save_model_checkpoint,
    write_run_meta, CheckpointMeta,
};
use crate::model::{Backing, DiTConfig};
use crate::rng::DeskRng;
use crate::train::{
    condense, instantiate, matched_svd_rank, sigma_fit, train_loop, CondenseConfig, InitRecipe,
    SigmaFitConfig, SourceCheckpoint, TrainLoopCfg,
};
use crate::{Elem, Error, Result};

pub const DEFAULT_DATASET_N: usize = 2048;

fn dataset_for(name: &str, n: usize, h: usize, seed: u64) -> Result<DeskDataset<Elem>> {
    make_dataset(DatasetName::parse(name)?, n, h, seed)
}

fn kv(entries: &[(&str, String)]) -> Vec<(String, String)> {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

// ---- condense ------------------------------------------------------------------

pub struct CondenseArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub aux_out: Option<PathBuf>,
}

pub fn run_condense(args: &CondenseArgs) -> Result<String> {
    let cfg = load_condense_config(&args.config)?;
    run_condense_cfg(&cfg, &args.out, args.aux_out.as_deref())
}

pub fn run_condense_cfg(cfg: &CondenseConfig, out: &Path, aux_out: Option<&Path>) -> Result<String> {
    let model_cfg = cfg.model.normalized()?;
    let dataset = dataset_for(&cfg.dataset, cfg.n_samples, model_cfg.image_size, cfg.seed)?;
    let outcome = condense(cfg, &dataset, None)?;
    save_learngene(out, &outcome.learngene)?;
    let meta_entries = kv(&[
        ("dataset", cfg.dataset.clone()),
        ("n_samples", cfg.n_samples.to_string()),
        ("seed", cfg.seed.to_string()),
        ("steps", cfg.steps.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("t_diff", cfg.t_diff.to_string()),
        ("model.width", model_cfg.width.to_string()),
        ("model.depth", model_cfg.depth.to_string()),
    ]);
    write_run_meta(out, "condense", &meta_entries)?;
    if let Some(aux) = aux_out {
        let meta = CheckpointMeta {
            model: model_cfg,
            t_diff: cfg.t_diff,
            dataset: cfg.dataset.clone(),
            seed: cfg.seed,
            step: cfg.steps,
        };
        save_model_checkpoint(aux, &meta, &outcome.store, Some(&outcome.ema))?;
        write_run_meta(aux, "condense", &meta_entries)?;
    }
    let final_loss = outcome.curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    Ok(format!(
        "condensed {} steps on {} (final loss {:.6}); learngene -> {}",
        cfg.steps,
        cfg.dataset,
        final_loss,
        out.display()
    ))
}

// ---- init -----------------------------------------------------------------------

pub struct InitArgs {
    pub learngene: PathBuf,
    pub depth: usize,
    pub dataset: String,
    pub data_n: usize,
    pub fit: SigmaFitConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub t_diff: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Target model width; defaults to the learngene's width and must match it.
    pub width: Option<usize>,
}

impl InitArgs {
    pub fn new(learngene: PathBuf, depth: usize, dataset: String, out: PathBuf) -> Self {
        InitArgs {
            learngene,
            depth,
            dataset,
            data_n: DEFAULT_DATASET_N,
            fit: SigmaFitConfig::default(),
            out,
            seed: 0,
            t_diff: crate::diffusion::DEFAULT_T_DIFF,
            heads: 4,
            patch_size: 2,
            image_size: 8,
            num_classes: 2,
            width: None,
        }
    }
}

/// Instantiate a model of the requested depth from a learngene and run the
/// sigma-only fit on a small slice of the target dataset.
pub fn run_init(args: &InitArgs) -> Result<String> {
    let lg = load_learngene(&args.learngene)?;
    let base = DiTConfig {
        image_size: args.image_size,
        channels: 1,
        patch_size: args.patch_size,
        width: args.width.unwrap_or(lg.meta.width),
        hidden: lg.meta.hidden,
        heads: args.heads,
        depth: args.depth,
        num_classes: args.num_classes,
        backing: Backing::Factorized { rank: lg.meta.rank, group_size: lg.meta.group_size },
    };
    let dataset = dataset_for(&args.dataset, args.data_n, args.image_size, args.seed)?;
    let sched = DiffusionSchedule::linear(args.t_diff);
    let (model, mut store) = instantiate(&lg, args.depth, &base, args.seed)?;
    let mut fit = args.fit.clone();
    fit.seed = args.seed;
    let curve = sigma_fit(&model, &mut store, &fit, &dataset, &sched)?;
    let meta = CheckpointMeta {
        model: model.cfg,
        t_diff: args.t_diff,
        dataset: args.dataset.clone(),
        seed: args.seed,
        step: 0,
    };
    save_model_checkpoint(&args.out, &meta, &store, None)?;
    write_run_meta(
        &args.out,
        "init",
        &kv(&[
            ("learngene", args.learngene.display().to_string()),
            ("depth", args.depth.to_string()),
            ("dataset", args.dataset.clone()),
            ("data_n", args.data_n.to_string()),
            ("fit_steps", fit.fit_steps.to_string()),
            ("fit_fraction", fit.fit_fraction.to_string()),
            ("fit_lr", fit.learning_rate.to_string()),
            ("keep_factors_frozen", fit.keep_factors_frozen.to_string()),
            ("seed", args.seed.to_string()),
            ("t_diff", args.t_diff.to_string()),
        ]),
    )?;
    let counts = model.param_counts(&store);
    let fit_loss = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    Ok(format!(
        "instantiated depth {} (transferred {} params, {} sigma scalars fitted, last fit loss {:.6}); checkpoint -> {}",
        args.depth,
        counts.transferred,
        counts.trainable_at_init,
        fit_loss,
        args.out.display()
    ))
}

// ---- train -----------------------------------------------------------------------

pub struct TrainArgs {
    pub from: PathBuf,
    pub steps: u64,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub dataset: Option<String>,
    pub data_n: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn new(from: PathBuf, steps: u64, out: PathBuf) -> Self {
        TrainArgs {
            from,
            steps,
            out,
            log: None,
            dataset: None,
            data_n: DEFAULT_DATASET_N,
            batch: 8,
            lr: 1e-4,
            seed: None,
        }
    }
}

/// Standard training with EMA, resuming from a checkpoint.
pub fn run_train(args: &TrainArgs) -> Result<String> {
    let loaded = load_model_checkpoint(&args.from)?;
    let dataset_name = args.dataset.clone().unwrap_or_else(|| loaded.meta.dataset.clone());
    if dataset_name.is_empty() {
        return Err(Error::Config("checkpoint carries no dataset; pass --dataset".into()));
    }
    let seed = args.seed.unwrap_or(loaded.meta.seed);
    let dataset = dataset_for(&dataset_name, args.data_n, loaded.meta.model.image_size, seed)?;
    let sched = DiffusionSchedule::linear(loaded.meta.t_diff);
    let mut store = loaded.store;
    let mut ema = loaded.ema.unwrap_or_else(|| EmaModel::new(&store, EMA_DECAY));
    let loop_cfg = TrainLoopCfg {
        steps: args.steps,
        batch: args.batch,
        lr: args.lr,
        weight_decay: 0.0,
        stream_seed: DeskRng::seed_from(seed).derive_str("train-stream").next_u64(),
        loss_seed: DeskRng::seed_from(seed).derive_str("train-loss").next_u64(),
        log_every: 0,
    };
    let curve = train_loop(&loaded.model, &mut store, &dataset, &sched, &loop_cfg, Some(&mut ema), None)?;
    let meta = CheckpointMeta {
        model: loaded.meta.model,
        t_diff: loaded.meta.t_diff,
        dataset: dataset_name.clone(),
        seed,
        step: loaded.meta.step + args.steps,
    };
    save_model_checkpoint(&args.out, &meta, &store, Some(&ema))?;
    let entries = kv(&[
        ("from", args.from.display().to_string()),
        ("steps", args.steps.to_string()),
        ("dataset", dataset_name.clone()),
        ("batch", args.batch.to_string()),
        ("lr", args.lr.to_string()),
        ("seed", seed.to_string()),
    ]);
    write_run_meta(&args.out, "train", &entries)?;
    if let Some(log) = &args.log {
        let mut text = String::from("step,loss\n");
        for (step, loss) in &curve {
            text.push_str(&format!("{step},{loss}\n"));
        }
        crate::io::atomic_write(log, text.as_bytes())?;
        write_run_meta(log, "train", &entries)?;
    }
    let final_loss = curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps on {} (final loss {:.6}); checkpoint -> {}",
        args.steps,
        dataset_name,
        final_loss,
        args.out.display()
    ))
}

// ---- sample -----------------------------------------------------------------------

pub struct SampleArgs {
    pub from: PathBuf,
    pub n: usize,
    pub out: PathBuf,
    pub use_ema: bool,
    pub class_id: Option<usize>,
    pub seed: u64,
}

pub fn run_sample(args: &SampleArgs) -> Result<String> {
    let loaded = load_model_checkpoint(&args.from)?;
    let store = if args.use_ema {
        let ema = loaded.ema.as_ref().ok_or_else(|| {
            Error::Format(crate::io::FormatError::MissingTensor {
                path: args.from.display().to_string(),
                name: "ema.*".into(),
            })
        })?;
        ema.apply_to(&loaded.store)?
    } else {
        loaded.store.clone()
    };
    let sched = DiffusionSchedule::linear(loaded.meta.t_diff);
    let rng = DeskRng::seed_from(args.seed).derive_str("sample");
    let images = sample_chunked(&loaded.model, &store, &sched, args.n, args.class_id, &rng, 64)?;
    write_imgr(&args.out, &images)?;
    write_run_meta(
        &args.out,
        "sample",
        &kv(&[
            ("from", args.from.display().to_string()),
            ("n", args.n.to_string()),
            ("ema", args.use_ema.to_string()),
            ("class_id", args.class_id.map(|c| c.to_string()).unwrap_or_default()),
            ("seed", args.seed.to_string()),
        ]),
    )?;
    Ok(format!("sampled {} images -> {}", args.n, args.out.display()))
}

// ---- bench -----------------------------------------------------------------------

pub struct BenchArgs {
    pub recipes: Vec<String>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub data_n: usize,
    pub steps: u64,
    pub batch: usize,
    pub t_diff: usize,
    pub eval_samples: usize,
    pub learngene: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub svd_rank: Option<usize>,
    pub fit_steps: u64,
    pub out: PathBuf,
    pub data_seed: u64,
}

impl BenchArgs {
    pub fn new(recipes: Vec<String>, depths: Vec<usize>, seeds: Vec<u64>, out: PathBuf) -> Self {
        BenchArgs {
            recipes,
            depths,
            seeds,
            dataset: "shapes-A".into(),
            data_n: DEFAULT_DATASET_N,
            steps: 6000,
            batch: 8,
            t_diff: 100,
            eval_samples: 1024,
            learngene: None,
            source: None,
            svd_rank: None,
            fit_steps: 300,
            out,
            data_seed: 0,
        }
    }
}

/// Assemble recipes from CLI-ish arguments and run the benchmark grid.
/// Writes the summary CSV to `out`, curves to `<out>.curves.csv`, and a
/// markdown report to `<out>.md`.
pub fn run_bench(args: &BenchArgs) -> Result<String> {
    let learngene = args.learngene.as_deref().map(load_learngene).transpose()?;
    let source_loaded = args.source.as_deref().map(load_model_checkpoint).transpose()?;

    // Base model geometry: learngene metadata wins, then the source model,
    // then the desk default width 64.
    let base_model = if let Some(lg) = &learngene {
        DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            width: lg.meta.width,
            hidden: lg.meta.hidden,
            heads: 4,
            depth: args.depths[0],
            num_classes: 2,
            backing: Backing::Plain,
        }
    } else if let Some(src) = &source_loaded {
        DiTConfig { backing: Backing::Plain, ..src.meta.model }
    } else {
        DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            width: 64,
            hidden: 256,
            heads: 4,
            depth: args.depths[0],
            num_classes: 2,
            backing: Backing::Plain,
        }
    };

    let mut recipes = Vec::new();
    for name in &args.recipes {
        match name.as_str() {
            "he" => recipes.push(InitRecipe::HeRandom),
            "share" => {
                let src = source_loaded
                    .as_ref()
                    .ok_or_else(|| Error::Config("recipe `share` needs --source <checkpoint>".into()))?;
                recipes.push(InitRecipe::ShareInit {
                    source: Box::new(SourceCheckpoint {
                        model: src.model.clone(),
                        store: src.store.clone(),
                    }),
                });
            }
            "svd" => {
                let src = source_loaded
                    .as_ref()
                    .ok_or_else(|| Error::Config("recipe `svd` needs --source <checkpoint>".into()))?;
                let rank = match (args.svd_rank, &learngene) {
                    (Some(r), _) => r,
                    (None, Some(lg)) => matched_svd_rank(
                        lg.transferred_params(),
                        args.depths[0],
                        src.meta.model.width,
                        src.meta.model.hidden,
                    ),
                    (None, None) => {
                        return Err(Error::Config(
                            "recipe `svd` needs --svd-rank or --learngene for budget matching".into(),
                        ))
                    }
                };
                recipes.push(InitRecipe::SvdTransfer {
                    source: Box::new(SourceCheckpoint {
                        model: src.model.clone(),
                        store: src.store.clone(),
                    }),
                    rank,
                });
            }
            "fine" => {
                let lg = learngene
                    .clone()
                    .ok_or_else(|| Error::Config("recipe `fine` needs --learngene <file>".into()))?;
                recipes.push(InitRecipe::Fine {
                    learngene: lg,
                    fit: SigmaFitConfig { fit_steps: args.fit_steps, ..Default::default() },
                });
            }
            other => return Err(Error::Config(format!("unknown recipe {other:?}"))),
        }
    }

    let dataset = dataset_for(&args.dataset, args.data_n, base_model.image_size, args.data_seed)?;
    let target = if args.recipes.iter().any(|r| r == "he") {
        TargetRule::RelativeToHe { factor: 1.05 }
    } else {
        TargetRule::None
    };
    let cfg = BenchConfig {
        base_model,
        depths: args.depths.clone(),
        seeds: args.seeds.clone(),
        train_steps: args.steps,
        batch: args.batch,
        lr: 1e-4,
        t_diff: args.t_diff,
        eval_samples: args.eval_samples,
        target,
        ma_window: 100,
    };
    let results = run_benchmark(&cfg, &recipes, &dataset)?;

    crate::io::atomic_write(&args.out, summary_csv(&results).as_bytes())?;
    let curves_path = args.out.with_extension("curves.csv");
    crate::io::atomic_write(&curves_path, curves_csv(&results).as_bytes())?;
    let report_path = args.out.with_extension("md");
    crate::io::atomic_write(&report_path, aggregate_report(&results).as_bytes())?;
    write_run_meta(
        &args.out,
        "bench",
        &kv(&[
            ("recipes", args.recipes.join(",")),
            ("depths", args.depths.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")),
            ("seeds", args.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("dataset", args.dataset.clone()),
            ("data_n", args.data_n.to_string()),
            ("steps", args.steps.to_string()),
            ("batch", args.batch.to_string()),
            ("t_diff", args.t_diff.to_string()),
            ("eval_samples", args.eval_samples.to_string()),
            ("data_seed", args.data_seed.to_string()),
        ]),
    )?;
    let failures = results.iter().filter(|r| r.error.is_some()).count();
    Ok(format!(
        "benchmark complete: {} runs ({} failed); summary -> {}, curves -> {}, report -> {}",
        results.len(),
        failures,
        args.out.display(),
        curves_path.display(),
        report_path.display()
    ))
}

pub fn run_inspect(path: &Path) -> Result<String> {
    crate::io::inspect(path)
}
