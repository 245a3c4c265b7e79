//! Convergence benchmark harness: run a grid of `(recipe, depth, seed)`
//! initializations under identical data streams, record loss curves and
//! steps-to-target, and score end-of-run samples with the Frechet surrogate.

use crate::data::DeskDataset;
use crate::diffusion::{sample_chunked, DiffusionSchedule, EmaModel, EMA_DECAY};
use crate::metrics::{feature_stats, frechet_distance, GaussianStats, Projection, FEATURE_PROJECTION_SEED};
use crate::model::DiTConfig;
use crate::rng::DeskRng;
use crate::tensor::Tensor;
use crate::train::{
    he_random_init, instantiate, share_init, sigma_fit, svd_transfer_init, svd_transfer_param_count,
    train_loop, InitRecipe, TrainLoopCfg,
};
use crate::{Elem, Error, Result};

/// How the loss target for steps-to-target is chosen.
#[derive(Clone, Copy, Debug)]
pub enum TargetRule {
    /// No target; steps_to_target stays empty.
    None,
    /// Fixed loss value.
    FixedLoss(f64),
    /// `factor` times the best moving-average loss any `he` run reaches at
    /// the same depth over the full budget.
    RelativeToHe { factor: f64 },
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub base_model: DiTConfig,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train_steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub t_diff: usize,
    /// Sample count for the end-of-run Frechet surrogate.
    pub eval_samples: usize,
    pub target: TargetRule,
    /// Moving-average window for steps_to_target.
    pub ma_window: usize,
}

impl BenchConfig {
    pub fn desk_default(base_model: DiTConfig) -> Self {
        BenchConfig {
            base_model,
            depths: vec![6],
            seeds: vec![0, 1, 2],
            train_steps: 6000,
            batch: 8,
            lr: 1e-4,
            t_diff: 100,
            eval_samples: 1024,
            target: TargetRule::RelativeToHe { factor: 1.05 },
            ma_window: 100,
        }
    }
}

/// Outcome of one benchmark run.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub recipe: String,
    pub depth: usize,
    pub seed: u64,
    /// Data-order seed, shared by every recipe at this seed.
    pub stream_seed: u64,
    pub steps_to_target: Option<u64>,
    pub target_loss: Option<f64>,
    pub curve: Vec<(u64, f64)>,
    pub frechet_end: Option<f64>,
    pub params_transferred: u64,
    /// Populated when the recipe was incompatible with this configuration;
    /// the run is recorded and the benchmark continues.
    pub error: Option<String>,
}

/// Trailing moving average of a loss curve; entry `i` averages the window
/// ending at step `i` and exists once a full window is available.
pub fn moving_average(curve: &[(u64, f64)], window: usize) -> Vec<(u64, f64)> {
    if curve.len() < window || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(curve.len() - window + 1);
    let mut acc: f64 = curve[..window].iter().map(|(_, l)| l).sum();
    out.push((curve[window - 1].0, acc / window as f64));
    for i in window..curve.len() {
        acc += curve[i].1 - curve[i - window].1;
        out.push((curve[i].0, acc / window as f64));
    }
    out
}

/// First step whose trailing moving average is at or below `target`.
pub fn steps_to_target(curve: &[(u64, f64)], window: usize, target: f64) -> Option<u64> {
    moving_average(curve, window).into_iter().find(|(_, ma)| *ma <= target).map(|(s, _)| s)
}

/// Best (lowest) trailing moving average over the run.
pub fn best_moving_average(curve: &[(u64, f64)], window: usize) -> Option<f64> {
    moving_average(curve, window).into_iter().map(|(_, ma)| ma).fold(None, |best, ma| match best {
        None => Some(ma),
        Some(b) => Some(b.min(ma)),
    })
}

fn initialize_run(
    recipe: &InitRecipe,
    depth: usize,
    cfg: &BenchConfig,
    seed: u64,
    dataset: &DeskDataset<Elem>,
    sched: &DiffusionSchedule<Elem>,
) -> Result<(crate::DiTModel, crate::ParamStore, u64)> {
    match recipe {
        InitRecipe::HeRandom => {
            let dcfg = DiTConfig { depth, ..cfg.base_model };
            let (model, store) = he_random_init(&dcfg, seed)?;
            Ok((model, store, 0))
        }
        InitRecipe::ShareInit { source } => {
            let (model, store) = share_init(source, depth)?;
            let transferred = store.total_params();
            Ok((model, store, transferred))
        }
        InitRecipe::SvdTransfer { source, rank } => {
            let (model, store) = svd_transfer_init(source, depth, *rank)?;
            let m = &source.model.cfg;
            Ok((model, store, svd_transfer_param_count(depth, m.width, m.hidden, *rank)))
        }
        InitRecipe::Fine { learngene, fit } => {
            let (model, mut store) = instantiate(learngene, depth, &cfg.base_model, seed)?;
            let mut fit_run = fit.clone();
            fit_run.seed = seed;
            sigma_fit(&model, &mut store, &fit_run, dataset, sched)?;
            let transferred = learngene.transferred_params();
            Ok((model, store, transferred))
        }
    }
}

/// Run the full grid. Every recipe at a given seed consumes the identical
/// data stream and per-step noise draws; runs execute in a fixed order and
/// all randomness is derived, so the result list is deterministic.
pub fn run_benchmark(
    cfg: &BenchConfig,
    recipes: &[InitRecipe],
    dataset: &DeskDataset<Elem>,
) -> Result<Vec<BenchResult>> {
    let sched = DiffusionSchedule::linear(cfg.t_diff);
    let flat_dim = dataset.channels * dataset.image_size * dataset.image_size;
    let proj_dim = crate::metrics::PROJECTION_DIM.min(flat_dim);
    let projection = Projection::seeded(flat_dim, proj_dim, FEATURE_PROJECTION_SEED)?;
    let reference = reference_stats(dataset, &projection)?;

    let mut results = Vec::new();
    for recipe in recipes {
        for &depth in &cfg.depths {
            for &seed in &cfg.seeds {
                let stream_seed = seed;
                let mut result = BenchResult {
                    recipe: recipe.id().to_string(),
                    depth,
                    seed,
                    stream_seed,
                    steps_to_target: None,
                    target_loss: None,
                    curve: Vec::new(),
                    frechet_end: None,
                    params_transferred: 0,
                    error: None,
                };
                match run_one(recipe, depth, seed, stream_seed, cfg, dataset, &sched, &projection, &reference) {
                    Ok((curve, frechet, transferred)) => {
                        result.curve = curve;
                        result.frechet_end = Some(frechet);
                        result.params_transferred = transferred;
                    }
                    Err(e) => result.error = Some(e.to_string()),
                }
                results.push(result);
            }
        }
    }

    // Resolve targets after all runs so the he baseline is available. Runs
    // shorter than the moving-average window fall back to a window of their
    // own length.
    let window = cfg.ma_window.min(cfg.train_steps as usize).max(1);
    match cfg.target {
        TargetRule::None => {}
        TargetRule::FixedLoss(t) => {
            for r in results.iter_mut().filter(|r| r.error.is_none()) {
                r.target_loss = Some(t);
                r.steps_to_target = steps_to_target(&r.curve, window, t);
            }
        }
        TargetRule::RelativeToHe { factor } => {
            for &depth in &cfg.depths {
                let best_he = results
                    .iter()
                    .filter(|r| r.recipe == "he" && r.depth == depth && r.error.is_none())
                    .filter_map(|r| best_moving_average(&r.curve, window))
                    .fold(None::<f64>, |best, ma| Some(best.map_or(ma, |b| b.min(ma))));
                let Some(best_he) = best_he else {
                    return Err(Error::Config(format!(
                        "relative target needs an `he` run at depth {depth}"
                    )));
                };
                let t = best_he * factor;
                for r in results.iter_mut().filter(|r| r.depth == depth && r.error.is_none()) {
                    r.target_loss = Some(t);
                    r.steps_to_target = steps_to_target(&r.curve, window, t);
                }
            }
        }
    }
    Ok(results)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    recipe: &InitRecipe,
    depth: usize,
    seed: u64,
    stream_seed: u64,
    cfg: &BenchConfig,
    dataset: &DeskDataset<Elem>,
    sched: &DiffusionSchedule<Elem>,
    projection: &Projection<Elem>,
    reference: &GaussianStats<Elem>,
) -> Result<(Vec<(u64, f64)>, f64, u64)> {
    let (model, mut store, transferred) = initialize_run(recipe, depth, cfg, seed, dataset, sched)?;
    let mut ema = EmaModel::new(&store, EMA_DECAY);
    let loop_cfg = TrainLoopCfg {
        steps: cfg.train_steps,
        batch: cfg.batch,
        lr: cfg.lr,
        weight_decay: 0.0,
        stream_seed,
        loss_seed: stream_seed,
        log_every: 0,
    };
    let curve = train_loop(&model, &mut store, dataset, sched, &loop_cfg, Some(&mut ema), None)?;

    // End-of-run sample quality on the EMA weights.
    let eval_store = ema.apply_to(&store)?;
    let sample_rng = DeskRng::seed_from(seed).derive_str("bench-sample");
    let samples = sample_chunked(&model, &eval_store, sched, cfg.eval_samples, None, &sample_rng, 128)?;
    let stats = feature_stats(&samples, Some(projection))?;
    let frechet = frechet_distance(&stats, reference)?;
    Ok((curve, frechet, transferred))
}

fn reference_stats(dataset: &DeskDataset<Elem>, projection: &Projection<Elem>) -> Result<GaussianStats<Elem>> {
    let cap = dataset.n.min(2048);
    let sz = dataset.channels * dataset.image_size * dataset.image_size;
    let images = Tensor::new(
        vec![cap, dataset.channels, dataset.image_size, dataset.image_size],
        dataset.images.data[..cap * sz].to_vec(),
    )
    .expect("reference slice");
    feature_stats(&images, Some(projection))
}

// ---- reporting ---------------------------------------------------------------

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Curve CSV: `recipe,depth,seed,step,loss`.
pub fn curves_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("recipe,depth,seed,step,loss\n");
    for r in results {
        for (step, loss) in &r.curve {
            out.push_str(&format!("{},{},{},{},{}\n", r.recipe, r.depth, r.seed, step, loss));
        }
    }
    out
}

/// Summary CSV: `recipe,depth,seed,steps_to_target,frechet,params_transferred`.
/// "Not reached" and failed runs leave their fields empty.
pub fn summary_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("recipe,depth,seed,steps_to_target,frechet,params_transferred\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.recipe,
            r.depth,
            r.seed,
            fmt_opt(&r.steps_to_target),
            fmt_opt(&r.frechet_end),
            r.params_transferred
        ));
    }
    out
}

/// Aggregated rows: one per `(recipe, depth)`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub recipe: String,
    pub depth: usize,
    pub seeds: usize,
    pub mean_steps_to_target: Option<f64>,
    pub sd_steps_to_target: Option<f64>,
    pub reached: usize,
    pub mean_frechet: Option<f64>,
    pub params_transferred: u64,
    pub failures: usize,
}

pub fn aggregate(results: &[BenchResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, usize)> = results.iter().map(|r| (r.recipe.clone(), r.depth)).collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::with_capacity(keys.len());
    for (recipe, depth) in keys {
        let group: Vec<&BenchResult> =
            results.iter().filter(|r| r.recipe == recipe && r.depth == depth).collect();
        let reached: Vec<f64> = group.iter().filter_map(|r| r.steps_to_target.map(|s| s as f64)).collect();
        let (mean_s, sd_s) = mean_sd(&reached);
        let frechets: Vec<f64> = group.iter().filter_map(|r| r.frechet_end).collect();
        let (mean_f, _) = mean_sd(&frechets);
        rows.push(AggregateRow {
            recipe,
            depth,
            seeds: group.len(),
            mean_steps_to_target: mean_s,
            sd_steps_to_target: sd_s,
            reached: reached.len(),
            mean_frechet: mean_f,
            params_transferred: group.iter().map(|r| r.params_transferred).max().unwrap_or(0),
            failures: group.iter().filter(|r| r.error.is_some()).count(),
        });
    }
    rows
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Markdown report with one row per `(recipe, depth)`.
pub fn aggregate_report(results: &[BenchResult]) -> String {
    let rows = aggregate(results);
    let mut out = String::new();
    out.push_str("| recipe | depth | seeds | steps_to_target (mean±sd) | reached | frechet (mean) | params transferred | failures |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let steps = match (r.mean_steps_to_target, r.sd_steps_to_target) {
            (Some(m), Some(s)) => format!("{m:.1}±{s:.1}"),
            _ => "-".to_string(),
        };
        let frechet = r.mean_frechet.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "| {} | {} | {} | {} | {}/{} | {} | {} | {} |\n",
            r.recipe, r.depth, r.seeds, steps, r.reached, r.seeds, frechet, r.params_transferred, r.failures
        ));
    }
    // Per-depth speedup ratios versus the he baseline, when both exist.
    let mut notes = String::new();
    for r in &rows {
        if r.recipe == "he" {
            continue;
        }
        if let (Some(m), Some(he)) = (
            r.mean_steps_to_target,
            rows.iter()
                .find(|h| h.recipe == "he" && h.depth == r.depth)
                .and_then(|h| h.mean_steps_to_target),
        ) {
            if m > 0.0 {
                notes.push_str(&format!(
                    "- speedup of `{}` over `he` at depth {}: {:.2}x\n",
                    r.recipe,
                    r.depth,
                    he / m
                ));
            }
        }
    }
    if !notes.is_empty() {
        out.push('\n');
        out.push_str(&notes);
    }
    out
}

/// Per-seed ratio `steps_to_target(he) / steps_to_target(other)`; the median
/// over seeds is the headline speedup number.
pub fn speedup_ratios(results: &[BenchResult], other: &str, depth: usize) -> Vec<f64> {
    let mut ratios = Vec::new();
    for r in results.iter().filter(|r| r.recipe == other && r.depth == depth) {
        let he = results
            .iter()
            .find(|h| h.recipe == "he" && h.depth == depth && h.seed == r.seed)
            .and_then(|h| h.steps_to_target);
        if let (Some(hs), Some(os)) = (he, r.steps_to_target) {
            ratios.push(hs as f64 / os as f64);
        }
    }
    ratios
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[mid] } else { (xs[mid - 1] + xs[mid]) / 2.0 })
}
