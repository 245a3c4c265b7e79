//! Training phases: condensation of shared factors, depth-flexible
//! instantiation with sigma-only fitting, baseline initializers, and the
//! shared AdamW training loop with EMA.

use serde::{Deserialize, Serialize};

use crate::data::{batch_stream, DeskDataset};
use crate::diffusion::{ddpm_loss, DiffusionSchedule, EmaModel, EMA_DECAY};
use crate::factorized::{extract_learngene, FamilyKind, Learngene, FAMILY_KINDS};
use crate::model::{Backing, DiTConfig, DiTModel};
use crate::params::{ParamStore, TapeBind};
use crate::rng::DeskRng;
use crate::{Elem, Error, GradTape, Result, Tensor};

// ---- optimizer ---------------------------------------------------------------

/// AdamW with decoupled weight decay. Parameters whose `requires_grad` flag is
/// off, or which received no gradient, are skipped.
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: crate::scalar::Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let one_m_b1 = S::one() - b1;
        let one_m_b2 = S::one() - b2;
        let lr = S::from_f64_lossy(self.lr);
        let eps = S::from_f64_lossy(self.eps);
        let wd = S::from_f64_lossy(self.weight_decay);
        let inv_bc1 = S::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);

        let ids: Vec<_> = store.ids().collect();
        if self.m.len() < ids.len() {
            self.m.resize(ids.len(), Vec::new());
            self.v.resize(ids.len(), Vec::new());
        }
        for id in ids {
            let tensor = store.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.as_ref() else { continue };
            let slot = id.0;
            if self.m[slot].is_empty() {
                self.m[slot] = vec![S::zero(); grad.len()];
                self.v[slot] = vec![S::zero(); grad.len()];
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                let p = tensor.data[i];
                tensor.data[i] = p - lr * (mhat / (vhat.sqrt() + eps) + wd * p);
            }
        }
    }
}

// ---- configuration ------------------------------------------------------------

fn default_n_samples() -> usize {
    2048
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_log_every() -> u64 {
    50
}
fn default_t_diff() -> usize {
    crate::diffusion::DEFAULT_T_DIFF
}
fn default_fit_steps() -> u64 {
    300
}
fn default_fit_fraction() -> f64 {
    0.01
}
fn default_fit_lr() -> f64 {
    1e-2
}

/// Auxiliary-model condensation run configuration. The learning rate stays
/// constant across steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondenseConfig {
    pub dataset: String,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_t_diff")]
    pub t_diff: usize,
    pub model: DiTConfig,
}

/// Sigma-only downstream fit configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaFitConfig {
    #[serde(default = "default_fit_steps")]
    pub fit_steps: u64,
    /// Fraction of the target dataset used, floored at 64 samples.
    #[serde(default = "default_fit_fraction")]
    pub fit_fraction: f64,
    #[serde(default = "default_fit_lr")]
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep `U`, `V` frozen after the fit (ablation mode); by default they
    /// unfreeze so downstream training is fully standard.
    #[serde(default)]
    pub keep_factors_frozen: bool,
}

impl Default for SigmaFitConfig {
    fn default() -> Self {
        SigmaFitConfig {
            fit_steps: default_fit_steps(),
            fit_fraction: default_fit_fraction(),
            learning_rate: default_fit_lr(),
            seed: 0,
            keep_factors_frozen: false,
        }
    }
}

/// One way to initialize a model before downstream training.
pub enum InitRecipe {
    HeRandom,
    ShareInit { source: Box<SourceCheckpoint> },
    SvdTransfer { source: Box<SourceCheckpoint>, rank: usize },
    Fine { learngene: Learngene<Elem>, fit: SigmaFitConfig },
}

impl InitRecipe {
    pub fn id(&self) -> &'static str {
        match self {
            InitRecipe::HeRandom => "he",
            InitRecipe::ShareInit { .. } => "share",
            InitRecipe::SvdTransfer { .. } => "svd",
            InitRecipe::Fine { .. } => "fine",
        }
    }
}

/// A loaded model checkpoint usable as a transfer source.
pub struct SourceCheckpoint {
    pub model: DiTModel<Elem>,
    pub store: ParamStore<Elem>,
}

// ---- shared training loop -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainLoopCfg {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Data order stream; shared across recipes for benchmark fairness.
    pub stream_seed: u64,
    /// Timestep/noise/dropout draws.
    pub loss_seed: u64,
    pub log_every: u64,
}

/// Observer invoked after each optimizer step (checkpoint hooks, constraint
/// monitors in tests).
pub type StepObserver<'a> = &'a mut dyn FnMut(u64, &DiTModel<Elem>, &ParamStore<Elem>) -> Result<()>;

/// Run `steps` of diffusion training. Returns the per-step loss curve and
/// keeps `ema` updated when provided. Aborts with a divergence error when the
/// loss stops being finite.
pub fn train_loop(
    model: &DiTModel<Elem>,
    store: &mut ParamStore<Elem>,
    dataset: &DeskDataset<Elem>,
    sched: &DiffusionSchedule<Elem>,
    cfg: &TrainLoopCfg,
    mut ema: Option<&mut EmaModel<Elem>>,
    mut observer: Option<StepObserver>,
) -> Result<Vec<(u64, f64)>> {
    let mut stream = batch_stream(dataset, cfg.batch, cfg.stream_seed);
    let loss_rng = DeskRng::seed_from(cfg.loss_seed).derive_str("ddpm-loss");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut last_finite = f64::NAN;
    let img_len = dataset.channels * dataset.image_size * dataset.image_size;

    for step in 0..cfg.steps {
        let (images, labels) = stream.next_batch();
        let b = images.shape[0];
        let mut imgs = Vec::with_capacity(b);
        for i in 0..b {
            imgs.push(
                Tensor::new(
                    vec![dataset.channels, dataset.image_size, dataset.image_size],
                    images.data[i * img_len..(i + 1) * img_len].to_vec(),
                )
                .expect("image slice"),
            );
        }
        let img_refs: Vec<&Tensor> = imgs.iter().collect();
        let classes: Vec<Option<usize>> = labels
            .iter()
            .map(|&l| if model.cfg.num_classes > 0 && dataset.num_classes > 0 { Some(l) } else { None })
            .collect();

        let mut step_rng = loss_rng.derive(step);
        let mut tape = GradTape::new();
        let mut bind = TapeBind::new(store);
        let loss_var = ddpm_loss(model, store, &mut tape, &mut bind, &img_refs, &classes, sched, &mut step_rng)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step, last_finite_loss: last_finite });
        }
        last_finite = loss;
        tape.backward(loss_var)?;
        bind.absorb_grads(&tape, store);
        opt.step(store);
        store.zero_grads();
        if let Some(e) = ema.as_deref_mut() {
            e.update(store)?;
        }
        curve.push((step, loss));
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            println!("step {step} loss {loss:.6}");
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(step, model, store)?;
        }
    }
    Ok(curve)
}

/// Mean diffusion loss over a fixed evaluation slice with pinned timesteps
/// and noise; used for paired before/after comparisons.
pub fn eval_loss_pinned(
    model: &DiTModel<Elem>,
    store: &ParamStore<Elem>,
    dataset: &DeskDataset<Elem>,
    sched: &DiffusionSchedule<Elem>,
    n_eval: usize,
    seed: u64,
) -> Result<f64> {
    let n = n_eval.min(dataset.n);
    if n == 0 {
        return Err(Error::Contract("empty evaluation slice".into()));
    }
    let mut rng = DeskRng::seed_from(seed).derive_str("eval-loss");
    let mut acc = 0.0;
    let batch = 16.min(n);
    let mut i = 0;
    while i < n {
        let take = batch.min(n - i);
        let mut imgs = Vec::with_capacity(take);
        let mut ts = Vec::with_capacity(take);
        let mut noises = Vec::with_capacity(take);
        let mut rows = Vec::with_capacity(take);
        for j in 0..take {
            let img = dataset.image(i + j);
            let t = rng.next_below(sched.t_diff);
            let mut eps = Tensor::zeros(&img.shape);
            rng.fill_gaussian(&mut eps.data, 1.0);
            let row = match dataset.class_of(i + j) {
                Some(c) if model.cfg.num_classes > 0 => c,
                _ => model.cfg.num_classes,
            };
            imgs.push(img);
            ts.push(t);
            noises.push(eps);
            rows.push(row);
        }
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = GradTape::inference();
        let mut bind = TapeBind::new(store);
        let loss = crate::diffusion::ddpm_loss_pinned(
            model, store, &mut tape, &mut bind, &refs, &ts, &noises, &rows, sched,
        )?;
        acc += tape.value(loss)[0] * take as f64;
        i += take;
    }
    Ok(acc / n as f64)
}

// ---- condensation ----------------------------------------------------------------

pub struct CondenseOutcome {
    pub model: DiTModel<Elem>,
    pub store: ParamStore<Elem>,
    pub ema: EmaModel<Elem>,
    pub learngene: Learngene<Elem>,
    pub curve: Vec<(u64, f64)>,
}

/// Train the auxiliary factorized model and extract the learngene. All
/// parameters train jointly; the factorization constraint holds by
/// construction because block weights only exist as materializations.
pub fn condense(
    cfg: &CondenseConfig,
    dataset: &DeskDataset<Elem>,
    observer: Option<StepObserver>,
) -> Result<CondenseOutcome> {
    let model_cfg = cfg.model.normalized()?;
    if !matches!(model_cfg.backing, Backing::Factorized { .. }) {
        return Err(Error::Config("condense requires factorized backing".into()));
    }
    let rng = DeskRng::seed_from(cfg.seed).derive_str("condense-init");
    let mut store = ParamStore::new();
    let model = DiTModel::new(model_cfg, &mut store, &rng)?;
    let sched = DiffusionSchedule::linear(cfg.t_diff);
    let mut ema = EmaModel::new(&store, EMA_DECAY);
    let loop_cfg = TrainLoopCfg {
        steps: cfg.steps,
        batch: cfg.batch_size,
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        stream_seed: cfg.seed,
        loss_seed: cfg.seed,
        log_every: cfg.log_every,
    };
    let curve = train_loop(&model, &mut store, dataset, &sched, &loop_cfg, Some(&mut ema), observer)?;
    let learngene = extract_learngene(
        &model.families,
        &store,
        cfg.steps,
        cfg.seed,
        model_cfg.width,
        model_cfg.hidden,
    )?;
    Ok(CondenseOutcome { model, store, ema, learngene, curve })
}

// ---- instantiation and sigma fit ----------------------------------------------------

/// Build a factorized model of the requested depth from a learngene. The
/// shared factors load frozen; sigmas draw fresh from `N(0, 1/r)`; biases are
/// zero, norms unit, embeddings fresh.
pub fn instantiate(
    learngene: &Learngene<Elem>,
    depth: usize,
    base_cfg: &DiTConfig,
    seed: u64,
) -> Result<(DiTModel<Elem>, ParamStore<Elem>)> {
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    let cfg = DiTConfig { depth, ..*base_cfg };
    let rng = DeskRng::seed_from(seed).derive_str("instantiate");
    let mut store = ParamStore::new();
    let model = DiTModel::from_learngene(cfg, &mut store, &rng, learngene)?;
    Ok((model, store))
}

/// Optimize only the grouped sigma values on a small slice of target data.
/// Everything else is byte-identical afterwards; `U`, `V` unfreeze on return
/// unless the config keeps them frozen.
pub fn sigma_fit(
    model: &DiTModel<Elem>,
    store: &mut ParamStore<Elem>,
    fit: &SigmaFitConfig,
    target: &DeskDataset<Elem>,
    sched: &DiffusionSchedule<Elem>,
) -> Result<Vec<(u64, f64)>> {
    if target.n == 0 {
        return Err(Error::Contract("sigma_fit needs non-empty target data".into()));
    }
    if model.families.is_empty() {
        return Err(Error::Contract("sigma_fit requires a factorized model".into()));
    }
    // Freeze everything except the sigmas.
    store.set_requires_grad_all(false);
    for id in model.sigma_ids() {
        store.get_mut(id).requires_grad = true;
    }

    let want = ((target.n as f64 * fit.fit_fraction).ceil() as usize).max(64).min(target.n);
    let mut indices: Vec<usize> = (0..target.n).collect();
    DeskRng::seed_from(fit.seed).derive_str("sigma-fit-subset").shuffle(&mut indices);
    indices.truncate(want);
    indices.sort_unstable();
    let subset = target.subset(&indices);

    let loop_cfg = TrainLoopCfg {
        steps: fit.fit_steps,
        batch: 16.min(subset.n),
        lr: fit.learning_rate,
        weight_decay: 0.0,
        stream_seed: fit.seed,
        loss_seed: fit.seed,
        log_every: 0,
    };
    let curve = train_loop(model, store, &subset, sched, &loop_cfg, None, None)?;

    // Back to standard training: everything trainable, factors per config.
    store.set_requires_grad_all(true);
    model.set_factors_frozen(store, fit.keep_factors_frozen);
    Ok(curve)
}

// ---- baseline initializers -------------------------------------------------------------

/// Plain backing with fan-in scaled Gaussian weights and zero biases.
pub fn he_random_init(cfg: &DiTConfig, seed: u64) -> Result<(DiTModel<Elem>, ParamStore<Elem>)> {
    let cfg = DiTConfig { backing: Backing::Plain, ..*cfg }.normalized()?;
    let rng = DeskRng::seed_from(seed).derive_str("he-init");
    let mut store = ParamStore::new();
    let model = DiTModel::new(cfg, &mut store, &rng)?;
    Ok((model, store))
}

fn copy_by_name(dst_store: &mut ParamStore<Elem>, dst_name: &str, src: &Tensor) -> Result<()> {
    let id = dst_store
        .id(dst_name)
        .ok_or_else(|| Error::Contract(format!("target parameter {dst_name} missing")))?;
    let t = dst_store.get_mut(id);
    if t.shape != src.shape {
        return Err(Error::Contract(format!(
            "parameter {dst_name} has shape {:?}, source has {:?}",
            t.shape, src.shape
        )));
    }
    t.data = src.data.clone();
    Ok(())
}

fn source_block_weight(src: &SourceCheckpoint, layer: usize, kind: FamilyKind) -> Result<Tensor> {
    src.model.block_weight(&src.store, layer, kind)
}

fn source_shared_names() -> [&'static str; 10] {
    ["embed.w", "embed.b", "pos", "temb.w", "temb.b", "cls", "final.g", "final.b", "head.w", "head.b"]
}

/// Fill a deeper (or shallower) model by cycling the source blocks in order;
/// embeddings and head are copied as-is.
pub fn share_init(source: &SourceCheckpoint, depth: usize) -> Result<(DiTModel<Elem>, ParamStore<Elem>)> {
    let src_cfg = source.model.cfg;
    let cfg = DiTConfig { depth, backing: Backing::Plain, ..src_cfg }.normalized()?;
    let rng = DeskRng::seed_from(0).derive_str("share-init");
    let mut store = ParamStore::new();
    let model = DiTModel::new(cfg, &mut store, &rng)?;

    for name in source_shared_names() {
        let src_id = source
            .store
            .id(name)
            .ok_or_else(|| Error::Contract(format!("source missing {name}")))?;
        copy_by_name(&mut store, name, source.store.get(src_id))?;
    }
    let l_src = src_cfg.depth;
    for l in 0..depth {
        let s = l % l_src;
        for kind in FAMILY_KINDS {
            let w = source_block_weight(source, s, kind)?;
            copy_by_name(&mut store, &format!("blk{l}.{}.w", kind.tag()), &w)?;
        }
        for part in ["ln1.g", "ln1.b", "qkv.b", "o.b", "ln2.g", "ln2.b", "in.b", "out.b"] {
            let src_id = source
                .store
                .id(&format!("blk{s}.{part}"))
                .ok_or_else(|| Error::Contract(format!("source missing blk{s}.{part}")))?;
            copy_by_name(&mut store, &format!("blk{l}.{part}"), source.store.get(src_id))?;
        }
    }
    Ok((model, store))
}

/// Replace each of the first `depth` source blocks' weights by their rank-r
/// truncated SVD reconstruction, computed per layer with no sharing.
pub fn svd_transfer_init(
    source: &SourceCheckpoint,
    depth: usize,
    rank: usize,
) -> Result<(DiTModel<Elem>, ParamStore<Elem>)> {
    let src_cfg = source.model.cfg;
    if depth > src_cfg.depth {
        return Err(Error::Config(format!(
            "svd transfer needs source depth >= target depth ({} < {depth})",
            src_cfg.depth
        )));
    }
    crate::factorized::validate_factorization(src_cfg.width, src_cfg.hidden, rank, 1)?;
    let cfg = DiTConfig { depth, backing: Backing::Plain, ..src_cfg }.normalized()?;
    let rng = DeskRng::seed_from(0).derive_str("svd-init");
    let mut store = ParamStore::new();
    let model = DiTModel::new(cfg, &mut store, &rng)?;

    for name in source_shared_names() {
        let src_id = source
            .store
            .id(name)
            .ok_or_else(|| Error::Contract(format!("source missing {name}")))?;
        copy_by_name(&mut store, name, source.store.get(src_id))?;
    }
    for l in 0..depth {
        for kind in FAMILY_KINDS {
            let w = source_block_weight(source, l, kind)?;
            let (m1, m2) = (w.shape[0], w.shape[1]);
            let recon = truncated_svd_reconstruction(&w.data, m1, m2, rank);
            copy_by_name(
                &mut store,
                &format!("blk{l}.{}.w", kind.tag()),
                &Tensor::new(vec![m1, m2], recon).expect("svd shape"),
            )?;
        }
        for part in ["ln1.g", "ln1.b", "qkv.b", "o.b", "ln2.g", "ln2.b", "in.b", "out.b"] {
            let src_id = source
                .store
                .id(&format!("blk{l}.{part}"))
                .ok_or_else(|| Error::Contract(format!("source missing blk{l}.{part}")))?;
            copy_by_name(&mut store, &format!("blk{l}.{part}"), source.store.get(src_id))?;
        }
    }
    Ok((model, store))
}

/// Per-layer transferred parameter count of the SVD baseline:
/// `depth * sum_families rank * (m1 + m2 + 1)`.
pub fn svd_transfer_param_count(depth: usize, width: usize, hidden: usize, rank: usize) -> u64 {
    let per_layer: u64 = FAMILY_KINDS
        .iter()
        .map(|k| {
            let (m1, m2) = k.matrix_shape(width, hidden);
            (rank * (m1 + m2 + 1)) as u64
        })
        .sum();
    depth as u64 * per_layer
}

/// Rank whose SVD-transfer budget is closest to the given learngene budget.
pub fn matched_svd_rank(fine_transferred: u64, depth: usize, width: usize, hidden: usize) -> usize {
    let mut best = (1usize, u64::MAX);
    let max_rank = FAMILY_KINDS
        .iter()
        .map(|k| {
            let (m1, m2) = k.matrix_shape(width, hidden);
            m1.min(m2)
        })
        .min()
        .unwrap();
    for r in 1..=max_rank {
        let count = svd_transfer_param_count(depth, width, hidden, r);
        let diff = count.abs_diff(fine_transferred);
        if diff < best.1 {
            best = (r, diff);
        }
    }
    best.0
}

// ---- one-sided Jacobi SVD ---------------------------------------------------------------

/// Thin SVD `a = U diag(s) V^T` for a row-major `m x n` matrix, singular
/// values sorted descending. One-sided Jacobi on the thinner side.
pub fn svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let transposed = m < n;
    let (rows, cols, mut b) = if transposed {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = a[i * n + j];
            }
        }
        (n, m, t)
    } else {
        (m, n, a.to_vec())
    };

    // Orthogonalize columns of b, accumulating rotations into v.
    let mut v = vec![0.0; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (bp, bq) = (b[i * cols + p], b[i * cols + q]);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (bp, bq) = (b[i * cols + p], b[i * cols + q]);
                    b[i * cols + p] = c * bp - s * bq;
                    b[i * cols + q] = s * bp + c * bq;
                }
                for i in 0..cols {
                    let (vp, vq) = (v[i * cols + p], v[i * cols + q]);
                    v[i * cols + p] = c * vp - s * vq;
                    v[i * cols + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Extract singular values and left vectors, then sort descending.
    let mut order: Vec<usize> = (0..cols).collect();
    let mut sigma = vec![0.0; cols];
    for j in 0..cols {
        let mut norm = 0.0;
        for i in 0..rows {
            norm += b[i * cols + j] * b[i * cols + j];
        }
        sigma[j] = norm.sqrt();
    }
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap());

    let mut u_sorted = vec![0.0; rows * cols];
    let mut v_sorted = vec![0.0; cols * cols];
    let mut s_sorted = vec![0.0; cols];
    for (new_j, &old_j) in order.iter().enumerate() {
        s_sorted[new_j] = sigma[old_j];
        let inv = if sigma[old_j] > 0.0 { 1.0 / sigma[old_j] } else { 0.0 };
        for i in 0..rows {
            u_sorted[i * cols + new_j] = b[i * cols + old_j] * inv;
        }
        for i in 0..cols {
            v_sorted[i * cols + new_j] = v[i * cols + old_j];
        }
    }

    if transposed {
        (v_sorted, s_sorted, u_sorted)
    } else {
        (u_sorted, s_sorted, v_sorted)
    }
}

/// Best rank-`r` reconstruction `sum_{j<r} s_j u_j v_j^T`.
pub fn truncated_svd_reconstruction(a: &[f64], m: usize, n: usize, rank: usize) -> Vec<f64> {
    let k = m.min(n);
    let r = rank.min(k);
    let (u, s, v) = svd(a, m, n);
    let mut out = vec![0.0; m * n];
    for j in 0..r {
        let sj = s[j];
        for i in 0..m {
            let uij = u[i * k + j] * sj;
            for l in 0..n {
                out[i * n + l] += uij * v[l * k + j];
            }
        }
    }
    out
}
