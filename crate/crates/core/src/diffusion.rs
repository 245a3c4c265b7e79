//! DDPM forward noising, the epsilon-prediction training loss, ancestral
//! sampling, and the EMA shadow model.

use crate::model::{patchify, unpatchify, DiTModel};
use crate::params::{ParamStore, TapeBind};
use crate::rng::DeskRng;
use crate::scalar::Scalar;
use crate::tensor::{GradTape, Tensor, Var};
use crate::{Error, Result};

/// Default diffusion step count at desk scale.
pub const DEFAULT_T_DIFF: usize = 400;

/// Probability that the class condition is dropped to the unconditional
/// embedding during training.
pub const CONDITION_DROPOUT: f64 = 0.1;

/// Linear beta tables and their cumulative products.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule<S> {
    pub t_diff: usize,
    pub beta: Vec<S>,
    pub alpha: Vec<S>,
    pub alpha_bar: Vec<S>,
}

impl<S: Scalar> DiffusionSchedule<S> {
    /// Linear betas from 1e-4 to 2e-2 over `t_diff` steps.
    pub fn linear(t_diff: usize) -> Self {
        assert!(t_diff >= 1);
        let (b0, b1) = (1e-4, 2e-2);
        let mut beta = Vec::with_capacity(t_diff);
        for t in 0..t_diff {
            let frac = if t_diff == 1 { 0.0 } else { t as f64 / (t_diff - 1) as f64 };
            beta.push(S::from_f64_lossy(b0 + (b1 - b0) * frac));
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_diff);
        let mut prod = S::one();
        for &a in &alpha {
            prod = prod * a;
            alpha_bar.push(prod);
        }
        DiffusionSchedule { t_diff, beta, alpha, alpha_bar }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < self.t_diff {
            Ok(())
        } else {
            Err(Error::Contract(format!("timestep {t} out of range 0..{}", self.t_diff)))
        }
    }
}

/// Forward noising: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &DiffusionSchedule<S>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if z0.shape != eps.shape {
        return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "q_sample",
            left: z0.shape.clone(),
            right: eps.shape.clone(),
        }));
    }
    let ab = sched.alpha_bar[t];
    let signal = ab.sqrt();
    let noise = (S::one() - ab).sqrt();
    let data: Vec<S> = z0.data.iter().zip(&eps.data).map(|(&z, &e)| signal * z + noise * e).collect();
    Ok(Tensor::new(z0.shape.clone(), data).expect("same shape"))
}

/// Anything that predicts the added noise from `(z_t, t, class row)`.
///
/// The prediction lives in token layout `[batch * T, c * p^2]` (the loss also
/// compares there; patchification is a fixed permutation, so the MSE is the
/// same as in pixel space). Implemented by [`DiTModel`] and by test oracles.
pub trait NoisePredictor<S: Scalar> {
    fn predict_tokens(
        &self,
        store: &ParamStore<S>,
        tape: &mut GradTape<S>,
        bind: &mut TapeBind,
        z_ts: &[&Tensor<S>],
        timesteps: &[usize],
        class_rows: &[usize],
    ) -> Result<Var>;

    /// `(channels, image_size, patch_size)` of the images this predictor consumes.
    fn image_shape(&self) -> (usize, usize, usize);

    /// Class count; the embedding row `num_classes` is the unconditional one.
    fn num_classes(&self) -> usize {
        0
    }
}

impl<S: Scalar> NoisePredictor<S> for DiTModel<S> {
    fn predict_tokens(
        &self,
        store: &ParamStore<S>,
        tape: &mut GradTape<S>,
        bind: &mut TapeBind,
        z_ts: &[&Tensor<S>],
        timesteps: &[usize],
        class_rows: &[usize],
    ) -> Result<Var> {
        self.forward_batch(store, tape, bind, z_ts, timesteps, class_rows)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (self.cfg.channels, self.cfg.image_size, self.cfg.patch_size)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

/// Deterministic diffusion loss with pinned timesteps and noise; the core of
/// [`ddpm_loss`] and of every finite-difference check of it.
pub fn ddpm_loss_pinned<S: Scalar, P: NoisePredictor<S>>(
    predictor: &P,
    store: &ParamStore<S>,
    tape: &mut GradTape<S>,
    bind: &mut TapeBind,
    z0s: &[&Tensor<S>],
    timesteps: &[usize],
    noises: &[Tensor<S>],
    class_rows: &[usize],
    sched: &DiffusionSchedule<S>,
) -> Result<Var> {
    let batch = z0s.len();
    if batch == 0 || timesteps.len() != batch || noises.len() != batch || class_rows.len() != batch {
        return Err(Error::Contract("ddpm_loss batch lengths disagree".into()));
    }
    let (_, _, p) = predictor.image_shape();
    let mut z_ts = Vec::with_capacity(batch);
    let mut target_rows: Vec<S> = Vec::new();
    for i in 0..batch {
        sched.check_t(timesteps[i])?;
        z_ts.push(q_sample(z0s[i], timesteps[i], &noises[i], sched)?);
        target_rows.extend_from_slice(&patchify(&noises[i], p)?.data);
    }
    let z_refs: Vec<&Tensor<S>> = z_ts.iter().collect();
    let pred = predictor.predict_tokens(store, tape, bind, &z_refs, timesteps, class_rows)?;
    let pred_shape = tape.shape(pred).to_vec();
    let target = Tensor::new(pred_shape, target_rows)
        .map_err(|_| Error::Contract("prediction and noise layouts disagree".into()))?;
    let target = tape.constant(&target);
    Ok(tape.mse(pred, target)?)
}

/// Eq.-style diffusion loss: draws `t` uniform in `[0, T)`, unit Gaussian
/// noise, and drops the class condition with probability 0.1.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss<S: Scalar, P: NoisePredictor<S>>(
    predictor: &P,
    store: &ParamStore<S>,
    tape: &mut GradTape<S>,
    bind: &mut TapeBind,
    z0s: &[&Tensor<S>],
    class_ids: &[Option<usize>],
    sched: &DiffusionSchedule<S>,
    rng: &mut DeskRng,
) -> Result<Var> {
    let batch = z0s.len();
    if class_ids.len() != batch {
        return Err(Error::Contract("ddpm_loss batch lengths disagree".into()));
    }
    let k = predictor.num_classes();
    let mut timesteps = Vec::with_capacity(batch);
    let mut noises = Vec::with_capacity(batch);
    let mut rows = Vec::with_capacity(batch);
    for &class in class_ids {
        let t = rng.next_below(sched.t_diff);
        let mut eps = Tensor::zeros(&z0s[0].shape);
        rng.fill_gaussian(&mut eps.data, 1.0);
        let dropped = rng.bernoulli(CONDITION_DROPOUT);
        let row = match class {
            Some(c) if c >= k => {
                return Err(Error::Contract(format!("class id {c} out of range for {k} classes")))
            }
            Some(c) if !dropped => c,
            _ => k,
        };
        timesteps.push(t);
        noises.push(eps);
        rows.push(row);
    }
    ddpm_loss_pinned(predictor, store, tape, bind, z0s, &timesteps, &noises, &rows, sched)
}

/// Ancestral DDPM sampling: `n` images from pure noise down to `z_0`.
///
/// Noise is drawn from a per-image derived stream, so results are identical
/// regardless of how the batch is chunked internally.
pub fn sample<S: Scalar, P: NoisePredictor<S>>(
    predictor: &P,
    store: &ParamStore<S>,
    sched: &DiffusionSchedule<S>,
    n: usize,
    class_id: Option<usize>,
    rng: &DeskRng,
) -> Result<Tensor<S>> {
    sample_chunked(predictor, store, sched, n, class_id, rng, 64)
}

pub fn sample_chunked<S: Scalar, P: NoisePredictor<S>>(
    predictor: &P,
    store: &ParamStore<S>,
    sched: &DiffusionSchedule<S>,
    n: usize,
    class_id: Option<usize>,
    rng: &DeskRng,
    chunk: usize,
) -> Result<Tensor<S>> {
    let (c, h, p) = predictor.image_shape();
    let k = predictor.num_classes();
    let row = match class_id {
        None => k,
        Some(cid) if cid < k => cid,
        Some(cid) => return Err(Error::Contract(format!("class id {cid} out of range for {k} classes"))),
    };
    let mut out = Tensor::zeros(&[n.max(1), c, h, h]);
    if n == 0 {
        return Ok(Tensor::zeros(&[0].iter().chain(&[c, h, h]).copied().collect::<Vec<_>>()));
    }
    let chunk = chunk.max(1);
    for chunk_start in (0..n).step_by(chunk) {
        let b = chunk.min(n - chunk_start);
        // Per-image streams: first the initial latent, then one noise tensor
        // per reverse step.
        let mut streams: Vec<DeskRng> = (0..b).map(|i| rng.derive((chunk_start + i) as u64)).collect();
        let mut zs: Vec<Tensor<S>> = streams
            .iter_mut()
            .map(|s| Tensor::gaussian(&[c, h, h], 1.0, s))
            .collect();
        for t in (0..sched.t_diff).rev() {
            let mut tape = GradTape::inference();
            let mut bind = TapeBind::new(store);
            let z_refs: Vec<&Tensor<S>> = zs.iter().collect();
            let ts = vec![t; b];
            let rows = vec![row; b];
            let pred = predictor.predict_tokens(store, &mut tape, &mut bind, &z_refs, &ts, &rows)?;
            let tokens_per = tape.shape(pred)[0] / b;
            let feat = tape.shape(pred)[1];
            let pred_data = tape.value(pred);

            let beta = sched.beta[t].to_f64_lossy();
            let alpha = sched.alpha[t].to_f64_lossy();
            let ab = sched.alpha_bar[t].to_f64_lossy();
            let eps_coef = S::from_f64_lossy(beta / (1.0 - ab).sqrt());
            let inv_sqrt_alpha = S::from_f64_lossy(1.0 / alpha.sqrt());
            let sigma = S::from_f64_lossy(beta.sqrt());

            for (i, z) in zs.iter_mut().enumerate() {
                let block = &pred_data[i * tokens_per * feat..(i + 1) * tokens_per * feat];
                let tok = Tensor::new(vec![tokens_per, feat], block.to_vec()).expect("token block");
                let eps_hat = unpatchify(&tok, c, h, p)?;
                for (zv, &ev) in z.data.iter_mut().zip(&eps_hat.data) {
                    *zv = inv_sqrt_alpha * (*zv - eps_coef * ev);
                }
                if t > 0 {
                    let mut noise = Tensor::zeros(&[c, h, h]);
                    streams[i].fill_gaussian(&mut noise.data, 1.0);
                    for (zv, &nv) in z.data.iter_mut().zip(&noise.data) {
                        *zv += sigma * nv;
                    }
                }
            }
        }
        for (i, z) in zs.iter().enumerate() {
            let base = (chunk_start + i) * c * h * h;
            out.data[base..base + c * h * h].copy_from_slice(&z.data);
        }
    }
    Ok(out)
}

/// Exponential moving average shadow of every parameter.
#[derive(Clone, Debug)]
pub struct EmaModel<S> {
    pub decay: f64,
    shadow: Vec<(String, Vec<S>)>,
}

/// EMA decay rate used for evaluation models.
pub const EMA_DECAY: f64 = 0.9999;

impl<S: Scalar> EmaModel<S> {
    /// Shadow initialized as a copy of the current parameters.
    pub fn new(store: &ParamStore<S>, decay: f64) -> Self {
        let shadow = store.iter().map(|(_, n, t)| (n.to_string(), t.data.clone())).collect();
        EmaModel { decay, shadow }
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`, elementwise.
    pub fn update(&mut self, store: &ParamStore<S>) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(Error::Contract(format!(
                "EMA shadow has {} tensors, store has {}",
                self.shadow.len(),
                store.len()
            )));
        }
        let d = S::from_f64_lossy(self.decay);
        let one_minus = S::one() - d;
        for ((name, buf), (_, sname, t)) in self.shadow.iter_mut().zip(store.iter()) {
            if name != sname || buf.len() != t.data.len() {
                return Err(Error::Contract(format!("EMA shadow entry {name} does not match store {sname}")));
            }
            for (s, &p) in buf.iter_mut().zip(&t.data) {
                *s = d * *s + one_minus * p;
            }
        }
        Ok(())
    }

    /// A store whose values are the shadow parameters.
    pub fn apply_to(&self, store: &ParamStore<S>) -> Result<ParamStore<S>> {
        let mut out = store.clone();
        if store.len() != self.shadow.len() {
            return Err(Error::Contract("EMA shadow does not match store".into()));
        }
        for (id, (name, buf)) in out.ids().zip(self.shadow.iter()).collect::<Vec<_>>() {
            if out.name(id) != name {
                return Err(Error::Contract("EMA shadow does not match store".into()));
            }
            out.get_mut(id).data = buf.clone();
            out.get_mut(id).grad = None;
        }
        Ok(out)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.shadow.iter().map(|(n, d)| (n.as_str(), d.as_slice()))
    }

    /// Restore a shadow from checkpointed `ema.*` tensors.
    pub fn from_tensors(decay: f64, tensors: Vec<(String, Vec<S>)>) -> Self {
        EmaModel { decay, shadow: tensors }
    }
}
