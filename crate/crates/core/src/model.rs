//! Minimal diffusion-transformer noise predictor of configurable depth.
//!
//! Images are patchified into tokens, conditioned additively with a timestep
//! plus class embedding, passed through pre-norm attention/feedforward blocks,
//! and projected back to pixel space. Block weights come either from plain
//! per-layer tensors or from shared-factor families materialized per layer.

use serde::{Deserialize, Serialize};

use crate::factorized::{
    family_from_factors, init_shared_factors, FactorizedFamily, FamilyKind, Grouping, Learngene, ParamCounts,
    FAMILY_KINDS,
};
use crate::params::{ParamId, ParamStore, TapeBind};
use crate::rng::DeskRng;
use crate::scalar::Scalar;
use crate::tensor::{GradTape, Tensor, Var};
use crate::{Error, Result};

/// How block weight matrices are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backing {
    Plain,
    Factorized { rank: usize, group_size: usize },
}

/// Model hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    /// Image side in pixels (square inputs).
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Token width D.
    pub width: usize,
    /// Feedforward hidden width D'; 0 means the 4*width default.
    #[serde(default)]
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    /// Class count for conditioning; 0 = unconditional.
    #[serde(default)]
    pub num_classes: usize,
    pub backing: Backing,
}

impl DiTConfig {
    /// Resolve defaults and check divisibility constraints.
    pub fn normalized(mut self) -> Result<Self> {
        if self.hidden == 0 {
            self.hidden = 4 * self.width;
        }
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::Config("width must be even for the sinusoidal timestep embedding".into()));
        }
        if self.depth == 0 || self.channels == 0 {
            return Err(Error::Config("depth and channels must be at least 1".into()));
        }
        if let Backing::Factorized { rank, group_size } = self.backing {
            crate::factorized::validate_factorization(self.width, self.hidden, rank, group_size)?;
        }
        Ok(self)
    }

    /// Token count T = (h / p)^2.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch feature length c * p^2.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Split an image `[c, h, h]` into non-overlapping `p x p` patches, raster
/// order, each flattened row-major over `(c, py, px)`.
pub fn patchify<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let [c, h, w] = x.shape[..] else {
        return Err(Error::Config(format!("patchify expects [c, h, h], got {:?}", x.shape)));
    };
    if h != w || h % p != 0 {
        return Err(Error::Config(format!("image side {h}x{w} not divisible by patch size {p}")));
    }
    let grid = h / p;
    let feat = c * p * p;
    let mut out = Tensor::zeros(&[grid * grid, feat]);
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = gy * grid + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let src = ch * h * w + (gy * p + py) * w + (gx * p + px);
                        let dst = tok * feat + ch * p * p + py * p + px;
                        out.data[dst] = x.data[src];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, c: usize, h: usize, p: usize) -> Result<Tensor<S>> {
    let grid = h / p;
    let feat = c * p * p;
    if tokens.shape != [grid * grid, feat] {
        return Err(Error::Config(format!(
            "unpatchify expects [{}, {feat}], got {:?}",
            grid * grid,
            tokens.shape
        )));
    }
    let mut out = Tensor::zeros(&[c, h, h]);
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = gy * grid + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let dst = ch * h * h + (gy * p + py) * h + (gx * p + px);
                        let src = tok * feat + ch * p * p + py * p + px;
                        out.data[dst] = tokens.data[src];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal timestep features of length `dim` (half sines, half cosines).
pub fn timestep_features<S: Scalar>(t: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = S::from_f64_lossy(arg.sin());
        out[half + i] = S::from_f64_lossy(arg.cos());
    }
    out
}

/// Multi-head self-attention over already-projected `qkv` rows.
///
/// `qkv` holds `batch * seq` rows of `[q | k | v]`; attention runs per
/// sequence and per head with scores `q k^T / sqrt(d)` softmaxed over keys.
pub fn attention_core<S: Scalar>(
    tape: &mut GradTape<S>,
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let cols = tape.shape(qkv)[1];
    let width = cols / 3;
    if cols % 3 != 0 || width % heads != 0 {
        return Err(Error::Config(format!("qkv width {cols} not divisible into {heads} heads")));
    }
    let head_dim = width / heads;
    let scale = S::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
    let mut per_seq = Vec::with_capacity(batch);
    for b in 0..batch {
        let row0 = b * seq;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let col = h * head_dim;
            let q = tape.slice2d(qkv, row0, col, seq, head_dim)?;
            let k = tape.slice2d(qkv, row0, width + col, seq, head_dim)?;
            let v = tape.slice2d(qkv, row0, 2 * width + col, seq, head_dim)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let probs = tape.softmax_rows(scores, scale)?;
            head_outs.push(tape.matmul(probs, v)?);
        }
        per_seq.push(tape.concat_cols(&head_outs)?);
    }
    Ok(tape.concat_rows(&per_seq)?)
}

/// Attention block: project to q/k/v with `w_qkv`, attend, project with `w_o`.
/// The residual connection is added by the caller.
pub fn attention_block<S: Scalar>(
    tape: &mut GradTape<S>,
    hseq: Var,
    w_qkv: Var,
    w_o: Var,
    heads: usize,
) -> Result<Var> {
    let seq = tape.shape(hseq)[0];
    let qkv = tape.matmul(hseq, w_qkv)?;
    let mixed = attention_core(tape, qkv, 1, seq, heads)?;
    Ok(tape.matmul(mixed, w_o)?)
}

/// Pointwise feedforward: `w_out . gelu(w_in . u + b1) + b2` applied tokenwise.
pub fn pff_block<S: Scalar>(
    tape: &mut GradTape<S>,
    u: Var,
    w_in: Var,
    b1: Var,
    w_out: Var,
    b2: Var,
) -> Result<Var> {
    let pre = tape.matmul(u, w_in)?;
    let pre = tape.add_row_vec(pre, b1)?;
    let mid = tape.gelu(pre)?;
    let post = tape.matmul(mid, w_out)?;
    Ok(tape.add_row_vec(post, b2)?)
}

/// One block's weight handle: a plain tensor or a per-layer view of a family.
#[derive(Clone, Copy, Debug)]
pub enum WeightRef {
    Plain(ParamId),
    Fam { family: usize, layer: usize },
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv: WeightRef,
    pub qkv_b: ParamId,
    pub o: WeightRef,
    pub o_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_in: WeightRef,
    pub in_b: ParamId,
    pub w_out: WeightRef,
    pub out_b: ParamId,
}

/// Variable-depth noise-prediction transformer.
#[derive(Clone, Debug)]
pub struct DiTModel<S> {
    pub cfg: DiTConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos: ParamId,
    pub temb_w: ParamId,
    pub temb_b: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_g: ParamId,
    pub final_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub families: Vec<FactorizedFamily<S>>,
}

/// He fan-in Gaussian for an `[fan_in, fan_out]` matrix.
fn he_matrix<S: Scalar>(shape: [usize; 2], rng: &mut DeskRng) -> Tensor<S> {
    let std = (2.0 / shape[0] as f64).sqrt();
    Tensor::gaussian(&shape, std, rng)
}

enum FactorSource<'a, S> {
    Fresh,
    FromLearngene(&'a Learngene<S>),
}

impl<S: Scalar> DiTModel<S> {
    /// Build a model with freshly initialized parameters.
    ///
    /// Plain backing gets fan-in Gaussian weights (He); factorized backing
    /// gets orthonormal shared factors and `N(0, 1/r)` grouped sigmas.
    pub fn new(cfg: DiTConfig, store: &mut ParamStore<S>, rng: &DeskRng) -> Result<Self> {
        Self::build(cfg, store, rng, FactorSource::Fresh)
    }

    /// Build a factorized model whose shared factors come from a learngene.
    /// The factors are loaded frozen (`requires_grad = false`).
    pub fn from_learngene(
        cfg: DiTConfig,
        store: &mut ParamStore<S>,
        rng: &DeskRng,
        learngene: &Learngene<S>,
    ) -> Result<Self> {
        if cfg.width != learngene.meta.width {
            return Err(Error::WidthMismatch { expected: learngene.meta.width, found: cfg.width });
        }
        if cfg.hidden != 0 && cfg.hidden != learngene.meta.hidden {
            return Err(Error::WidthMismatch { expected: learngene.meta.hidden, found: cfg.hidden });
        }
        let cfg = DiTConfig {
            hidden: learngene.meta.hidden,
            backing: Backing::Factorized {
                rank: learngene.meta.rank,
                group_size: learngene.meta.group_size,
            },
            ..cfg
        };
        let model = Self::build(cfg, store, rng, FactorSource::FromLearngene(learngene))?;
        model.set_factors_frozen(store, true);
        Ok(model)
    }

    fn build(
        cfg: DiTConfig,
        store: &mut ParamStore<S>,
        rng: &DeskRng,
        source: FactorSource<S>,
    ) -> Result<Self> {
        let cfg = cfg.normalized()?;
        let (d, hidden, tokens, pdim) = (cfg.width, cfg.hidden, cfg.tokens(), cfg.patch_dim());

        let fresh = |name: &str, t: Tensor<S>, store: &mut ParamStore<S>| store.insert(name, t.with_grad());

        let embed_w = fresh("embed.w", he_matrix([pdim, d], &mut rng.derive_str("embed.w")), store);
        let embed_b = fresh("embed.b", Tensor::zeros(&[d]), store);
        let pos = fresh("pos", Tensor::gaussian(&[tokens, d], 0.02, &mut rng.derive_str("pos")), store);
        let temb_w = fresh("temb.w", he_matrix([d, d], &mut rng.derive_str("temb.w")), store);
        let temb_b = fresh("temb.b", Tensor::zeros(&[d]), store);
        let cls = fresh(
            "cls",
            Tensor::gaussian(&[cfg.num_classes + 1, d], 0.02, &mut rng.derive_str("cls")),
            store,
        );

        let families = match cfg.backing {
            Backing::Plain => Vec::new(),
            Backing::Factorized { rank, group_size } => {
                let grouping = Grouping { rank, group_size };
                match source {
                    FactorSource::Fresh => {
                        init_shared_factors(store, d, hidden, grouping, cfg.depth, rng)?
                    }
                    FactorSource::FromLearngene(lg) => FAMILY_KINDS
                        .iter()
                        .map(|&kind| {
                            let (u, v) = lg.factor(kind);
                            family_from_factors(store, kind, u.clone(), v.clone(), grouping, cfg.depth, rng)
                        })
                        .collect(),
                }
            }
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let weight = |kind: FamilyKind, shape: [usize; 2], store: &mut ParamStore<S>| -> WeightRef {
                match cfg.backing {
                    Backing::Plain => {
                        let name = format!("blk{l}.{}.w", kind.tag());
                        let t = he_matrix(shape, &mut rng.derive_str(&name));
                        WeightRef::Plain(store.insert(&name, t.with_grad()))
                    }
                    Backing::Factorized { .. } => WeightRef::Fam {
                        family: FAMILY_KINDS.iter().position(|&k| k == kind).unwrap(),
                        layer: l,
                    },
                }
            };
            let ln1_g = fresh(&format!("blk{l}.ln1.g"), Tensor::full(&[d], S::one()), store);
            let ln1_b = fresh(&format!("blk{l}.ln1.b"), Tensor::zeros(&[d]), store);
            let qkv = weight(FamilyKind::Qkv, [d, 3 * d], store);
            let qkv_b = fresh(&format!("blk{l}.qkv.b"), Tensor::zeros(&[3 * d]), store);
            let o = weight(FamilyKind::O, [d, d], store);
            let o_b = fresh(&format!("blk{l}.o.b"), Tensor::zeros(&[d]), store);
            let ln2_g = fresh(&format!("blk{l}.ln2.g"), Tensor::full(&[d], S::one()), store);
            let ln2_b = fresh(&format!("blk{l}.ln2.b"), Tensor::zeros(&[d]), store);
            let w_in = weight(FamilyKind::In, [d, hidden], store);
            let in_b = fresh(&format!("blk{l}.in.b"), Tensor::zeros(&[hidden]), store);
            let w_out = weight(FamilyKind::Out, [hidden, d], store);
            let out_b = fresh(&format!("blk{l}.out.b"), Tensor::zeros(&[d]), store);
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                qkv,
                qkv_b,
                o,
                o_b,
                ln2_g,
                ln2_b,
                w_in,
                in_b,
                w_out,
                out_b,
            });
        }

        let final_g = fresh("final.g", Tensor::full(&[d], S::one()), store);
        let final_b = fresh("final.b", Tensor::zeros(&[d]), store);
        let head_w = fresh("head.w", he_matrix([d, pdim], &mut rng.derive_str("head.w")), store);
        let head_b = fresh("head.b", Tensor::zeros(&[pdim]), store);

        Ok(DiTModel {
            cfg,
            embed_w,
            embed_b,
            pos,
            temb_w,
            temb_b,
            cls,
            blocks,
            final_g,
            final_b,
            head_w,
            head_b,
            families,
        })
    }

    /// Freeze or unfreeze the shared `U`, `V` factors.
    pub fn set_factors_frozen(&self, store: &mut ParamStore<S>, frozen: bool) {
        for fam in &self.families {
            store.get_mut(fam.u).requires_grad = !frozen;
            store.get_mut(fam.v).requires_grad = !frozen;
        }
    }

    /// Ids of every grouped sigma tensor.
    pub fn sigma_ids(&self) -> Vec<ParamId> {
        self.families.iter().flat_map(|f| f.sigmas.iter().copied()).collect()
    }

    fn weight_var(
        &self,
        tape: &mut GradTape<S>,
        bind: &mut TapeBind,
        store: &ParamStore<S>,
        w: WeightRef,
    ) -> Result<Var> {
        match w {
            WeightRef::Plain(id) => Ok(bind.var(tape, store, id)),
            WeightRef::Fam { family, layer } => self.families[family].materialize(tape, bind, store, layer),
        }
    }

    /// The materialized weight of one block family, as a plain tensor.
    pub fn block_weight(&self, store: &ParamStore<S>, layer: usize, kind: FamilyKind) -> Result<Tensor<S>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
        let wref = match kind {
            FamilyKind::Qkv => block.qkv,
            FamilyKind::O => block.o,
            FamilyKind::In => block.w_in,
            FamilyKind::Out => block.w_out,
        };
        match wref {
            WeightRef::Plain(id) => Ok(store.get(id).clone()),
            WeightRef::Fam { family, layer } => self.families[family].materialize_plain(store, layer),
        }
    }

    /// Noise prediction for a batch, on the given tape. Returns the token
    /// matrix `[batch * T, c * p^2]`; use [`unpatchify`] per image to get
    /// pixel-space noise.
    pub fn forward_batch(
        &self,
        store: &ParamStore<S>,
        tape: &mut GradTape<S>,
        bind: &mut TapeBind,
        images: &[&Tensor<S>],
        timesteps: &[usize],
        class_rows: &[usize],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let batch = images.len();
        if batch == 0 || timesteps.len() != batch || class_rows.len() != batch {
            return Err(Error::Contract(format!(
                "batch lengths disagree: {} images, {} timesteps, {} classes",
                batch,
                timesteps.len(),
                class_rows.len()
            )));
        }
        for &row in class_rows {
            if row > cfg.num_classes {
                return Err(Error::Contract(format!(
                    "class row {row} out of range for {} classes (+1 unconditional)",
                    cfg.num_classes
                )));
            }
        }
        let tokens = cfg.tokens();
        let pdim = cfg.patch_dim();

        // Patchify the batch into one [B*T, pdim] constant.
        let mut patch_data = Vec::with_capacity(batch * tokens * pdim);
        for img in images {
            let p = patchify(img, cfg.patch_size)?;
            patch_data.extend_from_slice(&p.data);
        }
        let patches = Tensor::new(vec![batch * tokens, pdim], patch_data).expect("patch shape");
        let x = tape.constant(&patches);

        // Token embedding + learned positions.
        let embed_w = bind.var(tape, store, self.embed_w);
        let embed_b = bind.var(tape, store, self.embed_b);
        let mut h = tape.matmul(x, embed_w)?;
        h = tape.add_row_vec(h, embed_b)?;
        let pos = bind.var(tape, store, self.pos);
        let pos_tiled = tape.tile_rows(pos, batch)?;
        h = tape.add(h, pos_tiled)?;

        // Conditioning: (timestep embedding + class embedding) added to every token.
        let mut sin_data = Vec::with_capacity(batch * cfg.width);
        for &t in timesteps {
            sin_data.extend_from_slice(&timestep_features::<S>(t, cfg.width));
        }
        let sin = Tensor::new(vec![batch, cfg.width], sin_data).expect("sinusoid shape");
        let sin = tape.constant(&sin);
        let temb_w = bind.var(tape, store, self.temb_w);
        let temb_b = bind.var(tape, store, self.temb_b);
        let temb = tape.matmul(sin, temb_w)?;
        let temb = tape.add_row_vec(temb, temb_b)?;
        let cls = bind.var(tape, store, self.cls);
        let cemb = tape.gather_rows(cls, class_rows)?;
        let cond = tape.add(temb, cemb)?;
        let cond_tok = tape.repeat_rows(cond, tokens)?;
        h = tape.add(h, cond_tok)?;

        // Pre-norm residual blocks.
        for block in &self.blocks {
            let ln1_g = bind.var(tape, store, block.ln1_g);
            let ln1_b = bind.var(tape, store, block.ln1_b);
            let normed = tape.layer_norm(h, ln1_g, ln1_b)?;
            let w_qkv = self.weight_var(tape, bind, store, block.qkv)?;
            let qkv_b = bind.var(tape, store, block.qkv_b);
            let qkv = tape.matmul(normed, w_qkv)?;
            let qkv = tape.add_row_vec(qkv, qkv_b)?;
            let mixed = attention_core(tape, qkv, batch, tokens, cfg.heads)?;
            let w_o = self.weight_var(tape, bind, store, block.o)?;
            let o_b = bind.var(tape, store, block.o_b);
            let proj = tape.matmul(mixed, w_o)?;
            let proj = tape.add_row_vec(proj, o_b)?;
            h = tape.add(h, proj)?;

            let ln2_g = bind.var(tape, store, block.ln2_g);
            let ln2_b = bind.var(tape, store, block.ln2_b);
            let normed2 = tape.layer_norm(h, ln2_g, ln2_b)?;
            let w_in = self.weight_var(tape, bind, store, block.w_in)?;
            let in_b = bind.var(tape, store, block.in_b);
            let w_out = self.weight_var(tape, bind, store, block.w_out)?;
            let out_b = bind.var(tape, store, block.out_b);
            let ff = pff_block(tape, normed2, w_in, in_b, w_out, out_b)?;
            h = tape.add(h, ff)?;
        }

        let final_g = bind.var(tape, store, self.final_g);
        let final_b = bind.var(tape, store, self.final_b);
        let fin = tape.layer_norm(h, final_g, final_b)?;
        let head_w = bind.var(tape, store, self.head_w);
        let head_b = bind.var(tape, store, self.head_b);
        let out = tape.matmul(fin, head_w)?;
        Ok(tape.add_row_vec(out, head_b)?)
    }

    /// Single-image noise prediction, no gradients. `class_id = None` uses
    /// the unconditional embedding row.
    pub fn forward(
        &self,
        store: &ParamStore<S>,
        z_t: &Tensor<S>,
        t: usize,
        class_id: Option<usize>,
    ) -> Result<Tensor<S>> {
        let row = self.resolve_class(class_id)?;
        let mut tape = GradTape::inference();
        let mut bind = TapeBind::new(store);
        let out = self.forward_batch(store, &mut tape, &mut bind, &[z_t], &[t], &[row])?;
        let tokens = tape.tensor(out);
        unpatchify(&tokens, self.cfg.channels, self.cfg.image_size, self.cfg.patch_size)
    }

    /// Map an optional class id to an embedding row; `None` and dropped
    /// conditions use the trailing unconditional row.
    pub fn resolve_class(&self, class_id: Option<usize>) -> Result<usize> {
        match class_id {
            None => Ok(self.cfg.num_classes),
            Some(c) if c < self.cfg.num_classes => Ok(c),
            Some(c) => Err(Error::Contract(format!(
                "class id {c} out of range for {} classes",
                self.cfg.num_classes
            ))),
        }
    }

    /// Parameter accounting: totals from the store, transfer counts from the
    /// families (zero for plain backing).
    pub fn param_counts(&self, store: &ParamStore<S>) -> ParamCounts {
        if self.families.is_empty() {
            ParamCounts { total: store.total_params(), transferred: 0, trainable_at_init: 0 }
        } else {
            let c = crate::factorized::count_params(store, &self.families);
            ParamCounts { total: store.total_params(), ..c }
        }
    }
}
