//! Shared-factor weight parameterization.
//!
//! Every block weight family is stored as `W(l) = U . diag(expand(sigma_l)) . V^T`
//! where one `(U, V)` pair is shared by all `L` layers of that family and the
//! per-layer singular values are grouped: each run of `s` consecutive values
//! is one trainable scalar, so a layer carries `ceil(r / s)` of them. The
//! shared pairs for the four families form the depth-agnostic learngene.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore, TapeBind};
use crate::rng::DeskRng;
use crate::scalar::Scalar;
use crate::tensor::{GradTape, Tensor, Var};
use crate::{Error, Result};

/// The four per-block weight matrix roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Qkv,
    O,
    In,
    Out,
}

pub const FAMILY_KINDS: [FamilyKind; 4] = [FamilyKind::Qkv, FamilyKind::O, FamilyKind::In, FamilyKind::Out];

impl FamilyKind {
    pub fn tag(self) -> &'static str {
        match self {
            FamilyKind::Qkv => "qkv",
            FamilyKind::O => "o",
            FamilyKind::In => "in",
            FamilyKind::Out => "out",
        }
    }

    /// Matrix shape `(m1, m2)` as a function of model width and hidden width.
    pub fn matrix_shape(self, width: usize, hidden: usize) -> (usize, usize) {
        match self {
            FamilyKind::Qkv => (width, 3 * width),
            FamilyKind::O => (width, width),
            FamilyKind::In => (width, hidden),
            FamilyKind::Out => (hidden, width),
        }
    }
}

/// Grouped singular-value bookkeeping: `r` values tied `s` at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub rank: usize,
    pub group_size: usize,
}

impl Grouping {
    /// Trainable sigma entries per layer per family.
    pub fn grouped_len(&self) -> usize {
        self.rank.div_ceil(self.group_size)
    }
}

/// One weight family: shared `U`, `V` plus `L` grouped sigma vectors, all
/// living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FactorizedFamily<S> {
    pub kind: FamilyKind,
    pub u: ParamId,
    pub v: ParamId,
    pub sigmas: Vec<ParamId>,
    pub m1: usize,
    pub m2: usize,
    pub grouping: Grouping,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> FactorizedFamily<S> {
    pub fn depth(&self) -> usize {
        self.sigmas.len()
    }

    /// Materialize layer `layer` on the tape: `U . diag(expand(sigma)) . V^T`.
    /// Differentiable with respect to `U`, `V`, and that layer's sigma.
    pub fn materialize(
        &self,
        tape: &mut GradTape<S>,
        bind: &mut TapeBind,
        store: &ParamStore<S>,
        layer: usize,
    ) -> Result<Var> {
        if layer >= self.sigmas.len() {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for depth {}",
                self.sigmas.len()
            )));
        }
        let u = bind.var(tape, store, self.u);
        let v = bind.var(tape, store, self.v);
        let sig = bind.var(tape, store, self.sigmas[layer]);
        let expanded = tape.repeat_groups(sig, self.grouping.group_size, self.grouping.rank)?;
        let us = tape.mul_row_vec(u, expanded)?;
        let vt = tape.transpose(v)?;
        Ok(tape.matmul(us, vt)?)
    }

    /// Plain-tensor materialization of one layer (no tape, no gradients).
    pub fn materialize_plain(&self, store: &ParamStore<S>, layer: usize) -> Result<Tensor<S>> {
        let mut tape = GradTape::inference();
        let mut bind = TapeBind::new(store);
        let w = self.materialize(&mut tape, &mut bind, store, layer)?;
        Ok(tape.tensor(w))
    }
}

/// Expand a grouped sigma vector to full rank length: `out[j] = grouped[j / s]`.
pub fn expand_sigma<S: Scalar>(grouped: &Tensor<S>, rank: usize, group_size: usize) -> Result<Tensor<S>> {
    let expect = rank.div_ceil(group_size);
    if grouped.numel() != expect {
        return Err(Error::Contract(format!(
            "grouped sigma has {} entries, expected ceil({rank}/{group_size}) = {expect}",
            grouped.numel()
        )));
    }
    let data: Vec<S> = (0..rank).map(|j| grouped.data[j / group_size]).collect();
    Ok(Tensor::new(vec![rank], data).expect("shape consistent"))
}

/// Depth-agnostic learngene: the four shared `(U, V)` pairs plus the
/// structural metadata needed to instantiate them. Carries no sigma values
/// and no layer count.
#[derive(Clone, Debug)]
pub struct Learngene<S> {
    /// `(kind, U, V)` in canonical family order.
    pub factors: Vec<(FamilyKind, Tensor<S>, Tensor<S>)>,
    pub meta: LearngeneMeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearngeneMeta {
    pub width: usize,
    pub hidden: usize,
    pub rank: usize,
    pub group_size: usize,
    pub condensation_steps: u64,
    pub seed: u64,
    pub format_version: u32,
}

impl<S: Scalar> Learngene<S> {
    pub fn factor(&self, kind: FamilyKind) -> (&Tensor<S>, &Tensor<S>) {
        let (_, u, v) = self
            .factors
            .iter()
            .find(|(k, _, _)| *k == kind)
            .expect("all four families present");
        (u, v)
    }

    /// Transferred parameter count: sum over families of `r * (m1 + m2)`.
    pub fn transferred_params(&self) -> u64 {
        self.factors.iter().map(|(_, u, v)| (u.numel() + v.numel()) as u64).sum()
    }
}

/// Column-orthonormalize in place via modified Gram-Schmidt, two passes.
fn orthonormalize_columns<S: Scalar>(a: &mut Tensor<S>) {
    let (rows, cols) = (a.shape[0], a.shape[1]);
    for _ in 0..2 {
        for j in 0..cols {
            for k in 0..j {
                let mut dot = S::zero();
                for i in 0..rows {
                    dot += a.data[i * cols + k] * a.data[i * cols + j];
                }
                for i in 0..rows {
                    let d = dot * a.data[i * cols + k];
                    a.data[i * cols + j] -= d;
                }
            }
            let mut norm = S::zero();
            for i in 0..rows {
                let v = a.data[i * cols + j];
                norm += v * v;
            }
            let inv = norm.sqrt().recip();
            for i in 0..rows {
                a.data[i * cols + j] *= inv;
            }
        }
    }
}

/// Validate `(width, hidden, rank, group_size)` against the family shapes.
pub fn validate_factorization(width: usize, hidden: usize, rank: usize, group_size: usize) -> Result<()> {
    let min_dim = FAMILY_KINDS
        .iter()
        .map(|k| {
            let (m1, m2) = k.matrix_shape(width, hidden);
            m1.min(m2)
        })
        .min()
        .unwrap();
    if rank == 0 || rank > min_dim {
        return Err(Error::Config(format!(
            "rank {rank} must be in 1..={min_dim} for width {width}, hidden {hidden}"
        )));
    }
    if group_size == 0 || group_size > rank {
        return Err(Error::Config(format!("group size {group_size} must be in 1..={rank}")));
    }
    Ok(())
}

/// Fresh shared factors for all four families: `U`, `V` column-orthonormal
/// from seeded Gaussian draws, grouped sigmas scaled so the materialized
/// matrix matches He fan-in variance (see [`sigma_init_std`]).
pub fn init_shared_factors<S: Scalar>(
    store: &mut ParamStore<S>,
    width: usize,
    hidden: usize,
    grouping: Grouping,
    depth: usize,
    rng: &DeskRng,
) -> Result<Vec<FactorizedFamily<S>>> {
    validate_factorization(width, hidden, grouping.rank, grouping.group_size)?;
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    let mut families = Vec::with_capacity(4);
    for kind in FAMILY_KINDS {
        let (m1, m2) = kind.matrix_shape(width, hidden);
        let mut u_rng = rng.derive_str(&format!("fam.{}.u", kind.tag()));
        let mut v_rng = rng.derive_str(&format!("fam.{}.v", kind.tag()));
        let mut u = Tensor::gaussian(&[m1, grouping.rank], 1.0, &mut u_rng);
        let mut v = Tensor::gaussian(&[m2, grouping.rank], 1.0, &mut v_rng);
        orthonormalize_columns(&mut u);
        orthonormalize_columns(&mut v);
        families.push(insert_family(store, kind, u, v, grouping, depth, rng));
    }
    Ok(families)
}

/// Install a family whose `U`, `V` come from a learngene; sigmas drawn fresh
/// from `N(0, 1/r)`.
pub fn family_from_factors<S: Scalar>(
    store: &mut ParamStore<S>,
    kind: FamilyKind,
    u: Tensor<S>,
    v: Tensor<S>,
    grouping: Grouping,
    depth: usize,
    rng: &DeskRng,
) -> FactorizedFamily<S> {
    insert_family(store, kind, u, v, grouping, depth, rng)
}

/// Standard deviation of fresh grouped sigma values for a family of shape
/// `(m1, m2)` at rank `r`.
///
/// With column-orthonormal `U`, `V` the materialized Frobenius norm is the
/// sigma norm, so `sigma ~ N(0, 2 m2 / r)` reproduces the `2 / fan_in`
/// entry variance of a He-initialized `m1 x m2` matrix. The naive `N(0, 1/r)`
/// draw starts the weights ~20x smaller than He scale, which measurably
/// stalls training at the constant 1e-4 learning rate.
pub fn sigma_init_std(m2: usize, rank: usize) -> f64 {
    (2.0 * m2 as f64 / rank as f64).sqrt()
}

fn insert_family<S: Scalar>(
    store: &mut ParamStore<S>,
    kind: FamilyKind,
    u: Tensor<S>,
    v: Tensor<S>,
    grouping: Grouping,
    depth: usize,
    rng: &DeskRng,
) -> FactorizedFamily<S> {
    let (m1, m2) = (u.shape[0], v.shape[0]);
    let sigma_std = sigma_init_std(m2, grouping.rank);
    let u_id = store.insert(&format!("fam.{}.u", kind.tag()), u.with_grad());
    let v_id = store.insert(&format!("fam.{}.v", kind.tag()), v.with_grad());
    let mut sigmas = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut s_rng = rng.derive_str(&format!("fam.{}.sig{l}", kind.tag()));
        let sig = Tensor::gaussian(&[grouping.grouped_len()], sigma_std, &mut s_rng).with_grad();
        sigmas.push(store.insert(&format!("fam.{}.sig{l}", kind.tag()), sig));
    }
    FactorizedFamily {
        kind,
        u: u_id,
        v: v_id,
        sigmas,
        m1,
        m2,
        grouping,
        _marker: std::marker::PhantomData,
    }
}

/// Copy the shared `(U, V)` pairs out of the families; sigmas are discarded.
pub fn extract_learngene<S: Scalar>(
    families: &[FactorizedFamily<S>],
    store: &ParamStore<S>,
    condensation_steps: u64,
    seed: u64,
    width: usize,
    hidden: usize,
) -> Result<Learngene<S>> {
    if families.len() != 4 {
        return Err(Error::Contract(format!("expected 4 families, got {}", families.len())));
    }
    let g0 = families[0].grouping;
    if families.iter().any(|f| f.grouping != g0) {
        return Err(Error::Contract("families disagree on rank/group metadata".into()));
    }
    let mut factors = Vec::with_capacity(4);
    for kind in FAMILY_KINDS {
        let fam = families
            .iter()
            .find(|f| f.kind == kind)
            .ok_or_else(|| Error::Contract(format!("family {} missing", kind.tag())))?;
        let (m1, m2) = kind.matrix_shape(width, hidden);
        if fam.m1 != m1 || fam.m2 != m2 {
            return Err(Error::Contract(format!(
                "family {} has shape ({}, {}), expected ({m1}, {m2})",
                kind.tag(),
                fam.m1,
                fam.m2
            )));
        }
        let mut u = store.get(fam.u).clone();
        let mut v = store.get(fam.v).clone();
        u.requires_grad = false;
        u.grad = None;
        v.requires_grad = false;
        v.grad = None;
        factors.push((kind, u, v));
    }
    Ok(Learngene {
        factors,
        meta: LearngeneMeta {
            width,
            hidden,
            rank: g0.rank,
            group_size: g0.group_size,
            condensation_steps,
            seed,
            format_version: crate::io::FORMAT_VERSION,
        },
    })
}

/// Parameter accounting for a factorized model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Every parameter of the instantiated model (shared factors counted once).
    pub total: u64,
    /// Parameters carried by the learngene: sum over families of `r * (m1 + m2)`.
    pub transferred: u64,
    /// Scalars trained by the sigma-only fit: `4 * L * ceil(r / s)`.
    pub trainable_at_init: u64,
}

pub fn count_params<S: Scalar>(store: &ParamStore<S>, families: &[FactorizedFamily<S>]) -> ParamCounts {
    let total = store.total_params();
    let transferred = families
        .iter()
        .map(|f| (f.grouping.rank * (f.m1 + f.m2)) as u64)
        .sum();
    let trainable_at_init = families
        .iter()
        .map(|f| (f.depth() * f.grouping.grouped_len()) as u64)
        .sum();
    ParamCounts { total, transferred, trainable_at_init }
}
