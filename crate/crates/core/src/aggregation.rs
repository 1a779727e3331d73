//! Local aggregation targets: cross-attention heads that pool the selected
//! neighbors of each masked patch into a dense target, the matching context
//! summary, and the latent and pixel regression losses.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::neighbors::NeighborSelection;
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// How a set of rows is reduced to one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum HeadKind {
    /// `softmax(q·Kᵀ/√D)·V` with the averaged embedding as the query.
    #[default]
    CrossAttention,
    /// Self-attention within the set, then the mean of the outputs.
    SelfAttention,
    AveragePool,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct HeadConfig {
    pub context: HeadKind,
    pub target: HeadKind,
    /// Learned query/key/value projections; the target head tracks the
    /// context head by EMA.
    #[cfg_attr(feature = "serde", serde(default))]
    pub learned_projections: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            context: HeadKind::CrossAttention,
            target: HeadKind::CrossAttention,
            learned_projections: false,
        }
    }
}

/// Projection parameters of an aggregation head, if any.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationHead {
    projections: Option<[usize; 3]>,
}

impl AggregationHead {
    /// Adds `D×D` query/key/value projections, initialized to identity so a
    /// fresh head matches the projection-free form.
    pub fn init(learned: bool, dim: usize, set: &mut ParamSet, prefix: &str) -> Self {
        if !learned {
            return Self::default();
        }
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        let names = ["q", "k", "v"];
        let idx = names.map(|n| set.push(format!("{prefix}.{n}.weight"), eye.clone(), true));
        Self { projections: Some(idx) }
    }

    pub fn has_parameters(&self) -> bool {
        self.projections.is_some()
    }

    fn project(&self, tape: &mut Tape, p: Option<&Bound>, x: Var, which: usize) -> Result<Var> {
        match (self.projections, p) {
            (Some(idx), Some(p)) => tape.matmul(x, p.var(idx[which])),
            (Some(_), None) => Err(Error::Structure("aggregation head needs its parameters".into())),
            (None, _) => Ok(x),
        }
    }

    /// Reduces `set` (`[n×D]`) to `[1×D]` using `query` (`[1×D]`).
    pub fn apply(&self, tape: &mut Tape, p: Option<&Bound>, kind: HeadKind, query: Var, set: Var) -> Result<Var> {
        let (n, d) = tape.value(set).dims2()?;
        if n == 0 {
            return Err(Error::Empty("aggregation head"));
        }
        let scale = 1.0 / libm::sqrt(d as f64);
        match kind {
            HeadKind::CrossAttention => {
                let q = self.project(tape, p, query, 0)?;
                let k = self.project(tape, p, set, 1)?;
                let v = self.project(tape, p, set, 2)?;
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, scale)?;
                let w = tape.softmax_rows(logits)?;
                tape.matmul(w, v)
            }
            HeadKind::SelfAttention => {
                let q = self.project(tape, p, set, 0)?;
                let k = self.project(tape, p, set, 1)?;
                let v = self.project(tape, p, set, 2)?;
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, scale)?;
                let w = tape.softmax_rows(logits)?;
                let y = tape.matmul(w, v)?;
                tape.mean_rows(y)
            }
            HeadKind::AveragePool => tape.mean_rows(set),
            HeadKind::MaxPool => tape.max_rows(set),
        }
    }
}

/// `softmax(q·Kᵀ/√D)·K` for a `[1×D]` query over the `[n×D]` rows of
/// `keys_values`, without projections.
pub fn cross_attend(query: &Tensor, keys_values: &Tensor) -> Result<Tensor> {
    let (n, d) = keys_values.dims2()?;
    if n == 0 {
        return Err(Error::Empty("cross_attend"));
    }
    if query.len() != d {
        return Err(Error::Dimension {
            op: "cross_attend",
            lhs: query.shape().to_vec(),
            rhs: keys_values.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::row_vector(query.data())?);
    let kv = tape.constant(keys_values.clone());
    let out = AggregationHead::default().apply(&mut tape, None, HeadKind::CrossAttention, q, kv)?;
    Ok(tape.value(out).clone())
}

/// Dense targets for `masked` patches, one row each in `masked` order. The
/// query is the mean of all target-feature rows; the keys and values are
/// the selected neighbors. Recorded on `tape` and detached.
pub fn dense_targets_on(
    tape: &mut Tape,
    head: &AggregationHead,
    params: Option<&Bound>,
    kind: HeadKind,
    feats: Var,
    selection: &NeighborSelection,
    masked: &[usize],
) -> Result<Var> {
    let query = tape.mean_rows(feats)?;
    let mut rows = Vec::with_capacity(masked.len());
    for &j in masked {
        let entry = selection
            .get(j)
            .ok_or_else(|| Error::Structure(format!("no neighbor selection for masked patch {j}")))?;
        let kv = tape.gather_rows(feats, &entry.indices)?;
        rows.push(head.apply(tape, params, kind, query, kv)?);
    }
    let all = tape.concat_rows(&rows)?;
    Ok(tape.detach(all))
}

/// Projection-free dense targets outside any training graph.
pub fn build_dense_targets(feats: &Tensor, selection: &NeighborSelection, masked: &[usize], kind: HeadKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let out = dense_targets_on(&mut tape, &AggregationHead::default(), None, kind, f, selection, masked)?;
    Ok(tape.value(out).clone())
}

/// Summary of the context embeddings: the head applied with their mean as
/// the query. Gradients flow.
pub fn aggregated_context_on(
    tape: &mut Tape,
    head: &AggregationHead,
    params: Option<&Bound>,
    kind: HeadKind,
    context: Var,
) -> Result<Var> {
    let (n, _) = tape.value(context).dims2()?;
    if n == 0 {
        return Err(Error::Empty("aggregated context"));
    }
    let query = tape.mean_rows(context)?;
    head.apply(tape, params, kind, query, context)
}

pub fn build_aggregated_context(context: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(context.clone());
    let out = aggregated_context_on(&mut tape, &AggregationHead::default(), None, HeadKind::CrossAttention, c)?;
    Ok(tape.value(out).clone())
}

/// Per-feature standardization over the rows of `t`.
pub fn standardize_columns(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let mut out = t.clone();
    for j in 0..c {
        let mean = (0..r).map(|i| t.data()[i * c + j]).sum::<f64>() / r as f64;
        let var = (0..r)
            .map(|i| {
                let d = t.data()[i * c + j] - mean;
                d * d
            })
            .sum::<f64>()
            / r as f64;
        let rstd = 1.0 / libm::sqrt(var + 1e-6);
        for i in 0..r {
            out.data_mut()[i * c + j] = (t.data()[i * c + j] - mean) * rstd;
        }
    }
    Ok(out)
}

/// `(1/M)·Σᵢ Σ_{j∈Bᵢ} ‖targetⱼ − predⱼ‖²` over `M` aligned blocks. Shared by
/// the neighbor-aggregated objective and the raw-feature baseline; they
/// differ only in the targets passed in.
pub fn latent_loss_on(tape: &mut Tape, preds: &[Var], targets: &[Var]) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Structure(format!(
            "{} prediction blocks vs {} target blocks",
            preds.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let r = tape.sub(*t, *p)?;
        terms.push(tape.sum_squares(r)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    tape.scale(total, 1.0 / preds.len() as f64)
}

fn latent_loss(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let p: Vec<Var> = preds.iter().map(|t| tape.constant(t.clone())).collect();
    let t: Vec<Var> = targets.iter().map(|t| tape.constant(t.clone())).collect();
    let l = latent_loss_on(&mut tape, &p, &t)?;
    Ok(tape.value(l).data()[0])
}

/// Neighbor-aggregated latent loss over per-block `[|Bᵢ|×D]` matrices.
pub fn loss_dmt(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    latent_loss(preds, targets)
}

/// Raw-feature latent loss; same normalization as [`loss_dmt`].
pub fn loss_ijepa(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    latent_loss(preds, targets)
}

/// `(1/|M|)·Σ_{i∈M} ‖pᵢ − p̂ᵢ‖²` over `[|M|×P²C]` pixel rows.
pub fn mae_loss_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (m, _) = tape.value(pred).dims2()?;
    let r = tape.sub(target, pred)?;
    let s = tape.sum_squares(r)?;
    tape.scale(s, 1.0 / m as f64)
}

pub fn loss_mae(pixels: &Tensor, preds: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(preds.clone());
    let t = tape.constant(pixels.clone());
    let l = mae_loss_on(&mut tape, p, t)?;
    Ok(tape.value(l).data()[0])
}

/// Per-patch pixel normalization to zero mean and unit variance.
pub fn normalize_patches(pixels: &Tensor) -> Result<Tensor> {
    let (_, c) = pixels.dims2()?;
    let mut out = pixels.clone();
    for row in out.data_mut().chunks_mut(c) {
        let (mean, rstd) = tensor::row_moments(row, 1e-6);
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
    }
    Ok(out)
}
