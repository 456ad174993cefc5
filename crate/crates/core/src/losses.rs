//! Circle loss and its tuple generalisation for cross-modal pairs.
//!
//! Every feature row is a tuple `[x_sh, x_pr]`: the leading `d_sh` columns are
//! shared between modalities, the remaining `d_pr` are private. Pairs within
//! one modality compare full rows; pairs across modalities compare only the
//! shared span.
//!
//! For an anchor with positive similarities `s⁺` and negatives `s⁻`:
//!
//! ```text
//! α⁻ = γ·max(s⁻ + m, 0)        α⁺ = γ·max(1 + m − s⁺, 0)
//! Δ⁻ = m                        Δ⁺ = 1 − m
//! L  = log(1 + Σ exp(α⁻(s⁻ − Δ⁻)) · Σ exp(−α⁺(s⁺ − Δ⁺)))
//! ```
//!
//! The self-paced weights are part of the differentiated function (not
//! detached). The sums are evaluated as log-sum-exp so large `γ` is safe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleLayout {
    pub d_sh: usize,
    pub d_pr: usize,
}

impl TupleLayout {
    pub fn new(d_sh: usize, d_pr: usize) -> Result<Self> {
        if d_sh == 0 || d_pr == 0 {
            return Err(Error::Config(format!(
                "tuple layout needs d_sh >= 1 and d_pr >= 1, got {d_sh}/{d_pr}"
            )));
        }
        Ok(TupleLayout { d_sh, d_pr })
    }

    pub fn total(&self) -> usize {
        self.d_sh + self.d_pr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleParams {
    pub gamma: f64,
    pub m: f64,
}

impl CircleParams {
    pub fn new(gamma: f64, m: f64) -> Result<Self> {
        if !(gamma > 0.0) || !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("circle params need gamma > 0 and 0 < m < 1, got {gamma}/{m}")));
        }
        Ok(CircleParams { gamma, m })
    }

    pub fn delta_neg(&self) -> f64 {
        self.m
    }

    pub fn delta_pos(&self) -> f64 {
        1.0 - self.m
    }

    /// α⁻(s) = γ·max(s + m, 0).
    pub fn alpha_neg(&self, s: f64) -> f64 {
        self.gamma * (s + self.m).max(0.0)
    }

    /// α⁺(s) = γ·max(1 + m − s, 0).
    pub fn alpha_pos(&self, s: f64) -> f64 {
        self.gamma * (1.0 + self.m - s).max(0.0)
    }
}

impl Default for CircleParams {
    fn default() -> Self {
        CircleParams { gamma: 32.0, m: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    TupleCircle,
    Circle,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuple_circle" => Ok(LossVariant::TupleCircle),
            "circle" => Ok(LossVariant::Circle),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Inter,
    Cross,
}

/// Four aligned `[N, D]` feature matrices; row `i` of each is the same
/// physical location.
#[derive(Debug, Clone)]
pub struct CorrespondenceBatch {
    pub img: Tensor,
    pub img_aug: Tensor,
    pub pc: Tensor,
    pub pc_aug: Tensor,
}

impl CorrespondenceBatch {
    pub fn new(img: Tensor, img_aug: Tensor, pc: Tensor, pc_aug: Tensor) -> Result<Self> {
        let s = img.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("correspondence_batch", format!("need [N, D], got {s:?}")));
        }
        for t in [&img_aug, &pc, &pc_aug] {
            if t.shape() != s.as_slice() {
                return Err(Error::shape("correspondence_batch", &s, t.shape()));
            }
        }
        Ok(CorrespondenceBatch { img, img_aug, pc, pc_aug })
    }

    pub fn n(&self) -> usize {
        self.img.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.img.shape()[1]
    }

    fn views(&self, modality: Modality) -> (&Tensor, &Tensor) {
        match modality {
            Modality::Image => (&self.img, &self.img_aug),
            Modality::Point => (&self.pc, &self.pc_aug),
        }
    }

    fn require_pairs(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::DegenerateBatch(format!("need N >= 2 rows, got {}", self.n())));
        }
        Ok(())
    }
}

/// Positive and negative similarities for one anchor.
#[derive(Debug, Clone)]
pub struct PairSimilarities {
    pub s_pos: Tensor,
    pub s_neg: Tensor,
    pub pos_kind: Vec<PairKind>,
    pub neg_kind: Vec<PairKind>,
}

impl PairSimilarities {
    pub fn counts(&self) -> (usize, usize) {
        (self.s_pos.len(), self.s_neg.len())
    }

    /// Union of two pair sets, positives and negatives kept apart.
    pub fn union(&self, other: &PairSimilarities) -> Result<PairSimilarities> {
        Ok(PairSimilarities {
            s_pos: Tensor::concat_last(&[self.s_pos.clone(), other.s_pos.clone()])?,
            s_neg: Tensor::concat_last(&[self.s_neg.clone(), other.s_neg.clone()])?,
            pos_kind: [self.pos_kind.as_slice(), &other.pos_kind].concat(),
            neg_kind: [self.neg_kind.as_slice(), &other.neg_kind].concat(),
        })
    }
}

/// a·b / (|a||b|) for two vectors (any shape, flattened).
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.shape(), b.shape()));
    }
    let d = a.len();
    let na = a.reshape(&[1, d])?.l2_normalize_rows().map_err(|_| Error::ZeroNorm("cosine_sim"))?;
    let nb = b.reshape(&[1, d])?.l2_normalize_rows().map_err(|_| Error::ZeroNorm("cosine_sim"))?;
    Ok(na.mul(&nb)?.sum_all())
}

/// Negative-pair exponents α⁻(s − Δ⁻), elementwise.
fn neg_logits(s: &Tensor, p: CircleParams) -> Result<Tensor> {
    let alpha = s.add_scalar(p.m).clamp_min(0.0).scale(p.gamma);
    s.add_scalar(-p.delta_neg()).mul(&alpha)
}

/// Positive-pair exponents −α⁺(s − Δ⁺), elementwise.
fn pos_logits(s: &Tensor, p: CircleParams) -> Result<Tensor> {
    let alpha = s.scale(-1.0).add_scalar(1.0 + p.m).clamp_min(0.0).scale(p.gamma);
    Ok(s.add_scalar(-p.delta_pos()).mul(&alpha)?.scale(-1.0))
}

/// Row-wise log-sum-exp of `[A, K]`, shifted by the (constant) row max.
fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut shift = Vec::with_capacity(rows);
    let mut shift_full = Vec::with_capacity(rows * cols);
    for row in x.values().chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.push(m);
        shift_full.extend(std::iter::repeat_n(m, cols));
    }
    let centered = x.sub(&Tensor::new(shift_full, &[rows, cols])?)?;
    centered.exp().sum_axis(1)?.log().add(&Tensor::new(shift, &[rows])?)
}

/// Per-row circle loss for `[A, K⁺]` positives and `[A, K⁻]` negatives.
fn circle_rows(s_pos: &Tensor, s_neg: &Tensor, p: CircleParams) -> Result<Tensor> {
    let lse_neg = logsumexp_rows(&neg_logits(s_neg, p)?)?;
    let lse_pos = logsumexp_rows(&pos_logits(s_pos, p)?)?;
    Ok(lse_neg.add(&lse_pos)?.softplus())
}

/// Circle loss over one set of positive and negative similarities.
pub fn circle_loss(s_pos: &Tensor, s_neg: &Tensor, p: CircleParams) -> Result<Tensor> {
    if s_pos.is_empty() || s_neg.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "circle loss needs positives and negatives, got {}/{}",
            s_pos.len(),
            s_neg.len()
        )));
    }
    let pos = s_pos.reshape(&[1, s_pos.len()])?;
    let neg = s_neg.reshape(&[1, s_neg.len()])?;
    circle_rows(&pos, &neg, p)?.reshape(&[1])
}

fn row(t: &Tensor, i: usize) -> Result<Tensor> {
    let d = t.shape()[1];
    t.gather_rows(&[i])?.reshape(&[d])
}

fn shared(t: &Tensor, d_sh: usize) -> Result<Tensor> {
    t.slice_last(0, d_sh)
}

fn stack_scalars(items: Vec<Tensor>) -> Result<Tensor> {
    Tensor::concat_last(&items)
}

/// One positive (anchor vs. the same row of the augmented view) and N−1
/// negatives (anchor vs. every other augmented row), on full rows.
pub fn build_inter_pairs(
    batch: &CorrespondenceBatch,
    anchor_row: usize,
    modality: Modality,
) -> Result<PairSimilarities> {
    batch.require_pairs()?;
    let n = batch.n();
    if anchor_row >= n {
        return Err(Error::invalid("build_inter_pairs", format!("row {anchor_row} of {n}")));
    }
    let (plain, aug) = batch.views(modality);
    let anchor = row(plain, anchor_row)?;
    let s_pos = cosine_sim(&anchor, &row(aug, anchor_row)?)?;
    let negs = (0..n)
        .filter(|&j| j != anchor_row)
        .map(|j| cosine_sim(&anchor, &row(aug, j)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairSimilarities {
        s_pos,
        s_neg: stack_scalars(negs)?,
        pos_kind: vec![PairKind::Inter],
        neg_kind: vec![PairKind::Inter; n - 1],
    })
}

/// Four positives ({img, img_aug} × {pc, pc_aug} at the anchor row) and
/// 2N−2 negatives (plain anchor vs. the other modality's non-matching rows in
/// both views), all on the shared span.
pub fn build_cross_pairs(
    batch: &CorrespondenceBatch,
    anchor_row: usize,
    anchor_modality: Modality,
    layout: TupleLayout,
) -> Result<PairSimilarities> {
    build_cross_pairs_span(batch, anchor_row, anchor_modality, layout.d_sh)
}

fn build_cross_pairs_span(
    batch: &CorrespondenceBatch,
    anchor_row: usize,
    anchor_modality: Modality,
    span: usize,
) -> Result<PairSimilarities> {
    batch.require_pairs()?;
    let n = batch.n();
    if anchor_row >= n || span == 0 || span > batch.width() {
        return Err(Error::invalid(
            "build_cross_pairs",
            format!("row {anchor_row} of {n}, span {span} of {}", batch.width()),
        ));
    }
    let sh = |t: &Tensor, i: usize| shared(&row(t, i)?.reshape(&[1, batch.width()])?, span);
    let mut pos = Vec::with_capacity(4);
    for img in [&batch.img, &batch.img_aug] {
        for pc in [&batch.pc, &batch.pc_aug] {
            pos.push(cosine_sim(&sh(img, anchor_row)?, &sh(pc, anchor_row)?)?);
        }
    }
    let other = match anchor_modality {
        Modality::Image => Modality::Point,
        Modality::Point => Modality::Image,
    };
    let anchor = sh(batch.views(anchor_modality).0, anchor_row)?;
    let (other_plain, other_aug) = batch.views(other);
    let mut neg = Vec::with_capacity(2 * (n - 1));
    for view in [other_plain, other_aug] {
        for j in (0..n).filter(|&j| j != anchor_row) {
            neg.push(cosine_sim(&anchor, &sh(view, j)?)?);
        }
    }
    Ok(PairSimilarities {
        s_pos: stack_scalars(pos)?,
        s_neg: stack_scalars(neg)?,
        pos_kind: vec![PairKind::Cross; 4],
        neg_kind: vec![PairKind::Cross; 2 * (n - 1)],
    })
}

/// Vectorised pair construction for all 2N anchors (image anchors first).
/// Returns `[2N, 5]` positives and `[2N, 3N−3]` negatives; cross pairs use
/// the leading `span` columns.
fn all_anchor_pairs(batch: &CorrespondenceBatch, span: usize) -> Result<(Tensor, Tensor)> {
    batch.require_pairs()?;
    let (n, d) = (batch.n(), batch.width());
    if span == 0 || span > d {
        return Err(Error::invalid("pair_similarities", format!("span {span} of width {d}")));
    }
    let full = |t: &Tensor| t.l2_normalize_rows();
    let part = |t: &Tensor| {
        if span == d {
            t.l2_normalize_rows()
        } else {
            t.slice_last(0, span)?.l2_normalize_rows()
        }
    };
    let (i_f, ia_f, p_f, pa_f) = (full(&batch.img)?, full(&batch.img_aug)?, full(&batch.pc)?, full(&batch.pc_aug)?);
    let (i_s, ia_s, p_s, pa_s) = (part(&batch.img)?, part(&batch.img_aug)?, part(&batch.pc)?, part(&batch.pc_aug)?);

    let sims = |a: &Tensor, b: &Tensor| a.matmul(&b.transpose()?);
    let blocks = [
        sims(&i_f, &ia_f)?,  // 0: inter image   [a, b]
        sims(&p_f, &pa_f)?,  // 1: inter point
        sims(&i_s, &p_s)?,   // 2: img · pc
        sims(&i_s, &pa_s)?,  // 3: img · pc_aug
        sims(&p_s, &ia_s)?,  // 4: pc · img_aug
        ia_s.mul(&pa_s)?.sum_axis(1)?.reshape(&[n, 1])?, // 5: img_aug · pc_aug, diagonal only
    ];
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut flat = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for b in &blocks {
        offsets.push(off);
        off += b.len();
        flat.push(b.reshape(&[1, b.len()])?);
    }
    let all = Tensor::concat_last(&flat)?;
    let at = |block: usize, i: usize, j: usize| offsets[block] + i * n + j;
    let diag5 = |i: usize| offsets[5] + i;

    let mut pos_idx = Vec::with_capacity(2 * n * 5);
    let mut neg_idx = Vec::with_capacity(2 * n * 3 * (n - 1));
    for anchor in [Modality::Image, Modality::Point] {
        for i in 0..n {
            let inter = match anchor {
                Modality::Image => 0,
                Modality::Point => 1,
            };
            pos_idx.extend([at(inter, i, i), at(2, i, i), at(3, i, i), at(4, i, i), diag5(i)]);
            let others = (0..n).filter(move |&j| j != i);
            neg_idx.extend(others.clone().map(|j| at(inter, i, j)));
            match anchor {
                Modality::Image => {
                    neg_idx.extend(others.clone().map(|j| at(2, i, j)));
                    neg_idx.extend(others.map(|j| at(3, i, j)));
                }
                Modality::Point => {
                    neg_idx.extend(others.clone().map(|j| at(2, j, i)));
                    neg_idx.extend(others.map(|j| at(4, i, j)));
                }
            }
        }
    }
    let pos = all.gather_flat(&pos_idx, &[2 * n, 5])?;
    let neg = all.gather_flat(&neg_idx, &[2 * n, 3 * (n - 1)])?;
    Ok((pos, neg))
}

fn paired_loss(batch: &CorrespondenceBatch, span: usize, p: CircleParams) -> Result<Tensor> {
    let (pos, neg) = all_anchor_pairs(batch, span)?;
    Ok(circle_rows(&pos, &neg, p)?.mean_all())
}

/// Mean over all 2N anchors of the circle loss on the union of the anchor's
/// inter pairs (full rows) and cross pairs (shared span).
pub fn tuple_circle_loss(batch: &CorrespondenceBatch, layout: TupleLayout, p: CircleParams) -> Result<Tensor> {
    if layout.total() != batch.width() {
        return Err(Error::invalid(
            "tuple_circle_loss",
            format!("layout width {} vs feature width {}", layout.total(), batch.width()),
        ));
    }
    paired_loss(batch, layout.d_sh, p)
}

/// Baseline: the same anchors and pairs, but cross pairs also compare full
/// rows (no tuple split).
pub fn circle_loss_batch(batch: &CorrespondenceBatch, p: CircleParams) -> Result<Tensor> {
    paired_loss(batch, batch.width(), p)
}

pub fn batch_loss(
    batch: &CorrespondenceBatch,
    variant: LossVariant,
    layout: TupleLayout,
    p: CircleParams,
) -> Result<Tensor> {
    match variant {
        LossVariant::TupleCircle => tuple_circle_loss(batch, layout, p),
        LossVariant::Circle => circle_loss_batch(batch, p),
    }
}

/// Per-anchor reference: mean of `circle_loss` over each anchor's pair union,
/// built one cosine at a time. Slow; used to cross-check the batched path.
pub fn tuple_circle_loss_per_anchor(
    batch: &CorrespondenceBatch,
    span: usize,
    p: CircleParams,
) -> Result<Tensor> {
    let n = batch.n();
    let mut terms = Vec::with_capacity(2 * n);
    for modality in [Modality::Image, Modality::Point] {
        for i in 0..n {
            let pairs = build_inter_pairs(batch, i, modality)?
                .union(&build_cross_pairs_span(batch, i, modality, span)?)?;
            terms.push(circle_loss(&pairs.s_pos, &pairs.s_neg, p)?);
        }
    }
    Ok(Tensor::concat_last(&terms)?.mean_all())
}
