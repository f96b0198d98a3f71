//! Subsampled global attention.
//!
//! Every query attends to one shared softmax over three disjoint parts:
//! the kept keys (all special tokens plus the selected patches of every
//! frame), its own key when that key was dropped, and a mean key/value pair
//! standing in for all dropped patches. [`sga_attention`] streams the three
//! parts through a running max/sum; [`sga_oracle`] materializes the
//! augmented key list for each query and runs exact 64-bit attention on it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attention::{
    check_finite, check_qkv, dense_attention_exact, softmax_scale, streamed_attention, Component,
};
pub use crate::attention::QueryStats;
use crate::error::{Error, Result};
use crate::model::PatchGrid;
use crate::subsample::{KVSelection, MeanScope, MeanWeighting, SubsampleSpec};
use crate::tensor::{dot, Matrix, Real};

/// Flags controlling the extra softmax components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgaOptions {
    pub diagonal: bool,
    pub mean_fill: bool,
    pub mean_scope: MeanScope,
    pub mean_weighting: MeanWeighting,
}

impl SgaOptions {
    pub fn plain() -> Self {
        Self {
            diagonal: false,
            mean_fill: false,
            mean_scope: MeanScope::Global,
            mean_weighting: MeanWeighting::Single,
        }
    }
}

impl From<&SubsampleSpec> for SgaOptions {
    fn from(s: &SubsampleSpec) -> Self {
        Self {
            diagonal: s.diagonal,
            mean_fill: s.mean_fill,
            mean_scope: s.mean_scope,
            mean_weighting: s.mean_weighting,
        }
    }
}

/// Key/value layout of one subsampled global layer over the (N·L) rows of a
/// batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct SgaPlan {
    frames: usize,
    tokens_per_frame: usize,
    num_special: usize,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    pooled: Vec<Vec<usize>>,
    is_dropped: Vec<bool>,
    pub options: SgaOptions,
}

impl SgaPlan {
    /// Plan from per-frame selections (frame-local patch indices).
    pub fn from_selections(
        selections: &[KVSelection],
        grid: PatchGrid,
        num_special: usize,
        options: SgaOptions,
    ) -> Result<Self> {
        let t = grid.num_patches();
        let l = t + num_special;
        let frames = selections.len();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut pooled = Vec::new();
        for (f, sel) in selections.iter().enumerate() {
            if sel.kept.len() + sel.dropped.len() != t
                || sel.kept.iter().chain(&sel.dropped).any(|&p| p >= t)
            {
                return Err(Error::InvalidArgument(format!(
                    "selection of frame {f} does not partition {t} patches"
                )));
            }
            let base = f * l;
            kept.extend(base..base + num_special);
            kept.extend(sel.kept.iter().map(|p| base + num_special + p));
            dropped.extend(sel.dropped.iter().map(|p| base + num_special + p));
            pooled.extend(
                sel.pooled
                    .iter()
                    .map(|g| g.iter().map(|p| base + num_special + p).collect::<Vec<_>>()),
            );
        }
        Self::new(frames, l, num_special, kept, dropped, pooled, options)
    }

    /// Plan from explicit global row lists.
    pub fn new(
        frames: usize,
        tokens_per_frame: usize,
        num_special: usize,
        mut kept: Vec<usize>,
        mut dropped: Vec<usize>,
        pooled: Vec<Vec<usize>>,
        options: SgaOptions,
    ) -> Result<Self> {
        let rows = frames * tokens_per_frame;
        kept.sort_unstable();
        dropped.sort_unstable();
        let mut seen = vec![0u8; rows];
        for &r in kept.iter().chain(&dropped) {
            if r >= rows {
                return Err(Error::InvalidArgument(format!("row {r} out of range {rows}")));
            }
            seen[r] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::InvalidArgument(
                "kept and dropped rows must partition all rows".into(),
            ));
        }
        if pooled.iter().flatten().any(|&r| r >= rows) || pooled.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("invalid pooled group".into()));
        }
        if kept.is_empty() && pooled.is_empty() {
            return Err(Error::EmptyKeySet);
        }
        let mut is_dropped = vec![false; rows];
        dropped.iter().for_each(|&r| is_dropped[r] = true);
        Ok(Self {
            frames,
            tokens_per_frame,
            num_special,
            kept,
            dropped,
            pooled,
            is_dropped,
            options,
        })
    }

    /// Every row kept: degenerates to dense attention.
    pub fn dense(frames: usize, tokens_per_frame: usize, num_special: usize) -> Self {
        let rows = frames * tokens_per_frame;
        Self::new(
            frames,
            tokens_per_frame,
            num_special,
            (0..rows).collect(),
            Vec::new(),
            Vec::new(),
            SgaOptions::plain(),
        )
        .expect("dense plan is valid")
    }

    pub fn rows(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn num_special(&self) -> usize {
        self.num_special
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn pooled(&self) -> &[Vec<usize>] {
        &self.pooled
    }

    pub fn is_dropped(&self, row: usize) -> bool {
        self.is_dropped[row]
    }

    /// Dropped rows grouped by mean-fill pair (empty groups omitted).
    pub fn mean_groups(&self) -> Vec<Vec<usize>> {
        match self.options.mean_scope {
            MeanScope::Global if self.dropped.is_empty() => Vec::new(),
            MeanScope::Global => vec![self.dropped.clone()],
            MeanScope::PerFrame => {
                let mut groups = vec![Vec::new(); self.frames];
                for &r in &self.dropped {
                    groups[r / self.tokens_per_frame].push(r);
                }
                groups.retain(|g| !g.is_empty());
                groups
            }
        }
    }

    /// Key columns each query sees: kept + synthesized + diagonal + means.
    pub fn columns_for(&self, row: usize) -> usize {
        let diag = usize::from(self.options.diagonal && self.is_dropped[row]);
        let means = if self.options.mean_fill {
            self.mean_groups().len()
        } else {
            0
        };
        self.kept.len() + self.pooled.len() + diag + means
    }

    fn check<T: Real>(&self, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
        check_qkv(q, k, v)?;
        if q.rows() != self.rows() || k.rows() != self.rows() {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} rows, tensors have {} queries and {} keys",
                self.rows(),
                q.rows(),
                k.rows()
            )));
        }
        check_finite(&[("Q", q), ("K", k), ("V", v)])
    }
}

/// Mean key/value over a set of dropped rows, accumulated in 64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPair<T> {
    pub k_bar: Vec<T>,
    pub v_bar: Vec<T>,
    pub count: usize,
}

impl<T: Real> MeanPair<T> {
    pub fn over(rows: &[usize], k: &Matrix<T>, v: &Matrix<T>) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let mean = |m: &Matrix<T>| {
            let mut acc = vec![0f64; m.cols()];
            for &r in rows {
                for (a, &x) in acc.iter_mut().zip(m.row(r)) {
                    *a += x.to_f64();
                }
            }
            acc.iter()
                .map(|a| T::from_f64_lossy(a / rows.len() as f64))
                .collect()
        };
        Some(Self {
            k_bar: mean(k),
            v_bar: mean(v),
            count: rows.len(),
        })
    }

    /// Logit offset encoding the softmax multiplicity.
    fn log_multiplicity(&self, weighting: MeanWeighting) -> T {
        match weighting {
            MeanWeighting::Single => T::zero(),
            MeanWeighting::CountWeighted => T::from_f64_lossy((self.count as f64).ln()),
        }
    }
}


/// Kept keys/values gathered contiguously, followed by synthesized
/// (pooled-mean) rows.
fn compact_keys<T: Real>(k: &Matrix<T>, v: &Matrix<T>, plan: &SgaPlan) -> (Matrix<T>, Matrix<T>) {
    let mut kc = k.gather_rows(&plan.kept);
    let mut vc = v.gather_rows(&plan.kept);
    if !plan.pooled.is_empty() {
        let mut kd = kc.into_vec();
        let mut vd = vc.into_vec();
        for group in &plan.pooled {
            let pair = MeanPair::over(group, k, v).expect("pooled groups are non-empty");
            kd.extend(pair.k_bar);
            vd.extend(pair.v_bar);
        }
        let n = plan.kept.len() + plan.pooled.len();
        kc = Matrix::from_vec(n, k.cols(), kd).expect("sized");
        vc = Matrix::from_vec(n, v.cols(), vd).expect("sized");
    }
    (kc, vc)
}

/// Subsampled global attention for one head; see [`sga_attention_with_stats`].
pub fn sga_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    plan: &SgaPlan,
) -> Result<Matrix<T>> {
    sga_attention_with_stats(q, k, v, plan).map(|(out, _)| out)
}

/// Streaming kernel returning the output and each query's accumulators.
pub fn sga_attention_with_stats<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    plan: &SgaPlan,
) -> Result<(Matrix<T>, Vec<QueryStats>)> {
    plan.check(q, k, v)?;
    let scale = softmax_scale::<T>(q.cols());
    let (kc, vc) = compact_keys(k, v, plan);
    let means: Vec<MeanPair<T>> = if plan.options.mean_fill {
        plan.mean_groups()
            .iter()
            .filter_map(|g| MeanPair::over(g, k, v))
            .collect()
    } else {
        Vec::new()
    };
    Ok(streamed_attention(q, &kc, &vc, scale, |i, qi, sm| {
        if plan.options.diagonal && plan.is_dropped[i] {
            sm.push(dot(qi, k.row(i)) * scale, v.row(i), Component::Diagonal);
        }
        for pair in &means {
            let logit = dot(qi, &pair.k_bar) * scale + pair.log_multiplicity(plan.options.mean_weighting);
            sm.push(logit, &pair.v_bar, Component::Mean);
        }
    }))
}

/// Independent reference: for each query, the explicit augmented key/value
/// list fed to exact 64-bit dense attention. Count-weighted means are
/// materialized as repeated rows.
pub fn sga_oracle<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    plan: &SgaPlan,
) -> Result<Matrix<f64>> {
    plan.check(q, k, v)?;
    let q = q.cast::<f64>();
    let k = k.cast::<f64>();
    let v = v.cast::<f64>();
    let dropped: HashSet<usize> = plan.dropped.iter().copied().collect();

    let average = |rows: &[usize], m: &Matrix<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; m.cols()];
        for &r in rows {
            for c in 0..m.cols() {
                acc[c] += m.get(r, c);
            }
        }
        acc.into_iter().map(|a| a / rows.len() as f64).collect()
    };

    let mut base_k: Vec<Vec<f64>> = plan.kept.iter().map(|&r| k.row(r).to_vec()).collect();
    let mut base_v: Vec<Vec<f64>> = plan.kept.iter().map(|&r| v.row(r).to_vec()).collect();
    for group in &plan.pooled {
        base_k.push(average(group, &k));
        base_v.push(average(group, &v));
    }
    if plan.options.mean_fill {
        let groups: Vec<Vec<usize>> = match plan.options.mean_scope {
            MeanScope::Global => vec![plan.dropped.clone()],
            MeanScope::PerFrame => (0..plan.frames)
                .map(|f| {
                    plan.dropped
                        .iter()
                        .copied()
                        .filter(|r| r / plan.tokens_per_frame == f)
                        .collect()
                })
                .collect(),
        };
        for group in groups.iter().filter(|g| !g.is_empty()) {
            let copies = match plan.options.mean_weighting {
                MeanWeighting::Single => 1,
                MeanWeighting::CountWeighted => group.len(),
            };
            let (kb, vb) = (average(group, &k), average(group, &v));
            for _ in 0..copies {
                base_k.push(kb.clone());
                base_v.push(vb.clone());
            }
        }
    }

    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let mut keys = base_k.clone();
        let mut values = base_v.clone();
        if plan.options.diagonal && dropped.contains(&i) {
            keys.push(k.row(i).to_vec());
            values.push(v.row(i).to_vec());
        }
        let qi = Matrix::from_vec(1, q.cols(), q.row(i).to_vec())?;
        let row = dense_attention_exact(&qi, &Matrix::from_rows(&keys)?, &Matrix::from_rows(&values)?)?;
        out.row_mut(i).copy_from_slice(row.row(0));
    }
    Ok(out)
}

/// Every key and value replaced by their mean over all rows: each output row
/// is the mean value row regardless of the queries.
pub fn mean_kv_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let all: Vec<usize> = (0..v.rows()).collect();
    let pair = MeanPair::over(&all, k, v).ok_or(Error::EmptyKeySet)?;
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        out.row_mut(i).copy_from_slice(&pair.v_bar);
    }
    Ok(out)
}

/// Largest elementwise error relative to the reference's largest magnitude.
pub fn max_relative_error<T: Real>(got: &Matrix<T>, reference: &Matrix<f64>) -> f64 {
    let scale = reference
        .as_slice()
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-30);
    got.as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(&a, &b)| (a.to_f64() - b).abs() / scale)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_attention;
    use crate::subsample::{select_kv, Strategy};
    use crate::model::{init_tokens, ModelConfig, TokenLayout};

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn opts(diagonal: bool, mean_fill: bool) -> SgaOptions {
        SgaOptions {
            diagonal,
            mean_fill,
            ..SgaOptions::plain()
        }
    }

    /// One frame, no specials: rows 0 (kept) and 1 (dropped).
    fn two_row_plan(diagonal: bool, mean_fill: bool) -> SgaPlan {
        SgaPlan::new(1, 2, 0, vec![0], vec![1], vec![], opts(diagonal, mean_fill)).unwrap()
    }

    #[test]
    fn hand_computed_mean_fill_case() {
        // logits (1/sqrt2, -1/sqrt2) -> weights (0.80443, 0.19557)
        let q = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let plan = two_row_plan(false, true);
        let (out, stats) = sga_attention_with_stats(&q, &k, &v, &plan).unwrap();
        let oracle = sga_oracle(&q, &k, &v, &plan).unwrap();
        let w1 = 1.0 / (1.0 + (-2f64.sqrt()).exp());
        assert!((w1 - 0.804_429).abs() < 1e-6);
        for i in 0..2 {
            assert!((out.get(i, 0) - w1).abs() < 1e-12);
            assert!((out.get(i, 1) - (1.0 - w1)).abs() < 1e-12);
            assert!((oracle.get(i, 0) - w1).abs() < 1e-12);
            assert!((stats[i].mean_weight() - (1.0 - w1)).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_split_uniformly_with_diagonal() {
        // Query 3 is dropped; all its logits are zero.
        let q = m(&[&[0.0, 0.0] as &[f64]; 4]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[2.0, 2.0]]);
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[5.0, 5.0]]);
        for mean_fill in [false, true] {
            let plan = SgaPlan::new(1, 4, 0, vec![0, 1, 2], vec![3], vec![], opts(true, mean_fill)).unwrap();
            let (_, stats) = sga_attention_with_stats(&q, &k, &v, &plan).unwrap();
            let share = 1.0 / (3.0 + 1.0 + f64::from(u8::from(mean_fill)));
            assert!((stats[3].diagonal_weight() - share).abs() < 1e-12);
            assert!((stats[3].kept_weight() - 3.0 * share).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_is_a_no_op_for_kept_queries() {
        let q = m(&[&[0.3, -0.2], &[1.0, 0.5], &[0.7, 0.1]]);
        let k = m(&[&[1.0, 0.0], &[-1.0, 0.5], &[0.2, 0.9]]);
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let on = SgaPlan::new(1, 3, 0, vec![0, 2], vec![1], vec![], opts(true, true)).unwrap();
        let off = SgaPlan::new(1, 3, 0, vec![0, 2], vec![1], vec![], opts(false, true)).unwrap();
        let a = sga_attention(&q, &k, &v, &on).unwrap();
        let b = sga_attention(&q, &k, &v, &off).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn dense_plan_matches_dense_attention() {
        let cfg = ModelConfig::new(TokenLayout::Pi3Style);
        let t = init_tokens(&cfg, 1, 2, 3, 3, 5).unwrap();
        let x = Matrix::from_vec(28, 64, t.as_slice().to_vec()).unwrap();
        let plan = SgaPlan::dense(2, 14, 5);
        let got = sga_attention(&x, &x, &x, &plan).unwrap();
        let want = dense_attention(&x, &x, &x).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
        let oracle = sga_oracle(&x, &x, &x, &plan).unwrap();
        assert!(max_relative_error(&got, &oracle) < 1e-5);
    }

    #[test]
    fn plain_masking_equals_restricted_dense() {
        let q = m(&[&[0.3, -0.2], &[1.0, 0.5], &[0.7, 0.1]]);
        let k = m(&[&[1.0, 0.0], &[-1.0, 0.5], &[0.2, 0.9]]);
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let plan = SgaPlan::new(1, 3, 0, vec![0, 2], vec![1], vec![], SgaOptions::plain()).unwrap();
        let want = dense_attention_exact(&q, &k.gather_rows(&[0, 2]), &v.gather_rows(&[0, 2])).unwrap();
        assert!(sga_oracle(&q, &k, &v, &plan).unwrap().max_abs_diff(&want) < 1e-15);
        assert!(sga_attention(&q, &k, &v, &plan).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn mean_kv_outputs_mean_value() {
        let q = m(&[&[100.0, -3.0], &[0.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = m(&[&[1.0, 3.0], &[3.0, 5.0]]);
        let out = mean_kv_attention(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), &[2.0, 4.0]);
        assert_eq!(out.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_nan_and_shape_mismatch() {
        let plan = two_row_plan(true, true);
        let q = m(&[&[f64::NAN, 0.0], &[0.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(sga_attention(&q, &k, &k, &plan), Err(Error::NonFinite(_))));
        let q3 = m(&[&[0.0, 0.0] as &[f64]; 3]);
        assert!(matches!(sga_attention(&q3, &k, &k, &plan), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn plan_rejects_overlap() {
        let err = SgaPlan::new(1, 2, 0, vec![0, 1], vec![1], vec![], SgaOptions::plain());
        assert!(err.is_err());
    }

    #[test]
    fn count_weighted_and_per_frame_variants_match_oracle() {
        let cfg = ModelConfig::new(TokenLayout::Pi3Style);
        let batch = init_tokens(&cfg, 1, 3, 4, 4, 9).unwrap();
        for scope in [MeanScope::Global, MeanScope::PerFrame] {
            for weighting in [MeanWeighting::Single, MeanWeighting::CountWeighted] {
                let spec = SubsampleSpec {
                    mean_scope: scope,
                    mean_weighting: weighting,
                    ..SubsampleSpec::new(4, TokenLayout::Pi3Style).unwrap()
                };
                let sels: Vec<_> = (0..3).map(|f| select_kv(&batch, 0, f, &spec, None).unwrap()).collect();
                let plan = SgaPlan::from_selections(&sels, batch.grid(), 5, (&spec).into()).unwrap();
                let x = Matrix::from_vec(63, 64, batch.as_slice().to_vec()).unwrap();
                let got = sga_attention(&x, &x, &x, &plan).unwrap();
                let want = sga_oracle(&x, &x, &x, &plan).unwrap();
                assert!(max_relative_error(&got, &want) < 1e-5, "{scope:?} {weighting:?}");
            }
        }
    }

    #[test]
    fn mean_pool_plan_uses_synthesized_rows() {
        let cfg = ModelConfig::new(TokenLayout::Pi3Style);
        let batch = init_tokens(&cfg, 1, 2, 4, 4, 2).unwrap();
        let spec = SubsampleSpec {
            strategy: Strategy::MeanPool,
            ..SubsampleSpec::new(4, TokenLayout::Pi3Style).unwrap()
        };
        let sels: Vec<_> = (0..2).map(|f| select_kv(&batch, 0, f, &spec, None).unwrap()).collect();
        let plan = SgaPlan::from_selections(&sels, batch.grid(), 5, (&spec).into()).unwrap();
        assert_eq!(plan.kept().len(), 10);
        assert_eq!(plan.pooled().len(), 8);
        assert_eq!(plan.columns_for(7), 10 + 8 + 1 + 1);
        let x = Matrix::from_vec(42, 64, batch.as_slice().to_vec()).unwrap();
        let got = sga_attention(&x, &x, &x, &plan).unwrap();
        let want = sga_oracle(&x, &x, &x, &plan).unwrap();
        assert!(max_relative_error(&got, &want) < 1e-5);
    }
}
