//! Layer schedules and the alternating frame/global forward pass.
//!
//! Global layers are indexed from 0 in depth order. Layers below `t_early`
//! run as frame attention with their own weights (the cross-frame
//! rearrangement is skipped), layers in `t_early..=t_end` run subsampled
//! global attention, and layers above `t_end` are frame-converted again.

use std::fmt;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention, dense_attention_exact, multi_head};
use crate::error::{Error, Result};
use crate::model::{BlockWeights, Model, PatchGrid, TokenBatch, TokenLayout};
use crate::sga::{mean_kv_attention, sga_attention, sga_oracle, SgaOptions, SgaPlan};
use crate::subsample::{
    select_frame, MeanScope, MeanWeighting, ScoreMaps, Strategy, SubsampleSpec,
};
use crate::tensor::{gelu, layer_norm, Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LayerMode {
    FrameConverted,
    DenseGlobal,
    Subsampled(SubsampleSpec),
    MeanKv,
}

impl fmt::Display for LayerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMode::FrameConverted => f.write_str("frame_converted"),
            LayerMode::DenseGlobal => f.write_str("dense_global"),
            LayerMode::MeanKv => f.write_str("mean_kv"),
            LayerMode::Subsampled(s) => write!(
                f,
                "subsampled(sigma={}, {}x{}, {}, diag={}, mean={}, first_full={})",
                s.sigma, s.s_h, s.s_w, s.strategy, s.diagonal, s.mean_fill, s.keep_first_frame_full
            ),
        }
    }
}

/// What the layers below `t_early` become.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyMode {
    #[default]
    FrameConverted,
    /// Keys and values replaced by their mean.
    MeanKv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub strategy: Strategy,
    pub seed: u64,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub keep_first_frame_full: bool,
    pub mean_scope: MeanScope,
    pub mean_weighting: MeanWeighting,
    pub early_mode: EarlyMode,
    /// Reuse the selection of the first subsampled layer for feature-dependent
    /// strategies instead of recomputing it per layer.
    pub freeze_selection: bool,
}

impl ScheduleOptions {
    pub fn for_layout(layout: TokenLayout) -> Self {
        Self {
            strategy: Strategy::FixedGrid,
            seed: 0,
            diagonal: true,
            mean_fill: true,
            keep_first_frame_full: layout.keeps_first_frame_full(),
            mean_scope: MeanScope::Global,
            mean_weighting: MeanWeighting::Single,
            early_mode: EarlyMode::FrameConverted,
            freeze_selection: false,
        }
    }

    pub fn subsample_spec(&self, sigma: usize) -> Result<SubsampleSpec> {
        let base = SubsampleSpec::new(sigma, TokenLayout::Pi3Style)?;
        Ok(SubsampleSpec {
            strategy: self.strategy,
            seed: self.seed,
            keep_first_frame_full: self.keep_first_frame_full,
            diagonal: self.diagonal,
            mean_fill: self.mean_fill,
            mean_scope: self.mean_scope,
            mean_weighting: self.mean_weighting,
            ..base
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub modes: Vec<LayerMode>,
    pub t_early: usize,
    pub t_end: usize,
    pub sigma: usize,
    pub freeze_selection: bool,
}

impl LayerSchedule {
    /// Unmodified model: every global layer dense.
    pub fn dense(num_global: usize) -> Self {
        Self {
            modes: vec![LayerMode::DenseGlobal; num_global],
            t_early: 0,
            t_end: num_global.saturating_sub(1),
            sigma: 1,
            freeze_selection: false,
        }
    }

    /// Same mode for every global layer.
    pub fn uniform(num_global: usize, mode: LayerMode) -> Self {
        Self {
            modes: vec![mode; num_global],
            ..Self::dense(num_global)
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

pub fn build_schedule(
    num_global: usize,
    t_early: usize,
    t_end: usize,
    sigma: usize,
    options: &ScheduleOptions,
) -> Result<LayerSchedule> {
    if t_early > t_end {
        return Err(Error::InvalidArgument(format!(
            "t_early ({t_early}) must not exceed t_end ({t_end})"
        )));
    }
    if t_end >= num_global {
        return Err(Error::InvalidArgument(format!(
            "t_end ({t_end}) must be below the number of global layers ({num_global})"
        )));
    }
    let spec = options.subsample_spec(sigma)?;
    let early = match options.early_mode {
        EarlyMode::FrameConverted => LayerMode::FrameConverted,
        EarlyMode::MeanKv => LayerMode::MeanKv,
    };
    let modes = (0..num_global)
        .map(|i| {
            if i < t_early {
                early.clone()
            } else if i <= t_end {
                LayerMode::Subsampled(spec.clone())
            } else {
                LayerMode::FrameConverted
            }
        })
        .collect();
    Ok(LayerSchedule {
        modes,
        t_early,
        t_end,
        sigma,
        freeze_selection: options.freeze_selection,
    })
}

/// Serialized form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub num_global: usize,
    pub t_early: usize,
    pub t_end: usize,
    pub sigma: usize,
    pub strategy: Strategy,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub keep_first_frame_full: bool,
}

impl ScheduleSpec {
    pub fn defaults(layout: TokenLayout) -> Self {
        let num_global = layout.default_num_blocks() / 2;
        Self {
            num_global,
            t_early: layout.default_t_early(),
            t_end: num_global - 1,
            sigma: 2,
            strategy: Strategy::FixedGrid,
            diagonal: true,
            mean_fill: true,
            keep_first_frame_full: layout.keeps_first_frame_full(),
        }
    }

    pub fn resolve(&self, base: &ScheduleOptions) -> Result<LayerSchedule> {
        let options = ScheduleOptions {
            strategy: self.strategy,
            diagonal: self.diagonal,
            mean_fill: self.mean_fill,
            keep_first_frame_full: self.keep_first_frame_full,
            ..base.clone()
        };
        build_schedule(self.num_global, self.t_early, self.t_end, self.sigma, &options)
    }
}

/// Layout metadata shared by a batch and its working copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub frames: usize,
    pub grid: PatchGrid,
    pub num_special: usize,
    pub dim: usize,
    pub layout: TokenLayout,
}

impl BatchShape {
    pub fn of(batch: &TokenBatch) -> Self {
        Self {
            batch: batch.batch(),
            frames: batch.frames(),
            grid: batch.grid(),
            num_special: batch.num_special(),
            dim: batch.dim(),
            layout: batch.layout(),
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.num_patches() + self.num_special
    }

    /// Rows of one batch element in the global layout.
    pub fn global_rows(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn total_rows(&self) -> usize {
        self.batch * self.global_rows()
    }
}

/// Single-head attention kernels used by a forward pass.
pub trait Kernels<T: Real>: Sync {
    fn dense(&self, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>>;
    fn subsampled(&self, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, plan: &SgaPlan) -> Result<Matrix<T>>;
}

/// Streaming 32-bit kernels.
pub struct FastKernels;

impl Kernels<f32> for FastKernels {
    fn dense(&self, q: &Matrix<f32>, k: &Matrix<f32>, v: &Matrix<f32>) -> Result<Matrix<f32>> {
        dense_attention(q, k, v)
    }

    fn subsampled(&self, q: &Matrix<f32>, k: &Matrix<f32>, v: &Matrix<f32>, plan: &SgaPlan) -> Result<Matrix<f32>> {
        sga_attention(q, k, v, plan)
    }
}

/// 64-bit kernels with order-independent key reductions.
pub struct ExactKernels;

impl Kernels<f64> for ExactKernels {
    fn dense(&self, q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Result<Matrix<f64>> {
        dense_attention_exact(q, k, v)
    }

    fn subsampled(&self, q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, plan: &SgaPlan) -> Result<Matrix<f64>> {
        sga_oracle(q, k, v, plan)
    }
}

/// Q/K/V of one batch element at a global layer, handed to an observer
/// before the layer's attention runs.
pub struct GlobalLayerProbe<'a, T> {
    pub layer: usize,
    pub batch_index: usize,
    pub mode: &'a LayerMode,
    pub heads: usize,
    pub q: &'a Matrix<T>,
    pub k: &'a Matrix<T>,
    pub v: &'a Matrix<T>,
    pub plan: Option<&'a SgaPlan>,
}

pub type Observer<'o, T> = dyn FnMut(&GlobalLayerProbe<'_, T>) -> ControlFlow<()> + 'o;

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Score maps per batch element, for [`Strategy::ScoreBased`].
    pub score_maps: Option<Vec<ScoreMaps>>,
}

pub struct Projections<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// Pre-attention normalization and Q/K/V projections for all rows.
pub fn project_qkv<T: Real>(x: &Matrix<T>, w: &BlockWeights<T>) -> Result<Projections<T>> {
    let h = layer_norm(x, &w.ln1_scale, &w.ln1_bias);
    Ok(Projections {
        q: h.matmul(&w.wq)?,
        k: h.matmul(&w.wk)?,
        v: h.matmul(&w.wv)?,
    })
}

/// Output projection, residual, and the residual MLP.
fn finish_block<T: Real>(x: &mut Matrix<T>, attn: &Matrix<T>, w: &BlockWeights<T>) -> Result<()> {
    let proj = attn.matmul(&w.wo)?;
    for (a, &b) in x.as_mut_slice().iter_mut().zip(proj.as_slice()) {
        *a = *a + b;
    }
    let h = layer_norm(x, &w.ln2_scale, &w.ln2_bias);
    let mut hidden = h.matmul(&w.w1)?;
    hidden.add_row_vector(&w.b1);
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let mut out = hidden.matmul(&w.w2)?;
    out.add_row_vector(&w.b2);
    for (a, &b) in x.as_mut_slice().iter_mut().zip(out.as_slice()) {
        *a = *a + b;
    }
    Ok(())
}

/// Attention within each frame's L tokens.
pub fn frame_attention<T: Real, K: Kernels<T>>(
    p: &Projections<T>,
    shape: &BatchShape,
    heads: usize,
    kernels: &K,
) -> Result<Matrix<T>> {
    let l = shape.tokens_per_frame();
    let mut out = Matrix::zeros(p.q.rows(), p.v.cols());
    for g in 0..shape.batch * shape.frames {
        let start = g * l;
        let (q, k, v) = (p.q.row_block(start, l), p.k.row_block(start, l), p.v.row_block(start, l));
        let o = multi_head(&q, &k, &v, heads, |q, k, v| kernels.dense(q, k, v))?;
        out.set_row_block(start, &o);
    }
    Ok(out)
}

/// Attention of one global layer over each batch element's N·L rows.
/// `plans` holds one plan per batch element for subsampled modes.
pub fn global_attention<T: Real, K: Kernels<T>>(
    p: &Projections<T>,
    shape: &BatchShape,
    heads: usize,
    mode: &LayerMode,
    plans: &[SgaPlan],
    kernels: &K,
) -> Result<Matrix<T>> {
    if *mode == LayerMode::FrameConverted {
        return frame_attention(p, shape, heads, kernels);
    }
    let rows = shape.global_rows();
    let mut out = Matrix::zeros(p.q.rows(), p.v.cols());
    for b in 0..shape.batch {
        let start = b * rows;
        let (q, k, v) = (p.q.row_block(start, rows), p.k.row_block(start, rows), p.v.row_block(start, rows));
        let o = match mode {
            LayerMode::DenseGlobal => multi_head(&q, &k, &v, heads, |q, k, v| kernels.dense(q, k, v))?,
            LayerMode::MeanKv => multi_head(&q, &k, &v, heads, mean_kv_attention)?,
            LayerMode::Subsampled(_) => {
                let plan = plans.get(b).ok_or_else(|| {
                    Error::InvalidArgument(format!("no subsampling plan for batch element {b}"))
                })?;
                multi_head(&q, &k, &v, heads, |q, k, v| kernels.subsampled(q, k, v, plan))?
            }
            LayerMode::FrameConverted => unreachable!(),
        };
        out.set_row_block(start, &o);
    }
    Ok(out)
}

/// Per-batch-element plans for a subsampled layer, selecting on `x`.
pub fn build_plans<T: Real>(
    x: &Matrix<T>,
    shape: &BatchShape,
    spec: &SubsampleSpec,
    score_maps: Option<&[ScoreMaps]>,
) -> Result<Vec<SgaPlan>> {
    let l = shape.tokens_per_frame();
    (0..shape.batch)
        .map(|b| {
            let maps = score_maps.and_then(|m| m.get(b));
            if let Some(m) = maps {
                m.validate(shape.frames, shape.grid)?;
            }
            let selections = (0..shape.frames)
                .map(|f| {
                    let base = (b * shape.frames + f) * l + shape.num_special;
                    let patch = |p: usize| x.row(base + p);
                    select_frame(shape.grid, shape.dim, &patch, spec, f, maps.and_then(|m| m.frame(f)))
                })
                .collect::<Result<Vec<_>>>()?;
            SgaPlan::from_selections(&selections, shape.grid, shape.num_special, SgaOptions::from(spec))
        })
        .collect()
}

/// Caches plans across layers when the selection cannot change.
struct PlanCache {
    spec: Option<SubsampleSpec>,
    plans: Vec<SgaPlan>,
}

impl PlanCache {
    fn plans<T: Real>(
        &mut self,
        x: &Matrix<T>,
        shape: &BatchShape,
        spec: &SubsampleSpec,
        freeze: bool,
        score_maps: Option<&[ScoreMaps]>,
    ) -> Result<&[SgaPlan]> {
        let reusable = self.spec.as_ref() == Some(spec) && (freeze || !spec.strategy.is_feature_dependent());
        if !reusable {
            self.plans = build_plans(x, shape, spec, score_maps)?;
            self.spec = Some(spec.clone());
        }
        Ok(&self.plans)
    }
}

/// Forward over a working copy of the tokens, with an optional observer
/// invoked at every global layer (it may stop the pass early).
pub fn forward_observed<T: Real, K: Kernels<T>>(
    model: &Model,
    x: &mut Matrix<T>,
    shape: &BatchShape,
    schedule: &LayerSchedule,
    kernels: &K,
    options: &ForwardOptions,
    mut observer: Option<&mut Observer<'_, T>>,
) -> Result<()> {
    let config = model.config();
    if schedule.len() != config.num_global_blocks() {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} layers, model has {} global blocks",
            schedule.len(),
            config.num_global_blocks()
        )));
    }
    if shape.dim != config.embed_dim || shape.num_special != config.num_special {
        return Err(Error::Shape("batch does not match the model configuration".into()));
    }
    let heads = config.num_heads;
    let mut cache = PlanCache {
        spec: None,
        plans: Vec::new(),
    };
    let mut global = 0;
    for (b, weights) in model.blocks().iter().enumerate() {
        let w: BlockWeights<T> = weights.cast();
        let p = project_qkv(x, &w)?;
        let attn = if config.is_global_block(b) {
            let mode = &schedule.modes[global];
            let plans: &[SgaPlan] = match mode {
                LayerMode::Subsampled(spec) => cache.plans(
                    x,
                    shape,
                    spec,
                    schedule.freeze_selection,
                    options.score_maps.as_deref(),
                )?,
                _ => &[],
            };
            if let Some(obs) = observer.as_deref_mut() {
                let rows = shape.global_rows();
                for bi in 0..shape.batch {
                    let start = bi * rows;
                    let (q, k, v) = (p.q.row_block(start, rows), p.k.row_block(start, rows), p.v.row_block(start, rows));
                    let probe = GlobalLayerProbe {
                        layer: global,
                        batch_index: bi,
                        mode,
                        heads,
                        q: &q,
                        k: &k,
                        v: &v,
                        plan: plans.get(bi),
                    };
                    if obs(&probe).is_break() {
                        return Ok(());
                    }
                }
            }
            let out = global_attention(&p, shape, heads, mode, plans, kernels)?;
            global += 1;
            out
        } else {
            frame_attention(&p, shape, heads, kernels)?
        };
        finish_block(x, &attn, &w)?;
    }
    Ok(())
}

fn to_matrix(batch: &TokenBatch) -> Matrix<f32> {
    let shape = BatchShape::of(batch);
    Matrix::from_vec(shape.total_rows(), shape.dim, batch.as_slice().to_vec()).expect("sized")
}

pub fn forward(model: &Model, batch: &TokenBatch, schedule: &LayerSchedule) -> Result<TokenBatch> {
    forward_with(model, batch, schedule, &ForwardOptions::default())
}

pub fn forward_with(
    model: &Model,
    batch: &TokenBatch,
    schedule: &LayerSchedule,
    options: &ForwardOptions,
) -> Result<TokenBatch> {
    let shape = BatchShape::of(batch);
    let mut x = to_matrix(batch);
    forward_observed(model, &mut x, &shape, schedule, &FastKernels, options, None)?;
    batch.with_data(x.into_vec())
}

fn run_single_block(
    batch: &TokenBatch,
    weights: &BlockWeights<f32>,
    attention: impl FnOnce(&Projections<f32>, &BatchShape) -> Result<Matrix<f32>>,
) -> Result<TokenBatch> {
    let shape = BatchShape::of(batch);
    if weights.wq.rows() != shape.dim {
        return Err(Error::Shape("weights do not match token width".into()));
    }
    let mut x = to_matrix(batch);
    let p = project_qkv(&x, weights)?;
    let attn = attention(&p, &shape)?;
    finish_block(&mut x, &attn, weights)?;
    batch.with_data(x.into_vec())
}

/// One block with per-frame attention, residual and MLP.
pub fn frame_attention_block(
    batch: &TokenBatch,
    weights: &BlockWeights<f32>,
    num_heads: usize,
) -> Result<TokenBatch> {
    run_single_block(batch, weights, |p, shape| {
        frame_attention(p, shape, num_heads, &FastKernels)
    })
}

/// One global block in the given mode, residual and MLP.
pub fn global_attention_block(
    batch: &TokenBatch,
    weights: &BlockWeights<f32>,
    num_heads: usize,
    mode: &LayerMode,
    score_maps: Option<&[ScoreMaps]>,
) -> Result<TokenBatch> {
    let x = to_matrix(batch);
    run_single_block(batch, weights, |p, shape| {
        let plans = match mode {
            LayerMode::Subsampled(spec) => build_plans(&x, shape, spec, score_maps)?,
            _ => Vec::new(),
        };
        global_attention(p, shape, num_heads, mode, &plans, &FastKernels)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_tokens, make_model, ModelConfig};

    fn modes_summary(s: &LayerSchedule) -> Vec<char> {
        s.modes
            .iter()
            .map(|m| match m {
                LayerMode::FrameConverted => 'F',
                LayerMode::DenseGlobal => 'D',
                LayerMode::Subsampled(_) => 'S',
                LayerMode::MeanKv => 'M',
            })
            .collect()
    }

    #[test]
    fn vggt_and_pi3_schedules() {
        let o = ScheduleOptions::for_layout(TokenLayout::VggtStyle);
        let s = build_schedule(24, 9, 23, 2, &o).unwrap();
        assert_eq!(modes_summary(&s), [vec!['F'; 9], vec!['S'; 15]].concat());
        let s = build_schedule(18, 10, 17, 4, &ScheduleOptions::for_layout(TokenLayout::Pi3Style)).unwrap();
        assert_eq!(modes_summary(&s), [vec!['F'; 10], vec!['S'; 8]].concat());
        let s = build_schedule(24, 9, 19, 2, &o).unwrap();
        assert_eq!(modes_summary(&s), [vec!['F'; 9], vec!['S'; 11], vec!['F'; 4]].concat());
        let s = build_schedule(24, 0, 23, 1, &o).unwrap();
        assert!(s.modes.iter().all(|m| matches!(m, LayerMode::Subsampled(sp) if sp.sigma == 1)));
    }

    #[test]
    fn schedule_errors() {
        let o = ScheduleOptions::for_layout(TokenLayout::VggtStyle);
        assert!(matches!(build_schedule(24, 10, 9, 2, &o), Err(Error::InvalidArgument(_))));
        assert!(build_schedule(24, 0, 24, 2, &o).is_err());
        assert!(build_schedule(24, 0, 23, 0, &o).is_err());
    }

    #[test]
    fn g2m_early_mode() {
        let o = ScheduleOptions {
            early_mode: EarlyMode::MeanKv,
            ..ScheduleOptions::for_layout(TokenLayout::Pi3Style)
        };
        let s = build_schedule(18, 10, 17, 2, &o).unwrap();
        assert_eq!(modes_summary(&s)[..10], ['M'; 10]);
    }

    #[test]
    fn schedule_spec_json_fields() {
        let spec = ScheduleSpec::defaults(TokenLayout::VggtStyle);
        let json = serde_json::to_value(&spec).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["num_global", "t_early", "t_end", "sigma", "strategy", "diagonal", "mean_fill", "keep_first_frame_full"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(json["strategy"], "fixed_grid");
        let back: ScheduleSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    fn small(layout: TokenLayout) -> (Model, TokenBatch) {
        let cfg = ModelConfig {
            num_blocks: 4,
            embed_dim: 16,
            num_heads: 2,
            seed: 3,
            ..ModelConfig::new(layout)
        };
        let model = make_model(cfg.clone()).unwrap();
        let batch = init_tokens(&cfg, 1, 3, 3, 4, 8).unwrap();
        (model, batch)
    }

    #[test]
    fn frame_block_isolates_frames() {
        let (model, batch) = small(TokenLayout::Pi3Style);
        let w = &model.blocks()[0];
        let a = frame_attention_block(&batch, w, 2).unwrap();
        let mut data = batch.as_slice().to_vec();
        let l = batch.tokens_per_frame() * batch.dim();
        data[l + 7] += 0.5; // frame 1
        let b = frame_attention_block(&batch.with_data(data).unwrap(), w, 2).unwrap();
        assert_eq!(a.frame(0, 0), b.frame(0, 0));
        assert_eq!(a.frame(0, 2), b.frame(0, 2));
        assert_ne!(a.frame(0, 1), b.frame(0, 1));
    }

    #[test]
    fn single_frame_global_equals_frame() {
        let (model, _) = small(TokenLayout::VggtStyle);
        let batch = init_tokens(model.config(), 2, 1, 3, 3, 1).unwrap();
        let w = &model.blocks()[1];
        let f = frame_attention_block(&batch, w, 2).unwrap();
        let g = global_attention_block(&batch, w, 2, &LayerMode::DenseGlobal, None).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn schedule_length_mismatch() {
        let (model, batch) = small(TokenLayout::Pi3Style);
        assert!(forward(&model, &batch, &LayerSchedule::dense(3)).is_err());
    }

    #[test]
    fn score_based_requires_maps_in_forward() {
        let (model, batch) = small(TokenLayout::Pi3Style);
        let o = ScheduleOptions {
            strategy: Strategy::ScoreBased,
            ..ScheduleOptions::for_layout(TokenLayout::Pi3Style)
        };
        let s = build_schedule(2, 0, 1, 4, &o).unwrap();
        assert!(forward(&model, &batch, &s).is_err());
        let maps = ScoreMaps((0..3).map(|f| (0..12).map(|p| ((p * 5 + f) % 7) as f32).collect()).collect());
        let opts = ForwardOptions {
            score_maps: Some(vec![maps]),
        };
        assert!(forward_with(&model, &batch, &s, &opts).is_ok());
    }
}
