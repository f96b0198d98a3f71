//! Attention forensics for global layers: head-averaged post-softmax
//! matrices restricted to patch tokens, top-k entry extraction, per-layer
//! statistics, and the 180 degree rotation consistency test.
//!
//! Probing runs a 64-bit forward whose key reductions are order-independent,
//! so relabeling tokens permutes every probed matrix exactly.

use std::collections::HashSet;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{forward_observed, BatchShape, ExactKernels, ForwardOptions, GlobalLayerProbe, LayerMode, LayerSchedule};
use crate::attention::{attention_probabilities_exact, softmax_scale, split_heads};
use crate::error::{Error, Result};
use crate::model::{positional_embedding, Model, PatchGrid, TokenBatch};
use crate::output::{write_atomic, write_json_atomic};
use crate::sga::{MeanPair, SgaPlan};
use crate::subsample::MeanWeighting;
use crate::tensor::{dot, Matrix};

pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_K_POOL: usize = 1000;
pub const DEFAULT_K_REPORT: usize = 50;
pub const DEFAULT_ELEMENT_BUDGET: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "EntryRecord", from = "EntryRecord")]
pub struct AttentionEntry {
    pub query: PatchCoord,
    pub key: PatchCoord,
    pub weight: f64,
    pub is_self: bool,
}

/// Flat JSON Lines form of an entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct EntryRecord {
    qf: usize,
    qr: usize,
    qc: usize,
    kf: usize,
    kr: usize,
    kc: usize,
    w: f64,
    #[serde(rename = "self")]
    is_self: bool,
}

impl From<AttentionEntry> for EntryRecord {
    fn from(e: AttentionEntry) -> Self {
        Self {
            qf: e.query.frame,
            qr: e.query.row,
            qc: e.query.col,
            kf: e.key.frame,
            kr: e.key.row,
            kc: e.key.col,
            w: e.weight,
            is_self: e.is_self,
        }
    }
}

impl From<EntryRecord> for AttentionEntry {
    fn from(r: EntryRecord) -> Self {
        Self {
            query: PatchCoord { frame: r.qf, row: r.qr, col: r.qc },
            key: PatchCoord { frame: r.kf, row: r.kr, col: r.kc },
            weight: r.w,
            is_self: r.is_self,
        }
    }
}

/// Square attention matrix over the patch tokens of all frames
/// (`N·T x N·T`, frame-major, row-major patches). Rows are restrictions of
/// softmax rows and do not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAttention {
    pub frames: usize,
    pub grid: PatchGrid,
    pub values: Matrix<f64>,
}

impl PatchAttention {
    pub fn new(frames: usize, grid: PatchGrid, values: Matrix<f64>) -> Result<Self> {
        let n = frames * grid.num_patches();
        if values.rows() != n || values.cols() != n {
            return Err(Error::Shape(format!(
                "patch attention must be {n}x{n}, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        Ok(Self { frames, grid, values })
    }

    pub fn coord(&self, index: usize) -> PatchCoord {
        let t = self.grid.num_patches();
        let (row, col) = self.grid.coords(index % t);
        PatchCoord { frame: index / t, row, col }
    }

    pub fn index(&self, c: PatchCoord) -> usize {
        c.frame * self.grid.num_patches() + self.grid.index(c.row, c.col)
    }

    /// Index after rotating every frame's grid by 180 degrees.
    pub fn rotated_index(&self, index: usize) -> usize {
        let t = self.grid.num_patches();
        (index / t) * t + self.grid.rotate_180(index % t)
    }

    pub fn max_weight(&self) -> f64 {
        self.values.as_slice().iter().copied().fold(0.0, f64::max)
    }
}

/// Head-averaged attention of one global layer over all `N·L` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer: usize,
    pub frames: usize,
    pub grid: PatchGrid,
    pub num_special: usize,
    pub full: Matrix<f64>,
}

impl LayerAttention {
    fn patch_rows(&self) -> Vec<usize> {
        let l = self.grid.num_patches() + self.num_special;
        (0..self.frames)
            .flat_map(|f| (self.num_special..l).map(move |t| f * l + t))
            .collect()
    }

    /// Patch-to-patch block of the full matrix, without renormalization.
    pub fn restricted(&self) -> PatchAttention {
        let idx = self.patch_rows();
        let mut values = Matrix::zeros(idx.len(), idx.len());
        for (i, &r) in idx.iter().enumerate() {
            let row = self.full.row(r);
            for (j, &c) in idx.iter().enumerate() {
                values.set(i, j, row[c]);
            }
        }
        PatchAttention {
            frames: self.frames,
            grid: self.grid,
            values,
        }
    }

    /// Mean entropy (nats) of the full softmax rows of patch queries.
    pub fn mean_patch_row_entropy(&self) -> f64 {
        let rows = self.patch_rows();
        let total: f64 = rows
            .iter()
            .map(|&r| {
                -self
                    .full
                    .row(r)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / rows.len().max(1) as f64
    }

    pub fn stats(&self, top_k: usize, radius: usize) -> LayerAttentionStats {
        let restricted = self.restricted();
        let entries = topk_entries(&restricted, top_k);
        let n = entries.len().max(1) as f64;
        let self_count = entries.iter().filter(|e| e.is_self).count();
        let aligned = entries.iter().filter(|e| is_aligned(e, radius)).count();
        LayerAttentionStats {
            layer: self.layer,
            max_weight: restricted.max_weight(),
            entropy: self.mean_patch_row_entropy(),
            self_fraction: self_count as f64 / n,
            aligned_fraction: aligned as f64 / n,
        }
    }
}

/// Cross-frame entry whose key sits at the query's grid position (within
/// `radius` patches).
pub fn is_aligned(e: &AttentionEntry, radius: usize) -> bool {
    e.query.frame != e.key.frame
        && e.query.row.abs_diff(e.key.row) <= radius
        && e.query.col.abs_diff(e.key.col) <= radius
}

/// Column of a probed subsampled layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeColumn {
    Patch { frame: usize, row: usize, col: usize },
    /// Mean of a pooled window.
    Synthesized { index: usize },
    /// The query's own key, when it was dropped.
    Diagonal,
    Mean { index: usize },
}

/// Patch queries against the columns a subsampled layer actually attends to.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampledAttention {
    pub layer: usize,
    pub frames: usize,
    pub grid: PatchGrid,
    pub columns: Vec<ProbeColumn>,
    pub values: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbedAttention {
    Dense(LayerAttention),
    Subsampled(SubsampledAttention),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAttentionStats {
    pub layer: usize,
    pub max_weight: f64,
    pub entropy: f64,
    pub self_fraction: f64,
    pub aligned_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub batch_index: usize,
    pub element_budget: usize,
    /// Schedule of the probing forward; all-dense when `None`.
    pub schedule: Option<LayerSchedule>,
    pub forward: ForwardOptions,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            batch_index: 0,
            element_budget: DEFAULT_ELEMENT_BUDGET,
            schedule: None,
            forward: ForwardOptions::default(),
        }
    }
}

fn head_averaged(probe: &GlobalLayerProbe<'_, f64>) -> Result<Matrix<f64>> {
    let qs = split_heads(probe.q, probe.heads);
    let ks = split_heads(probe.k, probe.heads);
    let mut acc = Matrix::zeros(probe.q.rows(), probe.k.rows());
    for (q, k) in qs.iter().zip(&ks) {
        let p = attention_probabilities_exact(q, k)?;
        for (a, &b) in acc.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *a += b;
        }
    }
    let inv = 1.0 / probe.heads as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

fn subsampled_probe(
    probe: &GlobalLayerProbe<'_, f64>,
    plan: &SgaPlan,
    shape: &BatchShape,
) -> Result<SubsampledAttention> {
    let l = shape.tokens_per_frame();
    let t = shape.grid.num_patches();
    let is_patch = |r: usize| r % l >= shape.num_special;
    let coord = |r: usize| {
        let (row, col) = shape.grid.coords(r % l - shape.num_special);
        ProbeColumn::Patch { frame: r / l, row, col }
    };
    let mean_groups = if plan.options.mean_fill { plan.mean_groups() } else { Vec::new() };

    let mut columns: Vec<ProbeColumn> = plan.kept().iter().filter(|&&r| is_patch(r)).map(|&r| coord(r)).collect();
    columns.extend((0..plan.pooled().len()).map(|index| ProbeColumn::Synthesized { index }));
    if plan.options.diagonal {
        columns.push(ProbeColumn::Diagonal);
    }
    columns.extend((0..mean_groups.len()).map(|index| ProbeColumn::Mean { index }));

    let queries: Vec<usize> = (0..shape.frames * l).filter(|&r| is_patch(r)).collect();
    let mut values = Matrix::zeros(queries.len(), columns.len());
    let d = probe.q.cols() / probe.heads;
    let scale = softmax_scale::<f64>(d);
    for h in 0..probe.heads {
        let q = probe.q.column_block(h * d, d);
        let k = probe.k.column_block(h * d, d);
        let v = probe.v.column_block(h * d, d);
        let pooled: Vec<Vec<f64>> = plan
            .pooled()
            .iter()
            .map(|g| MeanPair::over(g, &k, &v).expect("non-empty").k_bar)
            .collect();
        let means: Vec<(Vec<f64>, f64)> = mean_groups
            .iter()
            .map(|g| {
                let pair = MeanPair::over(g, &k, &v).expect("non-empty");
                let offset = match plan.options.mean_weighting {
                    MeanWeighting::Single => 0.0,
                    MeanWeighting::CountWeighted => (pair.count as f64).ln(),
                };
                (pair.k_bar, offset)
            })
            .collect();
        for (qi, &r) in queries.iter().enumerate() {
            let qr = q.row(r);
            // Logits in column order, with specials (not reported) first.
            let mut logits: Vec<(Option<usize>, f64)> = Vec::new();
            let mut col = 0;
            for &kr in plan.kept() {
                let slot = if is_patch(kr) {
                    col += 1;
                    Some(col - 1)
                } else {
                    None
                };
                logits.push((slot, dot(qr, k.row(kr)) * scale));
            }
            for kb in &pooled {
                logits.push((Some(col), dot(qr, kb) * scale));
                col += 1;
            }
            if plan.options.diagonal {
                if plan.is_dropped(r) {
                    logits.push((Some(col), dot(qr, k.row(r)) * scale));
                }
                col += 1;
            }
            for (kb, offset) in &means {
                logits.push((Some(col), dot(qr, kb) * scale + offset));
                col += 1;
            }
            let max = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = logits.iter().map(|x| (x.1 - max).exp()).collect();
            let weights: Vec<f64> = exps.clone();
            let sum = crate::tensor::canonical_sum(&mut exps);
            for ((slot, _), w) in logits.iter().zip(weights) {
                if let Some(c) = slot {
                    let cur = values.get(qi, *c);
                    values.set(qi, *c, cur + w / sum / probe.heads as f64);
                }
            }
        }
    }
    let _ = t;
    Ok(SubsampledAttention {
        layer: probe.layer,
        frames: shape.frames,
        grid: shape.grid,
        columns,
        values,
    })
}

fn probe_input(batch: &TokenBatch) -> (Matrix<f64>, BatchShape) {
    let shape = BatchShape::of(batch);
    let x = Matrix::from_vec(shape.total_rows(), shape.dim, batch.as_slice().to_vec())
        .expect("sized")
        .cast();
    (x, shape)
}

fn check_budget(shape: &BatchShape, budget: usize) -> Result<()> {
    let elements = shape.global_rows().saturating_mul(shape.global_rows());
    if elements > budget {
        return Err(Error::Budget(format!(
            "probing needs a {n}x{n} matrix ({elements} elements), above the budget of {budget}",
            n = shape.global_rows()
        )));
    }
    Ok(())
}

/// Head-averaged post-softmax attention of global layer `layer`.
pub fn head_avg_patch_attention(
    model: &Model,
    batch: &TokenBatch,
    layer: usize,
    options: &ProbeOptions,
) -> Result<ProbedAttention> {
    let num_global = model.config().num_global_blocks();
    if layer >= num_global {
        return Err(Error::InvalidArgument(format!(
            "global layer {layer} out of range (model has {num_global})"
        )));
    }
    if options.batch_index >= batch.batch() {
        return Err(Error::InvalidArgument("batch index out of range".into()));
    }
    let schedule = options
        .schedule
        .clone()
        .unwrap_or_else(|| LayerSchedule::dense(num_global));
    match schedule.modes.get(layer) {
        Some(LayerMode::DenseGlobal | LayerMode::Subsampled(_)) => {}
        Some(m) => {
            return Err(Error::InvalidArgument(format!(
                "global layer {layer} runs as {m}, not global attention"
            )))
        }
        None => return Err(Error::InvalidArgument("schedule too short".into())),
    }
    let (mut x, shape) = probe_input(batch);
    check_budget(&shape, options.element_budget)?;
    let mut result: Option<Result<ProbedAttention>> = None;
    let mut observer = |probe: &GlobalLayerProbe<'_, f64>| {
        if probe.layer != layer || probe.batch_index != options.batch_index {
            return ControlFlow::Continue(());
        }
        result = Some(match (probe.mode, probe.plan) {
            (LayerMode::Subsampled(_), Some(plan)) => {
                subsampled_probe(probe, plan, &shape).map(ProbedAttention::Subsampled)
            }
            _ => head_averaged(probe).map(|full| {
                ProbedAttention::Dense(LayerAttention {
                    layer,
                    frames: shape.frames,
                    grid: shape.grid,
                    num_special: shape.num_special,
                    full,
                })
            }),
        });
        ControlFlow::Break(())
    };
    forward_observed(model, &mut x, &shape, &schedule, &ExactKernels, &options.forward, Some(&mut observer))?;
    result.unwrap_or_else(|| Err(Error::InvalidArgument(format!("layer {layer} was not reached"))))
}

/// Dense probe of one layer; errors if the layer is subsampled.
pub fn probe_dense(model: &Model, batch: &TokenBatch, layer: usize, options: &ProbeOptions) -> Result<LayerAttention> {
    match head_avg_patch_attention(model, batch, layer, options)? {
        ProbedAttention::Dense(a) => Ok(a),
        ProbedAttention::Subsampled(_) => Err(Error::InvalidArgument(format!(
            "layer {layer} is subsampled; no square matrix exists"
        ))),
    }
}

/// The `k` largest entries, ties broken by (query, key) index.
pub fn topk_entries(matrix: &PatchAttention, k: usize) -> Vec<AttentionEntry> {
    let n = matrix.values.cols();
    let vals = matrix.values.as_slice();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    let cmp = |a: &usize, b: &usize| vals[*b].total_cmp(&vals[*a]).then(a.cmp(b));
    let k = k.min(order.len());
    if k == 0 {
        return Vec::new();
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order
        .into_iter()
        .map(|flat| {
            let (qi, ki) = (flat / n, flat % n);
            AttentionEntry {
                query: matrix.coord(qi),
                key: matrix.coord(ki),
                weight: vals[flat],
                is_self: qi == ki,
            }
        })
        .collect()
}

/// Statistics of every global layer under an all-dense probe.
pub fn layer_stats(
    model: &Model,
    batch: &TokenBatch,
    top_k: usize,
    radius: usize,
    options: &ProbeOptions,
) -> Result<Vec<LayerAttentionStats>> {
    let num_global = model.config().num_global_blocks();
    let (mut x, shape) = probe_input(batch);
    check_budget(&shape, options.element_budget)?;
    let mut stats = Vec::with_capacity(num_global);
    let mut failure = None;
    let mut observer = |probe: &GlobalLayerProbe<'_, f64>| {
        if probe.batch_index != options.batch_index {
            return ControlFlow::Continue(());
        }
        match head_averaged(probe) {
            Ok(full) => {
                let la = LayerAttention {
                    layer: probe.layer,
                    frames: shape.frames,
                    grid: shape.grid,
                    num_special: shape.num_special,
                    full,
                };
                stats.push(la.stats(top_k, radius));
                ControlFlow::Continue(())
            }
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    };
    let schedule = LayerSchedule::dense(num_global);
    forward_observed(model, &mut x, &shape, &schedule, &ExactKernels, &options.forward, Some(&mut observer))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Patch content moves to the rotated position and is re-embedded there.
    ReEncode,
    /// Tokens move together with their embedding: a pure relabeling.
    Relabel,
}

/// Rotates every frame's patch grid by 180 degrees.
pub fn rotate_batch(batch: &TokenBatch, mode: RotationMode) -> Result<TokenBatch> {
    let grid = batch.grid();
    let pos = positional_embedding(grid, batch.dim());
    let mut out = batch.clone();
    for b in 0..batch.batch() {
        for f in 0..batch.frames() {
            for p in 0..grid.num_patches() {
                let src = grid.rotate_180(p);
                let dst = out.patch_mut(b, f, p);
                dst.copy_from_slice(batch.patch(b, f, src));
                if mode == RotationMode::ReEncode {
                    for ((x, &old), &new) in dst.iter_mut().zip(pos.row(src)).zip(pos.row(p)) {
                        *x = *x - old + new;
                    }
                }
            }
        }
    }
    batch.with_data(out.into_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub layer: usize,
    pub mode: RotationMode,
    pub k_pool: usize,
    pub k_report: usize,
    /// Original-run entries whose query also appears in the rotated pool,
    /// in original ranking, at most `k_report`.
    pub original: Vec<AttentionEntry>,
    /// Rotated-run entries mapped back to original coordinates, restricted
    /// to the same queries, at most `k_report`.
    pub rotated: Vec<AttentionEntry>,
    pub matched: usize,
    pub overlap_fraction: f64,
}

/// Compares top entries of an original and a rotated run.
pub fn compare_rotated(
    original: &PatchAttention,
    rotated: &PatchAttention,
    layer: usize,
    mode: RotationMode,
    k_pool: usize,
    k_report: usize,
) -> RotationReport {
    let map_back = |c: PatchCoord| {
        let idx = rotated.rotated_index(rotated.index(c));
        rotated.coord(idx)
    };
    let top_a = topk_entries(original, k_pool);
    let top_b: Vec<AttentionEntry> = topk_entries(rotated, k_pool)
        .into_iter()
        .map(|e| AttentionEntry {
            query: map_back(e.query),
            key: map_back(e.key),
            ..e
        })
        .collect();
    let b_queries: HashSet<PatchCoord> = top_b.iter().map(|e| e.query).collect();
    let b_pairs: HashSet<(PatchCoord, PatchCoord)> = top_b.iter().map(|e| (e.query, e.key)).collect();
    let selected: Vec<AttentionEntry> = top_a
        .into_iter()
        .filter(|e| b_queries.contains(&e.query))
        .take(k_report)
        .collect();
    let queries: HashSet<PatchCoord> = selected.iter().map(|e| e.query).collect();
    let matched = selected
        .iter()
        .filter(|e| b_pairs.contains(&(e.query, e.key)))
        .count();
    let rotated_entries = top_b
        .into_iter()
        .filter(|e| queries.contains(&e.query))
        .take(k_report)
        .collect();
    RotationReport {
        layer,
        mode,
        k_pool,
        k_report,
        overlap_fraction: if selected.is_empty() {
            0.0
        } else {
            matched as f64 / selected.len() as f64
        },
        original: selected,
        rotated: rotated_entries,
        matched,
    }
}

/// Probes `layer` on the batch and on its rotated copy, returning both
/// restricted matrices (rotated one in rotated coordinates).
pub fn rotation_probe(
    model: &Model,
    batch: &TokenBatch,
    layer: usize,
    mode: RotationMode,
    options: &ProbeOptions,
) -> Result<(PatchAttention, PatchAttention)> {
    let a = probe_dense(model, batch, layer, options)?.restricted();
    let rotated = rotate_batch(batch, mode)?;
    let b = probe_dense(model, &rotated, layer, options)?.restricted();
    Ok((a, b))
}

pub fn rotation_consistency(
    model: &Model,
    batch: &TokenBatch,
    layer: usize,
    k_pool: usize,
    k_report: usize,
    mode: RotationMode,
    options: &ProbeOptions,
) -> Result<RotationReport> {
    if k_report > k_pool {
        return Err(Error::InvalidArgument(format!(
            "k_report ({k_report}) exceeds k_pool ({k_pool})"
        )));
    }
    let (a, b) = rotation_probe(model, batch, layer, mode, options)?;
    Ok(compare_rotated(&a, &b, layer, mode, k_pool, k_report))
}

/// Little-endian f32 row-major matrix plus a JSON sidecar.
pub fn write_attention_dump(dir: &Path, layer: usize, matrix: &PatchAttention) -> Result<()> {
    let mut bytes = Vec::with_capacity(matrix.values.as_slice().len() * 4);
    for &v in matrix.values.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(&dir.join(format!("layer_{layer:02}.f32")), &bytes)?;
    let sidecar = serde_json::json!({
        "layer": layer,
        "N": matrix.frames,
        "n_h": matrix.grid.n_h,
        "n_w": matrix.grid.n_w,
        "heads_averaged": true,
    });
    write_json_atomic(&dir.join(format!("layer_{layer:02}.json")), &sidecar)
}

pub fn read_attention_dump(path: &Path, frames: usize, grid: PatchGrid) -> Result<PatchAttention> {
    let bytes = std::fs::read(path)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let n = frames * grid.num_patches();
    PatchAttention::new(frames, grid, Matrix::from_vec(n, n, values)?)
}

pub fn entries_to_jsonl(entries: &[AttentionEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn stats_to_csv(stats: &[LayerAttentionStats]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "max_w", "entropy", "self_frac", "aligned_frac"])?;
    for s in stats {
        w.write_record([
            s.layer.to_string(),
            s.max_weight.to_string(),
            s.entropy.to_string(),
            s.self_fraction.to_string(),
            s.aligned_fraction.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
