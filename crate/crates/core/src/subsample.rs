//! Choosing which patch tokens of each frame serve as keys/values in a
//! subsampled global layer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchGrid, TokenBatch, TokenLayout};
use crate::rng::{self, label};
use crate::tensor::{Matrix, Real};

/// Splits `sigma` into the most square stride pair `(s_h, s_w)` with `s_h <= s_w`.
pub fn factorize_sigma(sigma: usize) -> Result<(usize, usize)> {
    if sigma == 0 {
        return Err(Error::InvalidArgument("sigma must be at least 1".into()));
    }
    let s_h = (1..=sigma)
        .take_while(|s| s * s <= sigma)
        .filter(|s| sigma % s == 0)
        .last()
        .unwrap_or(1);
    Ok((s_h, sigma / s_h))
}

/// First patch of every `s_h x s_w` window, row-major.
pub fn grid_indices(n_h: usize, n_w: usize, s_h: usize, s_w: usize) -> Vec<usize> {
    let (s_h, s_w) = (s_h.max(1), s_w.max(1));
    (0..n_h)
        .step_by(s_h)
        .flat_map(|r| (0..n_w).step_by(s_w).map(move |c| r * n_w + c))
        .collect()
}

/// Number of `s_h x s_w` windows intersecting the grid.
pub fn window_count(grid: PatchGrid, s_h: usize, s_w: usize) -> usize {
    grid.n_h.div_ceil(s_h.max(1)) * grid.n_w.div_ceil(s_w.max(1))
}

/// Patch indices of each window (row-major over windows, then cells),
/// clipped at the grid edges.
pub fn windows(grid: PatchGrid, s_h: usize, s_w: usize) -> Vec<Vec<usize>> {
    let (s_h, s_w) = (s_h.max(1), s_w.max(1));
    let mut out = Vec::with_capacity(window_count(grid, s_h, s_w));
    for r0 in (0..grid.n_h).step_by(s_h) {
        for c0 in (0..grid.n_w).step_by(s_w) {
            let cells = (r0..(r0 + s_h).min(grid.n_h))
                .flat_map(|r| (c0..(c0 + s_w).min(grid.n_w)).map(move |c| grid.index(r, c)))
                .collect();
            out.push(cells);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// First cell of every window.
    FixedGrid,
    /// One uniformly random cell per window, from a per-(seed, frame, window) stream.
    RandomInWindow,
    /// Cell with the largest feature norm per window.
    HighNorm,
    /// Cell with the smallest feature norm per window.
    LowNorm,
    /// One synthesized token per window: the mean of its cells.
    MeanPool,
    /// Top-scoring patches frame-wide under an external score map.
    ScoreBased,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FixedGrid,
        Strategy::RandomInWindow,
        Strategy::HighNorm,
        Strategy::LowNorm,
        Strategy::MeanPool,
        Strategy::ScoreBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FixedGrid => "fixed_grid",
            Strategy::RandomInWindow => "random_in_window",
            Strategy::HighNorm => "high_norm",
            Strategy::LowNorm => "low_norm",
            Strategy::MeanPool => "mean_pool",
            Strategy::ScoreBased => "score_based",
        }
    }

    /// Whether the kept set depends on the token features of the layer.
    /// Mean pooling is not: its windows are fixed and the means are taken
    /// over the layer's own keys/values.
    pub fn is_feature_dependent(self) -> bool {
        matches!(self, Strategy::HighNorm | Strategy::LowNorm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Scope of the mean-fill key/value pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanScope {
    /// One pair over the dropped patches of all frames.
    #[default]
    Global,
    /// One pair per frame over that frame's dropped patches.
    PerFrame,
}

/// Softmax multiplicity of a mean-fill logit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanWeighting {
    /// The mean enters the softmax once.
    #[default]
    Single,
    /// The mean enters as if repeated once per dropped column.
    CountWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub sigma: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub strategy: Strategy,
    /// Seed for [`Strategy::RandomInWindow`].
    pub seed: u64,
    pub keep_first_frame_full: bool,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub mean_scope: MeanScope,
    pub mean_weighting: MeanWeighting,
}

impl SubsampleSpec {
    /// Fixed-grid selection with diagonal and mean-fill enabled and the
    /// first-frame exemption matching `layout`.
    pub fn new(sigma: usize, layout: TokenLayout) -> Result<Self> {
        let (s_h, s_w) = factorize_sigma(sigma)?;
        Ok(Self {
            sigma,
            s_h,
            s_w,
            strategy: Strategy::FixedGrid,
            seed: 0,
            keep_first_frame_full: layout.keeps_first_frame_full(),
            diagonal: true,
            mean_fill: true,
            mean_scope: MeanScope::Global,
            mean_weighting: MeanWeighting::Single,
        })
    }

    pub fn with_strides(mut self, s_h: usize, s_w: usize) -> Result<Self> {
        self.s_h = s_h;
        self.s_w = s_w;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0 || self.s_h == 0 || self.s_w == 0 {
            return Err(Error::InvalidArgument("sigma and strides must be positive".into()));
        }
        if self.s_h * self.s_w != self.sigma {
            return Err(Error::InvalidArgument(format!(
                "strides {}x{} do not multiply to sigma {}",
                self.s_h, self.s_w, self.sigma
            )));
        }
        Ok(())
    }

    /// Patch keys kept in a subsampled frame.
    pub fn kept_per_frame(&self, grid: PatchGrid) -> usize {
        window_count(grid, self.s_h, self.s_w)
    }
}

/// Per-frame key/value selection in frame-local patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KVSelection {
    /// Kept patch indices, sorted.
    pub kept: Vec<usize>,
    /// Dropped patch indices, sorted.
    pub dropped: Vec<usize>,
    /// Patch groups averaged into synthesized rows ([`Strategy::MeanPool`]).
    pub pooled: Vec<Vec<usize>>,
    /// Mean feature of each pooled group, when features were available.
    pub synthesized: Option<Matrix<f32>>,
}

impl KVSelection {
    fn keep_all(num_patches: usize) -> Self {
        Self::from_kept((0..num_patches).collect(), num_patches)
    }

    fn from_kept(mut kept: Vec<usize>, num_patches: usize) -> Self {
        kept.sort_unstable();
        let mut is_kept = vec![false; num_patches];
        kept.iter().for_each(|&p| is_kept[p] = true);
        let dropped = (0..num_patches).filter(|&p| !is_kept[p]).collect();
        Self {
            kept,
            dropped,
            pooled: Vec::new(),
            synthesized: None,
        }
    }

    /// Rows contributed to the key set: kept patches plus synthesized rows.
    pub fn key_count(&self) -> usize {
        self.kept.len() + self.pooled.len()
    }
}

fn feature_norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}

fn pick_by_norm<'a, T: Real>(
    cells: &[usize],
    patch: &dyn Fn(usize) -> &'a [T],
    highest: bool,
) -> usize {
    let mut best = cells[0];
    let mut best_norm = feature_norm(patch(best));
    for &c in &cells[1..] {
        let n = feature_norm(patch(c));
        let better = if highest { n > best_norm } else { n < best_norm };
        if better {
            best = c;
            best_norm = n;
        }
    }
    best
}

/// Selection for one frame given accessor to its patch features.
pub(crate) fn select_frame<'a, T: Real>(
    grid: PatchGrid,
    dim: usize,
    patch: &dyn Fn(usize) -> &'a [T],
    spec: &SubsampleSpec,
    frame: usize,
    score_map: Option<&[f32]>,
) -> Result<KVSelection> {
    spec.validate()?;
    let t = grid.num_patches();
    if spec.strategy == Strategy::ScoreBased {
        match score_map {
            None => {
                return Err(Error::InvalidArgument(
                    "score_based selection requires a score map".into(),
                ))
            }
            Some(s) if s.len() != t => {
                return Err(Error::InvalidArgument(format!(
                    "score map has {} entries, grid has {t} patches",
                    s.len()
                )))
            }
            Some(s) if s.iter().any(|x| !x.is_finite()) => {
                return Err(Error::NonFinite("score map entry".into()))
            }
            _ => {}
        }
    }
    if (spec.keep_first_frame_full && frame == 0) || spec.sigma == 1 {
        return Ok(KVSelection::keep_all(t));
    }
    let wins = windows(grid, spec.s_h, spec.s_w);
    let sel = match spec.strategy {
        Strategy::FixedGrid => KVSelection::from_kept(grid_indices(grid.n_h, grid.n_w, spec.s_h, spec.s_w), t),
        Strategy::RandomInWindow => {
            let kept = wins
                .iter()
                .enumerate()
                .map(|(w, cells)| {
                    let mut rng = rng::stream(spec.seed, &[label::WINDOW, frame as u64, w as u64]);
                    cells[rng.gen_range(0..cells.len())]
                })
                .collect();
            KVSelection::from_kept(kept, t)
        }
        Strategy::HighNorm | Strategy::LowNorm => {
            let highest = spec.strategy == Strategy::HighNorm;
            let kept = wins.iter().map(|cells| pick_by_norm(cells, patch, highest)).collect();
            KVSelection::from_kept(kept, t)
        }
        Strategy::ScoreBased => {
            let scores = score_map.expect("checked above");
            let mut order: Vec<usize> = (0..t).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(wins.len());
            KVSelection::from_kept(order, t)
        }
        Strategy::MeanPool => {
            let mut rows = Vec::with_capacity(wins.len() * dim);
            for cells in &wins {
                let mut acc = vec![0f64; dim];
                for &c in cells {
                    for (a, &x) in acc.iter_mut().zip(patch(c)) {
                        *a += x.to_f64();
                    }
                }
                rows.extend(acc.iter().map(|a| (a / cells.len() as f64) as f32));
            }
            KVSelection {
                kept: Vec::new(),
                dropped: (0..t).collect(),
                synthesized: Some(Matrix::from_vec(wins.len(), dim, rows)?),
                pooled: wins,
            }
        }
    };
    Ok(sel)
}

/// Selects keys/values for `frame` of batch element `b`.
pub fn select_kv(
    batch: &TokenBatch,
    b: usize,
    frame: usize,
    spec: &SubsampleSpec,
    score_map: Option<&[f32]>,
) -> Result<KVSelection> {
    if b >= batch.batch() || frame >= batch.frames() {
        return Err(Error::InvalidArgument(format!(
            "(b={b}, frame={frame}) out of range for ({}, {})",
            batch.batch(),
            batch.frames()
        )));
    }
    let patch = |p: usize| batch.patch(b, frame, p);
    select_frame(batch.grid(), batch.dim(), &patch, spec, frame, score_map)
}

/// Per-frame score maps of one sequence, each `n_h * n_w` entries row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreMaps(pub Vec<Vec<f32>>);

impl ScoreMaps {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self, frames: usize, grid: PatchGrid) -> Result<()> {
        if self.0.len() != frames {
            return Err(Error::InvalidArgument(format!(
                "{} score maps for {frames} frames",
                self.0.len()
            )));
        }
        if let Some((f, m)) = self.0.iter().enumerate().find(|(_, m)| m.len() != grid.num_patches()) {
            return Err(Error::InvalidArgument(format!(
                "score map of frame {f} has {} entries, expected {}",
                m.len(),
                grid.num_patches()
            )));
        }
        Ok(())
    }

    pub fn frame(&self, f: usize) -> Option<&[f32]> {
        self.0.get(f).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_tokens, ModelConfig};

    fn brute_force_factorization(sigma: usize) -> (usize, usize) {
        (1..=sigma)
            .filter(|h| sigma % h == 0 && *h <= sigma / h)
            .map(|h| (h, sigma / h))
            .min_by_key(|(h, w)| w - h)
            .unwrap()
    }

    #[test]
    fn factorizations() {
        assert_eq!(factorize_sigma(1).unwrap(), (1, 1));
        assert_eq!(factorize_sigma(2).unwrap(), (1, 2));
        assert_eq!(factorize_sigma(4).unwrap(), (2, 2));
        assert_eq!(factorize_sigma(6).unwrap(), (2, 3));
        assert_eq!(factorize_sigma(9).unwrap(), (3, 3));
        assert_eq!(factorize_sigma(12).unwrap(), (3, 4));
        assert!(factorize_sigma(0).is_err());
        for s in 1..200 {
            assert_eq!(factorize_sigma(s).unwrap(), brute_force_factorization(s), "sigma={s}");
        }
    }

    #[test]
    fn grid_index_examples() {
        assert_eq!(grid_indices(3, 3, 3, 3), vec![0]);
        assert_eq!(grid_indices(4, 4, 2, 2), vec![0, 2, 8, 10]);
        assert_eq!(grid_indices(2, 3, 1, 2), vec![0, 2, 3, 5]);
        assert_eq!(grid_indices(5, 5, 2, 2).len(), 9);
        assert_eq!(grid_indices(2, 2, 7, 9), vec![0]);
    }

    fn frame_with_features(grid: PatchGrid, dim: usize, f: impl Fn(usize) -> Vec<f32>) -> TokenBatch {
        let mut data = vec![0.0f32; dim]; // one special token
        for p in 0..grid.num_patches() {
            data.extend(f(p));
        }
        TokenBatch::new(data, 1, 1, grid, 1, dim, TokenLayout::Pi3Style).unwrap()
    }

    fn spec(sigma: usize, strategy: Strategy) -> SubsampleSpec {
        SubsampleSpec {
            strategy,
            ..SubsampleSpec::new(sigma, TokenLayout::Pi3Style).unwrap()
        }
    }

    #[test]
    fn fixed_grid_keeps_complement_consistent() {
        let grid = PatchGrid::new(4, 4);
        let batch = frame_with_features(grid, 2, |p| vec![p as f32, 1.0]);
        let sel = select_kv(&batch, 0, 0, &spec(4, Strategy::FixedGrid), None).unwrap();
        assert_eq!(sel.kept, vec![0, 2, 8, 10]);
        assert_eq!(sel.dropped, vec![1, 3, 4, 5, 6, 7, 9, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn high_and_low_norm_pick_extremes() {
        let grid = PatchGrid::new(4, 4);
        // Patch 3 (row 0, col 3) has the largest norm in the top-right window {2, 3, 6, 7}.
        let batch = frame_with_features(grid, 2, |p| match p {
            3 => vec![5.0, 0.0],
            6 => vec![0.1, 0.0],
            _ => vec![1.0, 1.0],
        });
        let high = select_kv(&batch, 0, 0, &spec(4, Strategy::HighNorm), None).unwrap();
        assert!(high.kept.contains(&3));
        assert_eq!(high.kept.len(), 4);
        let low = select_kv(&batch, 0, 0, &spec(4, Strategy::LowNorm), None).unwrap();
        assert!(low.kept.contains(&6));
        // Ties resolve to the lowest index: windows with equal norms keep their first cell.
        assert!(low.kept.contains(&0) && high.kept.contains(&0));
    }

    #[test]
    fn mean_pool_of_constant_cells() {
        let grid = PatchGrid::new(4, 4);
        let batch = frame_with_features(grid, 3, |p| {
            let (r, c) = grid.coords(p);
            let cell = (r / 2 * 2 + c / 2) as f32;
            vec![cell, -cell, 2.5]
        });
        let sel = select_kv(&batch, 0, 0, &spec(4, Strategy::MeanPool), None).unwrap();
        assert!(sel.kept.is_empty());
        assert_eq!(sel.dropped.len(), 16);
        let rows = sel.synthesized.unwrap();
        assert_eq!(rows.rows(), 4);
        for w in 0..4 {
            assert_eq!(rows.row(w), &[w as f32, -(w as f32), 2.5]);
        }
    }

    #[test]
    fn first_frame_exemption() {
        let cfg = ModelConfig::new(TokenLayout::VggtStyle);
        let batch = init_tokens(&cfg, 1, 2, 4, 4, 1).unwrap();
        let s = SubsampleSpec::new(4, TokenLayout::VggtStyle).unwrap();
        assert!(s.keep_first_frame_full);
        assert_eq!(select_kv(&batch, 0, 0, &s, None).unwrap().kept.len(), 16);
        assert_eq!(select_kv(&batch, 0, 1, &s, None).unwrap().kept.len(), 4);
        assert!(!SubsampleSpec::new(4, TokenLayout::Pi3Style).unwrap().keep_first_frame_full);
    }

    #[test]
    fn score_based_selects_top_scores_frame_wide() {
        let grid = PatchGrid::new(2, 4);
        let batch = frame_with_features(grid, 1, |_| vec![1.0]);
        let scores = [0.0, 9.0, 8.0, 1.0, 7.0, 7.0, 0.5, 0.0];
        let sel = select_kv(&batch, 0, 0, &spec(4, Strategy::ScoreBased), Some(&scores)).unwrap();
        // 2 windows -> keep 2: patches 1 and 2, both in the first window.
        assert_eq!(sel.kept, vec![1, 2]);
        let err = select_kv(&batch, 0, 0, &spec(4, Strategy::ScoreBased), None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        // Ties go to the lowest index.
        let sel = select_kv(&batch, 0, 0, &spec(2, Strategy::ScoreBased), Some(&scores)).unwrap();
        assert_eq!(sel.kept, vec![1, 2, 4, 5]);
    }

    #[test]
    fn random_in_window_is_reproducible_and_frame_local() {
        let cfg = ModelConfig::new(TokenLayout::Pi3Style);
        let a = init_tokens(&cfg, 1, 3, 6, 6, 1).unwrap();
        let b = init_tokens(&cfg, 1, 3, 6, 6, 2).unwrap();
        let s = SubsampleSpec {
            seed: 11,
            ..spec(4, Strategy::RandomInWindow)
        };
        for f in 0..3 {
            let sa = select_kv(&a, 0, f, &s, None).unwrap();
            assert_eq!(sa, select_kv(&a, 0, f, &s, None).unwrap());
            assert_eq!(sa, select_kv(&b, 0, f, &s, None).unwrap());
            assert_eq!(sa.kept.len(), 9);
            let wins = windows(a.grid(), 2, 2);
            for (w, cells) in wins.iter().enumerate() {
                assert_eq!(cells.iter().filter(|c| sa.kept.contains(c)).count(), 1, "window {w}");
            }
        }
    }

    #[test]
    fn sigma_one_keeps_everything_for_all_strategies() {
        let cfg = ModelConfig::new(TokenLayout::Pi3Style);
        let batch = init_tokens(&cfg, 1, 2, 3, 5, 4).unwrap();
        let scores = vec![1.0; 15];
        for st in Strategy::ALL {
            let sel = select_kv(&batch, 0, 1, &spec(1, st), Some(&scores)).unwrap();
            assert_eq!(sel.kept.len(), 15, "{st}");
            assert!(sel.dropped.is_empty());
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(st.name().parse::<Strategy>().unwrap(), st);
        }
        assert!("sift".parse::<Strategy>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::subsample::Strategy;

        proptest! {
            #[test]
            fn kept_count_matches_window_formula(
                n_h in 1usize..12, n_w in 1usize..12, sigma in 1usize..13,
                strategy in 0usize..6, seed in any::<u64>(),
            ) {
                let st = Strategy::ALL[strategy];
                let cfg = ModelConfig { embed_dim: 4, num_heads: 1, ..ModelConfig::new(TokenLayout::Pi3Style) };
                let batch = init_tokens(&cfg, 1, 2, n_h, n_w, seed).unwrap();
                let s = SubsampleSpec { seed, ..spec(sigma, st) };
                let scores: Vec<f32> = (0..n_h * n_w).map(|p| ((p * 7919) % 13) as f32).collect();
                let sel = select_kv(&batch, 0, 1, &s, Some(&scores)).unwrap();
                let expected = n_h.div_ceil(s.s_h) * n_w.div_ceil(s.s_w);
                let mut union: Vec<usize> = sel.kept.iter().chain(&sel.dropped).copied().collect();
                union.sort_unstable();
                prop_assert_eq!(union, (0..n_h * n_w).collect::<Vec<_>>());
                if st == Strategy::MeanPool && sigma > 1 {
                    prop_assert_eq!(sel.pooled.len(), expected);
                } else {
                    prop_assert_eq!(sel.kept.len(), expected);
                }
            }
        }
    }
}
