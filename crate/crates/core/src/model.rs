//! Toy alternating frame/global aggregator: configuration, deterministic
//! weights, and the token batch every attention operation consumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, label};
use crate::tensor::{Matrix, Real};

/// How the per-frame special tokens are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLayout {
    /// One camera token plus registers; the reference frame (frame 0) uses
    /// its own special embeddings.
    VggtStyle,
    /// Register tokens only, shared by every frame.
    Pi3Style,
}

impl TokenLayout {
    pub fn default_num_blocks(self) -> usize {
        match self {
            TokenLayout::VggtStyle => 48,
            TokenLayout::Pi3Style => 36,
        }
    }

    pub fn default_t_early(self) -> usize {
        match self {
            TokenLayout::VggtStyle => 9,
            TokenLayout::Pi3Style => 10,
        }
    }

    /// The reference frame is exempt from subsampling only when it is special.
    pub fn keeps_first_frame_full(self) -> bool {
        matches!(self, TokenLayout::VggtStyle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub layout: TokenLayout,
    pub num_special: usize,
    /// Block 0 is frame attention when true, global attention otherwise.
    pub frame_first: bool,
}

impl ModelConfig {
    pub fn new(layout: TokenLayout) -> Self {
        Self {
            num_blocks: layout.default_num_blocks(),
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4.0,
            seed: 0,
            layout,
            num_special: 5,
            frame_first: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "embed_dim must be positive"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                "num_heads must divide embed_dim",
            ));
        }
        if self.num_blocks < 2 || self.num_blocks % 2 != 0 {
            return Err(Error::config(
                "num_blocks",
                "num_blocks must be even and at least 2",
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::config("mlp_ratio", "mlp_ratio must be positive"));
        }
        if self.layout == TokenLayout::VggtStyle && self.num_special == 0 {
            return Err(Error::config(
                "num_special",
                "vggt_style needs at least the camera token",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn num_global_blocks(&self) -> usize {
        self.num_blocks / 2
    }

    pub fn is_global_block(&self, block: usize) -> bool {
        (block % 2 == 1) == self.frame_first
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_scale: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_scale: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f32> {
    let bound = 1.0 / (rows as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl BlockWeights<f32> {
    fn generate(config: &ModelConfig, block: usize) -> Self {
        let c = config.embed_dim;
        let hidden = config.hidden_dim();
        let mut rng = rng::stream(config.seed, &[label::BLOCK, block as u64]);
        Self {
            ln1_scale: vec![1.0; c],
            ln1_bias: vec![0.0; c],
            wq: uniform_matrix(&mut rng, c, c),
            wk: uniform_matrix(&mut rng, c, c),
            wv: uniform_matrix(&mut rng, c, c),
            wo: uniform_matrix(&mut rng, c, c),
            ln2_scale: vec![1.0; c],
            ln2_bias: vec![0.0; c],
            w1: uniform_matrix(&mut rng, c, hidden),
            b1: vec![0.0; hidden],
            w2: uniform_matrix(&mut rng, hidden, c),
            b2: vec![0.0; c],
        }
    }
}

impl<T: Real> BlockWeights<T> {
    pub fn cast<U: Real>(&self) -> BlockWeights<U> {
        let v = |x: &[T]| x.iter().map(|&e| U::from_f64_lossy(e.to_f64())).collect();
        BlockWeights {
            ln1_scale: v(&self.ln1_scale),
            ln1_bias: v(&self.ln1_bias),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            ln2_scale: v(&self.ln2_scale),
            ln2_bias: v(&self.ln2_bias),
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<BlockWeights<f32>>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockWeights<f32>] {
        &self.blocks
    }

    /// Block index of the `g`-th global block in depth order.
    pub fn global_block_index(&self, g: usize) -> Option<usize> {
        (0..self.config.num_blocks)
            .filter(|&b| self.config.is_global_block(b))
            .nth(g)
    }
}

pub fn make_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let blocks = (0..config.num_blocks)
        .map(|b| BlockWeights::generate(&config, b))
        .collect();
    Ok(Model { config, blocks })
}

/// Patch grid dimensions of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_h: usize,
    pub n_w: usize,
}

impl PatchGrid {
    pub fn new(n_h: usize, n_w: usize) -> Self {
        Self { n_h, n_w }
    }

    pub fn num_patches(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn coords(&self, patch: usize) -> (usize, usize) {
        (patch / self.n_w, patch % self.n_w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_w + col
    }

    /// Patch index after a 180 degree rotation of the grid.
    pub fn rotate_180(&self, patch: usize) -> usize {
        let (r, c) = self.coords(patch);
        self.index(self.n_h - 1 - r, self.n_w - 1 - c)
    }
}

/// Fixed 2-D sinusoidal embedding: the first half of the channels encodes the
/// row, the second half the column, as interleaved sin/cos pairs.
pub fn positional_embedding(grid: PatchGrid, dim: usize) -> Matrix<f32> {
    let half = dim / 2;
    let mut table = Matrix::zeros(grid.num_patches(), dim);
    let encode = |pos: usize, out: &mut [f32]| {
        let width = out.len();
        for (j, slot) in out.iter_mut().enumerate() {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / width.max(1) as f64);
            let angle = pos as f64 * freq;
            *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    };
    for p in 0..grid.num_patches() {
        let (r, c) = grid.coords(p);
        let row = table.row_mut(p);
        let (rows_half, cols_half) = row.split_at_mut(dim - half);
        encode(r, rows_half);
        encode(c, cols_half);
    }
    table
}

/// Special-token embeddings `(reference frame, other frames)`; identical for
/// [`TokenLayout::Pi3Style`].
pub fn special_embeddings(config: &ModelConfig) -> (Matrix<f32>, Matrix<f32>) {
    let draw = |which: u64| {
        let mut rng = rng::stream(config.seed, &[label::SPECIAL, which]);
        let data = (0..config.num_special * config.embed_dim)
            .map(|_| rng.gen_range(-1.0f32..=1.0))
            .collect();
        Matrix::from_vec(config.num_special, config.embed_dim, data).expect("sized")
    };
    let shared = draw(0);
    match config.layout {
        TokenLayout::VggtStyle => (draw(1), shared),
        TokenLayout::Pi3Style => (shared.clone(), shared),
    }
}

/// Tokens of shape (B, N, L, C). Within a frame the special tokens come
/// first, followed by the patch tokens in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    data: Vec<f32>,
    batch: usize,
    frames: usize,
    dim: usize,
    grid: PatchGrid,
    num_special: usize,
    layout: TokenLayout,
}

impl TokenBatch {
    pub fn new(
        data: Vec<f32>,
        batch: usize,
        frames: usize,
        grid: PatchGrid,
        num_special: usize,
        dim: usize,
        layout: TokenLayout,
    ) -> Result<Self> {
        if batch == 0 || frames == 0 || grid.n_h == 0 || grid.n_w == 0 || dim == 0 {
            return Err(Error::Shape("batch dimensions must be positive".into()));
        }
        let tokens = grid.num_patches() + num_special;
        if data.len() != batch * frames * tokens * dim {
            return Err(Error::Shape(format!(
                "expected {} values for ({batch}, {frames}, {tokens}, {dim}), got {}",
                batch * frames * tokens * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("token value at flat index {pos}")));
        }
        Ok(Self {
            data,
            batch,
            frames,
            dim,
            grid,
            num_special,
            layout,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn num_special(&self) -> usize {
        self.num_special
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    /// L = n_h * n_w + num_special.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid.num_patches() + self.num_special
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, b: usize, f: usize, t: usize) -> usize {
        ((b * self.frames + f) * self.tokens_per_frame() + t) * self.dim
    }

    pub fn token(&self, b: usize, f: usize, t: usize) -> &[f32] {
        let o = self.offset(b, f, t);
        &self.data[o..o + self.dim]
    }

    pub fn token_mut(&mut self, b: usize, f: usize, t: usize) -> &mut [f32] {
        let o = self.offset(b, f, t);
        &mut self.data[o..o + self.dim]
    }

    pub fn patch(&self, b: usize, f: usize, p: usize) -> &[f32] {
        self.token(b, f, self.num_special + p)
    }

    pub fn patch_mut(&mut self, b: usize, f: usize, p: usize) -> &mut [f32] {
        let t = self.num_special + p;
        self.token_mut(b, f, t)
    }

    /// All tokens of one frame, (L, C) row-major.
    pub fn frame(&self, b: usize, f: usize) -> &[f32] {
        let o = self.offset(b, f, 0);
        &self.data[o..o + self.tokens_per_frame() * self.dim]
    }

    /// New batch with the same metadata and replacement values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(
            data,
            self.batch,
            self.frames,
            self.grid,
            self.num_special,
            self.dim,
            self.layout,
        )
    }

    /// Reorders frames so that output frame `i` is input frame `perm[i]`.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.frames {
            return Err(Error::Shape("permutation length must equal N".into()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            for &src in perm {
                data.extend_from_slice(self.frame(b, src));
            }
        }
        self.with_data(data)
    }

    pub fn max_rel_diff(&self, other: &TokenBatch) -> f64 {
        let scale = self
            .data
            .iter()
            .map(|x| x.abs() as f64)
            .fold(0.0, f64::max)
            .max(1e-30);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs() / scale)
            .fold(0.0, f64::max)
    }
}

/// Synthetic patch features (uniform noise plus positional embedding) and
/// the model's special embeddings.
pub fn init_tokens(
    config: &ModelConfig,
    batch: usize,
    frames: usize,
    n_h: usize,
    n_w: usize,
    seed: u64,
) -> Result<TokenBatch> {
    if batch == 0 || frames == 0 || n_h == 0 || n_w == 0 {
        return Err(Error::Shape("B, N, n_h and n_w must be at least 1".into()));
    }
    let grid = PatchGrid::new(n_h, n_w);
    let dim = config.embed_dim;
    let pos = positional_embedding(grid, dim);
    let (ref_special, other_special) = special_embeddings(config);
    let tokens = grid.num_patches() + config.num_special;
    let mut data = Vec::with_capacity(batch * frames * tokens * dim);
    for b in 0..batch {
        for f in 0..frames {
            let specials = if f == 0 { &ref_special } else { &other_special };
            data.extend_from_slice(specials.as_slice());
            let mut rng = rng::stream(seed, &[label::PATCH, b as u64, f as u64]);
            for p in 0..grid.num_patches() {
                for &e in pos.row(p) {
                    data.push(rng.gen_range(-1.0f32..=1.0) + e);
                }
            }
        }
    }
    TokenBatch::new(data, batch, frames, grid, config.num_special, dim, config.layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_weights() {
        let cfg = ModelConfig {
            seed: 7,
            num_blocks: 4,
            ..ModelConfig::new(TokenLayout::VggtStyle)
        };
        let a = make_model(cfg.clone()).unwrap();
        let b = make_model(cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            embed_dim: 64,
            num_heads: 5,
            ..ModelConfig::new(TokenLayout::VggtStyle)
        };
        let err = make_model(cfg).unwrap_err().to_string();
        assert!(err.contains("num_heads must divide embed_dim"), "{err}");
    }

    #[test]
    fn odd_block_count_rejected() {
        let cfg = ModelConfig {
            num_blocks: 5,
            ..ModelConfig::new(TokenLayout::Pi3Style)
        };
        assert!(matches!(make_model(cfg), Err(Error::Config { field, .. }) if field == "num_blocks"));
    }

    #[test]
    fn vggt_default_has_24_global_blocks_at_odd_indices() {
        let cfg = ModelConfig::new(TokenLayout::VggtStyle);
        assert_eq!(cfg.num_blocks, 48);
        let globals: Vec<usize> = (0..48).filter(|&b| cfg.is_global_block(b)).collect();
        assert_eq!(globals.len(), 24);
        assert!(globals.iter().all(|b| b % 2 == 1));
        let flipped = ModelConfig {
            frame_first: false,
            ..cfg
        };
        assert!(flipped.is_global_block(0));
    }

    #[test]
    fn token_count_and_determinism() {
        let cfg = ModelConfig::new(TokenLayout::VggtStyle);
        let a = init_tokens(&cfg, 1, 2, 2, 2, 3).unwrap();
        assert_eq!(a.tokens_per_frame(), 9);
        let b = init_tokens(&cfg, 1, 2, 2, 2, 3).unwrap();
        assert_eq!(a, b);
        assert!(init_tokens(&cfg, 1, 0, 2, 2, 3).is_err());
    }

    #[test]
    fn reference_frame_specials() {
        let vggt = ModelConfig::new(TokenLayout::VggtStyle);
        let t = init_tokens(&vggt, 1, 2, 2, 2, 3).unwrap();
        assert_ne!(t.token(0, 0, 0), t.token(0, 1, 0));
        let pi3 = ModelConfig::new(TokenLayout::Pi3Style);
        let t = init_tokens(&pi3, 1, 2, 2, 2, 3).unwrap();
        for s in 0..5 {
            assert_eq!(t.token(0, 0, s), t.token(0, 1, s));
        }
    }

    #[test]
    fn non_finite_tokens_rejected() {
        let grid = PatchGrid::new(1, 1);
        let err = TokenBatch::new(vec![f32::NAN; 2], 1, 1, grid, 1, 1, TokenLayout::Pi3Style);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rotation_is_an_involution() {
        let g = PatchGrid::new(3, 4);
        for p in 0..12 {
            assert_eq!(g.rotate_180(g.rotate_180(p)), p);
        }
        assert_eq!(g.rotate_180(0), 11);
    }
}
