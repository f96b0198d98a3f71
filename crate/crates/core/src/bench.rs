//! Analytic cost model for layer schedules and a wall-clock benchmark
//! harness.
//!
//! Cost convention: one multiply-add is 2 FLOPs, each softmax element
//! costs 5 FLOPs. Attention counts cover QK and AV inner products; the
//! MLP is excluded from attention ratios but included in totals. Only
//! the global blocks are costed, since frame blocks are unaffected by a
//! schedule.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{
    build_plans, build_schedule, forward_observed, global_attention, project_qkv, BatchShape,
    FastKernels, ForwardOptions, LayerMode, LayerSchedule, Projections, ScheduleOptions,
};
use crate::error::{Error, Result};
use crate::model::{init_tokens, make_model, Model, ModelConfig, PatchGrid, TokenBatch, TokenLayout};
use crate::subsample::{MeanScope, Strategy, SubsampleSpec};
use crate::tensor::Matrix;

pub const SOFTMAX_FLOPS_PER_ELEMENT: u128 = 5;
pub const FLOP_CONVENTION: &str =
    "1 multiply-add = 2 FLOPs; softmax = 5 FLOPs/element; global blocks only; MLP in totals, not in attention ratios";

/// Problem dimensions for [`flop_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub frames: usize,
    /// Tokens per frame, `T + num_special`.
    pub tokens_per_frame: usize,
    pub grid: PatchGrid,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl CostDims {
    pub fn num_special(&self) -> usize {
        self.tokens_per_frame - self.grid.num_patches()
    }

    fn rows(&self) -> u128 {
        (self.frames * self.tokens_per_frame) as u128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub mode: String,
    /// Key columns seen by each query.
    pub key_columns: u128,
    /// QK plus AV multiply-adds over all heads.
    pub attention_macs: u128,
    pub softmax_elements: u128,
    /// Q, K, V and output projections.
    pub projection_macs: u128,
    pub mlp_macs: u128,
}

impl LayerCost {
    pub fn attention_flops(&self) -> u128 {
        2 * self.attention_macs + SOFTMAX_FLOPS_PER_ELEMENT * self.softmax_elements
    }

    pub fn total_flops(&self) -> u128 {
        self.attention_flops() + 2 * (self.projection_macs + self.mlp_macs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub dims: CostDims,
    pub layers: Vec<LayerCost>,
    pub attention_macs: u128,
    pub attention_flops: u128,
    pub total_flops: u128,
    pub dense_attention_macs: u128,
    pub dense_attention_flops: u128,
    pub dense_total_flops: u128,
}

impl CostReport {
    /// Scheduled over dense attention multiply-adds, as an exact fraction.
    pub fn attention_ratio_exact(&self) -> (u128, u128) {
        (self.attention_macs, self.dense_attention_macs)
    }

    pub fn attention_ratio(&self) -> f64 {
        self.attention_macs as f64 / self.dense_attention_macs as f64
    }

    /// Predicted end-to-end speedup of the global blocks.
    pub fn predicted_speedup(&self) -> f64 {
        self.dense_total_flops as f64 / self.total_flops as f64
    }
}

fn subsampled_columns(spec: &SubsampleSpec, dims: &CostDims) -> u128 {
    let t = dims.grid.num_patches();
    let per_frame = spec.kept_per_frame(dims.grid).min(t);
    let kept_total: usize = (0..dims.frames)
        .map(|f| if (f == 0 && spec.keep_first_frame_full) || spec.sigma == 1 { t } else { per_frame })
        .sum();
    let any_dropped = kept_total < dims.frames * t;
    let frames_with_drops = (0..dims.frames)
        .filter(|&f| !(f == 0 && spec.keep_first_frame_full) && per_frame < t && spec.sigma > 1)
        .count();
    let mut cols = (dims.frames * dims.num_special() + kept_total) as u128;
    if any_dropped && spec.diagonal {
        cols += 1;
    }
    if any_dropped && spec.mean_fill {
        cols += match spec.mean_scope {
            MeanScope::Global => 1,
            MeanScope::PerFrame => frames_with_drops as u128,
        };
    }
    cols
}

fn layer_cost(layer: usize, mode: &LayerMode, dims: &CostDims) -> LayerCost {
    let c = dims.dim as u128;
    let rows = dims.rows();
    let l = dims.tokens_per_frame as u128;
    let heads = dims.heads as u128;
    let key_columns = match mode {
        LayerMode::DenseGlobal => rows,
        LayerMode::FrameConverted => l,
        LayerMode::Subsampled(spec) => subsampled_columns(spec, dims),
        LayerMode::MeanKv => 1,
    };
    let hidden = (dims.dim as f64 * dims.mlp_ratio).round() as u128;
    LayerCost {
        layer,
        mode: mode.to_string(),
        key_columns,
        attention_macs: 2 * rows * key_columns * c,
        softmax_elements: heads * rows * key_columns,
        projection_macs: 4 * rows * c * c,
        mlp_macs: 2 * rows * c * hidden,
    }
}

pub fn flop_model(schedule: &LayerSchedule, dims: &CostDims) -> Result<CostReport> {
    if dims.tokens_per_frame < dims.grid.num_patches() {
        return Err(Error::InvalidArgument(format!(
            "tokens per frame ({}) below patch count ({})",
            dims.tokens_per_frame,
            dims.grid.num_patches()
        )));
    }
    if dims.frames == 0 || dims.dim == 0 || dims.heads == 0 || dims.dim % dims.heads != 0 {
        return Err(Error::InvalidArgument("frames, dim and heads must be positive, heads dividing dim".into()));
    }
    for mode in &schedule.modes {
        if let LayerMode::Subsampled(spec) = mode {
            spec.validate()?;
        }
    }
    let layers: Vec<LayerCost> = schedule
        .modes
        .iter()
        .enumerate()
        .map(|(i, m)| layer_cost(i, m, dims))
        .collect();
    let dense: Vec<LayerCost> = (0..schedule.len())
        .map(|i| layer_cost(i, &LayerMode::DenseGlobal, dims))
        .collect();
    let sum = |v: &[LayerCost], f: fn(&LayerCost) -> u128| v.iter().map(f).sum::<u128>();
    Ok(CostReport {
        convention: FLOP_CONVENTION.to_string(),
        dims: *dims,
        attention_macs: sum(&layers, |l| l.attention_macs),
        attention_flops: sum(&layers, LayerCost::attention_flops),
        total_flops: sum(&layers, LayerCost::total_flops),
        dense_attention_macs: sum(&dense, |l| l.attention_macs),
        dense_attention_flops: sum(&dense, LayerCost::attention_flops),
        dense_total_flops: sum(&dense, LayerCost::total_flops),
        layers,
    })
}

/// What a benchmark record times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One global attention layer on fixed projections: subsampled vs dense.
    AttnLayer,
    /// Attention of every global layer under the schedule vs all-dense.
    AttnSchedule,
    /// Full aggregator forward under the schedule vs all-dense.
    Forward,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::AttnLayer => "attn_layer",
            Phase::AttnSchedule => "attn_schedule",
            Phase::Forward => "forward",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_layer" => Ok(Phase::AttnLayer),
            "attn_schedule" => Ok(Phase::AttnSchedule),
            "forward" => Ok(Phase::Forward),
            _ => Err(Error::config("phase", format!("unknown phase {s:?}"))),
        }
    }
}

pub const DEFAULT_MEMORY_BUDGET: u64 = 8 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub layout: TokenLayout,
    pub frames: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Model depth; layout default when absent.
    pub num_blocks: Option<usize>,
    pub seed: u64,
    pub t_early: usize,
    /// Last subsampled global layer; the final layer when absent.
    pub t_end: Option<usize>,
    pub sigma: usize,
    pub strategy: Strategy,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub keep_first_frame_full: Option<bool>,
    pub phase: Phase,
    pub repeats: usize,
    pub warmups: usize,
    pub memory_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let layout = TokenLayout::VggtStyle;
        Self {
            layout,
            frames: 8,
            n_h: 8,
            n_w: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            num_blocks: None,
            seed: 0,
            t_early: layout.default_t_early(),
            t_end: None,
            sigma: 2,
            strategy: Strategy::FixedGrid,
            diagonal: true,
            mean_fill: true,
            keep_first_frame_full: None,
            phase: Phase::AttnLayer,
            repeats: 5,
            warmups: 2,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl BenchConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.layout);
        m.embed_dim = self.dim;
        m.num_heads = self.heads;
        m.mlp_ratio = self.mlp_ratio;
        m.seed = self.seed;
        if let Some(n) = self.num_blocks {
            m.num_blocks = n;
        }
        m
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.n_h, self.n_w)
    }

    pub fn schedule(&self) -> Result<LayerSchedule> {
        let num_global = self.model_config().num_global_blocks();
        let t_end = self.t_end.unwrap_or(num_global.saturating_sub(1));
        let mut options = ScheduleOptions::for_layout(self.layout);
        options.strategy = self.strategy;
        options.seed = self.seed;
        options.diagonal = self.diagonal;
        options.mean_fill = self.mean_fill;
        if let Some(k) = self.keep_first_frame_full {
            options.keep_first_frame_full = k;
        }
        build_schedule(num_global, self.t_early, t_end, self.sigma, &options)
    }

    pub fn subsample_spec(&self) -> Result<SubsampleSpec> {
        let schedule = self.schedule()?;
        schedule
            .modes
            .iter()
            .find_map(|m| match m {
                LayerMode::Subsampled(s) => Some(s.clone()),
                _ => None,
            })
            .ok_or_else(|| Error::config("schedule", "no subsampled layer"))
    }

    pub fn cost_dims(&self) -> CostDims {
        let mc = self.model_config();
        CostDims {
            frames: self.frames,
            tokens_per_frame: self.grid().num_patches() + mc.num_special,
            grid: self.grid(),
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Rough resident-set estimate of a forward pass in bytes.
    pub fn memory_estimate(&self) -> u64 {
        let mc = self.model_config();
        let rows = (self.frames * (self.grid().num_patches() + mc.num_special)) as u64;
        let c = self.dim as u64;
        let hidden = (self.dim as f64 * self.mlp_ratio).round() as u64;
        let activations = rows * (8 * c + hidden) * 4;
        let weights = mc.num_blocks as u64 * (4 * c * c + 2 * c * hidden) * 4;
        activations + weights
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::config("repeats", "at least 3 repeats are required"));
        }
        if self.frames == 0 || self.n_h == 0 || self.n_w == 0 {
            return Err(Error::config("frames", "frames and grid sides must be positive"));
        }
        self.model_config().validate()?;
        let need = self.memory_estimate();
        if need > self.memory_budget {
            return Err(Error::Budget(format!(
                "benchmark needs about {need} bytes, above the memory budget of {} bytes",
                self.memory_budget
            )));
        }
        self.schedule().map(|_| ())
    }

    /// Short stable hash of the configuration.
    pub fn config_id(&self) -> String {
        config_id(self)
    }
}

/// First 12 hex digits of the SHA-256 of the value's JSON form.
pub fn config_id<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self {
            median_s: median,
            min_s: s[0],
            max_s: s[n - 1],
        }
    }
}

/// Runs `f` `warmups` times untimed, then `repeats` times on a monotonic clock.
pub fn time_repeated(warmups: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    if repeats == 0 {
        return Err(Error::config("repeats", "at least one repeat is required"));
    }
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(Timing::from_samples(&samples))
}

pub fn environment_note() -> String {
    format!(
        "workers={}; precision=f32; aggregator only (no prediction heads); os={}; arch={}",
        rayon::current_num_threads(),
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub config_id: String,
    pub config: BenchConfig,
    pub phase: Phase,
    pub timing: Timing,
    pub dense: Timing,
    /// Dense median over scheduled median.
    pub speedup: f64,
    pub predicted_attention_speedup: f64,
    pub timestamp: String,
    pub environment: String,
}

pub const CSV_HEADER: [&str; 17] = [
    "config_id", "N", "n_h", "n_w", "C", "H", "sigma", "t_early", "t_end", "strategy", "diag",
    "mean_fill", "phase", "median_s", "min_s", "max_s", "speedup",
];

impl BenchmarkRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let c = &self.config;
        let t_end = c
            .schedule()
            .map(|s| s.t_end.to_string())
            .unwrap_or_default();
        vec![
            self.config_id.clone(),
            c.frames.to_string(),
            c.n_h.to_string(),
            c.n_w.to_string(),
            c.dim.to_string(),
            c.heads.to_string(),
            c.sigma.to_string(),
            c.t_early.to_string(),
            t_end,
            c.strategy.to_string(),
            c.diagonal.to_string(),
            c.mean_fill.to_string(),
            self.phase.name().to_string(),
            format!("{:.6}", self.timing.median_s),
            format!("{:.6}", self.timing.min_s),
            format!("{:.6}", self.timing.max_s),
            format!("{:.4}", self.speedup),
        ]
    }
}

pub fn records_to_csv(records: &[BenchmarkRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Model, inputs and first-global-block projections shared by the
/// timed runs of one configuration.
pub struct BenchFixture {
    pub model: Model,
    pub batch: TokenBatch,
    pub shape: BatchShape,
    pub x: Matrix<f32>,
    pub projections: Projections<f32>,
}

impl BenchFixture {
    pub fn new(config: &BenchConfig) -> Result<Self> {
        config.validate()?;
        let model = make_model(config.model_config())?;
        let batch = init_tokens(model.config(), 1, config.frames, config.n_h, config.n_w, config.seed)?;
        let shape = BatchShape::of(&batch);
        let x = Matrix::from_vec(shape.total_rows(), shape.dim, batch.as_slice().to_vec())?;
        let block = model.global_block_index(0).expect("model has a global block");
        let projections = project_qkv(&x, &model.blocks()[block])?;
        Ok(Self { model, batch, shape, x, projections })
    }

    fn attention(&self, mode: &LayerMode) -> Result<Matrix<f32>> {
        let plans = match mode {
            LayerMode::Subsampled(spec) => build_plans(&self.x, &self.shape, spec, None)?,
            _ => Vec::new(),
        };
        global_attention(&self.projections, &self.shape, self.model.config().num_heads, mode, &plans, &FastKernels)
    }

    fn schedule_attention(&self, schedule: &LayerSchedule) -> Result<()> {
        for mode in &schedule.modes {
            std::hint::black_box(self.attention(mode)?);
        }
        Ok(())
    }

    fn forward(&self, schedule: &LayerSchedule) -> Result<()> {
        let mut x = self.x.clone();
        forward_observed(&self.model, &mut x, &self.shape, schedule, &FastKernels, &ForwardOptions::default(), None)?;
        std::hint::black_box(x);
        Ok(())
    }

    /// Times the dense baseline of `phase`.
    pub fn time_dense(&self, phase: Phase, warmups: usize, repeats: usize) -> Result<Timing> {
        let dense = LayerSchedule::dense(self.model.config().num_global_blocks());
        match phase {
            Phase::AttnLayer => time_repeated(warmups, repeats, || {
                std::hint::black_box(self.attention(&LayerMode::DenseGlobal)?);
                Ok(())
            }),
            Phase::AttnSchedule => time_repeated(warmups, repeats, || self.schedule_attention(&dense)),
            Phase::Forward => time_repeated(warmups, repeats, || self.forward(&dense)),
        }
    }

    /// Times `config`'s schedule; `config` must share this fixture's shape.
    pub fn time_scheduled(&self, config: &BenchConfig) -> Result<Timing> {
        let (w, r) = (config.warmups, config.repeats);
        match config.phase {
            Phase::AttnLayer => {
                let mode = LayerMode::Subsampled(config.subsample_spec()?);
                time_repeated(w, r, || {
                    std::hint::black_box(self.attention(&mode)?);
                    Ok(())
                })
            }
            Phase::AttnSchedule => {
                let schedule = config.schedule()?;
                time_repeated(w, r, || self.schedule_attention(&schedule))
            }
            Phase::Forward => {
                let schedule = config.schedule()?;
                time_repeated(w, r, || self.forward(&schedule))
            }
        }
    }

    /// Builds a record against an already measured dense baseline.
    pub fn record(&self, config: &BenchConfig, dense: Timing) -> Result<BenchmarkRecord> {
        let timing = self.time_scheduled(config)?;
        let cost = flop_model(&config.schedule()?, &config.cost_dims())?;
        let predicted = match config.phase {
            Phase::AttnLayer => {
                let spec = config.subsample_spec()?;
                let one = LayerSchedule::uniform(1, LayerMode::Subsampled(spec));
                1.0 / flop_model(&one, &config.cost_dims())?.attention_ratio()
            }
            _ => 1.0 / cost.attention_ratio(),
        };
        Ok(BenchmarkRecord {
            config_id: config.config_id(),
            config: config.clone(),
            phase: config.phase,
            timing,
            dense,
            speedup: dense.median_s / timing.median_s,
            predicted_attention_speedup: predicted,
            timestamp: chrono::Utc::now().to_rfc3339(),
            environment: environment_note(),
        })
    }
}

/// Times the dense baseline and `config`'s schedule on identical inputs.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchmarkRecord> {
    let fixture = BenchFixture::new(config)?;
    let dense = fixture.time_dense(config.phase, config.warmups, config.repeats)?;
    fixture.record(config, dense)
}

/// One dense baseline shared by several σ values on the same shape.
pub fn run_sigma_series(config: &BenchConfig, sigmas: &[usize]) -> Result<Vec<BenchmarkRecord>> {
    let fixture = BenchFixture::new(config)?;
    let dense = fixture.time_dense(config.phase, config.warmups, config.repeats)?;
    sigmas
        .iter()
        .map(|&sigma| {
            let c = BenchConfig { sigma, ..config.clone() };
            c.validate()?;
            fixture.record(&c, dense)
        })
        .collect()
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn fit_exponent(ns: &[f64], times: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Axes of a cartesian sweep; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub frames: Vec<usize>,
    pub sigma: Vec<usize>,
    pub t_early: Vec<usize>,
    pub strategy: Vec<Strategy>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPoint {
    pub frames: Option<usize>,
    pub sigma: Option<usize>,
    pub t_early: Option<usize>,
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: BenchConfig,
    pub grid: Option<SweepGrid>,
    pub points: Vec<SweepPoint>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("sweep", e.to_string()))
    }

    pub fn expand(&self) -> Vec<BenchConfig> {
        let mut out = Vec::new();
        if let Some(g) = &self.grid {
            let axis = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
            let strategies = if g.strategy.is_empty() { vec![self.base.strategy] } else { g.strategy.clone() };
            for &frames in &axis(&g.frames, self.base.frames) {
                for &sigma in &axis(&g.sigma, self.base.sigma) {
                    for &t_early in &axis(&g.t_early, self.base.t_early) {
                        for &strategy in &strategies {
                            out.push(BenchConfig { frames, sigma, t_early, strategy, ..self.base.clone() });
                        }
                    }
                }
            }
        }
        for p in &self.points {
            out.push(BenchConfig {
                frames: p.frames.unwrap_or(self.base.frames),
                sigma: p.sigma.unwrap_or(self.base.sigma),
                t_early: p.t_early.unwrap_or(self.base.t_early),
                strategy: p.strategy.unwrap_or(self.base.strategy),
                ..self.base.clone()
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub config_id: String,
    pub config: BenchConfig,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub records: Vec<BenchmarkRecord>,
    pub failures: Vec<SweepFailure>,
}

/// Runs every configuration serially; failures are recorded and skipped.
pub fn sweep(spec: &SweepSpec) -> SweepOutcome {
    let mut outcome = SweepOutcome::default();
    for config in spec.expand() {
        match run_benchmark(&config) {
            Ok(r) => outcome.records.push(r),
            Err(e) => outcome.failures.push(SweepFailure {
                config_id: config.config_id(),
                config,
                error: e.to_string(),
            }),
        }
    }
    outcome
}
