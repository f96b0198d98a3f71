#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sga_core::aggregator::{build_plans, BatchShape};
use sga_core::model::{PatchGrid, TokenLayout};
use sga_core::sga::SgaPlan;
use sga_core::subsample::{MeanScope, MeanWeighting, ScoreMaps, Strategy, SubsampleSpec};
use sga_core::tensor::Matrix;

pub const SIGMAS: [usize; 5] = [1, 2, 4, 6, 9];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amplitude: f32) -> Matrix<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct CaseParams {
    pub frames: usize,
    pub grid: PatchGrid,
    pub num_special: usize,
    pub head_dim: usize,
    pub sigma: usize,
    pub strategy: Strategy,
    pub layout: TokenLayout,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub mean_scope: MeanScope,
    pub mean_weighting: MeanWeighting,
    pub amplitude: f32,
    pub seed: u64,
}

impl CaseParams {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            frames: rng.gen_range(1..=6),
            grid: PatchGrid::new(rng.gen_range(1..=8), rng.gen_range(1..=8)),
            num_special: rng.gen_range(0..=5),
            head_dim: [4, 8, 16][rng.gen_range(0..3)],
            sigma: SIGMAS[rng.gen_range(0..SIGMAS.len())],
            strategy: Strategy::ALL[rng.gen_range(0..Strategy::ALL.len())],
            layout: if rng.gen() { TokenLayout::VggtStyle } else { TokenLayout::Pi3Style },
            diagonal: rng.gen(),
            mean_fill: rng.gen(),
            mean_scope: if rng.gen_ratio(1, 4) { MeanScope::PerFrame } else { MeanScope::Global },
            mean_weighting: if rng.gen_ratio(1, 4) { MeanWeighting::CountWeighted } else { MeanWeighting::Single },
            amplitude: [0.5, 2.0, 4.0][rng.gen_range(0..3)],
            seed: rng.gen(),
        }
    }

    pub fn spec(&self) -> SubsampleSpec {
        SubsampleSpec {
            strategy: self.strategy,
            seed: self.seed,
            diagonal: self.diagonal,
            mean_fill: self.mean_fill,
            mean_scope: self.mean_scope,
            mean_weighting: self.mean_weighting,
            ..SubsampleSpec::new(self.sigma, self.layout).unwrap()
        }
    }
}

pub struct Case {
    pub params: CaseParams,
    pub q: Matrix<f32>,
    pub k: Matrix<f32>,
    pub v: Matrix<f32>,
    pub plan: SgaPlan,
}

/// Random Q/K/V and a plan selected from random token features.
pub fn build_case(params: CaseParams) -> Case {
    let mut rng = rng(params.seed);
    let shape = BatchShape {
        batch: 1,
        frames: params.frames,
        grid: params.grid,
        num_special: params.num_special,
        dim: 6,
        layout: params.layout,
    };
    let rows = shape.global_rows();
    let x = random_matrix(&mut rng, rows, shape.dim, 1.0);
    let maps = ScoreMaps(
        (0..params.frames)
            .map(|_| (0..params.grid.num_patches()).map(|_| rng.gen::<f32>()).collect())
            .collect(),
    );
    let plan = build_plans(&x, &shape, &params.spec(), Some(std::slice::from_ref(&maps)))
        .unwrap()
        .remove(0);
    let a = params.amplitude;
    Case {
        q: random_matrix(&mut rng, rows, params.head_dim, a),
        k: random_matrix(&mut rng, rows, params.head_dim, a),
        v: random_matrix(&mut rng, rows, params.head_dim, 1.0),
        plan,
        params,
    }
}
