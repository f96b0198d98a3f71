//! Desk-scale verification: the fast kernel against the exact reference on
//! randomized cases, plus the degeneracy identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sga_core::aggregator::{build_plans, build_schedule, forward_with, BatchShape, ForwardOptions, LayerSchedule};
use sga_core::model::{init_tokens, make_model, PatchGrid, TokenLayout};
use sga_core::sga::{max_relative_error, mean_kv_attention, sga_attention, sga_oracle};
use sga_core::subsample::{ScoreMaps, Strategy, SubsampleSpec};
use sga_core::tensor::Matrix;
use sga_core::Result;

use crate::config::RunConfig;

const SIGMAS: [usize; 5] = [1, 2, 4, 6, 9];

#[derive(Debug, Clone, Serialize)]
pub struct CaseFailure {
    pub case: usize,
    pub sigma: usize,
    pub strategy: Strategy,
    pub layout: TokenLayout,
    pub diagonal: bool,
    pub mean_fill: bool,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config_id: String,
    pub cases: usize,
    pub passed: usize,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub fault_injected: bool,
    pub failures: Vec<CaseFailure>,
    pub degeneracy: Vec<Check>,
    pub all_passed: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amplitude: f32) -> Matrix<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn oracle_case(rng: &mut ChaCha8Rng, case: usize, tolerance: f64, inject: bool) -> Result<(f64, Option<CaseFailure>)> {
    let sigma = SIGMAS[case % SIGMAS.len()];
    let strategy = Strategy::ALL[(case / SIGMAS.len()) % Strategy::ALL.len()];
    let layout = if (case / 30) % 2 == 0 { TokenLayout::VggtStyle } else { TokenLayout::Pi3Style };
    let (diagonal, mean_fill) = (rng.gen(), rng.gen());
    let frames = rng.gen_range(1..=6);
    let grid = PatchGrid::new(rng.gen_range(1..=8), rng.gen_range(1..=8));
    let num_special = rng.gen_range(0..=5);
    let shape = BatchShape { batch: 1, frames, grid, num_special, dim: 6, layout };
    let rows = shape.global_rows();
    let spec = SubsampleSpec { strategy, seed: rng.gen(), diagonal, mean_fill, ..SubsampleSpec::new(sigma, layout)? };
    let x = random_matrix(rng, rows, shape.dim, 1.0);
    let maps = ScoreMaps((0..frames).map(|_| (0..grid.num_patches()).map(|_| rng.gen()).collect()).collect());
    let plan = build_plans(&x, &shape, &spec, Some(std::slice::from_ref(&maps)))?.remove(0);
    let (q, k, v) = (random_matrix(rng, rows, 8, 2.0), random_matrix(rng, rows, 8, 2.0), random_matrix(rng, rows, 8, 1.0));
    let mut got = sga_attention(&q, &k, &v, &plan)?;
    if inject && case == 0 {
        let x = got.get(0, 0);
        got.set(0, 0, x + 1.0);
    }
    let err = max_relative_error(&got, &sga_oracle(&q, &k, &v, &plan)?);
    let failure = (err > tolerance).then_some(CaseFailure { case, sigma, strategy, layout, diagonal, mean_fill, relative_error: err });
    Ok((err, failure))
}

fn degeneracy_checks(config: &RunConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let model = make_model(config.model_config())?;
    let d = &config.data;
    let batch = init_tokens(model.config(), d.batch, d.frames, d.n_h, d.n_w, d.seed)?;
    let num_global = model.config().num_global_blocks();
    let options = ForwardOptions { score_maps: config.score_maps()?.map(|m| vec![m; d.batch]) };
    let dense = forward_with(&model, &batch, &LayerSchedule::dense(num_global), &options)?;
    let sigma1 = build_schedule(num_global, 0, num_global - 1, 1, &config.schedule_options())?;
    let diff = forward_with(&model, &batch, &sigma1, &options)?.max_rel_diff(&dense);
    checks.push(Check { name: "sigma=1 schedule equals dense forward".into(), passed: diff <= 1e-5, value: diff, tolerance: 1e-5 });

    let mut rng = ChaCha8Rng::seed_from_u64(d.seed ^ 0x6d65616e);
    let (q, k, v) = (random_matrix(&mut rng, 50, 8, 2.0), random_matrix(&mut rng, 50, 8, 2.0), random_matrix(&mut rng, 50, 8, 1.0));
    let out = mean_kv_attention(&q, &k, &v)?;
    let mut err = 0.0f64;
    for c in 0..8 {
        let vbar = (0..50).map(|i| v.get(i, c) as f64).sum::<f64>() / 50.0;
        for i in 0..50 {
            err = err.max((out.get(i, c) as f64 - vbar).abs());
        }
    }
    checks.push(Check { name: "mean-kv rows equal the value mean".into(), passed: err <= 1e-6, value: err, tolerance: 1e-6 });
    Ok(checks)
}

pub fn run(config: &RunConfig, cases: usize, tolerance: f64, inject_fault: bool) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.data.seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (err, failure) = oracle_case(&mut rng, case, tolerance, inject_fault)?;
        worst = worst.max(err);
        failures.extend(failure);
    }
    let degeneracy = degeneracy_checks(config)?;
    let all_passed = failures.is_empty() && degeneracy.iter().all(|c| c.passed);
    Ok(VerifyReport {
        config_id: config.config_id(),
        cases,
        passed: cases - failures.len(),
        tolerance,
        max_relative_error: worst,
        fault_injected: inject_fault,
        failures,
        degeneracy,
        all_passed,
    })
}
