//! Super-resolution reconstruction of an isotropic volume from thick-slice stacks.
//!
//! The acquisition model of each stack is a sparse linear operator (slice
//! profile, known per-slice motion, trilinear sampling). Reconstruction
//! minimizes `½ Σ_k ‖A_k x − y_k‖² + λ TV_ε(x)` with monotone accelerated
//! gradient descent and a backtracking Lipschitz estimate.

mod operator;
mod stack;
mod tv;

pub use operator::{slice_profile, StackOperator};
pub use stack::{
    acquire_stack, adjacent_slice_mse, sidecar_path, stack_grid, AcquisitionParams, LRStack, Orientation,
    SliceMotion, FWHM_PER_SIGMA,
};
pub use tv::{tv_value, tv_value_and_gradient};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ImageGrid, Interpolation, Volume};

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrParams {
    pub lambda_tv: f64,
    pub max_iters: usize,
    /// Relative objective change that stops the iteration.
    pub tol: f64,
    /// TV smoothing as a fraction of the stack intensity range.
    pub epsilon_rel: f64,
    /// Stacks whose quality score exceeds this are dropped before reconstruction.
    pub max_quality_score: Option<f64>,
}

impl Default for SrParams {
    fn default() -> Self {
        Self { lambda_tv: 0.01, max_iters: 200, tol: 1e-6, epsilon_rel: 1e-3, max_quality_score: None }
    }
}

#[derive(Debug, Clone)]
pub struct SRProblem {
    pub stacks: Vec<LRStack>,
    pub target_grid: ImageGrid,
    pub params: SrParams,
}

impl SRProblem {
    pub fn new(stacks: Vec<LRStack>, target_grid: ImageGrid, params: SrParams) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::InvalidInput("super-resolution needs at least one stack".into()));
        }
        if !target_grid.is_isotropic() {
            return Err(Error::InvalidGrid("reconstruction grid must be isotropic".into()));
        }
        if !(params.lambda_tv >= 0.0) || !(params.tol >= 0.0) || !(params.epsilon_rel > 0.0) {
            return Err(Error::InvalidInput("lambda and tol must be ≥ 0 and epsilon > 0".into()));
        }
        for s in &stacks {
            s.validate()?;
        }
        Ok(Self { stacks, target_grid, params })
    }
}

#[derive(Debug, Clone)]
pub enum SrInit {
    Zero,
    /// Mean of the stacks resampled onto the target grid (motion ignored).
    AverageOfStacks,
    Volume(Volume),
}

#[derive(Debug, Clone)]
pub struct SrResult {
    pub volume: Volume,
    /// Objective after each iteration; element 0 is the initial objective.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Root-mean-square data residual per stack at the solution.
    pub stack_rms_residual: Vec<f64>,
    pub quality_scores: Vec<f64>,
    /// Indices (into the problem's stacks) actually used.
    pub used_stacks: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Average of the stacks resampled onto `grid`.
pub fn average_of_stacks(stacks: &[LRStack], grid: &ImageGrid) -> Result<Volume> {
    let resampled: Vec<Volume> = stacks
        .iter()
        .map(|s| s.volume.resample(grid, Interpolation::Linear))
        .collect::<Result<_>>()?;
    let n = resampled.len() as f32;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| resampled.iter().map(|v| v.data()[i]).sum::<f32>() / n)
        .collect();
    Volume::new(grid.clone(), data)
}

/// Peak signal-to-noise ratio of `test` against `reference` (peak = max |reference|).
pub fn psnr(reference: &Volume, test: &Volume) -> f64 {
    let peak = reference.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.data().len() as f64;
    10.0 * (peak * peak / mse.max(f64::MIN_POSITIVE)).log10()
}

struct Objective<'a> {
    ops: &'a [StackOperator],
    ys: &'a [Vec<f64>],
    dims: [usize; 3],
    lambda: f64,
    eps: f64,
}

impl Objective<'_> {
    fn residuals(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.ops
            .iter()
            .zip(self.ys)
            .map(|(op, y)| op.forward(x).iter().zip(y).map(|(a, b)| a - b).collect())
            .collect()
    }

    fn data_term(res: &[Vec<f64>]) -> f64 {
        0.5 * res.iter().map(|r| dot(r, r)).sum::<f64>()
    }

    fn value(&self, x: &[f64], res: &[Vec<f64>]) -> f64 {
        let tv = if self.lambda > 0.0 { self.lambda * tv_value(x, self.dims, self.eps) } else { 0.0 };
        Self::data_term(res) + tv
    }

    fn gradient(&self, x: &[f64], res: &[Vec<f64>]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (op, r) in self.ops.iter().zip(res) {
            let a = op.adjoint(r);
            g.iter_mut().zip(&a).for_each(|(gi, ai)| *gi += ai);
        }
        if self.lambda > 0.0 {
            let (_, tg) = tv_value_and_gradient(x, self.dims, self.eps);
            g.iter_mut().zip(&tg).for_each(|(gi, ti)| *gi += self.lambda * ti);
        }
        g
    }
}

fn combine(a: &[f64], b: &[f64], c: &[f64], cb: f64, cc: f64) -> Vec<f64> {
    // a + cb·(b − a) + cc·(a − c)
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&a, &b), &c)| a + cb * (b - a) + cc * (a - c))
        .collect()
}

fn combine_res(a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>], cb: f64, cc: f64) -> Vec<Vec<f64>> {
    a.iter().zip(b).zip(c).map(|((a, b), c)| combine(a, b, c, cb, cc)).collect()
}

const MAX_BACKTRACKS: usize = 60;

/// Runs the reconstruction.
pub fn sr_reconstruct(problem: &SRProblem, init: SrInit) -> Result<SrResult> {
    let grid = &problem.target_grid;
    let params = problem.params;
    let quality_scores: Vec<f64> = problem.stacks.iter().map(LRStack::quality_score).collect();
    let used_stacks: Vec<usize> = (0..problem.stacks.len())
        .filter(|&i| params.max_quality_score.map_or(true, |t| quality_scores[i] <= t))
        .collect();
    if used_stacks.is_empty() {
        return Err(Error::InvalidInput("every stack failed the quality threshold".into()));
    }
    let stacks: Vec<LRStack> = used_stacks.iter().map(|&i| problem.stacks[i].clone()).collect();
    let ops: Vec<StackOperator> = stacks.iter().map(|s| StackOperator::new(s, grid)).collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = stacks.iter().map(|s| s.volume.data().iter().map(|&v| v as f64).collect()).collect();
    let (lo, hi) = ys
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let obj = Objective { ops: &ops, ys: &ys, dims: grid.dims(), lambda: params.lambda_tv, eps: params.epsilon_rel * range };

    let x0: Vec<f64> = match init {
        SrInit::Zero => vec![0.0; grid.len()],
        SrInit::AverageOfStacks => average_of_stacks(&stacks, grid)?.data().iter().map(|&v| v as f64).collect(),
        SrInit::Volume(v) => {
            if !v.grid().same_as(grid, 1e-6) {
                return Err(Error::GeometryMismatch("initial volume is not on the target grid".into()));
            }
            v.data().iter().map(|&v| v as f64).collect()
        }
    };

    let mut x = x0;
    let mut res_x = obj.residuals(&x);
    let mut f_x = obj.value(&x, &res_x);
    let mut y = x.clone();
    let mut res_y = res_x.clone();
    let mut f_y = f_x;
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut trace = vec![f_x];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iters {
        iterations = iter + 1;
        let g = obj.gradient(&y, &res_y);
        let gg = dot(&g, &g);
        if gg == 0.0 {
            converged = true;
            break;
        }
        let ag: Vec<Vec<f64>> = ops.iter().map(|op| op.forward(&g)).collect();
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let s = 1.0 / lip;
            let z: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            let res_z: Vec<Vec<f64>> = res_y
                .iter()
                .zip(&ag)
                .map(|(r, a)| r.iter().zip(a).map(|(ri, ai)| ri - s * ai).collect())
                .collect();
            let f_z = obj.value(&z, &res_z);
            if f_z <= f_y - 0.5 * s * gg {
                accepted = Some((z, res_z, f_z));
                break;
            }
            lip *= 2.0;
        }
        let Some((z, res_z, f_z)) = accepted else {
            return Err(Error::Diverged { iteration: iter, objective: f_x, trace });
        };

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let improved = f_z <= f_x;
        let (x_next, res_next, f_next) = if improved { (z.clone(), res_z.clone(), f_z) } else { (x.clone(), res_x.clone(), f_x) };
        // y ← x⁺ + (t/t⁺)(z − x⁺) + ((t−1)/t⁺)(x⁺ − x)
        let cb = t / t_next;
        let cc = (t - 1.0) / t_next;
        y = combine(&x_next, &z, &x, cb, cc);
        res_y = combine_res(&res_next, &res_z, &res_x, cb, cc);
        f_y = obj.value(&y, &res_y);
        let rel = (f_x - f_next).abs() / f_x.abs().max(f64::MIN_POSITIVE);
        x = x_next;
        res_x = res_next;
        f_x = f_next;
        t = t_next;
        lip *= 0.9;
        trace.push(f_x);
        debug!("sr iteration {iterations}: objective {f_x:.6e} (L = {lip:.3e})");
        if improved && rel < params.tol {
            converged = true;
            break;
        }
    }

    let stack_rms_residual = res_x.iter().map(|r| (dot(r, r) / r.len().max(1) as f64).sqrt()).collect();
    let volume = Volume::new(grid.clone(), x.iter().map(|&v| v as f32).collect())?;
    Ok(SrResult { volume, trace, iterations, converged, stack_rms_residual, quality_scores, used_stacks })
}
