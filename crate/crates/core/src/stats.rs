//! Voxelwise GLM over a 4D enlargement stack with Freedman–Lane permutation
//! inference on threshold-free cluster enhanced t-maps.
//!
//! FWER p-values come from the per-permutation maximum of each TFCE tail; the
//! two tails are combined by Bonferroni, so `p = min(1, 2 p_tail)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Connectivity;
use crate::morphometry::Stack4d;
use crate::record::SubjectRecord;
use crate::volume::Volume;

/// Tested predictor of one analysis; the GA covariates are always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    LesionArea,
    LesionType,
    LesionLocation,
    GaAtOperation,
}

impl Predictor {
    pub const ALL: [Predictor; 4] =
        [Predictor::LesionArea, Predictor::LesionType, Predictor::LesionLocation, Predictor::GaAtOperation];

    pub fn name(self) -> &'static str {
        match self {
            Predictor::LesionArea => "lesion_area_mm2",
            Predictor::LesionType => "lesion_type",
            Predictor::LesionLocation => "lesion_location",
            Predictor::GaAtOperation => "ga_op_weeks",
        }
    }

    fn value(self, r: &SubjectRecord) -> f64 {
        match self {
            Predictor::LesionArea => r.lesion_area_mm2,
            Predictor::LesionType => r.lesion_type.indicator(),
            Predictor::LesionLocation => r.lesion_location as f64,
            Predictor::GaAtOperation => r.ga_op_weeks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl DesignMatrix {
    /// Validates shape, finiteness and full column rank.
    pub fn new(x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != x.ncols() {
            return Err(Error::InvalidInput(format!("{} column names for {} columns", names.len(), x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design matrix has non-finite entries".into()));
        }
        if x.nrows() <= x.ncols() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} subjects is too few for {} design columns",
                x.nrows(),
                x.ncols()
            )));
        }
        let collinear = collinear_columns(&x);
        if !collinear.is_empty() {
            return Err(Error::RankDeficient(collinear.into_iter().map(|j| names[j].clone()).collect()));
        }
        Ok(Self { x, names })
    }

    /// Intercept, GA covariates and the tested predictor, with a contrast on the predictor.
    pub fn for_analysis(records: &[SubjectRecord], predictor: Predictor) -> Result<(Self, Vec<f64>)> {
        let mut cols: Vec<(&str, Box<dyn Fn(&SubjectRecord) -> f64>)> = vec![
            ("intercept", Box::new(|_| 1.0)),
            ("ga_pre_weeks", Box::new(|r| r.ga_pre_weeks)),
            ("ga_post_weeks", Box::new(|r| r.ga_post_weeks)),
        ];
        if predictor != Predictor::GaAtOperation {
            cols.push(("ga_op_weeks", Box::new(|r| r.ga_op_weeks)));
        }
        cols.push((predictor.name(), Box::new(move |r| predictor.value(r))));
        let x = DMatrix::from_fn(records.len(), cols.len(), |i, j| (cols[j].1)(&records[i]));
        let mut contrast = vec![0.0; cols.len()];
        contrast[cols.len() - 1] = 1.0;
        let names = cols.iter().map(|c| c.0.to_string()).collect();
        Ok((Self::new(x, names)?, contrast))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }
}

/// Columns participating in a near-null direction of the column-normalized matrix.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut xs = x.clone();
    for mut c in xs.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let svd = xs.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let mut out = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= 1e-10 * smax.max(1e-300) {
            for j in 0..x.ncols() {
                if vt[(k, j)].abs() > 1e-6 && !out.contains(&j) {
                    out.push(j);
                }
            }
        }
    }
    // an all-zero column has no direction after normalization but is still degenerate
    for (j, c) in x.column_iter().enumerate() {
        if c.norm() == 0.0 && !out.contains(&j) {
            out.push(j);
        }
    }
    out.sort_unstable();
    out
}

/// Precomputed OLS projections for one design and contrast.
struct Glm {
    x: DMatrix<f64>,
    pinv: DMatrix<f64>,
    c_pinv: DVector<f64>,
    c_var: f64,
    dof: f64,
}

impl Glm {
    fn new(x: &DesignMatrix, contrast: &[f64]) -> Result<Self> {
        let p = x.x.ncols();
        if contrast.len() != p {
            return Err(Error::InvalidInput(format!("contrast has {} entries for {p} columns", contrast.len())));
        }
        if contrast.iter().all(|&c| c == 0.0) || contrast.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("contrast must be finite and nonzero".into()));
        }
        let xtx_inv = (x.x.transpose() * &x.x)
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient(x.names.clone()))?;
        let pinv = &xtx_inv * x.x.transpose();
        let c = DVector::from_column_slice(contrast);
        let c_var = (c.transpose() * &xtx_inv * &c)[(0, 0)];
        let c_pinv = pinv.transpose() * &c;
        Ok(Self { x: x.x.clone(), pinv, c_pinv, c_var, dof: (x.x.nrows() - p) as f64 })
    }

    /// t statistic, or `None` when the residual variance vanishes.
    fn t(&self, y: &DVector<f64>) -> Option<f64> {
        let beta = &self.pinv * y;
        let resid = y - &self.x * &beta;
        let rss = resid.norm_squared();
        let scale = y.norm_squared();
        if rss <= 1e-24 * scale.max(1e-300) || rss == 0.0 {
            return None;
        }
        let effect = self.c_pinv.dot(y);
        Some(effect / (rss / self.dof * self.c_var).sqrt())
    }

    fn residuals(&self, y: &DVector<f64>) -> DVector<f64> {
        y - &self.x * (&self.pinv * y)
    }
}

/// Voxel-major copy of the stack: one response vector per voxel.
fn responses(stack: &Stack4d, n: usize) -> Result<Vec<DVector<f64>>> {
    if stack.frames.len() != n {
        return Err(Error::InvalidInput(format!("stack has {} frames for {n} design rows", stack.frames.len())));
    }
    let len = stack.grid().len();
    Ok((0..len).map(|v| DVector::from_iterator(n, stack.frames.iter().map(|f| f.data()[v] as f64))).collect())
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub t_map: Volume,
    /// Voxels whose residual variance is zero; their t is reported as 0.
    pub zero_variance_voxels: usize,
}

pub fn glm_t_map(stack: &Stack4d, x: &DesignMatrix, contrast: &[f64]) -> Result<GlmFit> {
    let glm = Glm::new(x, contrast)?;
    let ys = responses(stack, x.n_subjects())?;
    let ts: Vec<Option<f64>> = ys.par_iter().map(|y| glm.t(y)).collect();
    let zero_variance_voxels = ts.iter().filter(|t| t.is_none()).count();
    let data = ts.iter().map(|t| t.unwrap_or(0.0) as f32).collect();
    Ok(GlmFit { t_map: Volume::new(stack.grid().clone(), data)?, zero_variance_voxels })
}

/// Residuals of the full model at every voxel (for diagnostics).
pub fn glm_residuals(stack: &Stack4d, x: &DesignMatrix) -> Result<Vec<DVector<f64>>> {
    let mut c = vec![0.0; x.x.ncols()];
    c[0] = 1.0;
    let glm = Glm::new(x, &c)?;
    Ok(responses(stack, x.n_subjects())?.iter().map(|y| glm.residuals(y)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfceParams {
    pub e: f64,
    pub h: f64,
    /// Step height; `None` uses max|map| / 100.
    pub dh: Option<f64>,
    pub connectivity: Connectivity,
}

impl Default for TfceParams {
    fn default() -> Self {
        Self { e: 0.5, h: 2.0, dh: None, connectivity: Connectivity::Six }
    }
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] { (ra, rb) } else { (rb, ra) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Enhancement of the positive part of `values`.
fn tfce_positive(values: &[f64], dims: [usize; 3], e: f64, h_exp: f64, dh: f64, conn: Connectivity) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut order: Vec<u32> = (0..values.len() as u32).filter(|&i| values[i as usize] > 0.0).collect();
    if order.is_empty() {
        return out;
    }
    order.sort_by(|&a, &b| values[b as usize].total_cmp(&values[a as usize]).then(a.cmp(&b)));
    let max = values[order[0] as usize];
    let steps = (max / dh + 1e-9).floor() as usize;
    let tol = 1e-12 * max;
    let offsets = conn.offsets();
    let [nx, ny, nz] = dims;
    let mut uf = UnionFind::new(values.len());
    let mut active = vec![false; values.len()];
    let mut added = 0usize;
    for k in (1..=steps).rev() {
        let h = k as f64 * dh;
        while added < order.len() && values[order[added] as usize] >= h - tol {
            let v = order[added] as usize;
            active[v] = true;
            let (i, j, kk) = ((v % nx) as i64, ((v / nx) % ny) as i64, (v / (nx * ny)) as i64);
            for o in &offsets {
                let (a, b, c) = (i + o[0], j + o[1], kk + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let w = a as usize + nx * (b as usize + ny * c as usize);
                if active[w] {
                    uf.union(v as u32, w as u32);
                }
            }
            added += 1;
        }
        let weight = h.powf(h_exp) * dh;
        for &v in &order[..added] {
            let root = uf.find(v);
            out[v as usize] += (uf.size[root as usize] as f64).powf(e) * weight;
        }
    }
    out
}

fn tfce_values(values: &[f64], dims: [usize; 3], params: &TfceParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dh = match params.dh {
        Some(dh) if dh > 0.0 && dh.is_finite() => dh,
        Some(dh) => return Err(Error::InvalidInput(format!("TFCE step must be positive, got {dh}"))),
        None if max_abs > 0.0 => max_abs / 100.0,
        None => return Ok((vec![0.0; values.len()], vec![0.0; values.len()])),
    };
    let pos = tfce_positive(values, dims, params.e, params.h, dh, params.connectivity);
    let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
    let neg = tfce_positive(&flipped, dims, params.e, params.h, dh, params.connectivity);
    Ok((pos, neg))
}

/// Threshold-free cluster enhancement; the negative tail is enhanced separately and negated.
pub fn tfce(map: &Volume, params: &TfceParams) -> Result<Volume> {
    let values: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let (pos, neg) = tfce_values(&values, map.grid().dims(), params)?;
    map.with_data(pos.iter().zip(&neg).map(|(p, n)| (p - n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermParams {
    pub n_perm: usize,
    pub seed: u64,
    pub tfce: TfceParams,
}

impl Default for PermParams {
    fn default() -> Self {
        Self { n_perm: 1000, seed: 0, tfce: TfceParams::default() }
    }
}

#[derive(Debug, Clone)]
pub struct StatResult {
    pub t_map: Volume,
    pub tfce_map: Volume,
    pub fwer_p_map: Volume,
    pub n_permutations: usize,
    pub seed: u64,
    pub zero_variance_voxels: usize,
    /// All distinct relabelings were enumerated instead of sampled.
    pub exhaustive: bool,
}

impl StatResult {
    pub fn min_p(&self) -> f64 {
        self.fwer_p_map.data().iter().fold(1.0f64, |m, &p| m.min(p as f64))
    }

    pub fn count_below(&self, alpha: f64) -> usize {
        self.fwer_p_map.data().iter().filter(|&&p| (p as f64) < alpha).count()
    }
}

fn factorial_at_most(n: usize, cap: usize) -> Option<usize> {
    let mut f = 1usize;
    for k in 2..=n {
        f = f.checked_mul(k)?;
        if f > cap {
            return None;
        }
    }
    Some(f)
}

/// All non-identity permutations of `0..n` in lexicographic order.
fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    loop {
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { break };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
    out
}

/// The permutation stream used by [`permutation_test`]: sampled from `seed`
/// (identity excluded), or exhaustive when `n_perm` reaches the number of
/// distinct relabelings.
pub fn permutation_stream(n: usize, n_perm: usize, seed: u64) -> (Vec<Vec<usize>>, bool) {
    if let Some(total) = factorial_at_most(n, n_perm) {
        if n_perm + 1 >= total {
            warn!("{n_perm} permutations requested but only {} distinct relabelings exist; enumerating", total - 1);
            return (all_permutations(n), true);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n_perm);
    while out.len() < n_perm {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if p != identity {
            out.push(p);
        }
    }
    (out, false)
}

/// Freedman–Lane permutation inference with TFCE and max-statistic FWER control.
pub fn permutation_test(stack: &Stack4d, x: &DesignMatrix, contrast: &[f64], params: &PermParams) -> Result<StatResult> {
    if params.n_perm < 100 {
        return Err(Error::InvalidInput(format!("at least 100 permutations are required, got {}", params.n_perm)));
    }
    let (perms, exhaustive) = permutation_stream(x.n_subjects(), params.n_perm, params.seed);
    permutation_test_with(stack, x, contrast, &perms, params, exhaustive)
}

/// As [`permutation_test`] with an explicit permutation list (identity excluded).
pub fn permutation_test_with(
    stack: &Stack4d,
    x: &DesignMatrix,
    contrast: &[f64],
    perms: &[Vec<usize>],
    params: &PermParams,
    exhaustive: bool,
) -> Result<StatResult> {
    let glm = Glm::new(x, contrast)?;
    let n = x.n_subjects();
    if perms.iter().any(|p| p.len() != n) {
        return Err(Error::InvalidInput("permutation length differs from subject count".into()));
    }
    let grid = stack.grid().clone();
    let dims = grid.dims();
    let ys = responses(stack, n)?;

    // nuisance model: the columns the contrast does not touch
    let nuisance: Vec<usize> = (0..contrast.len()).filter(|&j| contrast[j] == 0.0).collect();
    let (fitted, resid): (Vec<DVector<f64>>, Vec<DVector<f64>>) = if nuisance.is_empty() {
        ys.iter().map(|y| (DVector::zeros(n), y.clone())).unzip()
    } else {
        let z = x.x.select_columns(&nuisance);
        let zp = (z.transpose() * &z).try_inverse().ok_or_else(|| Error::RankDeficient(x.names.clone()))? * z.transpose();
        ys.iter()
            .map(|y| {
                let f = &z * (&zp * y);
                let r = y - &f;
                (f, r)
            })
            .unzip()
    };

    let observed: Vec<Option<f64>> = ys.par_iter().map(|y| glm.t(y)).collect();
    let zero_variance_voxels = observed.iter().filter(|t| t.is_none()).count();
    let t_obs: Vec<f64> = observed.iter().map(|t| t.unwrap_or(0.0)).collect();
    let (pos_obs, neg_obs) = tfce_values(&t_obs, dims, &params.tfce)?;

    let maxima: Vec<(f64, f64)> = perms
        .par_iter()
        .map(|perm| {
            let t: Vec<f64> = (0..ys.len())
                .map(|v| {
                    let y = DVector::from_fn(n, |i, _| fitted[v][i] + resid[v][perm[i]]);
                    glm.t(&y).unwrap_or(0.0)
                })
                .collect();
            let (pos, neg) = tfce_values(&t, dims, &params.tfce)?;
            let mp = pos.iter().cloned().fold(0.0, f64::max);
            let mn = neg.iter().cloned().fold(0.0, f64::max);
            Ok((mp, mn))
        })
        .collect::<Result<_>>()?;
    let mut max_pos: Vec<f64> = maxima.iter().map(|m| m.0).collect();
    let mut max_neg: Vec<f64> = maxima.iter().map(|m| m.1).collect();
    max_pos.sort_by(f64::total_cmp);
    max_neg.sort_by(f64::total_cmp);
    let n_perm = perms.len();
    let tail_p = |sorted: &[f64], obs: f64| {
        let exceed = sorted.len() - sorted.partition_point(|&m| m < obs);
        (1 + exceed) as f64 / (n_perm + 1) as f64
    };
    let p: Vec<f32> = (0..ys.len())
        .map(|v| {
            let pt = if pos_obs[v] > 0.0 {
                tail_p(&max_pos, pos_obs[v])
            } else if neg_obs[v] > 0.0 {
                tail_p(&max_neg, neg_obs[v])
            } else {
                return 1.0;
            };
            (2.0 * pt).min(1.0) as f32
        })
        .collect();

    let tfce_map: Vec<f32> = pos_obs.iter().zip(&neg_obs).map(|(a, b)| (a - b) as f32).collect();
    Ok(StatResult {
        t_map: Volume::new(grid.clone(), t_obs.iter().map(|&t| t as f32).collect())?,
        tfce_map: Volume::new(grid.clone(), tfce_map)?,
        fwer_p_map: Volume::new(grid, p)?,
        n_permutations: n_perm,
        seed: params.seed,
        zero_variance_voxels,
        exhaustive,
    })
}
