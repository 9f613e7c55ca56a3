//! Multiresolution rigid and affine registration.
//!
//! The mean-squared-error metric is minimized with Levenberg–Marquardt steps
//! (Marquardt diagonal scaling makes rotation, scaling and translation
//! parameters commensurate). The local-correlation metric uses scaled
//! finite-difference gradient descent with backtracking.

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metric::{lncc_value, ordered_sum, ordered_sum_f64, GradientImage, Metric};
use super::transform::{AffineTransform, RigidTransform};
use crate::error::{Error, Result};
use crate::filter;
use crate::volume::{rotation_from_vector, Interpolation, Volume};

const JITTER_SEED: u64 = 0x6a17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearParams {
    /// Downsampling factors, coarse to fine.
    pub levels: Vec<usize>,
    pub max_iters: usize,
    /// Relative metric change that ends a level.
    pub tol: f64,
    /// Gaussian sigma (full-resolution voxels) per level. Smoothing the finest
    /// level too keeps interpolation blur of sharp edges from biasing the optimum.
    pub smoothing: Vec<f64>,
    pub metric: Metric,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { levels: vec![4, 2, 1], max_iters: 50, tol: 1e-6, smoothing: vec![2.0, 1.0, 1.0], metric: Metric::Mse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReport {
    /// Finest-level metric after each pyramid level (non-increasing).
    pub level_metrics: Vec<f64>,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub iterations: Vec<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Rigid,
    Affine,
}

/// Smoothed and downsampled copy of `vol` (`factor` 1 returns the input).
pub fn pyramid_level(vol: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return vol.clone();
    }
    smoothed_level(vol, factor, 0.5 * factor as f64)
}

/// Gaussian smoothing (`sigma` in input voxels) followed by downsampling.
pub fn smoothed_level(vol: &Volume, factor: usize, sigma: f64) -> Volume {
    let smoothed = if sigma > 0.0 {
        let data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
        let smooth = filter::gaussian_smooth(&data, vol.grid().dims(), [sigma; 3]);
        vol.with_data(smooth.iter().map(|&v| v as f32).collect()).expect("same grid")
    } else {
        vol.clone()
    };
    smoothed.resample(&vol.grid().downsampled(factor), Interpolation::Linear).expect("non-degenerate grid")
}

/// Intensity-weighted center of mass of positive voxels.
pub fn center_of_mass(vol: &Volume) -> Option<Vector3<f64>> {
    let g = vol.grid();
    let (w, s) = vol.data().iter().enumerate().filter(|(_, &v)| v > 0.0).fold(
        (0.0, Vector3::zeros()),
        |(w, s), (i, &v)| (w + v as f64, s + g.world_of_index(i) * v as f64),
    );
    (w > 0.0).then(|| s / w)
}

fn check_overlap(fixed: &Volume, moving: &Volume) -> Result<()> {
    if !fixed.data().iter().any(|&v| v != 0.0) || !moving.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Registration("an input image is entirely background".into()));
    }
    Ok(())
}

/// Metric of `moving ∘ t` against `fixed` on the fixed grid.
pub fn transform_metric(fixed: &Volume, moving: &Volume, t: &AffineTransform, metric: Metric) -> f64 {
    let warped = moving.resample_with(fixed.grid(), Interpolation::Linear, |p| t.apply(p));
    image_metric(fixed, &warped, metric)
}

pub(crate) fn image_metric(fixed: &Volume, warped: &Volume, metric: Metric) -> f64 {
    let (f, m) = (fixed.data(), warped.data());
    match metric {
        Metric::Mse => {
            ordered_sum_f64(f.len(), |i| (m[i] as f64 - f[i] as f64).powi(2)) / f.len() as f64
        }
        Metric::Lncc { radius } => {
            let fd: Vec<f64> = f.iter().map(|&v| v as f64).collect();
            let md: Vec<f64> = m.iter().map(|&v| v as f64).collect();
            lncc_value(&fd, &md, fixed.grid().dims(), radius)
        }
    }
}

/// Parameter state: matrix, translation; the center stays fixed.
#[derive(Clone, Copy)]
struct State {
    m: Matrix3<f64>,
    t: Vector3<f64>,
    c: Vector3<f64>,
}

impl State {
    fn transform(&self) -> AffineTransform {
        AffineTransform::new(self.m, self.t, self.c).unwrap_or_else(|_| AffineTransform::identity(self.c))
    }

    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.m * (p - self.c) + self.c + self.t
    }

    fn updated(&self, kind: Kind, d: &[f64]) -> State {
        match kind {
            Kind::Rigid => {
                let r = rotation_from_vector(&Vector3::new(d[0], d[1], d[2])) * self.m;
                State { m: r, t: self.t + Vector3::new(d[3], d[4], d[5]), c: self.c }
            }
            Kind::Affine => {
                let dm = Matrix3::from_row_slice(&d[..9]);
                State { m: self.m + dm, t: self.t + Vector3::new(d[9], d[10], d[11]), c: self.c }
            }
        }
    }
}

struct Level {
    fixed: Volume,
    moving: GradientImage,
    /// Fixed-image samples `(value, world point)` in lattice order.
    points: Vec<(f64, Vector3<f64>)>,
}

impl Level {
    fn new(fixed: &Volume, moving: &Volume, factor: usize, sigma: f64) -> Self {
        let f = smoothed_level(fixed, factor, sigma);
        let m = smoothed_level(moving, factor, sigma);
        let g = f.grid().clone();
        // Sample points are jittered within their voxel so that neither image is read
        // exactly on its lattice; otherwise grid-aligned transforms escape interpolation
        // blur and form spurious minima.
        let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
        let points = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let p = g.voxel_to_world([0, 1, 2].map(|a| c[a] as f64 + rng.gen_range(-0.5..0.5)));
                (f.sample_linear(&p), p)
            })
            .collect();
        Self { fixed: f, moving: GradientImage::new(&m), points }
    }

    fn sample(&self, p: &Vector3<f64>) -> [f64; 4] {
        self.moving.sample(self.moving.grid.world_to_voxel(p))
    }

    fn mse(&self, s: &State) -> f64 {
        ordered_sum_f64(self.points.len(), |k| {
            let (fv, x) = &self.points[k];
            (self.sample(&s.apply(x))[0] - fv).powi(2)
        }) / self.points.len() as f64
    }

    fn lncc(&self, s: &State, radius: usize) -> f64 {
        let warped: Vec<f64> = self.points.iter().map(|(_, x)| self.sample(&s.apply(x))[0]).collect();
        let f: Vec<f64> = self.points.iter().map(|(v, _)| *v).collect();
        lncc_value(&f, &warped, self.fixed.grid().dims(), radius)
    }

    fn metric(&self, s: &State, metric: Metric) -> f64 {
        match metric {
            Metric::Mse => self.mse(s),
            Metric::Lncc { radius } => self.lncc(s, radius),
        }
    }

    /// Gauss–Newton normal equations of the MSE at `s`.
    fn normal_equations(&self, s: &State, kind: Kind) -> (DMatrix<f64>, DVector<f64>, f64) {
        let np = if kind == Kind::Rigid { 6 } else { 12 };
        let zero = (vec![0.0; np * np], vec![0.0; np], 0.0);
        let (h, b, ssd) = ordered_sum(
            self.points.len(),
            zero,
            |k, acc| {
                let (fv, x) = &self.points[k];
                let y = s.apply(x);
                let v = self.sample(&y);
                let r = v[0] - fv;
                if r == 0.0 && v[1] == 0.0 && v[2] == 0.0 && v[3] == 0.0 {
                    return;
                }
                let g = Vector3::new(v[1], v[2], v[3]);
                let mut row = [0.0; 12];
                match kind {
                    Kind::Rigid => {
                        let q = s.m * (x - s.c);
                        let qg = q.cross(&g);
                        row[..3].copy_from_slice(qg.as_slice());
                        row[3..6].copy_from_slice(g.as_slice());
                    }
                    Kind::Affine => {
                        let d = x - s.c;
                        for a in 0..3 {
                            for bb in 0..3 {
                                row[3 * a + bb] = g[a] * d[bb];
                            }
                        }
                        row[9..12].copy_from_slice(g.as_slice());
                    }
                }
                for a in 0..np {
                    acc.1[a] += row[a] * r;
                    for bb in a..np {
                        acc.0[a * np + bb] += row[a] * row[bb];
                    }
                }
                acc.2 += r * r;
            },
            |a, b| {
                a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
                a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
                a.2 += b.2;
            },
        );
        let mut hm = DMatrix::from_row_slice(np, np, &h);
        for a in 0..np {
            for bb in 0..a {
                hm[(a, bb)] = hm[(bb, a)];
            }
        }
        (hm, DVector::from_vec(b), ssd / self.points.len() as f64)
    }
}

fn lm_level(level: &Level, mut s: State, kind: Kind, params: &LinearParams) -> (State, usize, bool) {
    let mut mu = 1e-3;
    let mut iters = 0;
    let mut converged = false;
    for _ in 0..params.max_iters {
        iters += 1;
        let (h, b, cur) = level.normal_equations(&s, kind);
        if cur == 0.0 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = h.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += mu * h[(d, d)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&b)) else {
                mu *= 4.0;
                continue;
            };
            let trial = s.updated(kind, delta.as_slice());
            let next = level.mse(&trial);
            if next < cur {
                let rel = (cur - next) / cur;
                s = trial;
                mu = (mu / 3.0).max(1e-9);
                improved = true;
                if rel < params.tol || delta.amax() < 1e-9 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            converged = true;
        }
        if converged {
            break;
        }
    }
    (s, iters, converged)
}

fn lncc_level(level: &Level, s: State, kind: Kind, params: &LinearParams, radius: usize) -> (State, usize, bool) {
    let np = if kind == Kind::Rigid { 6 } else { 12 };
    let fixed = &level.fixed;
    let eval = |st: &State| level.lncc(st, radius);
    // typical parameter magnitudes: rotations/matrix entries relative to the image radius
    let ext = fixed.grid().dims().iter().zip(fixed.grid().spacing()).map(|(&n, h)| n as f64 * h).fold(0.0, f64::max);
    let rho = 0.5 * ext;
    let scale: Vec<f64> = (0..np)
        .map(|k| match kind {
            Kind::Rigid if k < 3 => 1.0 / rho,
            Kind::Affine if k < 9 => 1.0 / rho,
            _ => 1.0,
        })
        .collect();
    let mut s = s;
    let mut cur = eval(&s);
    let mut step = 0.5;
    let mut iters = 0;
    let mut converged = false;
    for _ in 0..params.max_iters {
        iters += 1;
        let mut grad = vec![0.0; np];
        for k in 0..np {
            let h = 1e-2 * scale[k];
            let mut d = vec![0.0; np];
            d[k] = h;
            let plus = eval(&s.updated(kind, &d));
            d[k] = -h;
            let minus = eval(&s.updated(kind, &d));
            grad[k] = (plus - minus) / (2.0 * h) * scale[k];
        }
        let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gn == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > 1e-4 {
            let d: Vec<f64> = (0..np).map(|k| -step * grad[k] / gn * scale[k]).collect();
            let trial = s.updated(kind, &d);
            let next = eval(&trial);
            if next < cur - 1e-10 * cur.abs() {
                let rel = (cur - next) / cur.abs().max(1e-12);
                s = trial;
                cur = next;
                accepted = true;
                step *= 1.5;
                if rel < params.tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    (s, iters, converged)
}

fn run(fixed: &Volume, moving: &Volume, kind: Kind, params: &LinearParams, init: Option<AffineTransform>) -> Result<(AffineTransform, LinearReport)> {
    check_overlap(fixed, moving)?;
    if params.levels.is_empty() || params.smoothing.len() != params.levels.len() {
        return Err(Error::InvalidInput("need one smoothing sigma per pyramid level (at least one level)".into()));
    }
    let start = match init {
        Some(t) => t,
        None => {
            let cf = center_of_mass(fixed).unwrap_or_else(|| fixed.grid().center());
            let cm = center_of_mass(moving).unwrap_or(cf);
            AffineTransform::new(Matrix3::identity(), cm - cf, cf)?
        }
    };
    let mut s = State { m: *start.matrix(), t: *start.translation(), c: *start.center() };
    // estimates are compared on the finest level, smoothed as during optimization
    let n = params.levels.len();
    let finest = Level::new(fixed, moving, params.levels[n - 1], params.smoothing[n - 1]);
    let initial_metric = finest.metric(&s, params.metric);
    let mut best = initial_metric;
    let mut level_metrics = Vec::new();
    let mut iterations = Vec::new();
    let mut converged = true;
    for (&factor, &sigma) in params.levels.iter().zip(&params.smoothing) {
        let level = Level::new(fixed, moving, factor, sigma);
        let (next, iters, conv) = match params.metric {
            Metric::Mse => lm_level(&level, s, kind, params),
            Metric::Lncc { radius } => lncc_level(&level, s, kind, params, radius),
        };
        let full = finest.metric(&next, params.metric);
        debug!("linear level ×{factor}: {iters} iterations, metric {full:.6e}");
        // keep the previous estimate when a coarse level made things worse
        if full <= best {
            s = next;
            best = full;
        }
        level_metrics.push(best);
        iterations.push(iters);
        converged &= conv;
    }
    let t = s.transform();
    if t.determinant() <= 0.0 {
        return Err(Error::Registration("linear registration produced a reflection".into()));
    }
    Ok((t, LinearReport { level_metrics, initial_metric, final_metric: best, iterations, converged }))
}

/// Rigid registration; the result maps fixed points to moving points.
pub fn register_rigid(fixed: &Volume, moving: &Volume, params: &LinearParams) -> Result<(RigidTransform, LinearReport)> {
    let (t, report) = run(fixed, moving, Kind::Rigid, params, None)?;
    let r = crate::volume::orthonormalize(t.matrix())?;
    Ok((RigidTransform::new(r, *t.translation(), *t.center())?, report))
}

/// Affine registration, initialized from `init` or from a rigid registration.
pub fn register_affine(
    fixed: &Volume,
    moving: &Volume,
    params: &LinearParams,
    init: Option<&AffineTransform>,
) -> Result<(AffineTransform, LinearReport)> {
    let start = match init {
        Some(t) => *t,
        None => register_rigid(fixed, moving, params)?.0.to_affine(),
    };
    run(fixed, moving, Kind::Affine, params, Some(start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn phantom() -> Volume {
        generate_phantom(&PhantomSpec { daily_growth_mm3: 0.0, asymmetry: 0.3, ..Default::default() })
            .unwrap()
            .pre
            .volume
    }

    fn moved(vol: &Volume, t: &AffineTransform) -> Volume {
        // moving(y) = fixed(T⁻¹ y), so moving ∘ T = fixed
        let inv = t.inverse().unwrap();
        vol.resample_with(vol.grid(), Interpolation::Linear, |p| inv.apply(p))
    }

    #[test]
    fn self_registration_is_identity() {
        let f = phantom();
        let (r, report) = register_rigid(&f, &f, &LinearParams::default()).unwrap();
        assert!(r.angle() < 1e-3);
        let c = *r.center();
        assert!((r.apply(&c) - c).norm() < 1e-2);
        assert!(report.final_metric < 1e-8);
    }

    #[test]
    fn recovers_rotation_and_shift() {
        let f = phantom();
        let truth = RigidTransform::from_rotation_vector(
            Vector3::new(0.0, 0.0, 5f64.to_radians()),
            Vector3::new(2.0, -1.0, 0.5),
            f.grid().center(),
        );
        let m = moved(&f, &truth.to_affine());
        let (r, report) = register_rigid(&f, &m, &LinearParams::default()).unwrap();
        let err = r.compose(&truth.inverse());
        assert!(err.angle().to_degrees() < 0.5, "{}", err.angle().to_degrees());
        // translation error evaluated at the image center
        let c = f.grid().center();
        assert!((r.apply(&c) - truth.apply(&c)).norm() < 0.25 * 0.5);
        assert!(report.level_metrics.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn recovers_anisotropic_scale() {
        let f = phantom();
        let a = Matrix3::from_diagonal(&Vector3::new(1.1, 0.9, 1.0));
        let truth = AffineTransform::new(a, Vector3::zeros(), f.grid().center()).unwrap();
        let m = moved(&f, &truth);
        let (t, _) = register_affine(&f, &m, &LinearParams::default(), None).unwrap();
        let t = t.recentered(f.grid().center());
        assert!((t.matrix() - a).amax() < 0.02, "{}", t.matrix());
    }

    #[test]
    fn lncc_self_registration() {
        let f = pyramid_level(&phantom(), 2);
        let params = LinearParams { metric: Metric::Lncc { radius: 2 }, levels: vec![1], smoothing: vec![1.0], max_iters: 5, ..Default::default() };
        let (r, _) = register_rigid(&f, &f, &params).unwrap();
        assert!(r.angle() < 1e-3);
    }

    #[test]
    fn blank_input_rejected() {
        let f = phantom();
        let z = Volume::zeros(f.grid().clone());
        assert!(register_rigid(&f, &z, &LinearParams::default()).is_err());
    }
}
