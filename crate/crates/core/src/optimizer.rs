//! Derivative-free minimization under box constraints.
//!
//! Each iteration fits a full quadratic model to objective values on a
//! feasible stencil of half-width `h` around the incumbent (two points per
//! coordinate, one per coordinate pair), minimizes the model over the
//! intersection of the bounds with an infinity-norm trust region, and updates
//! the radius from the ratio of actual to predicted decrease. The stencil
//! width tracks the radius, so the model is rebuilt at the scale it is used.
//!
//! Every evaluated point is feasible, accepted iterates strictly decrease the
//! objective, and the iterate sequence depends only on the inputs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Optimizer("bound vectors differ in length".into()));
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l > u || l.is_nan() || u.is_nan() {
                return Err(Error::Optimizer(format!(
                    "bounds for coordinate {k} are [{l}, {u}]"
                )));
            }
        }
        Ok(Bounds { lower, upper })
    }

    /// Lower bounds with no upper limit.
    pub fn lower_only(lower: Vec<f64>) -> Self {
        let upper = vec![f64::INFINITY; lower.len()];
        Bounds { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Stop when the trust radius falls below `xtol * max(1, |x|_inf)`.
    pub xtol: f64,
    /// Stop after two consecutive accepted steps improving by less than
    /// `ftol * (|f| + ftol)`.
    pub ftol: f64,
    pub max_evals: usize,
    /// Initial trust radius, relative to `max(1, |x0|_inf)`.
    pub initial_radius: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            xtol: 1e-8,
            ftol: 1e-10,
            max_evals: 5000,
            initial_radius: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    RadiusBelowXtol,
    ImprovementBelowFtol,
    MaxEvaluations,
    NoFreeParameters,
}

impl Termination {
    pub fn converged(&self) -> bool {
        !matches!(self, Termination::MaxEvaluations)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub evaluations: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub final_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub diagnostics: Diagnostics,
}

struct Counted<'f, F> {
    f: &'f mut F,
    evals: usize,
    cache: HashMap<Vec<u64>, f64>,
    trace: Option<Vec<Vec<f64>>>,
}

impl<F: FnMut(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        self.evals += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push(x.to_vec());
        }
        let v = (self.f)(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if self.cache.len() > 4096 {
            self.cache.clear();
        }
        self.cache.insert(key, v);
        v
    }
}

/// Minimize `f` over `bounds` starting from `start` (projected if needed).
/// Non-finite objective values are treated as +inf.
pub fn minimize<F>(f: F, start: &[f64], bounds: &Bounds, settings: &Settings) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    minimize_traced(f, start, bounds, settings, false).map(|(m, _)| m)
}

/// As [`minimize`], also returning every evaluated point when `trace` is set.
pub fn minimize_traced<F>(
    mut f: F,
    start: &[f64],
    bounds: &Bounds,
    settings: &Settings,
    trace: bool,
) -> Result<(Minimum, Vec<Vec<f64>>)>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    if bounds.dim() != n {
        return Err(Error::Optimizer(format!(
            "start has {n} coordinates, bounds have {}",
            bounds.dim()
        )));
    }
    let mut obj = Counted {
        f: &mut f,
        evals: 0,
        cache: HashMap::new(),
        trace: trace.then(Vec::new),
    };
    let mut x = start.to_vec();
    bounds.project(&mut x);
    let mut fx = obj.eval(&x);
    if !fx.is_finite() {
        return Err(Error::Optimizer(format!(
            "objective is not finite at the start point {x:?}"
        )));
    }
    let free: Vec<bool> = (0..n)
        .map(|k| bounds.upper[k] - bounds.lower[k] > 0.0)
        .collect();
    if !free.iter().any(|&b| b) {
        let m = Minimum {
            x,
            value: fx,
            diagnostics: Diagnostics {
                evaluations: obj.evals,
                iterations: 0,
                termination: Termination::NoFreeParameters,
                final_radius: 0.0,
            },
        };
        let t = obj.trace.take().unwrap_or_default();
        return Ok((m, t));
    }

    let scale = |x: &[f64]| x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut radius = settings.initial_radius * scale(&x);
    let mut iterations = 0;
    let mut small_steps = 0;
    let termination;

    loop {
        if radius < settings.xtol * scale(&x) {
            termination = Termination::RadiusBelowXtol;
            break;
        }
        if obj.evals >= settings.max_evals {
            termination = Termination::MaxEvaluations;
            break;
        }
        iterations += 1;

        let model = match build_model(&mut obj, &x, fx, radius, bounds, &free) {
            Some(m) => m,
            None => {
                radius *= 0.25;
                if radius < settings.xtol * scale(&x) {
                    return Err(Error::Optimizer(format!(
                        "objective is non-finite in every direction around {x:?}"
                    )));
                }
                continue;
            }
        };

        // A stencil point that beats the incumbent is taken directly.
        let (best_stencil, best_stencil_f) = model.best.clone();

        let lo: Vec<f64> = (0..n)
            .map(|k| {
                if free[k] {
                    (bounds.lower[k] - x[k]).max(-radius)
                } else {
                    0.0
                }
            })
            .collect();
        let hi: Vec<f64> = (0..n)
            .map(|k| {
                if free[k] {
                    (bounds.upper[k] - x[k]).min(radius)
                } else {
                    0.0
                }
            })
            .collect();
        let step = solve_box_qp(&model.g, &model.h, &lo, &hi);
        let predicted = -model_value(&model.g, &model.h, &step);
        let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let mut trial_f = f64::INFINITY;
        let mut trial = x.clone();
        if predicted > 1e-15 * (1.0 + fx.abs()) && step_norm > 0.0 {
            for k in 0..n {
                trial[k] = x[k] + step[k];
            }
            bounds.project(&mut trial);
            trial_f = obj.eval(&trial);
        }

        let old_f = fx;
        if trial_f < fx && trial_f <= best_stencil_f {
            let rho = (fx - trial_f) / predicted;
            x = trial;
            fx = trial_f;
            radius = if rho >= 0.75 {
                radius.max(2.0 * step_norm)
            } else if rho >= 0.1 {
                (0.5 * radius).max(step_norm)
            } else {
                (0.5 * step_norm).min(0.5 * radius)
            };
        } else if best_stencil_f < fx {
            x = best_stencil;
            fx = best_stencil_f;
        } else if predicted <= 1e-15 * (1.0 + fx.abs()) || step_norm == 0.0 {
            radius *= 0.1;
        } else {
            radius = (0.5 * step_norm).min(0.25 * radius);
        }

        if fx < old_f {
            if old_f - fx <= settings.ftol * (fx.abs() + settings.ftol) {
                small_steps += 1;
                if small_steps >= 2 {
                    termination = Termination::ImprovementBelowFtol;
                    break;
                }
            } else {
                small_steps = 0;
            }
        }
    }

    let m = Minimum {
        x,
        value: fx,
        diagnostics: Diagnostics {
            evaluations: obj.evals,
            iterations,
            termination,
            final_radius: radius,
        },
    };
    let t = obj.trace.take().unwrap_or_default();
    Ok((m, t))
}

/// Minimize from `start`, `0.5 * start` and `2 * start` and keep the best.
pub fn minimize_multistart<F>(
    mut f: F,
    start: &[f64],
    bounds: &Bounds,
    settings: &Settings,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut best: Option<Minimum> = None;
    let mut total = 0;
    for factor in [1.0, 0.5, 2.0] {
        let s: Vec<f64> = start.iter().map(|v| v * factor).collect();
        let m = minimize(&mut f, &s, bounds, settings)?;
        total += m.diagnostics.evaluations;
        if best.as_ref().map_or(true, |b| m.value < b.value) {
            best = Some(m);
        }
    }
    let mut best = best.expect("three starts");
    best.diagnostics.evaluations = total;
    Ok(best)
}

struct Model {
    g: Vec<f64>,
    /// Row-major n x n Hessian.
    h: Vec<f64>,
    best: (Vec<f64>, f64),
}

/// Quadratic model from a feasible stencil. Returns `None` if no usable
/// stencil could be found at this radius.
fn build_model<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<'_, F>,
    x: &[f64],
    fx: f64,
    radius: f64,
    bounds: &Bounds,
    free: &[bool],
) -> Option<Model> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n * n];
    let mut first = vec![0.0; n];
    let mut best = (x.to_vec(), fx);
    let mut point = x.to_vec();

    for k in 0..n {
        if !free[k] {
            continue;
        }
        let floor = 1e-9 * (1.0 + x[k].abs());
        let mut hk = radius.max(floor);
        let mut done = false;
        for _ in 0..40 {
            for (t1, t2) in stencil_offsets(x[k], hk, bounds.lower[k], bounds.upper[k]) {
                point[k] = x[k] + t1;
                let f1 = obj.eval(&point);
                if f1 < best.1 {
                    best = (point.clone(), f1);
                }
                point[k] = x[k] + t2;
                let f2 = obj.eval(&point);
                if f2 < best.1 {
                    best = (point.clone(), f2);
                }
                point[k] = x[k];
                if f1.is_finite() && f2.is_finite() {
                    // f(x + t) = fx + g t + h t^2 / 2 through both points
                    let d1 = (f1 - fx) / t1;
                    let d2 = (f2 - fx) / t2;
                    let hkk = 2.0 * (d1 - d2) / (t1 - t2);
                    g[k] = d1 - 0.5 * hkk * t1;
                    h[k * n + k] = hkk;
                    first[k] = t1;
                    done = true;
                    break;
                }
            }
            if done {
                break;
            }
            hk *= 0.5;
            if hk < floor {
                break;
            }
        }
        if !done {
            return None;
        }
    }
    for a in 0..n {
        if !free[a] {
            continue;
        }
        for b in a + 1..n {
            if !free[b] {
                continue;
            }
            let (ta, tb) = (first[a], first[b]);
            point[a] = x[a] + ta;
            point[b] = x[b] + tb;
            let fab = obj.eval(&point);
            if fab < best.1 {
                best = (point.clone(), fab);
            }
            point[a] = x[a];
            point[b] = x[b];
            let hab = if fab.is_finite() {
                let base = fx
                    + g[a] * ta
                    + g[b] * tb
                    + 0.5 * h[a * n + a] * ta * ta
                    + 0.5 * h[b * n + b] * tb * tb;
                (fab - base) / (ta * tb)
            } else {
                0.0
            };
            h[a * n + b] = hab;
            h[b * n + a] = hab;
        }
    }
    Some(Model { g, h, best })
}

/// Feasible offset pairs along one coordinate in order of preference:
/// centred, then one-sided on either side.
fn stencil_offsets(x: f64, h: f64, lower: f64, upper: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(3);
    if x + h <= upper && x - h >= lower {
        out.push((h, -h));
    }
    if x - 2.0 * h >= lower {
        out.push((-h, -2.0 * h));
    }
    if x + 2.0 * h <= upper {
        out.push((h, 2.0 * h));
    }
    if out.is_empty() {
        let room_up = upper - x;
        let room_dn = x - lower;
        if room_up >= room_dn && room_up > 0.0 {
            out.push((room_up * 0.5, room_up));
        } else if room_dn > 0.0 {
            out.push((-room_dn * 0.5, -room_dn));
        }
    }
    out
}

fn model_value(g: &[f64], h: &[f64], s: &[f64]) -> f64 {
    let n = g.len();
    let mut v = 0.0;
    for a in 0..n {
        v += g[a] * s[a];
        for b in 0..n {
            v += 0.5 * s[a] * h[a * n + b] * s[b];
        }
    }
    v
}

/// Approximate minimizer of `g's + s'Hs/2` over `lo <= s <= hi` by cyclic
/// exact coordinate minimization from several starting candidates.
fn solve_box_qp(g: &[f64], h: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = g.len();
    let clip = |s: &mut Vec<f64>| {
        for k in 0..n {
            s[k] = s[k].clamp(lo[k], hi[k]);
        }
    };
    let mut candidates: Vec<Vec<f64>> = vec![vec![0.0; n]];

    // Newton step, if the Hessian is positive definite.
    if let Some(newton) = newton_step(g, h) {
        let mut s = newton;
        clip(&mut s);
        candidates.push(s);
    }
    // Steepest-descent step to the model minimum along -g (or the boundary).
    let gg: f64 = g.iter().map(|v| v * v).sum();
    if gg > 0.0 {
        let mut ghg = 0.0;
        for a in 0..n {
            for b in 0..n {
                ghg += g[a] * h[a * n + b] * g[b];
            }
        }
        let t = if ghg > 0.0 { gg / ghg } else { f64::INFINITY };
        let mut s: Vec<f64> = g.iter().map(|v| -v * t.min(1e300)).collect();
        clip(&mut s);
        candidates.push(s);
    }

    let mut best = vec![0.0; n];
    let mut best_v = 0.0;
    for mut s in candidates {
        for _ in 0..100 {
            let mut moved = 0.0f64;
            for k in 0..n {
                // gradient of the model along k, excluding the diagonal term
                let mut c = g[k];
                for b in 0..n {
                    if b != k {
                        c += h[k * n + b] * s[b];
                    }
                }
                let hkk = h[k * n + k];
                let new = if hkk > 0.0 {
                    (-c / hkk).clamp(lo[k], hi[k])
                } else {
                    // concave or flat along k: best end point
                    let at = |t: f64| c * t + 0.5 * hkk * t * t;
                    if at(lo[k]) <= at(hi[k]) {
                        lo[k]
                    } else {
                        hi[k]
                    }
                };
                moved = moved.max((new - s[k]).abs());
                s[k] = new;
            }
            if moved <= 1e-15 * (1.0 + s.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
        }
        let v = model_value(g, h, &s);
        if v < best_v {
            best_v = v;
            best = s;
        }
    }
    best
}

fn newton_step(g: &[f64], h: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let m = nalgebra::DMatrix::from_row_slice(n, n, h);
    let chol = nalgebra::Cholesky::new(m)?;
    let rhs = nalgebra::DVector::from_iterator(n, g.iter().map(|v| -v));
    let s = chol.solve(&rhs);
    Some(s.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bowl_interior() {
        let b = Bounds::lower_only(vec![0.0]);
        let m = minimize(|x| (x[0] - 0.7).powi(2), &[0.1], &b, &Settings::default()).unwrap();
        assert!((m.x[0] - 0.7).abs() < 1e-6, "{:?}", m);
        assert!(m.diagnostics.termination.converged());
    }

    #[test]
    fn bowl_on_boundary() {
        let b = Bounds::lower_only(vec![0.0]);
        let m = minimize(|x| (x[0] + 0.5).powi(2), &[1.0], &b, &Settings::default()).unwrap();
        assert_eq!(m.x[0], 0.0);
    }

    #[test]
    fn rosenbrock_in_box() {
        let b = Bounds::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = minimize(rosen, &[0.2, 1.5], &b, &Settings::default()).unwrap();
        assert!(
            (m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4,
            "{:?}",
            m
        );
    }

    #[test]
    fn feasibility_and_monotone() {
        let b = Bounds::new(vec![0.0, -1.0], vec![3.0, 0.5]).unwrap();
        let f = |x: &[f64]| (x[0] - 4.0).powi(2) + (x[1] - 0.2).powi(4) + x[0] * x[1];
        let (m, trace) = minimize_traced(f, &[1.0, 0.0], &b, &Settings::default(), true).unwrap();
        assert!(trace.iter().all(|p| b.contains(p)));
        assert!(trace.iter().all(|p| f(p) >= m.value));
    }

    #[test]
    fn deterministic() {
        let b = Bounds::lower_only(vec![0.0, 0.0, f64::NEG_INFINITY]);
        let f = |x: &[f64]| {
            (x[0] - 1.0).powi(2) * (1.0 + x[1]) + (x[1] - 2.0).powi(2) + (x[2] + x[0]).powi(2)
        };
        let (a, ta) = minimize_traced(f, &[0.5, 0.5, 0.5], &b, &Settings::default(), true).unwrap();
        let (c, tc) = minimize_traced(f, &[0.5, 0.5, 0.5], &b, &Settings::default(), true).unwrap();
        assert_eq!(a, c);
        assert_eq!(ta, tc);
    }

    #[test]
    fn non_finite_region_is_avoided() {
        let b = Bounds::lower_only(vec![0.0]);
        let f = |x: &[f64]| {
            if x[0] > 1.0 {
                f64::NAN
            } else {
                (x[0] - 2.0).powi(2)
            }
        };
        let m = minimize(f, &[0.5], &b, &Settings::default()).unwrap();
        assert!(m.x[0] <= 1.0 && m.x[0] > 0.99, "{:?}", m);
    }

    #[test]
    fn start_must_be_finite() {
        let b = Bounds::lower_only(vec![0.0]);
        assert!(minimize(|_| f64::NAN, &[0.5], &b, &Settings::default()).is_err());
    }

    #[test]
    fn empty_problem() {
        let b = Bounds::lower_only(vec![]);
        let m = minimize(|_| 3.0, &[], &b, &Settings::default()).unwrap();
        assert_eq!(m.value, 3.0);
        assert_eq!(m.diagnostics.termination, Termination::NoFreeParameters);
    }

    #[test]
    fn multistart_picks_best() {
        let b = Bounds::lower_only(vec![0.0]);
        // two basins: local at 0.25 (value 0.1), global at 2.0
        let f = |x: &[f64]| {
            let v = x[0];
            ((v - 0.25).powi(2) + 0.1).min((v - 2.0).powi(2))
        };
        let m = minimize_multistart(f, &[1.0], &b, &Settings::default()).unwrap();
        assert!((m.x[0] - 2.0).abs() < 1e-6);
    }
}
