//! Central finite-difference oracle for analytic gradients.
//!
//! Only available in 64-bit precision: the checker is generic over
//! `Parameters<f64>`, so a model has to be cast with `cast::<f64>()` first.

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Parameters, TensorId};

/// Central-difference step. Smaller steps lose more to f64 roundoff than
/// they gain in truncation error at these loss scales.
pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.rel_error < tol)
    }
}

/// Relative error `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares analytic gradients of the loss built by `build_loss` against
/// central differences at each requested coordinate.
pub fn check_gradients<P, F>(
    params: &mut P,
    build_loss: F,
    coords: &[Coordinate],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a P) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut ids = Vec::with_capacity(coords.len());
    for c in coords {
        ids.push(lookup(params, c)?);
    }

    let analytic = {
        let mut g = Graph::new();
        let loss = build_loss(&mut g, params)?;
        finite(g.value(loss)[0])?;
        let grads = g.backward(loss)?;
        coords
            .iter()
            .zip(&ids)
            .map(|(c, id)| grads.get(*id).map_or(0.0, |gr| gr[c.index]))
            .collect::<Vec<_>>()
    };

    let mut checks = Vec::with_capacity(coords.len());
    for (c, a) in coords.iter().zip(analytic) {
        let orig = read(params, c);
        write(params, c, orig + epsilon);
        let plus = eval(params, &build_loss);
        write(params, c, orig - epsilon);
        let minus = eval(params, &build_loss);
        write(params, c, orig);
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        checks.push(CoordinateCheck {
            coordinate: c.clone(),
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { epsilon, checks })
}

/// Draws `n` coordinates, picking a trainable tensor uniformly and then an
/// element uniformly, so small tensors (gates, biases) are represented.
pub fn sample_coordinates<P, R>(params: &P, n: usize, rng: &mut R) -> Vec<Coordinate>
where
    P: Parameters<f64>,
    R: Rng + ?Sized,
{
    let mut pool = Vec::new();
    params.visit(&mut |name, t| {
        if t.trainable() && !t.is_empty() {
            pool.push((name.to_string(), t.len()));
        }
    });
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let (name, len) = &pool[rng.random_range(0..pool.len())];
            Coordinate {
                tensor: name.clone(),
                index: rng.random_range(0..*len),
            }
        })
        .collect()
}

fn eval<P, F>(params: &P, build_loss: &F) -> Result<f64>
where
    P: Parameters<f64>,
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a P) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build_loss(&mut g, params)?;
    finite(g.value(loss)[0])
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("loss during gradient check".into()))
    }
}

fn lookup<P: Parameters<f64>>(params: &P, c: &Coordinate) -> Result<TensorId> {
    let mut found = None;
    params.visit(&mut |name, t| {
        if name == c.tensor {
            found = Some((t.id(), t.len(), t.trainable()));
        }
    });
    match found {
        None => Err(Error::InvalidArgument(format!("no tensor named `{}`", c.tensor))),
        Some((_, _, false)) => Err(Error::Frozen(c.tensor.clone())),
        Some((_, len, _)) if c.index >= len => Err(Error::InvalidArgument(format!(
            "index {} out of range for `{}` of length {len}",
            c.index, c.tensor
        ))),
        Some((id, _, _)) => Ok(id),
    }
}

fn read<P: Parameters<f64>>(params: &P, c: &Coordinate) -> f64 {
    let mut v = 0.0;
    params.visit(&mut |name, t| {
        if name == c.tensor {
            v = t.data()[c.index];
        }
    });
    v
}

fn write<P: Parameters<f64>>(params: &mut P, c: &Coordinate, value: f64) {
    params.visit_mut(&mut |name, t| {
        if name == c.tensor {
            t.data_mut()[c.index] = value;
        }
    });
}
