//! Square grid distributions standing in for per-token attention maps.
//!
//! Coordinates: row `i` grows downward, column `j` grows rightward, so
//! "above" means a smaller `i`. Cells are stored row-major, flat index
//! `u = i * side + j`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default grid side (16 x 16 attention maps).
pub const DEFAULT_SIDE: usize = 16;

/// Default smoothing kernel width.
pub const SMOOTH_KERNEL: usize = 3;

/// Default smoothing standard deviation.
pub const SMOOTH_SIGMA: f64 = 0.5;

/// Spatial relation of a source token with respect to a reference token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    Left,
    Right,
    Above,
    Below,
    /// Objects without a stated layout: only overlap is penalized.
    None,
    /// Attribute token bound to its object token.
    AttributeOf,
}

impl SpatialRelation {
    pub const DIRECTIONAL: [SpatialRelation; 4] = [
        SpatialRelation::Left,
        SpatialRelation::Right,
        SpatialRelation::Above,
        SpatialRelation::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialRelation::Left => "left",
            SpatialRelation::Right => "right",
            SpatialRelation::Above => "above",
            SpatialRelation::Below => "below",
            SpatialRelation::None => "none",
            SpatialRelation::AttributeOf => "attribute_of",
        }
    }

    pub fn is_directional(self) -> bool {
        matches!(
            self,
            SpatialRelation::Left | SpatialRelation::Right | SpatialRelation::Above | SpatialRelation::Below
        )
    }

    /// Left/Right act on columns, Above/Below on rows.
    pub fn is_horizontal(self) -> bool {
        matches!(self, SpatialRelation::Left | SpatialRelation::Right)
    }

    pub fn reverse(self) -> SpatialRelation {
        match self {
            SpatialRelation::Left => SpatialRelation::Right,
            SpatialRelation::Right => SpatialRelation::Left,
            SpatialRelation::Above => SpatialRelation::Below,
            SpatialRelation::Below => SpatialRelation::Above,
            other => other,
        }
    }

    pub fn parse(s: &str) -> Option<SpatialRelation> {
        let r = match s.to_ascii_lowercase().as_str() {
            "left" => SpatialRelation::Left,
            "right" => SpatialRelation::Right,
            "above" => SpatialRelation::Above,
            "below" => SpatialRelation::Below,
            "none" => SpatialRelation::None,
            "attribute_of" => SpatialRelation::AttributeOf,
            _ => return None,
        };
        Some(r)
    }
}

impl fmt::Display for SpatialRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mass-weighted mean position of a grid, in continuous cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    /// Column coordinate.
    pub j: f64,
    /// Row coordinate.
    pub i: f64,
}

impl Centroid {
    pub fn new(j: f64, i: f64) -> Self {
        Centroid { j, i }
    }
}

/// A `side x side` real field with no sign constraint (latents, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    side: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(crate::error::shape_mismatch(
                format!("{side}x{side} field"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Field { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        Field {
            side,
            values: vec![0.0; side * side],
        }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                values.push(f(i, j));
            }
        }
        Field { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side + j]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn flip_horizontal(&self) -> Field {
        Field::from_fn(self.side, |i, j| self.get(i, self.side - 1 - j))
    }

    pub fn flip_vertical(&self) -> Field {
        Field::from_fn(self.side, |i, j| self.get(self.side - 1 - i, j))
    }
}

/// Nonnegative weight field over a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    side: usize,
    weights: Vec<f64>,
}

impl GridMap {
    /// Builds a map, rejecting negative or non-finite weights.
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != side * side {
            return Err(crate::error::shape_mismatch(
                format!("{side}x{side} grid"),
                format!("{} weights", weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::NonFinite(format!("grid weight {w}")));
        }
        Ok(GridMap { side, weights })
    }

    pub fn uniform(side: usize) -> Self {
        let n = side * side;
        GridMap {
            side,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Unit mass at `(i, j)`.
    pub fn point(side: usize, i: usize, j: usize) -> Self {
        let mut weights = vec![0.0; side * side];
        weights[i * side + j] = 1.0;
        GridMap { side, weights }
    }

    /// Builds from a closure over `(i, j)`; negative outputs are clamped to zero.
    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut weights = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                weights.push(f(i, j).max(0.0));
            }
        }
        GridMap { side, weights }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Flattened row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.side + j]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Flat index of the heaviest cell (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (u, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = u;
            }
        }
        best
    }

    pub fn flip_horizontal(&self) -> GridMap {
        GridMap::from_fn(self.side, |i, j| self.get(i, self.side - 1 - j))
    }

    pub fn flip_vertical(&self) -> GridMap {
        GridMap::from_fn(self.side, |i, j| self.get(self.side - 1 - i, j))
    }

    /// Shannon entropy (nats) of the normalized map.
    pub fn entropy(&self) -> f64 {
        let total = self.total();
        self.weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| {
                let p = w / total;
                -p * p.ln()
            })
            .sum()
    }
}

/// Rescales `g` to unit total mass.
pub fn normalize(g: &GridMap) -> Result<GridMap> {
    let total = g.total();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroMass(total));
    }
    Ok(GridMap {
        side: g.side,
        weights: g.weights.iter().map(|w| w / total).collect(),
    })
}

/// Mass-weighted column and row means.
pub fn compute_centroid(g: &GridMap) -> Result<Centroid> {
    let n = g.side;
    let mut total = 0.0;
    let mut sj = 0.0;
    let mut si = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = g.get(i, j);
            total += w;
            sj += j as f64 * w;
            si += i as f64 * w;
        }
    }
    if !(total > 0.0) {
        return Err(Error::ZeroMass(total));
    }
    Ok(Centroid::new(sj / total, si / total))
}

/// Separable Gaussian blur with half-sample symmetric reflection at the border.
///
/// The reflected operator is symmetric and doubly stochastic: constants are
/// fixed points and total mass is preserved exactly. Symmetry also means the
/// operator is its own adjoint, which the latent gradient relies on.
#[derive(Debug, Clone)]
pub struct Smoother {
    taps: Vec<f64>,
}

impl Smoother {
    pub fn new(kernel: usize, sigma: f64) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::BadKernel(kernel));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::BadSigma(sigma));
        }
        let radius = (kernel / 2) as i64;
        let mut taps: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let z: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= z);
        Ok(Smoother { taps })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    fn reflect(mut x: i64, n: i64) -> usize {
        // d c b a | a b c d | d c b a
        loop {
            if x < 0 {
                x = -1 - x;
            } else if x >= n {
                x = 2 * n - 1 - x;
            } else {
                return x as usize;
            }
        }
    }

    /// Applies the blur to a flattened `side x side` field.
    pub fn apply(&self, side: usize, values: &[f64]) -> Vec<f64> {
        let n = side as i64;
        let radius = (self.taps.len() / 2) as i64;
        let mut tmp = vec![0.0; values.len()];
        for i in 0..side {
            let row = &values[i * side..(i + 1) * side];
            for j in 0..side {
                let mut acc = 0.0;
                for (t, w) in self.taps.iter().enumerate() {
                    let jj = Self::reflect(j as i64 + t as i64 - radius, n);
                    acc += w * row[jj];
                }
                tmp[i * side + j] = acc;
            }
        }
        let mut out = vec![0.0; values.len()];
        for i in 0..side {
            for j in 0..side {
                let mut acc = 0.0;
                for (t, w) in self.taps.iter().enumerate() {
                    let ii = Self::reflect(i as i64 + t as i64 - radius, n);
                    acc += w * tmp[ii * side + j];
                }
                out[i * side + j] = acc;
            }
        }
        out
    }
}

/// Gaussian smoothing of a grid (`kernel` odd, `sigma > 0`).
pub fn gaussian_smooth(g: &GridMap, kernel: usize, sigma: f64) -> Result<GridMap> {
    let s = Smoother::new(kernel, sigma)?;
    let weights = s.apply(g.side, &g.weights);
    // Convex combinations of nonnegative inputs; clamp only round-off.
    Ok(GridMap {
        side: g.side,
        weights: weights.into_iter().map(|w| w.max(0.0)).collect(),
    })
}

/// Center `(c_x, c_y)` of the directional target Gaussian, with `N = side`.
pub fn target_center(relation: SpatialRelation, reference: Centroid, side: usize) -> Result<(f64, f64)> {
    let n = side as f64;
    match relation {
        SpatialRelation::Left => Ok(((0.0 + reference.j) / 2.0, n / 2.0)),
        SpatialRelation::Right => Ok(((n + reference.j) / 2.0, n / 2.0)),
        SpatialRelation::Above => Ok((n / 2.0, (0.0 + reference.i) / 2.0)),
        SpatialRelation::Below => Ok((n / 2.0, (n + reference.i) / 2.0)),
        other => Err(Error::BadRelation(other.name())),
    }
}

/// Normalized circular Gaussian evaluated at integer cell centers.
pub fn gaussian_at(side: usize, cx: f64, cy: f64, sigma: f64) -> Result<GridMap> {
    if !(sigma > 0.0) {
        return Err(Error::BadSigma(sigma));
    }
    let g = GridMap::from_fn(side, |i, j| {
        let dx = j as f64 - cx;
        let dy = i as f64 - cy;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    normalize(&g)
}

/// Target distribution on the desired side of the reference centroid.
pub fn build_target_distribution(
    relation: SpatialRelation,
    reference: Centroid,
    side: usize,
    sigma_t: f64,
) -> Result<GridMap> {
    let (cx, cy) = target_center(relation, reference, side)?;
    gaussian_at(side, cx, cy, sigma_t)
}

/// Default target spread: an eighth of the grid side.
pub fn default_target_sigma(side: usize) -> f64 {
    side as f64 / 8.0
}

/// Spatial softmax of a latent field at the given temperature.
pub fn softmax_from_latent(z: &Field, temperature: f64) -> GridMap {
    let scaled: Vec<f64> = z.values.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    GridMap {
        side: z.side,
        weights: exps.into_iter().map(|e| e / total).collect(),
    }
}
