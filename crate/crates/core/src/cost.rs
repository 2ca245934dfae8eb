//! Transport costs between flattened grid cells.
//!
//! The spatial transport cost combines a directional term, which is cheap on
//! the desired side of the reference centroid and expensive on the restricted
//! side, with the reference attention itself so that mass is kept off the
//! reference object. It is mixed with a plain `p`-power distance cost.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::grid::{Centroid, GridMap, SpatialRelation};

/// Dense `n x n` nonnegative cost, row-major (`row = source cell`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(shape_mismatch(
                format!("{n}x{n} cost"),
                format!("{} entries", data.len()),
            ));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for u in 0..n {
            for v in 0..n {
                data.push(f(u, v));
            }
        }
        CostMatrix { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        CostMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n + v]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.n..(u + 1) * self.n]
    }

    pub fn is_finite_nonneg(&self) -> bool {
        self.data.iter().all(|c| c.is_finite() && *c >= 0.0)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> CostMatrix {
        CostMatrix {
            n: self.n,
            data: self.data.iter().map(|c| c * s).collect(),
        }
    }
}

/// How the per-cell spatial cost is spread over the coupling matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StOrientation {
    /// `C[u][v] = c[u]`: the cost is paid by the source cell.
    #[default]
    SourceIndexed,
    /// `C[u][v] = c[v]`: the cost is paid by the destination cell.
    TargetIndexed,
}

/// Cost-function variants used by the cost ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    /// B0: Manhattan distance only.
    Manhattan,
    /// B1: squared Euclidean distance only.
    Euclidean,
    /// B2: mean of B0 and B1.
    DistanceMix,
    /// B3: spatial cost with the reference-attention factor replaced by 1/N.
    NoOverlap,
    /// B4: full spatial transport cost.
    #[default]
    Full,
}

impl CostVariant {
    pub const ALL: [CostVariant; 5] = [
        CostVariant::Manhattan,
        CostVariant::Euclidean,
        CostVariant::DistanceMix,
        CostVariant::NoOverlap,
        CostVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CostVariant::Manhattan => "B0",
            CostVariant::Euclidean => "B1",
            CostVariant::DistanceMix => "B2",
            CostVariant::NoOverlap => "B3",
            CostVariant::Full => "B4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Weight of the distance cost in the mix.
    pub lambda_mix: f64,
    pub p_norm: f64,
    /// Stabilizer added to the directional distances.
    pub eps_stab: f64,
    pub st_orientation: StOrientation,
    pub variant: CostVariant,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            lambda_mix: 0.01,
            p_norm: 2.0,
            eps_stab: 1e-3,
            st_orientation: StOrientation::SourceIndexed,
            variant: CostVariant::Full,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(format!("lambda_mix must lie in [0, 1], got {}", self.lambda_mix));
        }
        if !(self.p_norm >= 1.0) {
            return Err(format!("p_norm must be >= 1, got {}", self.p_norm));
        }
        if !(self.eps_stab > 0.0) {
            return Err(format!("eps_stab must be > 0, got {}", self.eps_stab));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    Dynamic,
    Fixed(f64),
}

/// Progressive weight `omega(t) = 1 + (omega_max - 1)(1 - exp(-k t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmegaSchedule {
    pub omega_max: f64,
    pub k: f64,
    pub mode: OmegaMode,
}

impl Default for OmegaSchedule {
    fn default() -> Self {
        OmegaSchedule {
            omega_max: 100.0,
            k: 0.2,
            mode: OmegaMode::Dynamic,
        }
    }
}

impl OmegaSchedule {
    pub fn fixed(value: f64) -> Self {
        OmegaSchedule {
            mode: OmegaMode::Fixed(value),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.omega_max > 1.0) {
            return Err(format!("omega_max must be > 1, got {}", self.omega_max));
        }
        if !(self.k > 0.0) {
            return Err(format!("k must be > 0, got {}", self.k));
        }
        if let OmegaMode::Fixed(w) = self.mode {
            if !(w >= 1.0) {
                return Err(format!("fixed omega must be >= 1, got {w}"));
            }
        }
        Ok(())
    }
}

pub fn omega_at(t: f64, sched: &OmegaSchedule) -> f64 {
    match sched.mode {
        OmegaMode::Fixed(w) => w,
        OmegaMode::Dynamic => 1.0 + (sched.omega_max - 1.0) * (1.0 - (-sched.k * t).exp()),
    }
}

/// Signed distances from a cell to the reference point in each direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deltas {
    pub left: f64,
    pub right: f64,
    pub up: f64,
    pub down: f64,
}

pub fn delta_values(i: f64, j: f64, reference: Centroid) -> Deltas {
    Deltas {
        left: reference.j - j,
        right: j - reference.j,
        up: reference.i - i,
        down: i - reference.i,
    }
}

impl Deltas {
    /// `(desired, restricted)` pair for a directional relation.
    pub fn oriented(&self, relation: SpatialRelation) -> Option<(f64, f64)> {
        match relation {
            SpatialRelation::Left => Some((self.left, self.right)),
            SpatialRelation::Right => Some((self.right, self.left)),
            SpatialRelation::Above => Some((self.up, self.down)),
            SpatialRelation::Below => Some((self.down, self.up)),
            _ => None,
        }
    }
}

/// Directional penalty: `1/(w(d+e))` on the desired side, `w(r+e)` on the restricted side.
pub fn positional_delta_cost(delta_des: f64, delta_res: f64, omega: f64, eps_stab: f64) -> f64 {
    let mut cost = 0.0;
    if delta_des > 0.0 {
        cost += 1.0 / (omega * (delta_des + eps_stab));
    }
    if delta_res > 0.0 {
        cost += omega * (delta_res + eps_stab);
    }
    cost
}

/// Directional factor for every cell of a `side x side` grid; zero for
/// non-directional relations.
pub fn positional_factors(
    side: usize,
    relation: SpatialRelation,
    reference: Centroid,
    omega: f64,
    eps_stab: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let d = delta_values(i as f64, j as f64, reference);
            out.push(match d.oriented(relation) {
                Some((des, res)) => positional_delta_cost(des, res, omega, eps_stab),
                None => 0.0,
            });
        }
    }
    out
}

/// Per-cell spatial cost `A_ij * Delta_ij`.
pub fn st_cell_cost(
    ref_map: &GridMap,
    i: usize,
    j: usize,
    relation: SpatialRelation,
    reference: Centroid,
    omega: f64,
    eps_stab: f64,
) -> f64 {
    let d = delta_values(i as f64, j as f64, reference);
    match d.oriented(relation) {
        Some((des, res)) => ref_map.get(i, j) * positional_delta_cost(des, res, omega, eps_stab),
        None => 0.0,
    }
}

/// Spreads a per-cell cost over the full coupling matrix.
pub fn expand_cell_costs(flat: &[f64], orientation: StOrientation) -> CostMatrix {
    let n = flat.len();
    match orientation {
        StOrientation::SourceIndexed => CostMatrix::from_fn(n, |u, _| flat[u]),
        StOrientation::TargetIndexed => CostMatrix::from_fn(n, |_, v| flat[v]),
    }
}

pub fn st_cost_matrix(
    ref_map: &GridMap,
    relation: SpatialRelation,
    reference: Centroid,
    omega: f64,
    eps_stab: f64,
    orientation: StOrientation,
) -> CostMatrix {
    let factors = positional_factors(ref_map.side(), relation, reference, omega, eps_stab);
    let flat: Vec<f64> = factors.iter().zip(ref_map.weights()).map(|(d, a)| d * a).collect();
    expand_cell_costs(&flat, orientation)
}

/// `C[u][v] = |i_u - i_v|^p + |j_u - j_v|^p`.
pub fn dist_cost_matrix(side: usize, p_norm: f64) -> CostMatrix {
    let n = side * side;
    let axis: Vec<f64> = (0..side).map(|d| (d as f64).powf(p_norm)).collect();
    CostMatrix::from_fn(n, |u, v| {
        let (iu, ju) = (u / side, u % side);
        let (iv, jv) = (v / side, v % side);
        axis[iu.abs_diff(iv)] + axis[ju.abs_diff(jv)]
    })
}

/// `lambda * c_dist + (1 - lambda) * c_st`.
pub fn combined_cost(c_dist: &CostMatrix, c_st: &CostMatrix, lambda_mix: f64) -> Result<CostMatrix> {
    if c_dist.n != c_st.n {
        return Err(shape_mismatch(
            format!("{0}x{0} distance cost", c_dist.n),
            format!("{0}x{0} spatial cost", c_st.n),
        ));
    }
    let data = c_dist
        .data
        .iter()
        .zip(&c_st.data)
        .map(|(d, s)| lambda_mix * d + (1.0 - lambda_mix) * s)
        .collect();
    Ok(CostMatrix { n: c_dist.n, data })
}

/// Overlap-only spatial cost for objects without a stated layout.
pub fn object_overlap_cost(ref_map: &GridMap, orientation: StOrientation) -> CostMatrix {
    expand_cell_costs(ref_map.weights(), orientation)
}

/// Plain squared-Euclidean cost used to match an attribute map to its object.
pub fn attribute_cost(side: usize) -> CostMatrix {
    dist_cost_matrix(side, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn delta_examples() {
        let d = delta_values(0.0, 3.0, Centroid::new(8.0, 0.0));
        assert_eq!((d.left, d.right), (5.0, -5.0));
        let d = delta_values(4.0, 0.0, Centroid::new(0.0, 4.0));
        assert_eq!((d.up, d.down), (0.0, 0.0));
        let d = delta_values(10.0, 0.0, Centroid::new(0.0, 4.0));
        assert_eq!(d.down, 6.0);
    }

    #[test]
    fn positional_cost_examples() {
        assert!(close(
            positional_delta_cost(5.0, -5.0, 2.0, 0.1),
            1.0 / (2.0 * 5.1),
            1e-15
        ));
        assert!(close(positional_delta_cost(5.0, -5.0, 2.0, 0.1), 0.098_04, 1e-5));
        assert_eq!(positional_delta_cost(0.0, 0.0, 2.0, 0.1), 0.0);
        assert!(close(positional_delta_cost(-5.0, 5.0, 2.0, 0.1), 10.2, 1e-12));
    }

    #[test]
    fn st_cell_cost_examples() {
        // Restricted side of a Left relation, five cells right of the reference.
        let mut w = vec![0.0; 16 * 16];
        w[3 * 16 + 13] = 0.5;
        let a = GridMap::new(16, w).unwrap();
        let c = st_cell_cost(&a, 3, 13, SpatialRelation::Left, Centroid::new(8.0, 3.0), 2.0, 0.1);
        assert!(close(c, 5.1, 1e-12));
        // Zero attention anywhere.
        let c = st_cell_cost(&a, 3, 2, SpatialRelation::Left, Centroid::new(8.0, 3.0), 2.0, 0.1);
        assert_eq!(c, 0.0);
        // On the reference line.
        let u = GridMap::uniform(16);
        let c = st_cell_cost(&u, 5, 8, SpatialRelation::Left, Centroid::new(8.0, 3.0), 50.0, 0.1);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn st_cost_matrix_orientations() {
        let flat = [0.0, 1.0, 2.0, 3.0];
        let s = expand_cell_costs(&flat, StOrientation::SourceIndexed);
        for u in 0..4 {
            assert_eq!(s.row(u), &[flat[u]; 4]);
        }
        let t = expand_cell_costs(&flat, StOrientation::TargetIndexed);
        for u in 0..4 {
            assert_eq!(t.row(u), &flat);
        }
        let c = expand_cell_costs(&[0.7; 9], StOrientation::SourceIndexed);
        assert!(c.data().iter().all(|x| *x == 0.7));
    }

    #[test]
    fn dist_cost_examples() {
        let c = dist_cost_matrix(5, 2.0);
        assert_eq!(c.get(0, 3 * 5 + 4), 25.0);
        assert_eq!(c.get(7, 7), 0.0);
        let c1 = dist_cost_matrix(5, 1.0);
        assert_eq!(c1.get(0, 6), 2.0);
        for u in 0..25 {
            for v in 0..25 {
                assert_eq!(c.get(u, v), c.get(v, u));
            }
        }
    }

    #[test]
    fn combined_cost_examples() {
        let d = CostMatrix::new(1, vec![25.0]).unwrap();
        let s = CostMatrix::new(1, vec![5.1]).unwrap();
        assert!(close(combined_cost(&d, &s, 0.01).unwrap().get(0, 0), 5.299, 1e-12));
        assert_eq!(combined_cost(&d, &s, 0.0).unwrap(), s);
        assert_eq!(combined_cost(&d, &s, 1.0).unwrap(), d);
        assert!(combined_cost(&d, &CostMatrix::zeros(2), 0.5).is_err());
    }

    #[test]
    fn object_overlap_examples() {
        let c = object_overlap_cost(&GridMap::uniform(4), StOrientation::SourceIndexed);
        assert!(c.data().iter().all(|x| close(*x, 1.0 / 16.0, 1e-15)));

        let c = object_overlap_cost(&GridMap::point(4, 1, 2), StOrientation::SourceIndexed);
        for u in 0..16 {
            let nonzero = c.row(u).iter().any(|x| *x != 0.0);
            assert_eq!(nonzero, u == 6);
        }
        let mixed = combined_cost(&dist_cost_matrix(4, 2.0), &c, 0.01).unwrap();
        assert!(mixed.is_finite_nonneg());
    }

    #[test]
    fn attribute_cost_examples() {
        let c = attribute_cost(3);
        for u in 0..9 {
            for v in 0..9 {
                assert_eq!(c.get(u, v) == 0.0, u == v);
            }
        }
    }

    #[test]
    fn omega_examples() {
        let s = OmegaSchedule::default();
        assert_eq!(omega_at(0.0, &s), 1.0);
        assert!(close(omega_at(5.0, &s), 1.0 + 99.0 * (1.0 - (-1.0f64).exp()), 1e-12));
        assert!(close(omega_at(5.0, &s), 63.58, 5e-3));
        assert!(close(omega_at(1e4, &s), 100.0, 1e-9));
        assert_eq!(omega_at(3.0, &OmegaSchedule::fixed(50.0)), 50.0);
    }

    #[test]
    fn config_validation() {
        assert!(CostConfig::default().validate().is_ok());
        let bad = CostConfig {
            lambda_mix: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(OmegaSchedule::default().validate().is_ok());
        assert!(OmegaSchedule {
            omega_max: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
