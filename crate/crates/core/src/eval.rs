//! Spatial-correctness, presence and overlap metrics on final maps.
//!
//! Presence is a concentration proxy (no detector is available): a map counts
//! as showing its object when its top cells carry most of the mass. Boxes are
//! derived from maps by greedy shrinking, and overlap is box IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{compute_centroid, Centroid, GridMap, SpatialRelation};

pub const DEFAULT_MASS_FRACTION: f64 = 0.9;
pub const DEFAULT_TOP_FRACTION: f64 = 0.1;
pub const DEFAULT_CONCENTRATION: f64 = 0.5;

/// Inclusive cell box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    /// `(x, y)` = `(column, row)` of the box center.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.left + self.right) as f64 / 2.0,
            (self.top + self.bottom) as f64 / 2.0,
        )
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let top = self.top.max(other.top);
        let bottom = self.bottom.min(other.bottom);
        let left = self.left.max(other.left);
        let right = self.right.min(other.right);
        if top > bottom || left > right {
            0
        } else {
            (bottom - top + 1) * (right - left + 1)
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

fn positive(g: &GridMap) -> Result<f64> {
    let total = g.total();
    if !(total > 0.0) {
        return Err(Error::ZeroMass(total));
    }
    Ok(total)
}

/// Whether `a` stands in `relation` to `b` by strict centroid comparison.
pub fn centroid_relation(a: &GridMap, b: &GridMap, relation: SpatialRelation) -> Result<bool> {
    let ca = compute_centroid(a)?;
    let cb = compute_centroid(b)?;
    Ok(centroid_verdict(ca, cb, relation))
}

pub fn centroid_verdict(ca: Centroid, cb: Centroid, relation: SpatialRelation) -> bool {
    match relation {
        SpatialRelation::Left => ca.j < cb.j,
        SpatialRelation::Right => ca.j > cb.j,
        SpatialRelation::Above => ca.i < cb.i,
        SpatialRelation::Below => ca.i > cb.i,
        SpatialRelation::None | SpatialRelation::AttributeOf => false,
    }
}

/// Smallest box (by greedy shrinking from the full grid) holding at least
/// `mass_fraction` of the mass.
///
/// Each round removes whichever edge row or column leaves the most mass
/// inside, provided the remainder still meets the fraction. Ties go to the
/// smaller resulting area, then the smaller `(top, left)`.
pub fn bbox_from_grid(g: &GridMap, mass_fraction: f64) -> Result<BBox> {
    let total = positive(g)?;
    let side = g.side();
    let need = mass_fraction * total * (1.0 - 1e-12);
    let row_mass = |b: &BBox, i: usize| -> f64 { (b.left..=b.right).map(|j| g.get(i, j)).sum() };
    let col_mass = |b: &BBox, j: usize| -> f64 { (b.top..=b.bottom).map(|i| g.get(i, j)).sum() };
    let mut b = BBox {
        top: 0,
        left: 0,
        bottom: side - 1,
        right: side - 1,
    };
    let mut inside = total;
    loop {
        let mut best: Option<(f64, BBox)> = None;
        let mut consider = |removed: f64, nb: BBox| {
            let keep = inside - removed;
            if keep < need {
                return;
            }
            let better = match &best {
                None => true,
                Some((bk, bb)) => {
                    keep > *bk || (keep == *bk && (nb.area(), nb.top, nb.left) < (bb.area(), bb.top, bb.left))
                }
            };
            if better {
                best = Some((keep, nb));
            }
        };
        if b.height() > 1 {
            consider(row_mass(&b, b.top), BBox { top: b.top + 1, ..b });
            consider(
                row_mass(&b, b.bottom),
                BBox {
                    bottom: b.bottom - 1,
                    ..b
                },
            );
        }
        if b.width() > 1 {
            consider(col_mass(&b, b.left), BBox { left: b.left + 1, ..b });
            consider(
                col_mass(&b, b.right),
                BBox {
                    right: b.right - 1,
                    ..b
                },
            );
        }
        match best {
            Some((keep, nb)) => {
                inside = keep;
                b = nb;
            }
            None => return Ok(b),
        }
    }
}

/// Box-center comparison, axis dominance and low overlap, all required.
pub fn compbench_relation(a: &GridMap, b: &GridMap, relation: SpatialRelation) -> Result<bool> {
    let ba = bbox_from_grid(a, DEFAULT_MASS_FRACTION)?;
    let bb = bbox_from_grid(b, DEFAULT_MASS_FRACTION)?;
    Ok(compbench_verdict(&ba, &bb, relation))
}

pub fn compbench_verdict(ba: &BBox, bb: &BBox, relation: SpatialRelation) -> bool {
    let (x1, y1) = ba.center();
    let (x2, y2) = bb.center();
    let (dx, dy) = ((x1 - x2).abs(), (y1 - y2).abs());
    let ordered = match relation {
        SpatialRelation::Left => x1 < x2 && dx > dy,
        SpatialRelation::Right => x1 > x2 && dx > dy,
        SpatialRelation::Above => y1 < y2 && dy > dx,
        SpatialRelation::Below => y1 > y2 && dy > dx,
        SpatialRelation::None | SpatialRelation::AttributeOf => false,
    };
    ordered && ba.iou(bb) < 0.1
}

/// IoU of the two maps' boxes.
pub fn overlap_miou(a: &GridMap, b: &GridMap) -> Result<f64> {
    let ba = bbox_from_grid(a, DEFAULT_MASS_FRACTION)?;
    let bb = bbox_from_grid(b, DEFAULT_MASS_FRACTION)?;
    Ok(ba.iou(&bb))
}

/// IoU of the supports `{w >= 1/N}`.
pub fn support_iou(a: &GridMap, b: &GridMap) -> Result<f64> {
    let ta = positive(a)?;
    let tb = positive(b)?;
    let n = a.len() as f64;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.weights().iter().zip(b.weights()) {
        let (ia, ib) = (x / ta >= 1.0 / n, y / tb >= 1.0 / n);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Presence proxy: the top `ceil(q N)` cells hold at least `tau` of the mass.
pub fn oa_proxy(g: &GridMap, q: f64, tau: f64) -> Result<bool> {
    let total = positive(g)?;
    let k = ((q * g.len() as f64).ceil() as usize).clamp(1, g.len());
    let mut w = g.weights().to_vec();
    w.sort_by(|x, y| y.total_cmp(x));
    Ok(w[..k].iter().sum::<f64>() >= tau * total)
}

/// Fraction of groups with at least `n` successes.
pub fn visor_n(groups: &[Vec<bool>], n: usize) -> Result<f64> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for g in groups {
        if n == 0 || g.len() < n {
            return Err(Error::BadGroupSize { size: g.len(), n });
        }
        hits += (g.iter().filter(|&&c| c).count() >= n) as usize;
    }
    Ok(hits as f64 / groups.len() as f64)
}

/// Everything measured on one (source, reference) pair of final maps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationJudgment {
    pub relation: SpatialRelation,
    pub centroid_ok: bool,
    pub compbench_ok: bool,
    pub centroid_a: Centroid,
    pub centroid_b: Centroid,
    pub box_a: BBox,
    pub box_b: BBox,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub judgment: RelationJudgment,
    pub oa_a: bool,
    pub oa_b: bool,
    pub oa: bool,
    pub visor_uncond: bool,
    /// Only defined when both objects are present.
    pub visor_cond: Option<bool>,
    pub support_iou: f64,
}

pub fn judge(a: &GridMap, b: &GridMap, relation: SpatialRelation) -> Result<RelationJudgment> {
    let centroid_a = compute_centroid(a)?;
    let centroid_b = compute_centroid(b)?;
    let box_a = bbox_from_grid(a, DEFAULT_MASS_FRACTION)?;
    let box_b = bbox_from_grid(b, DEFAULT_MASS_FRACTION)?;
    Ok(RelationJudgment {
        relation,
        centroid_ok: centroid_verdict(centroid_a, centroid_b, relation),
        compbench_ok: compbench_verdict(&box_a, &box_b, relation),
        centroid_a,
        centroid_b,
        box_a,
        box_b,
        miou: box_a.iou(&box_b),
    })
}

pub fn run_metrics(a: &GridMap, b: &GridMap, relation: SpatialRelation) -> Result<RunMetrics> {
    let judgment = judge(a, b, relation)?;
    let oa_a = oa_proxy(a, DEFAULT_TOP_FRACTION, DEFAULT_CONCENTRATION)?;
    let oa_b = oa_proxy(b, DEFAULT_TOP_FRACTION, DEFAULT_CONCENTRATION)?;
    let oa = oa_a && oa_b;
    let correct = judgment.centroid_ok;
    Ok(RunMetrics {
        oa_a,
        oa_b,
        oa,
        visor_uncond: oa && correct,
        visor_cond: oa.then_some(correct),
        support_iou: support_iou(a, b)?,
        judgment,
    })
}

/// Rates over a set of runs. VISOR_n groups are consecutive chunks of four.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub centroid_rate: f64,
    pub compbench_rate: f64,
    pub oa_rate: f64,
    pub visor_uncond: f64,
    /// `None` when no run had both objects present.
    pub visor_cond: Option<f64>,
    pub visor_1: f64,
    pub visor_2: f64,
    pub visor_3: f64,
    pub visor_4: f64,
    pub mean_miou: f64,
    pub mean_support_iou: f64,
}

pub const VISOR_GROUP: usize = 4;

pub fn aggregate(runs: &[RunMetrics]) -> Result<Aggregate> {
    let n = runs.len();
    let rate = |f: &dyn Fn(&RunMetrics) -> bool| {
        if n == 0 {
            0.0
        } else {
            runs.iter().filter(|r| f(r)).count() as f64 / n as f64
        }
    };
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            runs.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let cond: Vec<bool> = runs.iter().filter_map(|r| r.visor_cond).collect();
    let groups: Vec<Vec<bool>> = runs
        .chunks(VISOR_GROUP)
        .filter(|c| c.len() == VISOR_GROUP)
        .map(|c| c.iter().map(|r| r.visor_uncond).collect())
        .collect();
    Ok(Aggregate {
        runs: n,
        centroid_rate: rate(&|r| r.judgment.centroid_ok),
        compbench_rate: rate(&|r| r.judgment.compbench_ok),
        oa_rate: rate(&|r| r.oa),
        visor_uncond: rate(&|r| r.visor_uncond),
        visor_cond: (!cond.is_empty()).then(|| cond.iter().filter(|&&c| c).count() as f64 / cond.len() as f64),
        visor_1: visor_n(&groups, 1)?,
        visor_2: visor_n(&groups, 2)?,
        visor_3: visor_n(&groups, 3)?,
        visor_4: visor_n(&groups, 4)?,
        mean_miou: mean(&|r| r.judgment.miou),
        mean_support_iou: mean(&|r| r.support_iou),
    })
}
