//! Trajectory evaluation: rigid alignment by grid search and the two
//! mean-absolute-error metrics.
//!
//! The SLAM frame is arbitrary, so before scoring, the estimated trajectory
//! is rotated about the origin and translated onto ground truth. The
//! localisation error pairs each estimated point with the ground-truth point
//! nearest in time and averages the L1 distance; the mapping error scores
//! each map point against its nearest ground-truth point in space, which
//! penalizes phantom geometry without demanding coverage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {0} sequence")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("timestamps must be non-decreasing ({prev} then {next})")]
    UnsortedTimestamps { prev: f64, next: f64 },
    #[error("invalid grid axis {axis}: min {min}, max {max}, step {step}")]
    BadGrid { axis: &'static str, min: f64, max: f64, step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
}

/// A time-stamped planar path with non-decreasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajPoint>) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::Empty("trajectory"));
        }
        for pair in points.windows(2) {
            if pair[1].timestamp < pair[0].timestamp {
                return Err(EvalError::UnsortedTimestamps {
                    prev: pair[0].timestamp,
                    next: pair[1].timestamp,
                });
            }
        }
        for p in &points {
            if !(p.timestamp.is_finite() && p.x.is_finite() && p.y.is_finite()) {
                return Err(EvalError::NonFinite("trajectory"));
            }
        }
        Ok(Trajectory { points })
    }

    pub fn points(&self) -> &[TrajPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid transform: rotation by `phi` about the origin, then translation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentTransform {
    pub tx: f64,
    pub ty: f64,
    pub phi: f64,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        AlignmentTransform { tx: 0.0, ty: 0.0, phi: 0.0 }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.phi.sin_cos();
        (x * c - y * s + self.tx, x * s + y * c + self.ty)
    }
}

pub fn apply_transform(t: &AlignmentTransform, traj: &Trajectory) -> Trajectory {
    let points = traj
        .points
        .iter()
        .map(|p| {
            let (x, y) = t.apply_point(p.x, p.y);
            TrajPoint { timestamp: p.timestamp, x, y }
        })
        .collect();
    Trajectory { points }
}

/// Pairs each estimated point with the ground-truth point nearest in time
/// (ties to the earlier one) and returns the mean L1 position error.
pub fn mae_localisation(traj: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    if gt.points.is_empty() {
        return Err(EvalError::Empty("ground truth"));
    }
    let mut total = 0.0;
    let mut cursor = 0usize;
    for p in &traj.points {
        // Both sequences are time-sorted, so the nearest-in-time partner
        // advances monotonically.
        while cursor + 1 < gt.points.len()
            && (gt.points[cursor + 1].timestamp - p.timestamp).abs()
                < (gt.points[cursor].timestamp - p.timestamp).abs()
        {
            cursor += 1;
        }
        let g = &gt.points[cursor];
        total += (p.x - g.x).abs() + (p.y - g.y).abs();
    }
    Ok(total / traj.points.len() as f64)
}

/// Mean over map points of the L1 distance to the nearest ground-truth point.
pub fn mae_mapping(map_points: &[(f64, f64)], gt: &Trajectory) -> Result<f64, EvalError> {
    if map_points.is_empty() {
        return Err(EvalError::Empty("map"));
    }
    if gt.points.is_empty() {
        return Err(EvalError::Empty("ground truth"));
    }
    let mut total = 0.0;
    for &(x, y) in map_points {
        if !(x.is_finite() && y.is_finite()) {
            return Err(EvalError::NonFinite("map"));
        }
        let nearest = gt
            .points
            .iter()
            .map(|g| (x - g.x).abs() + (y - g.y).abs())
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok(total / map_points.len() as f64)
}

/// One inclusive grid axis `min, min + step, ..., max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(move |i| self.min + i as f64 * self.step)
    }

    fn validate(&self, axis: &'static str) -> Result<(), EvalError> {
        let ok = self.step.is_finite()
            && self.step > 0.0
            && self.min.is_finite()
            && self.max.is_finite()
            && self.max >= self.min;
        if !ok {
            return Err(EvalError::BadGrid { axis, min: self.min, max: self.max, step: self.step });
        }
        Ok(())
    }
}

/// Search grid over the three transform parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub tx: GridAxis,
    pub ty: GridAxis,
    pub phi: GridAxis,
}

impl GridSpec {
    /// The documented default: translations on a 0.1 m lattice in
    /// `[-10, 10]`, rotations on a 1 degree lattice covering `(-pi, pi]`.
    pub fn default_full() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        GridSpec {
            tx: GridAxis { min: -10.0, max: 10.0, step: 0.1 },
            ty: GridAxis { min: -10.0, max: 10.0, step: 0.1 },
            phi: GridAxis { min: -std::f64::consts::PI + deg, max: std::f64::consts::PI, step: deg },
        }
    }

    /// A coarse grid meant to be refined: 0.5 m / 5 degree lattice.
    pub fn default_coarse() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        GridSpec {
            tx: GridAxis { min: -10.0, max: 10.0, step: 0.5 },
            ty: GridAxis { min: -10.0, max: 10.0, step: 0.5 },
            phi: GridAxis { min: -std::f64::consts::PI + 5.0 * deg, max: std::f64::consts::PI, step: 5.0 * deg },
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.tx.validate("tx")?;
        self.ty.validate("ty")?;
        self.phi.validate("phi")
    }
}

/// Exhaustive search over the grid for the transform minimizing the
/// localisation error of the transformed trajectory. Deterministic: on exact
/// mae ties the transform closest to the identity wins — smallest `|phi|`,
/// then `|tx|`, then `|ty|`, then the signed values.
pub fn align_by_grid_search(
    traj: &Trajectory,
    gt: &Trajectory,
    grid: &GridSpec,
) -> Result<(AlignmentTransform, f64), EvalError> {
    grid.validate()?;
    if traj.points.is_empty() {
        return Err(EvalError::Empty("trajectory"));
    }
    if gt.points.is_empty() {
        return Err(EvalError::Empty("ground truth"));
    }
    let mut best: Option<(AlignmentTransform, f64)> = None;
    let mut rotated = traj.clone();
    for phi in grid.phi.values() {
        let rot = AlignmentTransform { tx: 0.0, ty: 0.0, phi };
        for (rp, p) in rotated.points.iter_mut().zip(&traj.points) {
            let (x, y) = rot.apply_point(p.x, p.y);
            rp.x = x;
            rp.y = y;
        }
        for tx in grid.tx.values() {
            for ty in grid.ty.values() {
                let mut total = 0.0;
                let mut cursor = 0usize;
                for rp in &rotated.points {
                    while cursor + 1 < gt.points.len()
                        && (gt.points[cursor + 1].timestamp - rp.timestamp).abs()
                            < (gt.points[cursor].timestamp - rp.timestamp).abs()
                    {
                        cursor += 1;
                    }
                    let g = &gt.points[cursor];
                    total += (rp.x + tx - g.x).abs() + (rp.y + ty - g.y).abs();
                }
                let mae = total / rotated.points.len() as f64;
                let cand = AlignmentTransform { tx, ty, phi };
                let better = match &best {
                    None => true,
                    Some((bt, bm)) => {
                        let key = (mae, phi.abs(), tx.abs(), ty.abs(), phi, tx, ty);
                        let bkey = (*bm, bt.phi.abs(), bt.tx.abs(), bt.ty.abs(), bt.phi, bt.tx, bt.ty);
                        key < bkey
                    }
                };
                if better {
                    best = Some((cand, mae));
                }
            }
        }
    }
    Ok(best.expect("validated grid is non-empty"))
}

/// Coarse-to-fine alignment: run the grid search, then repeatedly re-center a
/// grid one refinement level finer (a fifth of the step, spanning double the
/// previous step around the incumbent) and search again. With the default
/// coarse grid, two levels bottom out at the full grid's 0.1 m / 1 degree
/// resolution at a small fraction of the exhaustive cost.
pub fn align_coarse_to_fine(
    traj: &Trajectory,
    gt: &Trajectory,
    initial: &GridSpec,
    levels: usize,
) -> Result<(AlignmentTransform, f64), EvalError> {
    let (mut best, mut mae) = align_by_grid_search(traj, gt, initial)?;
    let mut spec = initial.clone();
    for _ in 0..levels {
        let refine = |axis: &GridAxis, center: f64| {
            let step = axis.step / 5.0;
            GridAxis { min: center - 2.0 * axis.step, max: center + 2.0 * axis.step, step }
        };
        spec = GridSpec {
            tx: refine(&spec.tx, best.tx),
            ty: refine(&spec.ty, best.ty),
            phi: refine(&spec.phi, best.phi),
        };
        let (b, m) = align_by_grid_search(traj, gt, &spec)?;
        if m < mae {
            best = b;
            mae = m;
        }
    }
    Ok((best, mae))
}
