//! Rectangular observation windows, marked point configurations and
//! fixed-radius neighbor queries.
//!
//! Windows are axis-aligned boxes in `d` dimensions (`d = 2` everywhere in the
//! shipped experiments). Configurations are finite simple point patterns with
//! an optional positive real mark per point, living inside a carrier window
//! that usually includes a boundary collar. All interaction balls use the
//! Euclidean norm with the closed-ball convention `‖y − x‖ ≤ r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangular window `[lower_1, upper_1] × … × [lower_d, upper_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Window {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidArgument(format!(
                "window corners must be non-empty and of equal dimension (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            if !(upper[i] > lower[i]) || !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::InvalidWindow { axis: i });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Planar window `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        Self::new(vec![x0, y0], vec![x1, y1])
    }

    /// Planar square `[0, side]²`.
    pub fn square(side: f64) -> Result<Self> {
        Self::rect(0.0, side, 0.0, side)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn max_side(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).fold(0.0, f64::max)
    }

    pub fn min_side(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.side(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    /// Closed membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    /// Whether `inner` shrunk outward by `margin` still fits inside `self`,
    /// i.e. `inner ⊕ B(0, margin) ⊆ self` up to a small floating-point slack.
    pub fn contains_with_margin(&self, inner: &Window, margin: f64) -> Result<()> {
        let tol = 1e-9 * (1.0 + self.max_side());
        for i in 0..self.dim() {
            if inner.lower[i] - margin < self.lower[i] - tol
                || inner.upper[i] + margin > self.upper[i] + tol
            {
                return Err(Error::CollarMissing {
                    needed: margin,
                    axis: i,
                });
            }
        }
        Ok(())
    }

    /// Shrink every side by `delta` at both ends; errors when any axis is exhausted.
    pub fn eroded(&self, delta: f64) -> Result<Self> {
        if delta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "erosion must be nonnegative, got {delta}"
            )));
        }
        let lower: Vec<f64> = self.lower.iter().map(|&l| l + delta).collect();
        let upper: Vec<f64> = self.upper.iter().map(|&u| u - delta).collect();
        for i in 0..lower.len() {
            if !(upper[i] > lower[i]) {
                return Err(Error::EmptyWindow { delta, axis: i });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Grow every side by `delta` at both ends.
    pub fn dilated(&self, delta: f64) -> Result<Self> {
        if delta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "dilation must be nonnegative, got {delta}"
            )));
        }
        Ok(Self {
            lower: self.lower.iter().map(|&l| l - delta).collect(),
            upper: self.upper.iter().map(|&u| u + delta).collect(),
        })
    }
}

/// Shrink a window by `delta` on every side.
pub fn erode(window: &Window, delta: f64) -> Result<Window> {
    window.eroded(delta)
}

/// A point with an optional positive real mark (the disc radius for the
/// area-interaction model; absent for unmarked models).
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedPoint {
    pub position: Vec<f64>,
    pub mark: Option<f64>,
}

impl MarkedPoint {
    pub fn new(position: Vec<f64>, mark: Option<f64>) -> Result<Self> {
        if let Some(m) = mark {
            if !(m > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "marks must be positive, got {m}"
                )));
            }
        }
        Ok(Self { position, mark })
    }

    /// Unmarked planar point.
    pub fn planar(x: f64, y: f64) -> Self {
        Self {
            position: vec![x, y],
            mark: None,
        }
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub(crate) fn same_position(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// A finite simple marked point pattern inside a carrier window.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    points: Vec<MarkedPoint>,
    carrier: Window,
}

impl Configuration {
    pub fn new(points: Vec<MarkedPoint>, carrier: Window) -> Result<Self> {
        let d = carrier.dim();
        for (i, p) in points.iter().enumerate() {
            if p.position.len() != d {
                return Err(Error::InvalidConfiguration(format!(
                    "point {i} has dimension {} but the carrier has dimension {d}",
                    p.position.len()
                )));
            }
            if !carrier.contains(&p.position) {
                return Err(Error::InvalidConfiguration(format!(
                    "point {i} at {:?} lies outside the carrier",
                    p.position
                )));
            }
            if let Some(m) = p.mark {
                if !(m > 0.0) {
                    return Err(Error::InvalidConfiguration(format!(
                        "point {i} carries a non-positive mark {m}"
                    )));
                }
            }
        }
        // Simple point process: duplicate positions are rejected outright.
        let mut keys: Vec<(usize, Vec<u64>)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.position.iter().map(|c| c.to_bits()).collect()))
            .collect();
        keys.sort_by(|a, b| a.1.cmp(&b.1));
        for w in keys.windows(2) {
            if w[0].1 == w[1].1 {
                return Err(Error::InvalidConfiguration(format!(
                    "points {} and {} share the exact same position",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { points, carrier })
    }

    pub fn empty(carrier: Window) -> Self {
        Self {
            points: Vec::new(),
            carrier,
        }
    }

    pub fn points(&self) -> &[MarkedPoint] {
        &self.points
    }

    pub fn carrier(&self) -> &Window {
        &self.carrier
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of points falling in `window` (closed membership).
    pub fn count_in(&self, window: &Window) -> usize {
        self.points
            .iter()
            .filter(|p| window.contains(&p.position))
            .count()
    }

    /// The sub-pattern with positions in `window`, carried by `window`.
    pub fn restrict(&self, window: &Window) -> Configuration {
        let points = self
            .points
            .iter()
            .filter(|p| window.contains(&p.position))
            .cloned()
            .collect();
        Configuration {
            points,
            carrier: window.clone(),
        }
    }
}

/// Count the points of `cfg` within Euclidean distance `r` of `x` (closed
/// ball), excluding `exclude` when given. Plain linear scan; the cell-grid
/// index below is the fast path and is tested against this.
pub fn count_in_ball(
    cfg: &Configuration,
    x: &[f64],
    r: f64,
    exclude: Option<&MarkedPoint>,
) -> usize {
    let r2 = r * r;
    cfg.points
        .iter()
        .filter(|p| {
            squared_distance(&p.position, x) <= r2
                && exclude.is_none_or(|e| !same_position(&p.position, &e.position))
        })
        .count()
}

/// Read access to the neighbors of an arbitrary location, independent of how
/// the pattern is stored (static index or the sampler's dynamic grid).
pub trait NeighborLookup {
    fn dim(&self) -> usize;

    /// Visit every stored point within Euclidean distance `radius` of
    /// `center` (closed ball), in unspecified order.
    fn for_each_within(&self, center: &[f64], radius: f64, visit: &mut dyn FnMut(&MarkedPoint));

    fn count_within(&self, center: &[f64], radius: f64, exclude: Option<&MarkedPoint>) -> usize {
        let mut n = 0usize;
        self.for_each_within(center, radius, &mut |p| {
            if exclude.is_none_or(|e| !same_position(&p.position, &e.position)) {
                n += 1;
            }
        });
        n
    }
}

/// Cell-grid index over a configuration's carrier for fixed-radius queries.
///
/// The cell side is `max(query_radius, max carrier side / 64)`, which bounds
/// the cell count while keeping expected lookups O(1). Queries with radii
/// above the build radius remain correct, just scan more cells.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    cell_side: f64,
    origin: Vec<f64>,
    cells_per_axis: Vec<usize>,
    cells: Vec<Vec<u32>>,
    dim: usize,
}

impl NeighborIndex {
    pub fn build(cfg: &Configuration, query_radius: f64) -> Self {
        let carrier = cfg.carrier();
        let d = carrier.dim();
        let cell_side = query_radius.max(carrier.max_side() / 64.0).max(1e-12);
        let cells_per_axis: Vec<usize> = (0..d)
            .map(|i| ((carrier.side(i) / cell_side).ceil() as usize).max(1))
            .collect();
        let total: usize = cells_per_axis.iter().product();
        let mut cells = vec![Vec::new(); total];
        let origin = carrier.lower().to_vec();
        let index = |pos: &[f64]| -> usize {
            let mut flat = 0usize;
            for i in 0..d {
                let c = (((pos[i] - origin[i]) / cell_side) as usize).min(cells_per_axis[i] - 1);
                flat = flat * cells_per_axis[i] + c;
            }
            flat
        };
        for (i, p) in cfg.points().iter().enumerate() {
            cells[index(&p.position)].push(i as u32);
        }
        Self {
            cell_side,
            origin,
            cells_per_axis,
            cells,
            dim: d,
        }
    }

    /// Visit `(index, point)` for every point of `cfg` within `r` of `x`.
    pub fn for_each_within_indexed<'c>(
        &self,
        cfg: &'c Configuration,
        x: &[f64],
        r: f64,
        visit: &mut dyn FnMut(usize, &'c MarkedPoint),
    ) {
        debug_assert_eq!(x.len(), self.dim);
        let r2 = r * r;
        let lo: Vec<isize> = (0..self.dim)
            .map(|i| ((x[i] - r - self.origin[i]) / self.cell_side).floor() as isize)
            .collect();
        let hi: Vec<isize> = (0..self.dim)
            .map(|i| ((x[i] + r - self.origin[i]) / self.cell_side).floor() as isize)
            .collect();
        let mut cursor: Vec<isize> = lo.clone();
        'outer: loop {
            let mut flat = 0usize;
            let mut in_range = true;
            for i in 0..self.dim {
                if cursor[i] < 0 || cursor[i] >= self.cells_per_axis[i] as isize {
                    in_range = false;
                    break;
                }
                flat = flat * self.cells_per_axis[i] + cursor[i] as usize;
            }
            if in_range {
                for &pi in &self.cells[flat] {
                    let p = &cfg.points()[pi as usize];
                    if squared_distance(&p.position, x) <= r2 {
                        visit(pi as usize, p);
                    }
                }
            }
            // advance the mixed-radix cursor over [lo, hi]
            for i in (0..self.dim).rev() {
                cursor[i] += 1;
                if cursor[i] <= hi[i] {
                    continue 'outer;
                }
                cursor[i] = lo[i];
            }
            break;
        }
    }
}

/// A configuration paired with its neighbor index; the unit most estimation
/// code works on.
#[derive(Clone, Copy)]
pub struct Neighborhood<'a> {
    pub cfg: &'a Configuration,
    pub index: &'a NeighborIndex,
}

impl<'a> Neighborhood<'a> {
    pub fn new(cfg: &'a Configuration, index: &'a NeighborIndex) -> Self {
        Self { cfg, index }
    }
}

impl NeighborLookup for Neighborhood<'_> {
    fn dim(&self) -> usize {
        self.cfg.carrier().dim()
    }

    fn for_each_within(&self, center: &[f64], radius: f64, visit: &mut dyn FnMut(&MarkedPoint)) {
        self.index
            .for_each_within_indexed(self.cfg, center, radius, &mut |_, p| visit(p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn erosion_identity_and_shrink() {
        let w = Window::square(3.0).unwrap();
        let same = erode(&w, 0.0).unwrap();
        assert_eq!(same, w);
        let shrunk = erode(&w, 0.5).unwrap();
        assert_eq!(shrunk.lower(), &[0.5, 0.5]);
        assert_eq!(shrunk.upper(), &[2.5, 2.5]);
        assert!(shrunk.volume() < w.volume());
    }

    #[test]
    fn erosion_of_collared_window_recovers_core() {
        let w = Window::rect(-0.05, 3.05, -0.05, 3.05).unwrap();
        let e = erode(&w, 0.05).unwrap();
        for i in 0..2 {
            assert!((e.lower()[i] - 0.0).abs() < 1e-12);
            assert!((e.upper()[i] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn erosion_past_half_side_is_empty() {
        let w = Window::square(1.0).unwrap();
        assert!(matches!(
            erode(&w, 0.5),
            Err(Error::EmptyWindow { axis: 0, .. })
        ));
        assert!(erode(&w, 0.49).is_ok());
    }

    #[test]
    fn degenerate_window_rejected() {
        assert!(Window::rect(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Window::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn duplicate_positions_rejected() {
        let w = Window::square(1.0).unwrap();
        let pts = vec![MarkedPoint::planar(0.5, 0.5), MarkedPoint::planar(0.5, 0.5)];
        assert!(matches!(
            Configuration::new(pts, w),
            Err(Error::InvalidConfiguration(_))
        ));
    }

    #[test]
    fn points_outside_carrier_rejected() {
        let w = Window::square(1.0).unwrap();
        let pts = vec![MarkedPoint::planar(1.5, 0.5)];
        assert!(Configuration::new(pts, w).is_err());
    }

    #[test]
    fn count_in_ball_empty_and_single() {
        let w = Window::square(1.0).unwrap();
        let empty = Configuration::empty(w.clone());
        assert_eq!(count_in_ball(&empty, &[0.3, 0.3], 0.2, None), 0);

        let cfg = Configuration::new(vec![MarkedPoint::planar(0.0, 0.0)], w).unwrap();
        assert_eq!(count_in_ball(&cfg, &[0.03, 0.0], 0.05, None), 1);
        assert_eq!(count_in_ball(&cfg, &[0.06, 0.0], 0.05, None), 0);
        // boundary of the closed ball counts
        assert_eq!(count_in_ball(&cfg, &[0.05, 0.0], 0.05, None), 1);
    }

    #[test]
    fn count_in_ball_respects_exclusion() {
        let w = Window::square(1.0).unwrap();
        let p = MarkedPoint::planar(0.5, 0.5);
        let q = MarkedPoint::planar(0.52, 0.5);
        let cfg = Configuration::new(vec![p.clone(), q], w).unwrap();
        assert_eq!(count_in_ball(&cfg, &[0.5, 0.5], 0.1, None), 2);
        assert_eq!(count_in_ball(&cfg, &[0.5, 0.5], 0.1, Some(&p)), 1);
    }

    fn arbitrary_pattern() -> impl Strategy<Value = (Configuration, Vec<f64>, f64)> {
        (
            prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..200),
            (0.0f64..1.0, 0.0f64..1.0),
            0.001f64..0.6,
        )
            .prop_map(|(raw, (qx, qy), r)| {
                let w = Window::square(1.0).unwrap();
                let mut pts: Vec<MarkedPoint> =
                    raw.into_iter().map(|(x, y)| MarkedPoint::planar(x, y)).collect();
                // drop exact duplicates instead of failing the case
                pts.sort_by(|a, b| {
                    a.position
                        .iter()
                        .map(|c| c.to_bits())
                        .cmp(b.position.iter().map(|c| c.to_bits()))
                });
                pts.dedup_by(|a, b| same_position(&a.position, &b.position));
                (
                    Configuration::new(pts, w).unwrap(),
                    vec![qx, qy],
                    r,
                )
            })
    }

    proptest! {
        #[test]
        fn index_matches_linear_scan((cfg, q, r) in arbitrary_pattern()) {
            let idx = NeighborIndex::build(&cfg, r);
            let nb = Neighborhood::new(&cfg, &idx);
            // set equality, not just counts
            let mut via_index: Vec<usize> = Vec::new();
            idx.for_each_within_indexed(&cfg, &q, r, &mut |i, _| via_index.push(i));
            via_index.sort_unstable();
            let r2 = r * r;
            let brute: Vec<usize> = cfg
                .points()
                .iter()
                .enumerate()
                .filter(|(_, p)| squared_distance(&p.position, &q) <= r2)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(via_index, brute);
            prop_assert_eq!(nb.count_within(&q, r, None), count_in_ball(&cfg, &q, r, None));
        }

        #[test]
        fn index_matches_scan_for_radius_above_build_radius((cfg, q, r) in arbitrary_pattern()) {
            let idx = NeighborIndex::build(&cfg, r);
            let nb = Neighborhood::new(&cfg, &idx);
            let big = 2.5 * r;
            prop_assert_eq!(nb.count_within(&q, big, None), count_in_ball(&cfg, &q, big, None));
        }

        #[test]
        fn restrict_is_idempotent((cfg, _, _) in arbitrary_pattern()) {
            let inner = Window::rect(0.2, 0.8, 0.1, 0.9).unwrap();
            let once = cfg.restrict(&inner);
            let twice = once.restrict(&inner);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn erosion_never_grows_volume(delta in 0.0f64..0.49) {
            let w = Window::square(1.0).unwrap();
            let e = erode(&w, delta).unwrap();
            prop_assert!(e.volume() <= w.volume());
            if delta == 0.0 {
                prop_assert_eq!(e.volume(), w.volume());
            } else {
                prop_assert!(e.volume() < w.volume());
            }
        }
    }

    #[test]
    fn count_in_ball_matches_brute_force_on_uniform_cloud() {
        // 50 deterministic pseudo-uniform points
        let w = Window::square(1.0).unwrap();
        let mut pts = Vec::new();
        let mut state = 88172645463325252u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            pts.push(MarkedPoint::planar(next(), next()));
        }
        let cfg = Configuration::new(pts, w).unwrap();
        let n = count_in_ball(&cfg, &[0.5, 0.5], 0.2, None);
        let brute = cfg
            .points()
            .iter()
            .filter(|p| squared_distance(&p.position, &[0.5, 0.5]) <= 0.04)
            .count();
        assert_eq!(n, brute);
    }
}
