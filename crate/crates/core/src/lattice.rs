//! Lattice geometry: points, l-infinity boxes, finite windows and
//! iteration over sub-boxes and lower-dimensional slices.
//!
//! A [`Window`] is the finite stand-in for the infinite lattice: `wrap = true`
//! gives a torus (used by samplers, where stationarity matters), `wrap = false`
//! gives a hard-boundary box centered at the origin (used by the geometric
//! analyses inside a ball around 0).

use crate::error::{usage, Result};

/// Hard cap on window site counts so rasters stay addressable.
pub const MAX_SITES: u128 = 1 << 31;

/// A lattice point with signed integer coordinates.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point(pub Vec<i64>);

impl Point {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn origin(dim: usize) -> Point {
        Point(vec![0; dim])
    }

    /// k-th positive unit vector.
    pub fn unit(dim: usize, axis: usize) -> Point {
        let mut c = vec![0; dim];
        c[axis] = 1;
        Point(c)
    }

    pub fn add(&self, other: &Point) -> Point {
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, k: i64) -> Point {
        Point(self.0.iter().map(|a| a * k).collect())
    }
}

impl std::fmt::Debug for Point {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({})", join_i64(&self.0))
    }
}

pub(crate) fn join_i64(v: &[i64]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// l1 distance in the free lattice (no wrap).
pub fn l1_dist(a: &Point, b: &Point) -> Result<u64> {
    if a.dim() != b.dim() {
        return Err(usage(format!(
            "l1_dist: dimension mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| x.abs_diff(*y))
        .sum())
}

/// l-infinity distance in the free lattice.
pub fn linf_dist(a: &Point, b: &Point) -> Result<u64> {
    if a.dim() != b.dim() {
        return Err(usage("linf_dist: dimension mismatch"));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0))
}

/// An axis-aligned cube of lattice points: `corner + [0, side)^d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeBox {
    pub corner: Point,
    pub side: i64,
}

impl LatticeBox {
    pub fn new(corner: Point, side: i64) -> Result<LatticeBox> {
        if side < 1 {
            return Err(usage(format!("box side must be >= 1, got {side}")));
        }
        Ok(LatticeBox { corner, side })
    }

    pub fn dim(&self) -> usize {
        self.corner.dim()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.0.iter()
            .zip(&self.corner.0)
            .all(|(x, c)| *x >= *c && *x < *c + self.side)
    }

    pub fn point_count(&self) -> u128 {
        (self.side as u128).pow(self.dim() as u32)
    }

    /// Iterates all lattice points of the box in lexicographic order
    /// (axis 0 most significant).
    pub fn points(&self) -> BoxPoints {
        BoxPoints {
            corner: self.corner.clone(),
            side: self.side,
            cursor: vec![0; self.dim()],
            done: self.side < 1,
        }
    }

    /// Disjoint tiles of side `step` covering the box. `step` must divide
    /// the side (there is no clipping mode).
    pub fn subboxes(&self, step: i64) -> Result<SubBoxes> {
        if step < 1 || self.side % step != 0 {
            return Err(usage(format!(
                "subboxes: step {step} does not divide side {}",
                self.side
            )));
        }
        let per_axis = self.side / step;
        Ok(SubBoxes {
            corner: self.corner.clone(),
            step,
            per_axis,
            cursor: vec![0; self.dim()],
            done: false,
        })
    }
}

/// Closed l-infinity ball `B(x, r)`: radius `floor(r)`, `(2 floor(r) + 1)^d`
/// points.
pub fn linf_ball(center: &Point, radius: f64) -> Result<LatticeBox> {
    if !(radius >= 0.0) {
        return Err(usage(format!("linf_ball: radius must be >= 0, got {radius}")));
    }
    let r = radius.floor() as i64;
    LatticeBox::new(
        Point(center.0.iter().map(|c| c - r).collect()),
        2 * r + 1,
    )
}

pub struct BoxPoints {
    corner: Point,
    side: i64,
    cursor: Vec<i64>,
    done: bool,
}

impl Iterator for BoxPoints {
    type Item = Point;

    fn next(&mut self) -> Option<Point> {
        if self.done {
            return None;
        }
        let p = Point(
            self.cursor
                .iter()
                .zip(&self.corner.0)
                .map(|(o, c)| c + o)
                .collect(),
        );
        // advance odometer, last axis fastest
        for axis in (0..self.cursor.len()).rev() {
            self.cursor[axis] += 1;
            if self.cursor[axis] < self.side {
                return Some(p);
            }
            self.cursor[axis] = 0;
        }
        self.done = true;
        Some(p)
    }
}

pub struct SubBoxes {
    corner: Point,
    step: i64,
    per_axis: i64,
    cursor: Vec<i64>,
    done: bool,
}

impl Iterator for SubBoxes {
    type Item = LatticeBox;

    fn next(&mut self) -> Option<LatticeBox> {
        if self.done {
            return None;
        }
        let b = LatticeBox {
            corner: Point(
                self.cursor
                    .iter()
                    .zip(&self.corner.0)
                    .map(|(o, c)| c + o * self.step)
                    .collect(),
            ),
            side: self.step,
        };
        for axis in (0..self.cursor.len()).rev() {
            self.cursor[axis] += 1;
            if self.cursor[axis] < self.per_axis {
                return Some(b);
            }
            self.cursor[axis] = 0;
        }
        self.done = true;
        Some(b)
    }
}

/// A `j`-dimensional axis-parallel slice through `anchor`, clipped to
/// `bounds`: the points of `bounds` that agree with `anchor` on every axis
/// not in `axes`.
#[derive(Clone, Debug)]
pub struct Slice {
    pub anchor: Point,
    pub axes: Vec<usize>,
    pub bounds: LatticeBox,
}

impl Slice {
    pub fn new(anchor: Point, axes: Vec<usize>, bounds: LatticeBox) -> Result<Slice> {
        let d = anchor.dim();
        if axes.len() < 2 || axes.len() > d {
            return Err(usage("slice needs between 2 and d distinct axes"));
        }
        let mut sorted = axes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || *sorted.last().unwrap() >= d {
            return Err(usage("slice axes must be distinct coordinate directions"));
        }
        Ok(Slice {
            anchor,
            axes: sorted,
            bounds,
        })
    }

    pub fn contains(&self, p: &Point) -> bool {
        if !self.bounds.contains(p) {
            return false;
        }
        (0..p.dim())
            .filter(|axis| !self.axes.contains(axis))
            .all(|axis| p.0[axis] == self.anchor.0[axis])
    }
}

/// Finite d-dimensional window of side `N`, either a torus (`wrap`) or a
/// hard-boundary box. Canonical coordinates run over `[lo, lo + N)` with
/// `lo = -floor(N/2)`, so the origin is always an interior-ish site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    side: i64,
    dim: usize,
    wrap: bool,
    lo: i64,
    strides: Vec<usize>,
}

impl Window {
    pub fn new(side: i64, dim: usize, wrap: bool) -> Result<Window> {
        if side < 1 {
            return Err(usage(format!("window side must be >= 1, got {side}")));
        }
        if dim < 2 {
            return Err(usage(format!("dimension must be >= 2, got {dim}")));
        }
        let count = (side as u128).pow(dim as u32);
        if count > MAX_SITES {
            return Err(usage(format!(
                "window has {count} sites, exceeding the {MAX_SITES} cap"
            )));
        }
        let mut strides = vec![0usize; dim];
        let mut s = 1usize;
        for axis in (0..dim).rev() {
            strides[axis] = s;
            s *= side as usize;
        }
        Ok(Window {
            side,
            dim,
            wrap,
            lo: -(side / 2),
            strides,
        })
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn wrap(&self) -> bool {
        self.wrap
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.side - 1
    }

    pub fn site_count(&self) -> usize {
        (self.side as usize).pow(self.dim as u32)
    }

    /// The window as a box of canonical coordinates.
    pub fn bounding_box(&self) -> LatticeBox {
        LatticeBox {
            corner: Point(vec![self.lo; self.dim]),
            side: self.side,
        }
    }

    /// True if the point addresses a site: always on a torus, inside the
    /// canonical range on a hard window.
    pub fn contains(&self, p: &Point) -> bool {
        self.wrap
            || p.0
                .iter()
                .all(|&c| c >= self.lo && c < self.lo + self.side)
    }

    /// Canonical representative of a point (reduced mod N on a torus).
    pub fn reduce(&self, p: &Point) -> Point {
        if !self.wrap {
            return p.clone();
        }
        Point(
            p.0.iter()
                .map(|&c| (c - self.lo).rem_euclid(self.side) + self.lo)
                .collect(),
        )
    }

    /// Raster index of a point, or None when outside a hard window.
    pub fn index(&self, p: &Point) -> Option<usize> {
        debug_assert_eq!(p.dim(), self.dim);
        let mut idx = 0usize;
        for (axis, &c) in p.0.iter().enumerate() {
            let off = if self.wrap {
                (c - self.lo).rem_euclid(self.side)
            } else {
                let off = c - self.lo;
                if off < 0 || off >= self.side {
                    return None;
                }
                off
            };
            idx += off as usize * self.strides[axis];
        }
        Some(idx)
    }

    /// Raster contributions of `len` consecutive coordinates starting at
    /// `start` along `axis`: the site index of a point is the sum of its
    /// per-axis contributions. None when a hard window does not contain the
    /// whole range. Lets box loops avoid per-point reductions.
    pub fn axis_offsets(&self, axis: usize, start: i64, len: i64) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(len as usize);
        for o in 0..len {
            let c = start + o;
            let off = if self.wrap {
                (c - self.lo).rem_euclid(self.side)
            } else {
                let q = c - self.lo;
                if q < 0 || q >= self.side {
                    return None;
                }
                q
            };
            out.push(off as usize * self.strides[axis]);
        }
        Some(out)
    }

    /// Canonical coordinates of a raster index.
    pub fn decode(&self, idx: usize) -> Point {
        let mut coords = vec![0i64; self.dim];
        let mut rest = idx;
        for axis in 0..self.dim {
            coords[axis] = (rest / self.strides[axis]) as i64 + self.lo;
            rest %= self.strides[axis];
        }
        Point(coords)
    }

    /// Neighbor index one step along `axis` (`dir` is +1 or -1), or None
    /// when the step leaves a hard window.
    #[inline]
    pub fn neighbor_index(&self, idx: usize, axis: usize, dir: i64) -> Option<usize> {
        let stride = self.strides[axis];
        let pos = (idx / stride) % self.side as usize;
        if dir > 0 {
            if pos + 1 < self.side as usize {
                Some(idx + stride)
            } else if self.wrap {
                Some(idx + stride - self.side as usize * stride)
            } else {
                None
            }
        } else if pos > 0 {
            Some(idx - stride)
        } else if self.wrap {
            Some(idx + (self.side as usize - 1) * stride)
        } else {
            None
        }
    }

    /// Shortest l1 distance respecting wrap.
    pub fn l1_dist(&self, a: &Point, b: &Point) -> Result<u64> {
        if a.dim() != b.dim() || a.dim() != self.dim {
            return Err(usage("l1_dist: dimension mismatch"));
        }
        if !self.wrap {
            return l1_dist(a, b);
        }
        Ok(a.0
            .iter()
            .zip(&b.0)
            .map(|(x, y)| {
                let d = (x - y).rem_euclid(self.side) as u64;
                d.min(self.side as u64 - d)
            })
            .sum())
    }

    /// Shortest l-infinity distance respecting wrap.
    pub fn linf_dist(&self, a: &Point, b: &Point) -> Result<u64> {
        if a.dim() != b.dim() || a.dim() != self.dim {
            return Err(usage("linf_dist: dimension mismatch"));
        }
        if !self.wrap {
            return linf_dist(a, b);
        }
        Ok(a.0
            .iter()
            .zip(&b.0)
            .map(|(x, y)| {
                let d = (x - y).rem_euclid(self.side) as u64;
                d.min(self.side as u64 - d)
            })
            .max()
            .unwrap_or(0))
    }

    /// Requires that the box (in canonical coordinates) lies inside a hard
    /// window; on a torus the box may cover each site at most once.
    pub fn require_box(&self, b: &LatticeBox, what: &str) -> Result<()> {
        if self.wrap {
            if b.side > self.side {
                return Err(usage(format!(
                    "{what}: box side {} exceeds torus side {}",
                    b.side, self.side
                )));
            }
            return Ok(());
        }
        let inside = b.corner.0.iter().all(|&c| c >= self.lo)
            && b.corner.0.iter().all(|&c| c + b.side - 1 <= self.hi());
        if inside {
            Ok(())
        } else {
            Err(usage(format!(
                "{what}: box corner {:?} side {} leaves the window [{}, {}]^{}",
                b.corner,
                b.side,
                self.lo,
                self.hi(),
                self.dim
            )))
        }
    }
}
