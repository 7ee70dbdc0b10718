//! Multi-scale renormalization: scale ladders, the level-0 box events, the
//! recursive k-good classification, the levels s and r, event H, and the
//! perforated fat set of good boxes with its contract verifier.
//!
//! Geometry: level-k boxes are `x + [0, L_k)^d` with corners on `L_k Z^d`.
//! A level-0 box is good when both box events hold: the increasing event
//! (each of the 2^d sub-boxes of the doubled box carries a connected piece
//! of `S_{L0}` with at least `(3/4) eta L0^d` sites, all connected inside
//! the doubled box) and the decreasing event (no sub-box carries more than
//! `(5/4) eta L0^d` sites of `S_{L0}`). A level-k box is bad exactly when it
//! contains two (k-1)-bad sub-boxes at l-infinity distance at least
//! `r_{k-1} L_{k-1}`, separately for the increasing and decreasing
//! recursions; a box is bad when either recursion says so.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;

use crate::cluster::{self, label_components};
use crate::error::{contract, parameter, usage, Error, Result};
use crate::lattice::{LatticeBox, Point, Window};
use crate::rng::{stream, substream};
use crate::sampler::{sample, Config, ModelSpec};

// --- scale ladder -----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LevelScales {
    pub l: i64,
    pub r: i64,
    pub big_l: i64,
}

/// The sequences (l_k, r_k, L_k). Canonical ladders follow the doubling
/// recursion exactly; override ladders carry explicit per-level values for
/// illustration-style instances and are flagged non-canonical.
#[derive(Clone, Debug)]
pub struct ScaleLadder {
    pub theta_sc: u32,
    levels: Vec<LevelScales>,
    pub truncated: bool,
    pub canonical: bool,
}

impl ScaleLadder {
    pub fn max_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn l(&self, k: u32) -> i64 {
        self.levels[k as usize].l
    }

    pub fn r(&self, k: u32) -> i64 {
        self.levels[k as usize].r
    }

    pub fn big_l(&self, k: u32) -> i64 {
        self.levels[k as usize].big_l
    }

    pub fn levels(&self) -> &[LevelScales] {
        &self.levels
    }

    pub fn ratio(&self) -> f64 {
        self.levels[0].r as f64 / self.levels[0].l as f64
    }

    /// Finite deletion-density product over construction levels `0..depth`:
    /// `prod_i (1 - 3 (r_i/l_i)^j)`.
    pub fn finite_density_bound(&self, j: u32, depth: u32) -> f64 {
        let mut prod = 1.0;
        for i in 0..depth.min(self.max_level() + 1) {
            let q = self.r(i) as f64 / self.l(i) as f64;
            let factor = 1.0 - 3.0 * q.powi(j as i32);
            if factor <= 0.0 {
                return 0.0;
            }
            prod *= factor;
        }
        prod
    }

    /// Density lower bound used by the fat-set verifier: the infinite
    /// product `f_j` for canonical ladders (whose finite product dominates
    /// it), the actual finite product for override ladders.
    pub fn density_bound(&self, j: u32, depth: u32) -> f64 {
        if self.canonical {
            compute_f_j(self.ratio(), j, self.theta_sc).unwrap_or(0.0)
        } else {
            self.finite_density_bound(j, depth)
        }
    }
}

/// Builds the canonical ladder `l_k = l0 4^{k^theta}`, `r_k = r0 2^{k^theta}`,
/// `L_k = l_{k-1} L_{k-1}` with exact integer arithmetic. Overflow truncates
/// the ladder and sets the flag.
pub fn build_scale_ladder(
    l0: i64,
    r0: i64,
    big_l0: i64,
    theta_sc: u32,
    k_max: u32,
) -> Result<ScaleLadder> {
    if l0 < 1 || r0 < 1 || big_l0 < 1 {
        return Err(parameter("ladder parameters must be positive integers"));
    }
    if theta_sc < 1 {
        return Err(parameter("theta_sc must be a positive integer"));
    }
    if 4 * r0 >= l0 {
        return Err(parameter(format!(
            "ladder requires 4 r0 < l0, got r0={r0}, l0={l0}"
        )));
    }
    let mut levels = vec![LevelScales {
        l: l0,
        r: r0,
        big_l: big_l0,
    }];
    let mut truncated = false;
    for k in 1..=k_max {
        let e = (k as u64).checked_pow(theta_sc).unwrap_or(u64::MAX);
        let scales = if e <= 30 {
            l0.checked_mul(1i64 << (2 * e))
                .zip(r0.checked_mul(1i64 << e))
        } else {
            None
        };
        let prev = levels[(k - 1) as usize];
        match (scales, prev.l.checked_mul(prev.big_l)) {
            (Some((l, r)), Some(big_l)) => levels.push(LevelScales { l, r, big_l }),
            _ => {
                truncated = true;
                break;
            }
        }
    }
    Ok(ScaleLadder {
        theta_sc,
        levels,
        truncated,
        canonical: true,
    })
}

/// Explicit per-level (l_k, r_k) values for illustration-style ladders that
/// do not follow the canonical recursion. Requires `4 r_k <= l_k` at every
/// level (non-strict, admitting published figure parameters).
pub fn override_scale_ladder(
    pairs: &[(i64, i64)],
    big_l0: i64,
    theta_sc: u32,
) -> Result<ScaleLadder> {
    if pairs.is_empty() || big_l0 < 1 {
        return Err(parameter("override ladder needs at least level 0 and L0 >= 1"));
    }
    let mut levels = Vec::with_capacity(pairs.len());
    let mut big_l = big_l0;
    for (k, &(l, r)) in pairs.iter().enumerate() {
        if l < 1 || r < 1 {
            return Err(parameter("override ladder entries must be positive"));
        }
        if 4 * r > l {
            return Err(parameter(format!(
                "override ladder level {k} violates 4 r_k <= l_k (l={l}, r={r})"
            )));
        }
        if k > 0 {
            big_l = pairs[k - 1]
                .0
                .checked_mul(big_l)
                .ok_or_else(|| Error::Overflow(format!("L_{k} overflows")))?;
        }
        levels.push(LevelScales { l, r, big_l });
    }
    Ok(ScaleLadder {
        theta_sc,
        levels,
        truncated: false,
        canonical: false,
    })
}

/// The deletion-density product `f_j(q) = prod_{i>=0} (1 - 3 (q 2^{-i^theta})^j)`,
/// truncated once the tail factor exceeds 1 - 1e-12. Returns 0 if any factor
/// is non-positive.
pub fn compute_f_j(ratio: f64, j: u32, theta_sc: u32) -> Result<f64> {
    if !(ratio >= 0.0) {
        return Err(parameter("f_j requires ratio >= 0"));
    }
    if j < 2 {
        return Err(parameter("f_j requires j >= 2"));
    }
    if theta_sc < 1 {
        return Err(parameter("f_j requires theta_sc >= 1"));
    }
    let mut prod = 1.0f64;
    for i in 0..10_000u64 {
        let e = (i as f64).powi(theta_sc as i32);
        let q = ratio * (-e * std::f64::consts::LN_2).exp();
        let factor = 1.0 - 3.0 * q.powi(j as i32);
        if factor <= 0.0 {
            return Ok(0.0);
        }
        prod *= factor;
        if factor > 1.0 - 1e-12 {
            break;
        }
    }
    Ok(prod)
}

// --- level-0 events ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventVariant {
    /// The increasing event with clauses (a) and (b).
    Standard,
    /// Adds the line-segment clause (c): the special component of the base
    /// tile must meet the central-third axis segments.
    LineSegments,
}

/// Shared state for evaluating the level-0 events over many boxes of one
/// configuration: the global `S_{L0}` mask plus per-tile machinery.
pub struct Level0Evaluator<'a> {
    cfg: &'a Config,
    big_l0: i64,
    eta: f64,
    variant: EventVariant,
    s_l0: Vec<bool>,
}

struct TileInfo {
    has_big: bool,
    count_ok: bool,
    line_ok: bool,
    /// Tile-local linear offsets of the cells of all big components.
    big_cells: Vec<u16>,
}

impl<'a> Level0Evaluator<'a> {
    pub fn new(cfg: &'a Config, big_l0: i64, eta: f64, variant: EventVariant) -> Result<Self> {
        if big_l0 < 1 {
            return Err(parameter("L0 must be >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(parameter(format!("eta must be in [0,1], got {eta}")));
        }
        let labeling = label_components(cfg);
        let s_l0 = cluster::s_r_mask(cfg, &labeling, big_l0 as f64);
        Ok(Level0Evaluator {
            cfg,
            big_l0,
            eta,
            variant,
            s_l0,
        })
    }

    fn check_box_fits(&self, x: &Point) -> Result<()> {
        let w = self.cfg.window();
        if x.0.iter().any(|c| c % self.big_l0 != 0) {
            return Err(usage(format!(
                "event box corner {x:?} is not on the L0 = {} grid",
                self.big_l0
            )));
        }
        let doubled = LatticeBox::new(x.clone(), 2 * self.big_l0)?;
        w.require_box(&doubled, "level-0 event")
    }

    fn tile_info(&self, corner: &Point) -> TileInfo {
        let w = self.cfg.window();
        let d = w.dim();
        let side = self.big_l0 as usize;
        let cells = side.pow(d as u32);
        let threshold_a = 0.75 * self.eta * cells as f64;
        let threshold_b = 1.25 * self.eta * cells as f64;
        let strides: Vec<usize> = (0..d).map(|a| side.pow((d - 1 - a) as u32)).collect();

        let offs: Vec<Vec<usize>> = (0..d)
            .map(|a| {
                w.axis_offsets(a, corner.0[a], self.big_l0)
                    .expect("tile fits the window by the box precondition")
            })
            .collect();
        let mut occ = vec![false; cells];
        let mut count = 0usize;
        for (local, o) in occ.iter_mut().enumerate() {
            let mut rest = local;
            let mut idx = 0usize;
            for a in (0..d).rev() {
                idx += offs[a][rest % side];
                rest /= side;
            }
            if self.s_l0[idx] {
                *o = true;
                count += 1;
            }
        }

        // components within the tile under tile-local adjacency
        let mut comp = vec![u16::MAX; cells];
        let mut comp_sizes: Vec<usize> = Vec::new();
        let mut queue: VecDeque<usize> = VecDeque::new();
        for start in 0..cells {
            if !occ[start] || comp[start] != u16::MAX {
                continue;
            }
            let id = comp_sizes.len() as u16;
            comp[start] = id;
            queue.push_back(start);
            let mut size = 0usize;
            while let Some(cur) = queue.pop_front() {
                size += 1;
                for a in 0..d {
                    let pos = (cur / strides[a]) % side;
                    if pos + 1 < side {
                        let nb = cur + strides[a];
                        if occ[nb] && comp[nb] == u16::MAX {
                            comp[nb] = id;
                            queue.push_back(nb);
                        }
                    }
                    if pos > 0 {
                        let nb = cur - strides[a];
                        if occ[nb] && comp[nb] == u16::MAX {
                            comp[nb] = id;
                            queue.push_back(nb);
                        }
                    }
                }
            }
            comp_sizes.push(size);
        }

        let big: Vec<bool> = comp_sizes.iter().map(|&s| s as f64 >= threshold_a).collect();
        let has_big = big.iter().any(|&b| b);
        let big_cells: Vec<u16> = (0..cells)
            .filter(|&c| comp[c] != u16::MAX && big[comp[c] as usize])
            .map(|c| c as u16)
            .collect();

        let line_ok = if self.variant == EventVariant::LineSegments {
            // special component = largest, earliest id on ties
            match comp_sizes
                .iter()
                .enumerate()
                .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
                .map(|(i, _)| i as u16)
            {
                Some(special) => {
                    let half = (self.big_l0 / 2) as usize;
                    let third_lo = (self.big_l0 / 3) as usize;
                    let third_hi = (2 * self.big_l0 / 3) as usize;
                    (third_lo..third_hi).contains(&half)
                        && (0..d).all(|axis| {
                            (third_lo..third_hi).any(|t| {
                                let mut local = 0usize;
                                for a in 0..d {
                                    local += if a == axis { t } else { half } * strides[a];
                                }
                                comp[local] == special
                            })
                        })
                }
                None => false,
            }
        } else {
            true
        };

        TileInfo {
            has_big,
            count_ok: count as f64 <= threshold_b,
            line_ok,
            big_cells,
        }
    }

    /// Evaluates (increasing event, decreasing event) for the box at `x`.
    pub fn eval(&self, x: &Point) -> Result<(bool, bool)> {
        self.check_box_fits(x)?;
        let d = self.cfg.window().dim();
        let tiles: Vec<TileInfo> = (0..(1usize << d))
            .map(|e| {
                let corner = Point(
                    (0..d)
                        .map(|a| x.0[a] + ((e >> a) & 1) as i64 * self.big_l0)
                        .collect(),
                );
                self.tile_info(&corner)
            })
            .collect();
        let refs: Vec<&TileInfo> = tiles.iter().collect();
        self.combine(x, &refs)
    }

    /// Combines precomputed per-tile information into the two events for
    /// the box at `x` (the order of `tiles` follows the e-bitmask order).
    fn combine(&self, x: &Point, tiles: &[&TileInfo]) -> Result<(bool, bool)> {
        let w = self.cfg.window();
        let d = w.dim();
        let side = self.big_l0 as usize;

        let mut b_ok = true;
        let mut a_possible = true;
        for (e, info) in tiles.iter().enumerate() {
            if !info.count_ok {
                b_ok = false;
            }
            if !info.has_big || (e == 0 && !info.line_ok) {
                a_possible = false;
            }
        }
        if !a_possible {
            return Ok((false, b_ok));
        }

        // clause (b): all big components connected within S ∩ doubled box
        let bside = 2 * side;
        let bcells = bside.pow(d as u32);
        let bstrides: Vec<usize> = (0..d).map(|a| bside.pow((d - 1 - a) as u32)).collect();
        let offs: Vec<Vec<usize>> = (0..d)
            .map(|a| {
                w.axis_offsets(a, x.0[a], 2 * self.big_l0)
                    .expect("doubled box fits the window by the precondition")
            })
            .collect();
        let mut occ = vec![false; bcells];
        for (local, o) in occ.iter_mut().enumerate() {
            let mut rest = local;
            let mut idx = 0usize;
            for a in (0..d).rev() {
                idx += offs[a][rest % bside];
                rest /= bside;
            }
            *o = self.cfg.occupied_index(idx);
        }

        // tile-local linear offset -> doubled-box-local linear offset
        let to_box_local = |e: usize, tile_local: u16| -> usize {
            let mut local = 0usize;
            let mut rest = tile_local as usize;
            for a in (0..d).rev() {
                let off = rest % side;
                rest /= side;
                local += (((e >> a) & 1) * side + off) * bstrides[a];
            }
            local
        };

        let mut visited = vec![false; bcells];
        let mut queue: VecDeque<usize> = VecDeque::new();
        let seed = to_box_local(0, tiles[0].big_cells[0]);
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(cur) = queue.pop_front() {
            for a in 0..d {
                let pos = (cur / bstrides[a]) % bside;
                if pos + 1 < bside {
                    let nb = cur + bstrides[a];
                    if occ[nb] && !visited[nb] {
                        visited[nb] = true;
                        queue.push_back(nb);
                    }
                }
                if pos > 0 {
                    let nb = cur - bstrides[a];
                    if occ[nb] && !visited[nb] {
                        visited[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
        }
        let a_ok = tiles
            .iter()
            .enumerate()
            .all(|(e, info)| info.big_cells.iter().all(|&c| visited[to_box_local(e, c)]));
        Ok((a_ok, b_ok))
    }
}

/// The increasing box event at a single corner (clauses (a) and (b)).
pub fn event_a(cfg: &Config, x: &Point, big_l0: i64, eta: f64) -> Result<bool> {
    Ok(Level0Evaluator::new(cfg, big_l0, eta, EventVariant::Standard)?
        .eval(x)?
        .0)
}

/// The decreasing box event at a single corner.
pub fn event_b(cfg: &Config, x: &Point, big_l0: i64, eta: f64) -> Result<bool> {
    Ok(Level0Evaluator::new(cfg, big_l0, eta, EventVariant::Standard)?
        .eval(x)?
        .1)
}

/// The increasing event with the extra line-segment clause (c).
pub fn event_a_line(cfg: &Config, x: &Point, big_l0: i64, eta: f64) -> Result<bool> {
    Ok(Level0Evaluator::new(cfg, big_l0, eta, EventVariant::LineSegments)?
        .eval(x)?
        .0)
}

// --- goodness field ---------------------------------------------------------

#[derive(Clone, Debug)]
pub enum LevelRegion {
    /// Synthetic fields: every grid corner is classified (default good).
    All,
    /// Inclusive componentwise corner bounds, corners on the L_k grid.
    Grid { lo: Vec<i64>, hi: Vec<i64> },
}

#[derive(Clone, Debug)]
pub struct BadWitness {
    pub a_pair: Option<(Point, Point)>,
    pub b_pair: Option<(Point, Point)>,
}

#[derive(Clone, Debug, Default)]
pub struct LevelFlags {
    pub a_bad: BTreeSet<Point>,
    pub b_bad: BTreeSet<Point>,
    pub witnesses: BTreeMap<Point, BadWitness>,
}

/// Per-level boolean lattice of k-good flags plus bad-pair witnesses.
pub struct GoodnessField {
    dim: usize,
    big_ls: Vec<i64>,
    levels: Vec<LevelFlags>,
    regions: Vec<LevelRegion>,
    /// True when classified on a wrapped window (box geometry is torus-local).
    pub wrapped: bool,
}

impl GoodnessField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_max(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn big_l(&self, k: u32) -> i64 {
        self.big_ls[k as usize]
    }

    pub fn flags(&self, k: u32) -> &LevelFlags {
        &self.levels[k as usize]
    }

    pub fn region(&self, k: u32) -> &LevelRegion {
        &self.regions[k as usize]
    }

    fn in_region(&self, k: u32, corner: &Point) -> bool {
        match &self.regions[k as usize] {
            LevelRegion::All => true,
            LevelRegion::Grid { lo, hi } => corner
                .0
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(c, (l, h))| c >= l && c <= h),
        }
    }

    fn check_query(&self, k: u32, corner: &Point) -> Result<()> {
        if k > self.k_max() {
            return Err(usage(format!(
                "level {k} beyond classified k_max {}",
                self.k_max()
            )));
        }
        let step = self.big_ls[k as usize];
        if corner.0.iter().any(|c| c % step != 0) {
            return Err(usage(format!(
                "corner {corner:?} is not on the L_{k} = {step} grid"
            )));
        }
        if !self.in_region(k, corner) {
            return Err(usage(format!(
                "corner {corner:?} is outside the classified region at level {k}"
            )));
        }
        Ok(())
    }

    pub fn is_bad_a(&self, k: u32, corner: &Point) -> Result<bool> {
        self.check_query(k, corner)?;
        Ok(self.levels[k as usize].a_bad.contains(corner))
    }

    pub fn is_bad_b(&self, k: u32, corner: &Point) -> Result<bool> {
        self.check_query(k, corner)?;
        Ok(self.levels[k as usize].b_bad.contains(corner))
    }

    /// k-bad = bad in either recursion.
    pub fn is_bad(&self, k: u32, corner: &Point) -> Result<bool> {
        Ok(self.is_bad_a(k, corner)? || self.is_bad_b(k, corner)?)
    }

    pub fn is_good(&self, k: u32, corner: &Point) -> Result<bool> {
        Ok(!self.is_bad(k, corner)?)
    }

    /// Synthetic field from explicit level-0 bad sets; upper levels derived
    /// by the recursion. Exercises the fat-set construction on hand-placed
    /// instances without sampling a configuration.
    pub fn synthetic(
        ladder: &ScaleLadder,
        k_max: u32,
        dim: usize,
        a_bad0: BTreeSet<Point>,
        b_bad0: BTreeSet<Point>,
    ) -> Result<GoodnessField> {
        if k_max > ladder.max_level() {
            return Err(usage("k_max exceeds the ladder's stored levels"));
        }
        let level0 = LevelFlags {
            a_bad: a_bad0,
            b_bad: b_bad0,
            witnesses: BTreeMap::new(),
        };
        let mut field = GoodnessField {
            dim,
            big_ls: (0..=k_max).map(|k| ladder.big_l(k)).collect(),
            levels: vec![level0],
            regions: (0..=k_max).map(|_| LevelRegion::All).collect(),
            wrapped: false,
        };
        derive_upper_levels(&mut field, ladder, k_max, None);
        Ok(field)
    }
}

/// Buckets bad child corners by their level-k parent and derives the level-k
/// flags for k = 1..=k_max.
fn derive_upper_levels(
    field: &mut GoodnessField,
    ladder: &ScaleLadder,
    k_max: u32,
    window: Option<&Window>,
) {
    for k in 1..=k_max {
        let step = ladder.big_l(k);
        let child_step = ladder.big_l(k - 1);
        let sep = ladder.r(k - 1) * child_step;
        let prev = field.levels[(k - 1) as usize].clone();
        let mut flags = LevelFlags::default();

        for (which, bads) in [(0u8, &prev.a_bad), (1u8, &prev.b_bad)] {
            let mut buckets: BTreeMap<Point, Vec<Point>> = BTreeMap::new();
            for child in bads {
                let parent = parent_corner(child, step, window);
                if field.in_region(k, &parent) {
                    buckets.entry(parent).or_default().push(child.clone());
                }
            }
            for (parent, children) in buckets {
                if children.len() < 2 {
                    continue;
                }
                let offsets: Vec<Vec<i64>> = children
                    .iter()
                    .map(|c| local_offsets(c, &parent, window))
                    .collect();
                let mut witness = None;
                'scan: for i in 0..children.len() {
                    for j in (i + 1)..children.len() {
                        let linf = offsets[i]
                            .iter()
                            .zip(&offsets[j])
                            .map(|(a, b)| (a - b).abs())
                            .max()
                            .unwrap_or(0);
                        if linf >= sep {
                            witness = Some((children[i].clone(), children[j].clone()));
                            break 'scan;
                        }
                    }
                }
                if let Some(pair) = witness {
                    let entry = flags
                        .witnesses
                        .entry(parent.clone())
                        .or_insert(BadWitness {
                            a_pair: None,
                            b_pair: None,
                        });
                    if which == 0 {
                        flags.a_bad.insert(parent.clone());
                        entry.a_pair = Some(pair);
                    } else {
                        flags.b_bad.insert(parent.clone());
                        entry.b_pair = Some(pair);
                    }
                }
            }
        }
        field.levels.push(flags);
    }
}

fn parent_corner(child: &Point, step: i64, window: Option<&Window>) -> Point {
    let raw = Point(child.0.iter().map(|&c| step * c.div_euclid(step)).collect());
    match window {
        Some(w) if w.wrap() => w.reduce(&raw),
        _ => raw,
    }
}

fn local_offsets(child: &Point, parent: &Point, window: Option<&Window>) -> Vec<i64> {
    match window {
        Some(w) if w.wrap() => child
            .0
            .iter()
            .zip(&parent.0)
            .map(|(c, p)| (c - p).rem_euclid(w.side()))
            .collect(),
        _ => child.0.iter().zip(&parent.0).map(|(c, p)| c - p).collect(),
    }
}

/// First multiple of `step` that is >= lo.
fn ceil_multiple(lo: i64, step: i64) -> i64 {
    step * lo.div_euclid(step) + if lo.rem_euclid(step) == 0 { 0 } else { step }
}

/// Classified corner grid of a window at every level: level-k corners whose
/// level-0 descendant events all fit the window.
fn window_regions(window: &Window, ladder: &ScaleLadder, k_max: u32) -> Result<Vec<LevelRegion>> {
    let d = window.dim();
    let l0 = ladder.big_l(0);
    let mut regions = Vec::with_capacity((k_max + 1) as usize);
    for k in 0..=k_max {
        let step = ladder.big_l(k);
        if window.wrap() {
            if window.side() % step != 0 {
                return Err(usage(format!(
                    "wrapped window side {} is not a multiple of L_{k} = {step}",
                    window.side()
                )));
            }
            let lo = ceil_multiple(window.lo(), step);
            regions.push(LevelRegion::Grid {
                lo: vec![lo; d],
                hi: vec![lo + window.side() - step; d],
            });
        } else {
            let lo = ceil_multiple(window.lo(), step);
            // corner m needs [m, m + L_k + L0) inside the window
            let hi = step * (window.hi() + 1 - step - l0).div_euclid(step);
            if hi < lo {
                return Err(usage(format!(
                    "window side {} cannot hold any level-{k} box (L_{k} = {step})",
                    window.side()
                )));
            }
            regions.push(LevelRegion::Grid {
                lo: vec![lo; d],
                hi: vec![hi; d],
            });
        }
    }
    Ok(regions)
}

fn grid_corners(lo: &[i64], hi: &[i64], step: i64) -> Vec<Point> {
    let d = lo.len();
    let mut out = Vec::new();
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return out;
    }
    let mut cursor: Vec<i64> = lo.to_vec();
    loop {
        out.push(Point(cursor.clone()));
        let mut axis = d;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            cursor[axis] += step;
            if cursor[axis] <= hi[axis] {
                break;
            }
            cursor[axis] = lo[axis];
        }
    }
}

/// Multiples of `step` covering [-reach, reach] componentwise.
fn centered_grid(reach: i64, step: i64, d: usize) -> Vec<Point> {
    let lo = ceil_multiple(-reach, step);
    let hi = step * reach.div_euclid(step);
    grid_corners(&vec![lo; d], &vec![hi; d], step)
}

/// Classifies every box of the window up to level `k_max`: level 0 from the
/// box events, level k >= 1 from the two bad-pair recursions.
pub fn classify_good(
    cfg: &Config,
    ladder: &ScaleLadder,
    eta: f64,
    k_max: u32,
    use_line_variant: bool,
) -> Result<GoodnessField> {
    if k_max > ladder.max_level() {
        return Err(usage(format!(
            "k_max = {k_max} exceeds the ladder's {} stored levels",
            ladder.max_level()
        )));
    }
    let window = cfg.window();
    let regions = window_regions(window, ladder, k_max)?;
    let variant = if use_line_variant {
        EventVariant::LineSegments
    } else {
        EventVariant::Standard
    };
    let evaluator = Level0Evaluator::new(cfg, ladder.big_l(0), eta, variant)?;

    let corners = match &regions[0] {
        LevelRegion::Grid { lo, hi } => grid_corners(lo, hi, ladder.big_l(0)),
        LevelRegion::All => unreachable!("window regions are always bounded"),
    };

    // every L0 tile serves up to 2^d boxes; compute each once
    let big_l0 = ladder.big_l(0);
    let d = window.dim();
    let tile_key = |p: &Point| -> Point {
        if window.wrap() {
            window.reduce(p)
        } else {
            p.clone()
        }
    };
    let mut tile_corners: BTreeSet<Point> = BTreeSet::new();
    for x in &corners {
        for e in 0..(1usize << d) {
            let corner = Point(
                (0..d)
                    .map(|a| x.0[a] + ((e >> a) & 1) as i64 * big_l0)
                    .collect(),
            );
            tile_corners.insert(tile_key(&corner));
        }
    }
    let tile_corners: Vec<Point> = tile_corners.into_iter().collect();
    let tile_infos: Vec<TileInfo> = tile_corners
        .par_iter()
        .map(|c| evaluator.tile_info(c))
        .collect();
    let tile_index: std::collections::HashMap<&Point, usize> = tile_corners
        .iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();

    let results: Vec<(bool, bool)> = corners
        .par_iter()
        .map(|x| {
            let refs: Vec<&TileInfo> = (0..(1usize << d))
                .map(|e| {
                    let corner = Point(
                        (0..d)
                            .map(|a| x.0[a] + ((e >> a) & 1) as i64 * big_l0)
                            .collect(),
                    );
                    &tile_infos[tile_index[&tile_key(&corner)]]
                })
                .collect();
            evaluator
                .combine(x, &refs)
                .expect("region guarantees the box fits")
        })
        .collect();

    let mut level0 = LevelFlags::default();
    for (corner, (a_ok, b_ok)) in corners.into_iter().zip(results) {
        if !a_ok {
            level0.a_bad.insert(corner.clone());
        }
        if !b_ok {
            level0.b_bad.insert(corner);
        }
    }

    let mut field = GoodnessField {
        dim: window.dim(),
        big_ls: (0..=k_max).map(|k| ladder.big_l(k)).collect(),
        levels: vec![level0],
        regions,
        wrapped: window.wrap(),
    };
    derive_upper_levels(&mut field, ladder, k_max, Some(window));
    Ok(field)
}

// --- bad-probability estimate -------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BadProbEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Reference decay envelope 2 * 2^{-2^k} (logged, not binding).
    pub envelope: f64,
    pub replicas: u32,
}

/// Monte-Carlo estimate of P[the origin box is k-bad]. Each replica samples
/// a fresh wrapped window of side L_k (2 L0 for k = 0) and classifies the
/// box at the origin.
pub fn estimate_bad_probability(
    spec: &ModelSpec,
    ladder: &ScaleLadder,
    eta: f64,
    k: u32,
    replicas: u32,
) -> Result<BadProbEstimate> {
    if replicas == 0 {
        return Err(usage("estimate_bad_probability needs replicas >= 1"));
    }
    if k > ladder.max_level() {
        return Err(usage("k exceeds the ladder's stored levels"));
    }
    let side = if k == 0 { 2 * ladder.big_l(0) } else { ladder.big_l(k) };
    let window = Window::new(side, spec.window.dim(), true)?;
    let origin = Point::origin(spec.window.dim());

    let outcomes: Vec<bool> = (0..replicas)
        .into_par_iter()
        .map(|rep| {
            let mut rep_spec = spec.clone();
            rep_spec.window = window.clone();
            rep_spec.seed = substream(spec.seed, stream::REPLICA, rep as u64);
            let cfg = sample(&rep_spec)?;
            let field = classify_good(&cfg, ladder, eta, k, false)?;
            field.is_bad(k, &origin)
        })
        .collect::<Result<Vec<bool>>>()?;

    let bad = outcomes.iter().filter(|&&b| b).count();
    let estimate = bad as f64 / replicas as f64;
    Ok(BadProbEstimate {
        estimate,
        stderr: (estimate * (1.0 - estimate) / replicas as f64).sqrt(),
        envelope: 2.0 * (2.0f64).powf(-((1u64 << k.min(62)) as f64)),
        replicas,
    })
}

// --- levels s and r -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Levels {
    pub s: u32,
    pub r: u32,
}

/// The level `s = max{s' : L_{s'}^{3d^2} <= R^{theta_iso}}` and `r = s/2`.
/// Errors when even level 0 fails, and asserts `L_r^2 <= L0 L_s`.
pub fn compute_levels(
    ladder: &ScaleLadder,
    dim: usize,
    radius: i64,
    theta_iso: f64,
) -> Result<Levels> {
    if radius < 1 {
        return Err(usage("compute_levels requires R >= 1"));
    }
    if !(theta_iso > 0.0 && theta_iso <= 1.0) {
        return Err(parameter(format!(
            "theta_iso must be in (0, 1], got {theta_iso}"
        )));
    }
    // L^{3d^2} <= R^{theta}: exact integer comparison when 1/theta is an
    // integer m (L^{3 d^2 m} <= R), otherwise compared through logarithms.
    let exponent = 3 * (dim * dim) as u32;
    let inv = 1.0 / theta_iso;
    let exact_m = if (inv - inv.round()).abs() < 1e-12 {
        Some(inv.round() as u32)
    } else {
        None
    };
    let fits = |k: u32| match exact_m {
        Some(m) => match (ladder.big_l(k) as i128).checked_pow(exponent * m) {
            Some(p) => p <= radius as i128,
            None => false,
        },
        None => {
            exponent as f64 * (ladder.big_l(k) as f64).ln()
                <= theta_iso * (radius as f64).ln()
        }
    };
    if !fits(0) {
        return Err(usage(format!(
            "R = {radius} is below L0^(3 d^2 / theta_iso); the level s is undefined"
        )));
    }
    let mut s = 0;
    while s < ladder.max_level() && fits(s + 1) {
        s += 1;
    }
    let levels = Levels { s, r: s / 2 };
    let lr = ladder.big_l(levels.r) as i128;
    let bound = ladder.big_l(0) as i128 * ladder.big_l(levels.s) as i128;
    if lr * lr > bound {
        return Err(contract(format!(
            "scale relation L_r^2 <= L0 L_s violated at r = {}, s = {}",
            levels.r, levels.s
        )));
    }
    Ok(levels)
}

// --- event H ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClauseBFailure {
    pub grid_point: Point,
    pub x: Point,
    pub y: Point,
}

#[derive(Debug)]
pub struct EventHReport {
    pub holds: bool,
    pub clause_a_failures: Vec<Point>,
    pub clause_b_failures: Vec<ClauseBFailure>,
}

/// Event H: (a) every L_r-box meeting B(0,3R) is r-good; (b) for grid points
/// z on the L_s lattice in B(0,2R), all `S_{L_s}` sites of `z + [-2L_s,
/// 2L_s)^d` are connected within `z + [-4L_s, 4L_s)^d`.
pub fn check_event_h(
    cfg: &Config,
    ladder: &ScaleLadder,
    levels: Levels,
    radius: i64,
    field: &GoodnessField,
) -> Result<EventHReport> {
    let w = cfg.window();
    let d = w.dim();
    let big_lr = ladder.big_l(levels.r);
    let big_ls = ladder.big_l(levels.s);

    let mut clause_a_failures = Vec::new();
    for corner in centered_grid(3 * radius, big_lr, d) {
        let bad = field.is_bad(levels.r, &corner).map_err(|e| {
            usage(format!(
                "event H clause (a) needs classification over B(0,3R): {e}"
            ))
        })?;
        if bad {
            clause_a_failures.push(corner);
        }
    }

    let labeling = label_components(cfg);
    let s_ls = cluster::s_r_mask(cfg, &labeling, big_ls as f64);
    let mut clause_b_failures = Vec::new();
    for z in centered_grid(2 * radius, big_ls, d) {
        let inner = LatticeBox::new(
            Point(z.0.iter().map(|c| c - 2 * big_ls).collect()),
            4 * big_ls,
        )?;
        let outer = LatticeBox::new(
            Point(z.0.iter().map(|c| c - 4 * big_ls).collect()),
            8 * big_ls,
        )?;
        w.require_box(&outer, "event H clause (b)")?;
        let mut candidates = Vec::new();
        for p in inner.points() {
            if let Some(i) = w.index(&p) {
                if s_ls[i] {
                    candidates.push((i, p));
                }
            }
        }
        if candidates.len() <= 1 {
            continue;
        }
        let local = cluster::box_restricted_labels(cfg, &outer);
        let first_label = local[candidates[0].0];
        if let Some((_, p)) = candidates[1..]
            .iter()
            .find(|(i, _)| local[*i] != first_label)
        {
            clause_b_failures.push(ClauseBFailure {
                grid_point: z.clone(),
                x: candidates[0].1.clone(),
                y: p.clone(),
            });
        }
    }

    Ok(EventHReport {
        holds: clause_a_failures.is_empty() && clause_b_failures.is_empty(),
        clause_a_failures,
        clause_b_failures,
    })
}

// --- fat set ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeletionRole {
    IncreasingCover,
    DecreasingCover,
    Connectivity,
}

impl DeletionRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeletionRole::IncreasingCover => "a",
            DeletionRole::DecreasingCover => "b",
            DeletionRole::Connectivity => "c",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeletedBox {
    pub corner: Point,
    pub role: DeletionRole,
}

#[derive(Clone, Debug)]
pub struct DeletionEntry {
    /// Construction level: deletions happen inside an i-good L_i box and
    /// remove boxes of side r_{i-1} L_{i-1}.
    pub level: u32,
    pub parent: Point,
    pub deleted: Vec<DeletedBox>,
}

/// The perforated set G of 0-good boxes with its full deletion log.
#[derive(Clone, Debug)]
pub struct FatSet {
    pub members: BTreeSet<Point>,
    pub log: Vec<DeletionEntry>,
    pub top: Vec<Point>,
    pub levels: Levels,
    pub radius: i64,
    pub big_l0: i64,
    pub big_ls: i64,
}

impl FatSet {
    /// Adjacent member pairs (l1 distance L0), each pair once.
    pub fn adjacent_pairs(&self) -> Vec<(Point, Point)> {
        let mut out = Vec::new();
        for m in &self.members {
            for axis in 0..m.dim() {
                let mut n = m.clone();
                n.0[axis] += self.big_l0;
                if self.members.contains(&n) {
                    out.push((m.clone(), n));
                }
            }
        }
        out
    }
}

/// Builds the fat set from a goodness field: top set `G_s ∩ B(0, 2R-2L_s)`,
/// copy-down to level r, then per-level perforation removing the two covers
/// of the bad sub-boxes and, when a two-dimensional slice of the remainder
/// falls apart, one connectivity-restoring box near the covers.
pub fn build_fat_set(
    field: &GoodnessField,
    ladder: &ScaleLadder,
    levels: Levels,
    radius: i64,
) -> Result<FatSet> {
    if field.wrapped {
        return Err(usage(
            "build_fat_set requires a hard-window or synthetic goodness field",
        ));
    }
    if levels.s > field.k_max() || levels.s > ladder.max_level() {
        return Err(usage("fat set levels exceed the classified field"));
    }
    if levels.r > levels.s {
        return Err(usage("fat set requires r <= s"));
    }
    let d = field.dim();
    let big_ls = ladder.big_l(levels.s);
    let reach = 2 * radius - 2 * big_ls;
    if reach < 0 {
        return Err(usage(format!(
            "R = {radius} is too small for the top boxes (L_s = {big_ls})"
        )));
    }

    // precondition: event H clause (a)
    for corner in centered_grid(3 * radius, ladder.big_l(levels.r), d) {
        if field.is_bad(levels.r, &corner)? {
            return Err(Error::CheckFailed(format!(
                "fat-set construction refused: event H clause (a) fails at {corner:?}"
            )));
        }
    }

    let tops = centered_grid(reach, big_ls, d);
    if tops.is_empty() {
        return Err(usage("no top-level boxes in range"));
    }
    let mut current: BTreeSet<Point> = tops.iter().cloned().collect();

    // copy-down r <= i < s
    let mut level = levels.s;
    while level > levels.r {
        let child_step = ladder.big_l(level - 1);
        let per_axis = ladder.l(level - 1);
        let mut next = BTreeSet::new();
        for parent in &current {
            for child in box_children(parent, child_step, per_axis) {
                next.insert(child);
            }
        }
        current = next;
        level -= 1;
    }

    // perforation levels r down to 1
    let mut log: Vec<DeletionEntry> = Vec::new();
    while level > 0 {
        let child_step = ladder.big_l(level - 1);
        let per_axis = ladder.l(level - 1);
        let cover_cells = ladder.r(level - 1);
        let mut next = BTreeSet::new();
        for parent in &current {
            if field.is_bad(level, parent)? {
                return Err(contract(format!(
                    "fat-set parent {parent:?} at level {level} is bad; construction invariant broken"
                )));
            }
            let children = box_children(parent, child_step, per_axis);
            let mut a_bads = Vec::new();
            let mut b_bads = Vec::new();
            for child in &children {
                if field.is_bad_a(level - 1, child)? {
                    a_bads.push(child.clone());
                }
                if field.is_bad_b(level - 1, child)? {
                    b_bads.push(child.clone());
                }
            }
            let mut deleted: Vec<DeletedBox> = Vec::new();
            for (bads, role) in [
                (&a_bads, DeletionRole::IncreasingCover),
                (&b_bads, DeletionRole::DecreasingCover),
            ] {
                if let Some(corner) = cover_corner(bads, cover_cells, child_step)? {
                    deleted.push(DeletedBox { corner, role });
                }
            }
            if !deleted.is_empty() {
                let covers: Vec<(Vec<i64>, i64)> = deleted
                    .iter()
                    .map(|b| (cell_of(&b.corner, parent, child_step), cover_cells))
                    .collect();
                if let Some(c_cell) = connectivity_box(&covers, per_axis, cover_cells, d)? {
                    deleted.push(DeletedBox {
                        corner: Point(
                            c_cell
                                .iter()
                                .zip(&parent.0)
                                .map(|(v, p)| p + v * child_step)
                                .collect(),
                        ),
                        role: DeletionRole::Connectivity,
                    });
                }
            }
            let covered = |child: &Point| {
                deleted.iter().any(|b| {
                    child
                        .0
                        .iter()
                        .zip(&b.corner.0)
                        .all(|(c, a)| *c >= *a && *c < *a + cover_cells * child_step)
                })
            };
            for child in &children {
                if !covered(child) {
                    next.insert(child.clone());
                }
            }
            if !deleted.is_empty() {
                log.push(DeletionEntry {
                    level,
                    parent: parent.clone(),
                    deleted,
                });
            }
        }
        current = next;
        level -= 1;
    }

    Ok(FatSet {
        members: current,
        log,
        top: tops,
        levels,
        radius,
        big_l0: ladder.big_l(0),
        big_ls,
    })
}

fn box_children(parent: &Point, child_step: i64, per_axis: i64) -> Vec<Point> {
    let hi: Vec<i64> = parent
        .0
        .iter()
        .map(|c| c + (per_axis - 1) * child_step)
        .collect();
    grid_corners(&parent.0, &hi, child_step)
}

fn cell_of(corner: &Point, parent: &Point, child_step: i64) -> Vec<i64> {
    corner
        .0
        .iter()
        .zip(&parent.0)
        .map(|(c, p)| (c - p) / child_step)
        .collect()
}

/// Smallest grid-aligned cover box containing all the bad children; the
/// parent's goodness guarantees they fit in one box of `cover_cells` child
/// cells per side.
fn cover_corner(bads: &[Point], cover_cells: i64, child_step: i64) -> Result<Option<Point>> {
    let Some(first) = bads.first() else {
        return Ok(None);
    };
    let d = first.dim();
    let mut min = first.0.clone();
    let mut max = first.0.clone();
    for b in bads {
        for a in 0..d {
            min[a] = min[a].min(b.0[a]);
            max[a] = max[a].max(b.0[a]);
        }
    }
    for a in 0..d {
        if max[a] - min[a] >= cover_cells * child_step {
            return Err(contract(format!(
                "bad sub-boxes spread over {} on axis {a}, exceeding the cover box of side {}",
                max[a] - min[a],
                cover_cells * child_step
            )));
        }
    }
    Ok(Some(Point(min)))
}

/// Searches for the connectivity-restoring box c: the lexicographically
/// smallest grid cell adjacent to the existing covers whose removal leaves
/// every axis-parallel 2-d slice (and the full remainder) connected.
/// Returns None when no extra deletion is needed.
fn connectivity_box(
    covers: &[(Vec<i64>, i64)],
    per_axis: i64,
    cover_cells: i64,
    d: usize,
) -> Result<Option<Vec<i64>>> {
    if slices_connected(covers, per_axis, d) {
        return Ok(None);
    }
    let mut candidates: BTreeSet<Vec<i64>> = BTreeSet::new();
    for (corner, side) in covers {
        let lo: Vec<i64> = corner.iter().map(|c| (c - cover_cells).max(0)).collect();
        let hi: Vec<i64> = corner
            .iter()
            .map(|c| (c + side).min(per_axis - cover_cells))
            .collect();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            continue;
        }
        let mut cursor = lo.clone();
        'fill: loop {
            candidates.insert(cursor.clone());
            let mut axis = d;
            loop {
                if axis == 0 {
                    break 'fill;
                }
                axis -= 1;
                cursor[axis] += 1;
                if cursor[axis] <= hi[axis] {
                    break;
                }
                cursor[axis] = lo[axis];
            }
        }
    }
    for cand in candidates {
        let mut with_c = covers.to_vec();
        with_c.push((cand.clone(), cover_cells));
        if slices_connected(&with_c, per_axis, d) {
            return Ok(Some(cand));
        }
    }
    Err(contract(
        "no connectivity-restoring box found among the candidates adjacent to the covers",
    ))
}

/// The full remainder and every axis-parallel 2-d slice of the grid minus
/// the cover boxes must be connected.
fn slices_connected(covers: &[(Vec<i64>, i64)], per_axis: i64, d: usize) -> bool {
    let m = per_axis as usize;
    if !full_grid_connected(covers, m, d) {
        return false;
    }
    if d == 2 {
        return true; // the single slice is the full grid
    }
    for p in 0..d {
        for q in (p + 1)..d {
            let others: Vec<usize> = (0..d).filter(|a| *a != p && *a != q).collect();
            let combos = m.pow(others.len() as u32);
            let mut seen: BTreeSet<u32> = BTreeSet::new();
            for combo in 0..combos {
                let mut mask = 0u32;
                for (ci, (corner, side)) in covers.iter().enumerate() {
                    let mut rest = combo;
                    let mut active = true;
                    for &a in &others {
                        let v = (rest % m) as i64;
                        rest /= m;
                        if v < corner[a] || v >= corner[a] + side {
                            active = false;
                            break;
                        }
                    }
                    if active {
                        mask |= 1 << ci;
                    }
                }
                if seen.insert(mask) && !plane_connected(covers, m, p, q, mask) {
                    return false;
                }
            }
        }
    }
    true
}

/// Connectivity of one 2-d slice: the m x m cell grid minus the projections
/// of the active covers (bitmask indexes into `covers`).
fn plane_connected(covers: &[(Vec<i64>, i64)], m: usize, p: usize, q: usize, mask: u32) -> bool {
    let removed = |i: usize, j: usize| -> bool {
        covers.iter().enumerate().any(|(ci, (corner, side))| {
            (mask >> ci) & 1 == 1
                && (i as i64) >= corner[p]
                && (i as i64) < corner[p] + side
                && (j as i64) >= corner[q]
                && (j as i64) < corner[q] + side
        })
    };
    let total = (0..m * m).filter(|&c| !removed(c / m, c % m)).count();
    if total == 0 {
        return false;
    }
    let start = (0..m * m).find(|&c| !removed(c / m, c % m)).unwrap();
    let mut visited = vec![false; m * m];
    let mut queue = VecDeque::new();
    visited[start] = true;
    queue.push_back(start);
    let mut seen = 1usize;
    while let Some(cur) = queue.pop_front() {
        let (i, j) = (cur / m, cur % m);
        let mut neighbors = [usize::MAX; 4];
        let mut n = 0;
        if i + 1 < m {
            neighbors[n] = (i + 1) * m + j;
            n += 1;
        }
        if i > 0 {
            neighbors[n] = (i - 1) * m + j;
            n += 1;
        }
        if j + 1 < m {
            neighbors[n] = i * m + j + 1;
            n += 1;
        }
        if j > 0 {
            neighbors[n] = i * m + j - 1;
            n += 1;
        }
        for &nc in &neighbors[..n] {
            if !visited[nc] && !removed(nc / m, nc % m) {
                visited[nc] = true;
                seen += 1;
                queue.push_back(nc);
            }
        }
    }
    seen == total
}

fn full_grid_connected(covers: &[(Vec<i64>, i64)], m: usize, d: usize) -> bool {
    let cells = m.pow(d as u32);
    let strides: Vec<usize> = (0..d).map(|a| m.pow((d - 1 - a) as u32)).collect();
    let removed = |cell: usize| -> bool {
        covers.iter().any(|(corner, side)| {
            (0..d).all(|a| {
                let v = ((cell / strides[a]) % m) as i64;
                v >= corner[a] && v < corner[a] + side
            })
        })
    };
    let total = (0..cells).filter(|&c| !removed(c)).count();
    if total == 0 {
        return false;
    }
    let start = (0..cells).find(|&c| !removed(c)).unwrap();
    let mut visited = vec![false; cells];
    let mut queue = VecDeque::new();
    visited[start] = true;
    queue.push_back(start);
    let mut seen = 1usize;
    while let Some(cur) = queue.pop_front() {
        for a in 0..d {
            let pos = (cur / strides[a]) % m;
            if pos + 1 < m {
                let nb = cur + strides[a];
                if !visited[nb] && !removed(nb) {
                    visited[nb] = true;
                    seen += 1;
                    queue.push_back(nb);
                }
            }
            if pos > 0 {
                let nb = cur - strides[a];
                if !visited[nb] && !removed(nb) {
                    visited[nb] = true;
                    seen += 1;
                    queue.push_back(nb);
                }
            }
        }
    }
    seen == total
}

// --- fat-set verification -----------------------------------------------------------

#[derive(Debug)]
pub struct FatSetReport {
    pub ok: bool,
    pub violations: Vec<String>,
    /// Minimal observed density ratio over L_s boxes (property (b)).
    pub min_density_b: f64,
    /// Per slice dimension j: minimal observed density ratio (property (c)).
    pub min_density_c: Vec<(u32, f64)>,
    pub density_bound_d: f64,
    pub slice_checks: usize,
}

/// Verifies the fat-set contract: (a) members 0-good, (b) per-L_s-box
/// connectivity and volume, (c) slice connectivity and volume for all
/// 2 <= j <= d over a bounded sample of slices, plus deletion-log sanity
/// (at most three boxes per level-box, distinct roles).
pub fn verify_fat_set(
    fat: &FatSet,
    ladder: &ScaleLadder,
    field: &GoodnessField,
    slice_sample_cap: usize,
) -> Result<FatSetReport> {
    let d = field.dim();
    let mut violations = Vec::new();

    let range = 2 * fat.radius - fat.big_ls;
    for m in &fat.members {
        if field.is_bad(0, m)? {
            violations.push(format!("member {m:?} is 0-bad"));
        }
        if m.0.iter().any(|c| *c < -range || *c + fat.big_l0 > range + 1) {
            violations.push(format!("member {m:?} outside B(0, 2R - L_s)"));
        }
    }

    for entry in &fat.log {
        if entry.deleted.len() > 3 {
            violations.push(format!(
                "deletion entry at level {} parent {:?} removes {} boxes (max 3)",
                entry.level,
                entry.parent,
                entry.deleted.len()
            ));
        }
        let mut roles: Vec<&str> = entry.deleted.iter().map(|b| b.role.as_str()).collect();
        roles.sort_unstable();
        roles.dedup();
        if roles.len() != entry.deleted.len() {
            violations.push(format!(
                "deletion entry at level {} parent {:?} repeats a role",
                entry.level, entry.parent
            ));
        }
    }

    let depth = fat.levels.r;
    let bound_d = ladder.density_bound(d as u32, depth);
    let cells_per_box = ((fat.big_ls / fat.big_l0) as f64).powi(d as i32);

    let mut min_density_b = f64::INFINITY;
    for top in &fat.top {
        let in_box: Vec<&Point> = fat
            .members
            .iter()
            .filter(|m| {
                m.0.iter()
                    .zip(&top.0)
                    .all(|(c, t)| *c >= *t && *c < *t + fat.big_ls)
            })
            .collect();
        let density = in_box.len() as f64 / cells_per_box;
        min_density_b = min_density_b.min(density);
        if density < bound_d {
            violations.push(format!(
                "box {top:?}: density {density:.6} below bound {bound_d:.6}"
            ));
        }
        if !corners_connected(&in_box, fat.big_l0) {
            violations.push(format!("box {top:?}: members not connected in G_0"));
        }
    }

    // (c) slices of 3L_s boxes centered on interior top corners
    let mut min_density_c: Vec<(u32, f64)> = (2..=d as u32).map(|j| (j, f64::INFINITY)).collect();
    let mut slice_checks = 0usize;
    let inner_reach = 2 * fat.radius - 3 * fat.big_ls;
    if inner_reach >= 0 {
        for x_s in centered_grid(inner_reach, fat.big_ls, d) {
            let corner3 = Point(x_s.0.iter().map(|c| c - fat.big_ls).collect());
            let in_box3: Vec<&Point> = fat
                .members
                .iter()
                .filter(|m| {
                    m.0.iter()
                        .zip(&corner3.0)
                        .all(|(c, t)| *c >= *t && *c < *t + 3 * fat.big_ls)
                })
                .collect();
            for j in 2..=d {
                let bound_j = ladder.density_bound(j as u32, depth);
                let cells_j = (3.0 * fat.big_ls as f64 / fat.big_l0 as f64).powi(j as i32);
                for axes in axis_subsets(d, j) {
                    let take = slice_sample_cap.max(1);
                    let stride = (in_box3.len() / take).max(1);
                    // distinct slices only: a slice is fixed by its
                    // off-axis coordinates (for j = d there is exactly one)
                    let mut seen_slices: BTreeSet<Vec<i64>> = BTreeSet::new();
                    for anchor in in_box3.iter().step_by(stride) {
                        if slice_checks > 50_000 {
                            break;
                        }
                        let key: Vec<i64> = (0..d)
                            .filter(|a| !axes.contains(a))
                            .map(|a| anchor.0[a])
                            .collect();
                        if !seen_slices.insert(key) {
                            continue;
                        }
                        slice_checks += 1;
                        let slice_members: Vec<&Point> = in_box3
                            .iter()
                            .filter(|m| {
                                (0..d)
                                    .filter(|a| !axes.contains(a))
                                    .all(|a| m.0[a] == anchor.0[a])
                            })
                            .copied()
                            .collect();
                        if slice_members.is_empty() {
                            violations.push(format!(
                                "slice through {anchor:?} axes {axes:?} in box at {x_s:?} is empty"
                            ));
                            continue;
                        }
                        let density = slice_members.len() as f64 / cells_j;
                        let entry = &mut min_density_c[j - 2];
                        entry.1 = entry.1.min(density);
                        if density < bound_j {
                            violations.push(format!(
                                "slice through {anchor:?} axes {axes:?}: density {density:.6} below {bound_j:.6}"
                            ));
                        }
                        if !corners_connected(&slice_members, fat.big_l0) {
                            violations.push(format!(
                                "slice through {anchor:?} axes {axes:?} in box at {x_s:?} is disconnected"
                            ));
                        }
                    }
                }
            }
        }
    }

    Ok(FatSetReport {
        ok: violations.is_empty(),
        violations,
        min_density_b,
        min_density_c,
        density_bound_d: bound_d,
        slice_checks,
    })
}

fn axis_subsets(d: usize, j: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, j: usize, pick: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pick.len() == j {
            out.push(pick.clone());
            return;
        }
        for a in start..d {
            pick.push(a);
            rec(a + 1, d, j, pick, out);
            pick.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, j, &mut Vec::new(), &mut out);
    out
}

/// Connectivity of a corner set under the L0-step adjacency.
fn corners_connected(corners: &[&Point], step: i64) -> bool {
    if corners.len() <= 1 {
        return true;
    }
    let set: std::collections::HashMap<&Point, usize> = corners
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let mut visited = vec![false; corners.len()];
    let mut queue = VecDeque::new();
    visited[0] = true;
    queue.push_back(corners[0]);
    let mut seen = 1usize;
    let d = corners[0].dim();
    while let Some(cur) = queue.pop_front() {
        for axis in 0..d {
            for dir in [1i64, -1] {
                let mut n = cur.clone();
                n.0[axis] += dir * step;
                if let Some(&k) = set.get(&n) {
                    if !visited[k] {
                        visited[k] = true;
                        seen += 1;
                        queue.push_back(corners[k]);
                    }
                }
            }
        }
    }
    seen == set.len()
}

// --- special components ----------------------------------------------------------------

/// Per fat-set member, the unique big component of `S_{L0}` in its tile,
/// with the adjacency connectivity of neighboring members asserted.
#[derive(Debug)]
pub struct SpecialComponents {
    /// member corner -> window site indices of its special component
    pub cells: BTreeMap<Point, Vec<usize>>,
}

impl SpecialComponents {
    /// Site index -> owning member, for coarse-set mapping.
    pub fn site_owner(&self) -> std::collections::HashMap<usize, Point> {
        let mut map = std::collections::HashMap::new();
        for (member, cells) in &self.cells {
            for &c in cells {
                map.insert(c, member.clone());
            }
        }
        map
    }
}

pub fn special_components(cfg: &Config, fat: &FatSet, eta: f64) -> Result<SpecialComponents> {
    let w = cfg.window();
    let d = w.dim();
    let big_l0 = fat.big_l0;
    let labeling = label_components(cfg);
    let s_l0 = cluster::s_r_mask(cfg, &labeling, big_l0 as f64);
    let threshold = 0.75 * eta * (big_l0 as f64).powi(d as i32);

    let mut cells: BTreeMap<Point, Vec<usize>> = BTreeMap::new();
    for member in &fat.members {
        let tile = LatticeBox::new(member.clone(), big_l0)?;
        w.require_box(&tile, "special_components")?;
        let comps = tile_components(cfg, &s_l0, &tile);
        let big: Vec<&Vec<usize>> = comps
            .iter()
            .filter(|c| c.len() as f64 >= threshold)
            .collect();
        match big.len() {
            1 => {
                cells.insert(member.clone(), big[0].clone());
            }
            0 => {
                return Err(contract(format!(
                    "member {member:?} has no big component; it cannot be 0-good"
                )))
            }
            _ => {
                return Err(contract(format!(
                    "member {member:?} has {} big components; impossible when the \
                     decreasing event holds (3/4 + 3/4 > 5/4)",
                    big.len()
                )))
            }
        }
    }

    let special = SpecialComponents { cells };
    for (x, y) in fat.adjacent_pairs() {
        let bx = LatticeBox::new(x.clone(), 2 * big_l0)?;
        let by = LatticeBox::new(y.clone(), 2 * big_l0)?;
        let mut in_union = vec![false; w.site_count()];
        for p in bx.points().chain(by.points()) {
            if let Some(i) = w.index(&p) {
                if cfg.occupied_index(i) {
                    in_union[i] = true;
                }
            }
        }
        let seeds = &special.cells[&x];
        let mut visited = vec![false; w.site_count()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &s in seeds {
            visited[s] = true;
            queue.push_back(s);
        }
        while let Some(cur) = queue.pop_front() {
            for axis in 0..d {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                        if in_union[nb] && !visited[nb] {
                            visited[nb] = true;
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
        if let Some(&miss) = special.cells[&y].iter().find(|&&c| !visited[c]) {
            return Err(contract(format!(
                "special components of {x:?} and {y:?} are not connected in their \
                 doubled boxes (unreached site index {miss})"
            )));
        }
    }
    Ok(special)
}

/// Components of the masked sites within a tile, tile-local adjacency,
/// returned as sorted window site indices.
fn tile_components(cfg: &Config, mask: &[bool], tile: &LatticeBox) -> Vec<Vec<usize>> {
    let w = cfg.window();
    let d = w.dim();
    let side = tile.side as usize;
    let cells = side.pow(d as u32);
    let strides: Vec<usize> = (0..d).map(|a| side.pow((d - 1 - a) as u32)).collect();
    let mut site_of = vec![usize::MAX; cells];
    let mut occ = vec![false; cells];
    let mut coords = tile.corner.0.clone();
    for local in 0..cells {
        let mut rest = local;
        for a in (0..d).rev() {
            coords[a] = tile.corner.0[a] + (rest % side) as i64;
            rest /= side;
        }
        if let Some(idx) = w.index(&Point(coords.clone())) {
            site_of[local] = idx;
            occ[local] = mask[idx];
        }
    }
    let mut seen = vec![false; cells];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..cells {
        if !occ[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(cur) = queue.pop_front() {
            comp.push(site_of[cur]);
            for a in 0..d {
                let pos = (cur / strides[a]) % side;
                if pos + 1 < side {
                    let nb = cur + strides[a];
                    if occ[nb] && !seen[nb] {
                        seen[nb] = true;
                        queue.push_back(nb);
                    }
                }
                if pos > 0 {
                    let nb = cur - strides[a];
                    if occ[nb] && !seen[nb] {
                        seen[nb] = true;
                        queue.push_back(nb);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

// --- serialization -----------------------------------------------------------------------

/// Writes the goodness field as documented structured text: a region line
/// per level followed by one line per bad box (level, recursion flag,
/// corner) and its witness pair where present.
pub fn write_goodness_field(field: &GoodnessField, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "perclab-goodness 1")?;
    writeln!(
        out,
        "dim={} k_max={} wrapped={}",
        field.dim,
        field.k_max(),
        field.wrapped as u8
    )?;
    for k in 0..=field.k_max() {
        match field.region(k) {
            LevelRegion::All => writeln!(out, "level k={} L={} region=all", k, field.big_l(k))?,
            LevelRegion::Grid { lo, hi } => writeln!(
                out,
                "level k={} L={} region={}..{}",
                k,
                field.big_l(k),
                crate::lattice::join_i64(lo),
                crate::lattice::join_i64(hi)
            )?,
        }
        let flags = field.flags(k);
        for c in &flags.a_bad {
            writeln!(out, "bad k={} rec=a corner={}", k, crate::lattice::join_i64(&c.0))?;
        }
        for c in &flags.b_bad {
            writeln!(out, "bad k={} rec=b corner={}", k, crate::lattice::join_i64(&c.0))?;
        }
        for (c, wtn) in &flags.witnesses {
            for (tag, pair) in [("a", &wtn.a_pair), ("b", &wtn.b_pair)] {
                if let Some((x1, x2)) = pair {
                    writeln!(
                        out,
                        "witness k={} rec={} corner={} pair={};{}",
                        k,
                        tag,
                        crate::lattice::join_i64(&c.0),
                        crate::lattice::join_i64(&x1.0),
                        crate::lattice::join_i64(&x2.0)
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Writes the fat set as documented structured text: header, top boxes,
/// members and the full deletion log.
pub fn write_fat_set(fat: &FatSet, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "perclab-fatset 1")?;
    writeln!(
        out,
        "L0={} Ls={} R={} s={} r={} members={} deletions={}",
        fat.big_l0,
        fat.big_ls,
        fat.radius,
        fat.levels.s,
        fat.levels.r,
        fat.members.len(),
        fat.log.len()
    )?;
    for t in &fat.top {
        writeln!(out, "top corner={}", crate::lattice::join_i64(&t.0))?;
    }
    for m in &fat.members {
        writeln!(out, "member corner={}", crate::lattice::join_i64(&m.0))?;
    }
    for entry in &fat.log {
        for b in &entry.deleted {
            writeln!(
                out,
                "delete level={} parent={} role={} corner={}",
                entry.level,
                crate::lattice::join_i64(&entry.parent.0),
                b.role.as_str(),
                crate::lattice::join_i64(&b.corner.0)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ModelKind;

    fn full_config(side: i64, d: usize) -> Config {
        let w = Window::new(side, d, false).unwrap();
        sample(&ModelSpec::new(ModelKind::Bernoulli, 1.0, w, 0)).unwrap()
    }

    fn empty_config(side: i64, d: usize) -> Config {
        let w = Window::new(side, d, false).unwrap();
        sample(&ModelSpec::new(ModelKind::Bernoulli, 0.0, w, 0)).unwrap()
    }

    #[test]
    fn ladder_recursion_values() {
        // 4 r0 >= l0 is rejected
        assert!(build_scale_ladder(4, 2, 10, 1, 2).is_err());
        assert!(build_scale_ladder(8, 2, 10, 1, 2).is_err());
        let ladder = build_scale_ladder(9, 2, 10, 1, 3).unwrap();
        assert_eq!(ladder.l(1), 36);
        assert_eq!(ladder.r(1), 4);
        assert_eq!(ladder.big_l(1), 90);
        assert_eq!(ladder.big_l(2), 36 * 90);
        assert!(4 * ladder.r(1) < ladder.l(1));
        // level 0 unchanged
        assert_eq!(
            (ladder.l(0), ladder.r(0), ladder.big_l(0)),
            (9, 2, 10)
        );
    }

    #[test]
    fn ladder_recurrences_hold_exactly() {
        let ladder = build_scale_ladder(17, 3, 5, 2, 3).unwrap();
        for k in 1..=ladder.max_level() {
            let e = (k as u64).pow(2);
            assert_eq!(ladder.l(k), 17 * (1i64 << (2 * e)));
            assert_eq!(ladder.r(k), 3 * (1i64 << e));
            assert_eq!(ladder.big_l(k), ladder.l(k - 1) * ladder.big_l(k - 1));
        }
    }

    #[test]
    fn ladder_overflow_truncates() {
        let ladder = build_scale_ladder(9, 2, 1_000_000, 1, 20).unwrap();
        assert!(ladder.truncated);
        assert!(ladder.max_level() < 20);
    }

    #[test]
    fn override_ladder_accepts_figure_parameters() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        assert!(!ladder.canonical);
        assert_eq!(ladder.big_l(1), 9);
        assert_eq!(ladder.l(1), 12);
        assert!(override_scale_ladder(&[(9, 3)], 1, 1).is_err());
    }

    #[test]
    fn f_j_values() {
        assert_eq!(compute_f_j(0.0, 2, 1).unwrap(), 1.0);
        let v = compute_f_j(2.0 / 9.0, 2, 1).unwrap();
        assert!((v - 0.8102).abs() < 5e-4, "f_2(2/9) = {v}");
        assert!(compute_f_j(0.3, 2, 1).unwrap() < compute_f_j(0.2, 2, 1).unwrap());
        assert!(compute_f_j(0.3, 3, 1).unwrap() > compute_f_j(0.3, 2, 1).unwrap());
        assert_eq!(compute_f_j(0.9, 2, 1).unwrap(), 0.0);
        assert!(compute_f_j(0.2, 1, 1).is_err());
    }

    #[test]
    fn f_j_matches_log_space_oracle() {
        for &(ratio, j, theta) in &[(0.1, 2u32, 1u32), (0.22, 2, 1), (0.22, 3, 1), (0.05, 4, 2)] {
            let v = compute_f_j(ratio, j, theta).unwrap();
            // independent route: log-space summation without truncation
            let mut log_sum = 0.0f64;
            for i in 0..200u64 {
                let q =
                    ratio * (-((i as f64).powi(theta as i32)) * std::f64::consts::LN_2).exp();
                log_sum += (1.0 - 3.0 * q.powi(j as i32)).ln();
            }
            let oracle = log_sum.exp();
            assert!(
                (v - oracle).abs() < 1e-9,
                "ratio {ratio} j {j}: {v} vs {oracle}"
            );
        }
    }

    #[test]
    fn events_on_full_and_empty_configs() {
        let cfg = full_config(16, 2);
        let x = Point(vec![-8, -8]);
        assert!(event_a(&cfg, &x, 8, 1.0).unwrap());
        assert!(event_b(&cfg, &x, 8, 1.0).unwrap());
        assert!(event_a_line(&cfg, &x, 8, 1.0).unwrap());
        // all-ones with eta = 0.5: 64 > (5/4)(0.5)(64) = 40
        assert!(!event_b(&cfg, &x, 8, 0.5).unwrap());

        let cfg = empty_config(16, 2);
        assert!(!event_a(&cfg, &x, 8, 1.0).unwrap());
        assert!(!event_a_line(&cfg, &x, 8, 1.0).unwrap());
        assert!(event_b(&cfg, &x, 8, 1.0).unwrap());

        let cfg = full_config(16, 2);
        assert!(event_a(&cfg, &Point(vec![8, 8]), 8, 1.0).is_err());
        assert!(event_a(&cfg, &Point(vec![1, 0]), 8, 1.0).is_err());
    }

    #[test]
    fn event_a_detects_disconnected_halves() {
        // two full sub-boxes separated by an empty hyperplane: clause (b) fails
        let w = Window::new(16, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.5, w.clone(), 0);
        let cfg = Config::from_bits(
            w.clone(),
            |i| {
                let p = w.decode(i);
                p.0[0] != -1
            },
            spec,
        );
        let x = Point(vec![-8, -8]);
        assert!(!event_a(&cfg, &x, 8, 0.9).unwrap());
        assert!(event_b(&cfg, &x, 8, 0.9).unwrap());
    }

    #[test]
    fn event_a_line_fails_when_center_empty() {
        // dense tile with the central third cleared: the special component
        // avoids the axis segments
        let w = Window::new(18, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.5, w.clone(), 0);
        let big_l0 = 9i64;
        // base tile [-9, 0)^2; its central third is [-6, -3)^2
        let cfg = Config::from_bits(
            w.clone(),
            |i| {
                let p = w.decode(i);
                let in_tile = (0..2).all(|a| p.0[a] >= -9 && p.0[a] < 0);
                if !in_tile {
                    return true;
                }
                !(0..2).all(|a| p.0[a] >= -6 && p.0[a] < -3)
            },
            spec,
        );
        let x = Point(vec![-9, -9]);
        assert!(event_a(&cfg, &x, big_l0, 0.8).unwrap());
        assert!(!event_a_line(&cfg, &x, big_l0, 0.8).unwrap());
    }

    #[test]
    fn classification_recursion_cases() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        let origin = Point(vec![0, 0]);

        let field =
            GoodnessField::synthetic(&ladder, 1, 2, BTreeSet::new(), BTreeSet::new()).unwrap();
        assert!(field.is_good(1, &origin).unwrap());

        // one bad child: parent still good (a far pair is required)
        let mut one = BTreeSet::new();
        one.insert(Point(vec![0, 0]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, one, BTreeSet::new()).unwrap();
        assert!(field.is_good(1, &origin).unwrap());

        // two far bad children in the same recursion: parent bad
        let mut two = BTreeSet::new();
        two.insert(Point(vec![0, 0]));
        two.insert(Point(vec![0, 4])); // separation 4 >= r0 L0 = 2
        let field = GoodnessField::synthetic(&ladder, 1, 2, two, BTreeSet::new()).unwrap();
        assert!(field.is_bad(1, &origin).unwrap());
        let wtn = &field.flags(1).witnesses[&origin];
        assert!(wtn.a_pair.is_some());
        assert!(wtn.b_pair.is_none());

        // two close bad children: parent good
        let mut close = BTreeSet::new();
        close.insert(Point(vec![0, 0]));
        close.insert(Point(vec![0, 1]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, close, BTreeSet::new()).unwrap();
        assert!(field.is_good(1, &origin).unwrap());

        // far A-bad and B-bad singletons do not combine across recursions
        let mut a = BTreeSet::new();
        a.insert(Point(vec![0, 0]));
        let mut b = BTreeSet::new();
        b.insert(Point(vec![0, 4]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, a, b).unwrap();
        assert!(field.is_good(1, &origin).unwrap());
    }

    #[test]
    fn classification_locality() {
        // perturbing the configuration outside the level-1 box leaves its
        // flag unchanged
        let ladder = build_scale_ladder(5, 1, 4, 1, 1).unwrap(); // L1 = 20
        let w = Window::new(48, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.6, w.clone(), 5);
        let base = sample(&spec).unwrap();
        let eta = 0.7;
        let f1 = classify_good(&base, &ladder, eta, 1, false).unwrap();
        let flipped = Config::from_bits(
            w.clone(),
            |i| {
                let p = w.decode(i);
                let far = p.0.iter().any(|&c| !(-2..26).contains(&c));
                if far {
                    !base.occupied_index(i)
                } else {
                    base.occupied_index(i)
                }
            },
            spec,
        );
        let f2 = classify_good(&flipped, &ladder, eta, 1, false).unwrap();
        let corner = Point(vec![0, 0]);
        assert_eq!(f1.is_bad(1, &corner).unwrap(), f2.is_bad(1, &corner).unwrap());
    }

    #[test]
    fn bad_probability_trivial_models() {
        let ladder = build_scale_ladder(9, 2, 4, 1, 1).unwrap();
        let w = Window::new(16, 2, true).unwrap();
        let ones = ModelSpec::new(ModelKind::Bernoulli, 1.0, w.clone(), 3);
        for k in 0..=1 {
            let est = estimate_bad_probability(&ones, &ladder, 1.0, k, 5).unwrap();
            assert_eq!(est.estimate, 0.0, "k = {k}");
        }
        let empty = ModelSpec::new(ModelKind::Bernoulli, 0.0, w, 3);
        for k in 0..=1 {
            let est = estimate_bad_probability(&empty, &ladder, 1.0, k, 5).unwrap();
            assert_eq!(est.estimate, 1.0, "k = {k}");
        }
    }

    #[test]
    fn bad_probability_decays_at_contracting_parameters() {
        // The recursion contracts only once the box scale clears the (large)
        // threshold of the decay estimate; at L0 = 16, u = 0.85 the measured
        // sequence is non-increasing with plenty of margin.
        let ladder = build_scale_ladder(9, 2, 16, 1, 1).unwrap();
        let w = Window::new(16, 2, true).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.85, w, 99);
        let eta = 0.83;
        let e0 = estimate_bad_probability(&spec, &ladder, eta, 0, 300).unwrap();
        let e1 = estimate_bad_probability(&spec, &ladder, eta, 1, 300).unwrap();
        assert!(
            e1.estimate <= e0.estimate,
            "p1 = {} > p0 = {}",
            e1.estimate,
            e0.estimate
        );
    }

    #[test]
    fn levels_computation() {
        let ladder = build_scale_ladder(9, 2, 2, 1, 4).unwrap();
        let levels = compute_levels(&ladder, 2, 1 << 13, 1.0).unwrap();
        assert_eq!(levels, Levels { s: 0, r: 0 });
        assert!(compute_levels(&ladder, 2, 1000, 0.3).is_err());
        // maximality: L_1 = 18, so R = 18^12 flips s to 1 at theta = 1
        let big_r = 18i64.pow(12);
        let levels = compute_levels(&ladder, 2, big_r, 1.0).unwrap();
        assert_eq!(levels.s, 1);
        assert_eq!(levels.r, 0);
        assert_eq!(compute_levels(&ladder, 2, big_r - 1, 1.0).unwrap().s, 0);
    }

    #[test]
    fn event_h_on_full_config() {
        let ladder = build_scale_ladder(9, 2, 4, 1, 2).unwrap();
        let cfg = full_config(128, 2);
        let levels = Levels { s: 0, r: 0 };
        let field = classify_good(&cfg, &ladder, 1.0, 0, false).unwrap();
        let report = check_event_h(&cfg, &ladder, levels, 12, &field).unwrap();
        assert!(report.holds, "a: {:?}", report.clause_a_failures);
    }

    #[test]
    fn event_h_reports_bad_box_witness() {
        // full configuration with a cleared box: the r-bad box inside
        // B(0,3R) shows up as a clause-(a) failure
        let ladder = build_scale_ladder(9, 2, 8, 1, 0).unwrap();
        let w = Window::new(128, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.5, w.clone(), 0);
        let cfg = Config::from_bits(
            w.clone(),
            |i| {
                let p = w.decode(i);
                !(0..2).all(|a| p.0[a] >= 8 && p.0[a] < 16)
            },
            spec,
        );
        let field = classify_good(&cfg, &ladder, 1.0, 0, false).unwrap();
        let report = check_event_h(&cfg, &ladder, Levels { s: 0, r: 0 }, 12, &field).unwrap();
        assert!(!report.holds);
        assert!(report
            .clause_a_failures
            .contains(&Point(vec![8, 8])));
    }

    #[test]
    fn fat_set_multi_level_hand_placed_instance() {
        // deletions at both construction levels: a cluster of 1-bad L1
        // boxes (far A-pairs inside) plus a lone bad L0 box elsewhere
        let ladder = override_scale_ladder(&[(9, 2), (12, 3), (48, 12)], 1, 1).unwrap();
        let mut a_bad = BTreeSet::new();
        // two 1-bad L1 boxes at corners (27, 36) and (36, 36), inside one
        // 3 L1 cover
        for bx in [27i64, 36] {
            a_bad.insert(Point(vec![bx + 1, 37]));
            a_bad.insert(Point(vec![bx + 5, 41]));
        }
        // lone level-0 bad: only a level-1 deletion
        let mut b_bad = BTreeSet::new();
        b_bad.insert(Point(vec![80, 80]));
        let field = GoodnessField::synthetic(&ladder, 2, 2, a_bad, b_bad).unwrap();
        // the zone makes its parents 1-bad, so a level-2 deletion occurs
        assert!(field.is_bad(1, &Point(vec![27, 36])).unwrap());
        assert!(field.is_good(2, &Point(vec![0, 0])).unwrap());
        let fat = build_fat_set(&field, &ladder, Levels { s: 2, r: 2 }, 120).unwrap();
        let levels_used: BTreeSet<u32> = fat.log.iter().map(|e| e.level).collect();
        assert!(levels_used.contains(&2), "log: {:?}", fat.log);
        assert!(levels_used.contains(&1));
        let report = verify_fat_set(&fat, &ladder, &field, 4).unwrap();
        assert!(report.ok, "violations: {:?}", report.violations);
    }

    #[test]
    fn special_components_rejects_twin_big_components() {
        // a member tile carrying two big components contradicts 0-goodness
        // (3/4 + 3/4 > 5/4): contract violation
        let ladder = override_scale_ladder(&[(9, 2)], 4, 1).unwrap();
        let w = Window::new(48, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.5, w.clone(), 0);
        // tile [0,4)^2: two disjoint 5-site components of diameter >= 4
        let cfg = Config::from_bits(
            w.clone(),
            |i| {
                let p = w.decode(i);
                let in_tile = (0..2).all(|a| p.0[a] >= 0 && p.0[a] < 4);
                if !in_tile {
                    return false;
                }
                p.0[1] == 0 || (p.0[1] == 1 && p.0[0] == 0) || p.0[1] == 3 || (p.0[1] == 2 && p.0[0] == 3)
            },
            spec,
        );
        let field =
            GoodnessField::synthetic(&ladder, 0, 2, BTreeSet::new(), BTreeSet::new()).unwrap();
        let fat = FatSet {
            members: [Point(vec![0, 0])].into_iter().collect(),
            log: Vec::new(),
            top: vec![Point(vec![0, 0])],
            levels: Levels { s: 0, r: 0 },
            radius: 6,
            big_l0: 4,
            big_ls: 4,
        };
        let _ = &field;
        let err = special_components(&cfg, &fat, 0.4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn fat_set_trivial_when_no_bad_boxes() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3), (48, 12)], 1, 1).unwrap();
        let field =
            GoodnessField::synthetic(&ladder, 2, 2, BTreeSet::new(), BTreeSet::new()).unwrap();
        let levels = Levels { s: 2, r: 2 };
        // L2 = 108; R = 120 puts exactly the origin top box in range
        let fat = build_fat_set(&field, &ladder, levels, 120).unwrap();
        assert_eq!(fat.top.len(), 1);
        assert!(fat.log.is_empty());
        assert_eq!(fat.members.len(), 108 * 108);
        let report = verify_fat_set(&fat, &ladder, &field, 4).unwrap();
        assert!(report.ok, "violations: {:?}", report.violations);
        assert_eq!(report.min_density_b, 1.0);
    }

    #[test]
    fn fat_set_single_bad_box_deletes_cover() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        let mut a_bad = BTreeSet::new();
        a_bad.insert(Point(vec![3, 3]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, a_bad, BTreeSet::new()).unwrap();
        let levels = Levels { s: 1, r: 1 };
        let fat = build_fat_set(&field, &ladder, levels, 9).unwrap();
        assert_eq!(fat.top.len(), 1);
        assert_eq!(fat.log.len(), 1);
        let entry = &fat.log[0];
        assert_eq!(entry.deleted.len(), 1); // interior cover needs no c-box
        assert_eq!(entry.deleted[0].role, DeletionRole::IncreasingCover);
        assert_eq!(entry.deleted[0].corner, Point(vec![3, 3]));
        // |G ∩ L1-box| >= l0^d - 3 r0^d
        assert!(fat.members.len() as i64 >= 81 - 3 * 4);
        assert_eq!(fat.members.len(), 81 - 4);
        let report = verify_fat_set(&fat, &ladder, &field, 4).unwrap();
        assert!(report.ok, "violations: {:?}", report.violations);
    }

    #[test]
    fn fat_set_corner_pinch_triggers_connectivity_box() {
        // covers pinching off the grid corner: one against the left edge,
        // one against the bottom edge, diagonal around cell (0,0)
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        let mut a_bad = BTreeSet::new();
        a_bad.insert(Point(vec![0, 2]));
        a_bad.insert(Point(vec![0, 3]));
        let mut b_bad = BTreeSet::new();
        b_bad.insert(Point(vec![2, 0]));
        b_bad.insert(Point(vec![3, 0]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, a_bad, b_bad).unwrap();
        let levels = Levels { s: 1, r: 1 };
        let fat = build_fat_set(&field, &ladder, levels, 9).unwrap();
        let entry = &fat.log[0];
        assert_eq!(entry.deleted.len(), 3, "log: {entry:?}");
        assert_eq!(entry.deleted[2].role, DeletionRole::Connectivity);
        assert_eq!(entry.deleted[2].corner, Point(vec![0, 0]));
        let report = verify_fat_set(&fat, &ladder, &field, 4).unwrap();
        assert!(report.ok, "violations: {:?}", report.violations);
    }

    #[test]
    fn verify_flags_adversarial_log() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        let field =
            GoodnessField::synthetic(&ladder, 1, 2, BTreeSet::new(), BTreeSet::new()).unwrap();
        let levels = Levels { s: 1, r: 1 };
        let mut fat = build_fat_set(&field, &ladder, levels, 9).unwrap();
        fat.log.push(DeletionEntry {
            level: 1,
            parent: Point(vec![0, 0]),
            deleted: (0..4)
                .map(|i| DeletedBox {
                    corner: Point(vec![i, 0]),
                    role: DeletionRole::Connectivity,
                })
                .collect(),
        });
        let report = verify_fat_set(&fat, &ladder, &field, 4).unwrap();
        assert!(!report.ok);
        assert!(report.violations.iter().any(|v| v.contains("max 3")));
    }

    #[test]
    fn special_components_on_full_config() {
        let ladder = build_scale_ladder(9, 2, 8, 1, 0).unwrap();
        let cfg = full_config(128, 2);
        let field = classify_good(&cfg, &ladder, 1.0, 0, false).unwrap();
        let levels = Levels { s: 0, r: 0 };
        let fat = build_fat_set(&field, &ladder, levels, 16).unwrap();
        assert!(!fat.members.is_empty());
        let special = special_components(&cfg, &fat, 1.0).unwrap();
        for cells in special.cells.values() {
            assert_eq!(cells.len(), 64);
        }
    }

    #[test]
    fn serialization_writes_documented_text() {
        let ladder = override_scale_ladder(&[(9, 2), (12, 3)], 1, 1).unwrap();
        let mut a_bad = BTreeSet::new();
        a_bad.insert(Point(vec![3, 3]));
        let field = GoodnessField::synthetic(&ladder, 1, 2, a_bad, BTreeSet::new()).unwrap();
        let mut buf = Vec::new();
        write_goodness_field(&field, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("bad k=0 rec=a corner=3,3"), "{text}");

        let levels = Levels { s: 1, r: 1 };
        let fat = build_fat_set(&field, &ladder, levels, 9).unwrap();
        let mut buf = Vec::new();
        write_fat_set(&fat, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.contains("delete level=1 parent=0,0 role=a corner=3,3"),
            "{text}"
        );
    }
}
