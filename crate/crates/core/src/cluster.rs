//! Connected-component machinery over configurations: labeling, diameter
//! restriction `S_r`, the largest cluster `C_R`, chemical distance, and the
//! testable predicates behind conditions A2-A4 and local uniqueness.
//!
//! The infinite-cluster surrogate on a finite window is the largest-volume
//! component of the window (ties broken by smallest canonical id, with the
//! uniqueness flag always reported).
//!
//! Diameters are l1 diameters of the component as a point set. On wrapped
//! windows components are measured in their universal-cover embedding (BFS
//! offsets relative to the component root); components that wind around the
//! torus get a lower-bound value and `exact = false`.

use std::collections::VecDeque;

use crate::error::{usage, Result};
use crate::lattice::{LatticeBox, Point, Window};
use crate::sampler::Config;

/// Per-component statistics gathered during labeling.
#[derive(Clone, Debug)]
pub struct ComponentInfo {
    /// Lexicographically smallest member site (canonical coordinates).
    pub canonical: Point,
    pub volume: usize,
    /// Bounding box in cover coordinates (anchored at `canonical`).
    pub bbox: LatticeBoxBounds,
    /// l1 diameter in cover coordinates.
    pub l1_diameter: u64,
    /// False only for components that wind around a torus.
    pub diameter_exact: bool,
}

#[derive(Clone, Debug)]
pub struct LatticeBoxBounds {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

pub struct ClusterLabeling {
    label: Vec<u32>,
    comps: Vec<ComponentInfo>,
    window: Window,
}

pub const NO_LABEL: u32 = u32::MAX;

impl ClusterLabeling {
    pub fn components(&self) -> &[ComponentInfo] {
        &self.comps
    }

    #[inline]
    pub fn label_of_index(&self, idx: usize) -> Option<u32> {
        let l = self.label[idx];
        (l != NO_LABEL).then_some(l)
    }

    pub fn label_of(&self, p: &Point) -> Option<u32> {
        self.window.index(p).and_then(|i| self.label_of_index(i))
    }

    /// Whether the component's l1 diameter is at least `r` (exact unless the
    /// component winds around the torus, in which case the recorded value is
    /// already >= side/2 and the test errs on the large side).
    pub fn diameter_at_least(&self, comp: u32, r: f64) -> bool {
        self.comps[comp as usize].l1_diameter as f64 >= r
    }
}

/// BFS labeling with deterministic component ids: components are numbered in
/// raster-scan discovery order, so the canonical (lexicographically smallest)
/// member identifies each component.
pub fn label_components(cfg: &Config) -> ClusterLabeling {
    let w = cfg.window();
    let n = w.site_count();
    let d = w.dim();
    let sign_patterns = 1usize << (d - 1);

    let mut label = vec![NO_LABEL; n];
    let mut rel: Vec<i32> = vec![0; n * d];
    let mut comps: Vec<ComponentInfo> = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();

    let mut smax = vec![0i64; sign_patterns];
    let mut smin = vec![0i64; sign_patterns];
    let mut bmax = vec![0i64; d];
    let mut bmin = vec![0i64; d];

    for start in 0..n {
        if label[start] != NO_LABEL || !cfg.occupied_index(start) {
            continue;
        }
        let id = comps.len() as u32;
        label[start] = id;
        rel[start * d..start * d + d].fill(0);
        queue.push_back(start);

        smax.fill(0);
        smin.fill(0);
        bmax.fill(0);
        bmin.fill(0);
        let mut volume = 0usize;
        let mut wound = false;

        while let Some(cur) = queue.pop_front() {
            volume += 1;
            // sign-pattern accumulators give the exact l1 diameter of the
            // point set: |a-b|_1 = max_sigma sigma.(a-b)
            for (pat, (mx, mn)) in smax.iter_mut().zip(smin.iter_mut()).enumerate() {
                let mut s = rel[cur * d] as i64;
                for a in 1..d {
                    let v = rel[cur * d + a] as i64;
                    if (pat >> (a - 1)) & 1 == 1 {
                        s -= v;
                    } else {
                        s += v;
                    }
                }
                if s > *mx {
                    *mx = s;
                }
                if s < *mn {
                    *mn = s;
                }
            }
            for a in 0..d {
                let v = rel[cur * d + a] as i64;
                if v > bmax[a] {
                    bmax[a] = v;
                }
                if v < bmin[a] {
                    bmin[a] = v;
                }
            }

            for axis in 0..d {
                for dir in [1i64, -1] {
                    let Some(nb) = w.neighbor_index(cur, axis, dir) else {
                        continue;
                    };
                    if !cfg.occupied_index(nb) {
                        continue;
                    }
                    if label[nb] == NO_LABEL {
                        label[nb] = id;
                        for a in 0..d {
                            rel[nb * d + a] = rel[cur * d + a];
                        }
                        rel[nb * d + axis] += dir as i32;
                        queue.push_back(nb);
                    } else if w.wrap() && !wound {
                        // already-visited neighbor whose offset disagrees
                        // with the tree offset means the component winds
                        let mut expect = rel[cur * d + axis] + dir as i32;
                        if rel[nb * d + axis] != expect {
                            wound = true;
                        }
                        for a in 0..d {
                            if a != axis && rel[nb * d + a] != rel[cur * d + a] {
                                wound = true;
                            }
                            expect = 0; // silence unused in release
                        }
                        let _ = expect;
                    }
                }
            }
        }

        let diameter = smax
            .iter()
            .zip(&smin)
            .map(|(mx, mn)| (mx - mn) as u64)
            .max()
            .unwrap_or(0);
        let root = w.decode(start);
        let bbox = LatticeBoxBounds {
            lo: root.0.iter().zip(&bmin).map(|(c, m)| c + m).collect(),
            hi: root.0.iter().zip(&bmax).map(|(c, m)| c + m).collect(),
        };
        comps.push(ComponentInfo {
            canonical: root,
            volume,
            bbox,
            l1_diameter: diameter,
            diameter_exact: !wound,
        });
    }

    ClusterLabeling {
        label,
        comps,
        window: w.clone(),
    }
}

/// Occupancy mask of `S_r`: sites in components of l1 diameter >= r.
pub fn s_r_mask(cfg: &Config, labeling: &ClusterLabeling, r: f64) -> Vec<bool> {
    let keep: Vec<bool> = labeling
        .comps
        .iter()
        .map(|c| c.l1_diameter as f64 >= r)
        .collect();
    (0..cfg.window().site_count())
        .map(|i| labeling.label_of_index(i).is_some_and(|l| keep[l as usize]))
        .collect()
}

/// Keeps exactly the sites lying in components of l1 diameter >= r.
pub fn restrict_s_r(cfg: &Config, r: f64) -> Result<Config> {
    if !(r >= 0.0) {
        return Err(usage(format!("restrict_s_r: r must be >= 0, got {r}")));
    }
    let labeling = label_components(cfg);
    let mask = s_r_mask(cfg, &labeling, r);
    Ok(Config::from_bits(
        cfg.window().clone(),
        |i| mask[i],
        cfg.provenance.clone(),
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct LargestComponent {
    pub component: u32,
    pub volume_in_region: usize,
    /// Whether the volume maximum was strict.
    pub unique: bool,
}

/// Component of `S ∩ region` with maximal volume; ties broken by smallest
/// canonical id (= smallest component index).
pub fn largest_component(
    cfg: &Config,
    labeling: &ClusterLabeling,
    region: &LatticeBox,
) -> Result<LargestComponent> {
    let w = cfg.window();
    w.require_box(region, "largest_component")?;
    let mut counts = vec![0usize; labeling.comps.len()];
    for p in region.points() {
        if let Some(i) = w.index(&p) {
            if let Some(l) = labeling.label_of_index(i) {
                counts[l as usize] += 1;
            }
        }
    }
    let mut best: Option<(usize, usize)> = None; // (comp, count)
    let mut tie = false;
    for (comp, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            continue;
        }
        match best {
            None => best = Some((comp, cnt)),
            Some((_, c)) if cnt > c => {
                best = Some((comp, cnt));
                tie = false;
            }
            Some((_, c)) if cnt == c => tie = true,
            _ => {}
        }
    }
    let (component, volume) =
        best.ok_or_else(|| usage("largest_component: S ∩ region is empty"))?;
    Ok(LargestComponent {
        component: component as u32,
        volume_in_region: volume,
        unique: !tie,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChemicalDistance {
    Finite(u64),
    Infinite,
}

impl ChemicalDistance {
    pub fn finite(&self) -> Option<u64> {
        match self {
            ChemicalDistance::Finite(v) => Some(*v),
            ChemicalDistance::Infinite => None,
        }
    }
}

/// Graph distance inside S between occupied sites (inf∅ = ∞ convention).
pub fn chemical_distance(cfg: &Config, x: &Point, y: &Point) -> Result<ChemicalDistance> {
    let w = cfg.window();
    let xi = w
        .index(x)
        .filter(|&i| cfg.occupied_index(i))
        .ok_or_else(|| usage("chemical_distance: x is not an occupied site"))?;
    let yi = w
        .index(y)
        .filter(|&i| cfg.occupied_index(i))
        .ok_or_else(|| usage("chemical_distance: y is not an occupied site"))?;
    if xi == yi {
        return Ok(ChemicalDistance::Finite(0));
    }
    let dist = bfs_distances(cfg, &[xi], Some(yi));
    match dist[yi] {
        u32::MAX => Ok(ChemicalDistance::Infinite),
        v => Ok(ChemicalDistance::Finite(v as u64)),
    }
}

/// Multi-source BFS distances through S; `u32::MAX` marks unreachable sites.
/// Stops early once `target` is settled.
pub fn bfs_distances(cfg: &Config, sources: &[usize], target: Option<usize>) -> Vec<u32> {
    let w = cfg.window();
    let d = w.dim();
    let mut dist = vec![u32::MAX; w.site_count()];
    let mut queue = VecDeque::new();
    for &s in sources {
        if cfg.occupied_index(s) && dist[s] == u32::MAX {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(cur) = queue.pop_front() {
        if target == Some(cur) {
            break;
        }
        let nd = dist[cur] + 1;
        for axis in 0..d {
            for dir in [1i64, -1] {
                if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                    if cfg.occupied_index(nb) && dist[nb] == u32::MAX {
                        dist[nb] = nd;
                        queue.push_back(nb);
                    }
                }
            }
        }
    }
    dist
}

/// Exact max pairwise chemical distance within `subset` (distances run
/// through all of S). iFUB-style: BFS from fringe vertices in decreasing
/// distance order until the two-sided bound closes. Returns None if some
/// pair is disconnected.
pub fn subset_diameter(cfg: &Config, subset: &[usize]) -> Option<u64> {
    if subset.len() <= 1 {
        return Some(0);
    }
    let in_subset = {
        let mut v = vec![false; cfg.window().site_count()];
        for &s in subset {
            v[s] = true;
        }
        v
    };
    let ecc = |root: usize| -> Option<(u32, usize)> {
        let dist = bfs_distances(cfg, &[root], None);
        let mut best = (0u32, root);
        for &s in subset {
            match dist[s] {
                u32::MAX => return None,
                ds if ds > best.0 => best = (ds, s),
                _ => {}
            }
        }
        Some(best)
    };

    let (_, far) = ecc(subset[0])?;
    let root_dist = bfs_distances(cfg, &[far], None);
    let mut order: Vec<usize> = subset.to_vec();
    order.sort_by_key(|&s| std::cmp::Reverse(root_dist[s]));
    let mut lb = root_dist[order[0]] as u64;
    let _ = &in_subset;

    for &u in &order {
        let t = root_dist[u] as u64;
        if lb >= 2 * t {
            break;
        }
        let (e, _) = ecc(u)?;
        lb = lb.max(e as u64);
    }
    Some(lb)
}

/// A3 predicate per signed unit direction: does some `k·e`, 0 <= k <= R, lie
/// in the infinite-cluster surrogate? Order: +e1, -e1, +e2, -e2, ...
pub fn check_a3(cfg: &Config, r_max: i64) -> Result<Vec<bool>> {
    let w = cfg.window();
    let d = w.dim();
    let labeling = label_components(cfg);
    let surrogate = match largest_component(cfg, &labeling, &w.bounding_box()) {
        Ok(l) => Some(l.component),
        Err(crate::Error::Usage(_)) => None,
        Err(e) => return Err(e),
    };
    let mut out = Vec::with_capacity(2 * d);
    for axis in 0..d {
        for sign in [1i64, -1] {
            let hit = surrogate.is_some_and(|target| {
                (0..=r_max).any(|k| {
                    let mut coords = vec![0i64; d];
                    coords[axis] = sign * k;
                    labeling.label_of(&w.reduce(&Point(coords))) == Some(target)
                })
            });
            out.push(hit);
        }
    }
    Ok(out)
}

/// A4 over an explicit site set: all pairs within chemical distance `c * R`.
pub fn check_a4_on(cfg: &Config, sites: &[usize], r: i64, c: f64) -> Result<bool> {
    if c < 1.0 {
        return Err(usage("check_A4: constant C must be >= 1"));
    }
    match subset_diameter(cfg, sites) {
        Some(diam) => Ok(diam as f64 <= c * r as f64),
        None => Ok(false), // disconnected pair: distance ∞ exceeds any C·R
    }
}

/// A4 with the largest-component surrogate intersected with B(0, R).
pub fn check_a4(cfg: &Config, r: i64, c: f64) -> Result<bool> {
    let sites = surrogate_sites_in_ball(cfg, r)?;
    check_a4_on(cfg, &sites, r, c)
}

/// Max pairwise chemical distance of the surrogate within B(0,R), divided by
/// R: the smallest C for which A4 holds on this sample.
pub fn empirical_a4_constant(cfg: &Config, r: i64) -> Result<Option<f64>> {
    let sites = surrogate_sites_in_ball(cfg, r)?;
    if sites.is_empty() {
        return Ok(None);
    }
    Ok(subset_diameter(cfg, &sites).map(|d| d as f64 / r as f64))
}

fn surrogate_sites_in_ball(cfg: &Config, r: i64) -> Result<Vec<usize>> {
    let w = cfg.window();
    let labeling = label_components(cfg);
    let surrogate = match largest_component(cfg, &labeling, &w.bounding_box()) {
        Ok(l) => l.component,
        Err(crate::Error::Usage(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let ball = crate::lattice::linf_ball(&Point::origin(w.dim()), r as f64)?;
    let mut sites = Vec::new();
    for p in ball.points() {
        if let Some(i) = w.index(&p) {
            if labeling.label_of_index(i) == Some(surrogate) {
                sites.push(i);
            }
        }
    }
    Ok(sites)
}

/// Local uniqueness (condition S1 shape): `exists` = S_R ∩ B(0,R) nonempty;
/// `unique` = every pair of S_{R/10} sites in B(0,R) is connected inside
/// S ∩ B(0,2R).
pub fn check_local_uniqueness(cfg: &Config, r: i64) -> Result<(bool, bool)> {
    let w = cfg.window();
    if r < 1 {
        return Err(usage("check_local_uniqueness: R must be >= 1"));
    }
    let big_ball = crate::lattice::linf_ball(&Point::origin(w.dim()), 2.0 * r as f64)?;
    if 4 * r + 1 > w.side() {
        return Err(usage(format!(
            "check_local_uniqueness: window side {} cannot contain B(0,2R) with R={r}",
            w.side()
        )));
    }
    if !w.wrap() {
        w.require_box(&big_ball, "check_local_uniqueness")?;
    }

    let labeling = label_components(cfg);
    let small_ball = crate::lattice::linf_ball(&Point::origin(w.dim()), r as f64)?;

    let mut exists = false;
    for p in small_ball.points() {
        if let Some(i) = w.index(&p) {
            if let Some(l) = labeling.label_of_index(i) {
                if labeling.diameter_at_least(l, r as f64) {
                    exists = true;
                    break;
                }
            }
        }
    }

    // pairs from S_{R/10} ∩ B(0,R), connectivity within S ∩ B(0,2R)
    let threshold = r as f64 / 10.0;
    let mut candidates = Vec::new();
    for p in small_ball.points() {
        if let Some(i) = w.index(&p) {
            if let Some(l) = labeling.label_of_index(i) {
                if labeling.diameter_at_least(l, threshold) {
                    candidates.push(i);
                }
            }
        }
    }
    let unique = if candidates.len() <= 1 {
        true
    } else {
        let local = box_restricted_labels(cfg, &big_ball);
        let first = local[candidates[0]];
        candidates.iter().all(|&i| local[i] == first)
    };
    Ok((exists, unique))
}

/// Component labels of the subgraph S ∩ box (full-window-sized label array;
/// `NO_LABEL` outside the box or off S).
pub fn box_restricted_labels(cfg: &Config, bounds: &LatticeBox) -> Vec<u32> {
    let w = cfg.window();
    let d = w.dim();
    let mut labels = vec![NO_LABEL; w.site_count()];
    let mut in_box = vec![false; w.site_count()];
    let mut members: Vec<usize> = Vec::new();
    for p in bounds.points() {
        if let Some(i) = w.index(&p) {
            if cfg.occupied_index(i) && !in_box[i] {
                in_box[i] = true;
                members.push(i);
            }
        }
    }
    // adjacency within the box is geometric: neighbors in the box as a
    // region of Z^d; for wrapped windows a box never exceeds one period,
    // so window adjacency restricted to members is equivalent
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for &start in &members {
        if labels[start] != NO_LABEL {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(cur) = queue.pop_front() {
            for axis in 0..d {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                        if in_box[nb] && labels[nb] == NO_LABEL {
                            labels[nb] = next;
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    labels
}
