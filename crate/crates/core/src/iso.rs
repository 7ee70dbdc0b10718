//! Boundary computation and isoperimetry probes: exact small-instance
//! minimization, a heuristic profile over candidate families (chemical
//! balls, spectral sweep cuts, greedy local search), the coarse reduction
//! maps M_A and D_A, and the reduction-inequality checks.
//!
//! The boundary is always taken in S: edges of Z^d with one endpoint in A
//! and the other in S \ A. Ratios are `|boundary| / |A|^{(d-1)/d}`.

use std::collections::BTreeSet;

use crate::cluster::{self, label_components};
use crate::error::{usage, Result};
use crate::lattice::{linf_ball, LatticeBox, Point};
use crate::renorm::{FatSet, SpecialComponents};
use crate::rng::{stream, CounterRng};
use crate::sampler::Config;

/// A sorted, deduplicated set of occupied sites of one configuration.
#[derive(Clone, Debug)]
pub struct SiteSet {
    indices: Vec<usize>,
}

impl SiteSet {
    pub fn from_indices(cfg: &Config, mut indices: Vec<usize>) -> Result<SiteSet> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| !cfg.occupied_index(i)) {
            return Err(usage(format!("site index {bad} is not occupied")));
        }
        Ok(SiteSet { indices })
    }

    pub fn from_points(cfg: &Config, points: &[Point]) -> Result<SiteSet> {
        let w = cfg.window();
        let indices = points
            .iter()
            .map(|p| {
                w.index(p)
                    .ok_or_else(|| usage(format!("point {p:?} outside the window")))
            })
            .collect::<Result<Vec<usize>>>()?;
        SiteSet::from_indices(cfg, indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }
}

fn ratio_of(boundary: u64, size: usize, d: usize) -> f64 {
    boundary as f64 / (size as f64).powf((d as f64 - 1.0) / d as f64)
}

/// Exact count of lattice edges between A and S \ A.
pub fn edge_boundary(cfg: &Config, a: &SiteSet) -> Result<u64> {
    Ok(edge_boundary_edges(cfg, a)?.len() as u64)
}

/// The boundary edge list itself, each edge once as (inside, outside).
pub fn edge_boundary_edges(cfg: &Config, a: &SiteSet) -> Result<Vec<(usize, usize)>> {
    let w = cfg.window();
    let mut in_a = vec![false; w.site_count()];
    for &i in a.indices() {
        if !cfg.occupied_index(i) {
            return Err(usage("edge_boundary: A is not a subset of S"));
        }
        in_a[i] = true;
    }
    let mut edges = Vec::new();
    for &i in a.indices() {
        for axis in 0..w.dim() {
            for dir in [1i64, -1] {
                if let Some(nb) = w.neighbor_index(i, axis, dir) {
                    if cfg.occupied_index(nb) && !in_a[nb] {
                        edges.push((i, nb));
                    }
                }
            }
        }
    }
    Ok(edges)
}

// --- exact oracle --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ExactMinRatio {
    pub ratio: f64,
    pub witness: Vec<usize>,
    pub candidates: u64,
    /// True when only connected subsets were enumerated (25..=64 sites).
    pub connected_only: bool,
}

/// Exact minimum of `|∂_S A| / |A|^{(d-1)/d}` over subsets of S ∩ region
/// with `|A| >= size_floor`. Exhaustive up to 24 sites; connected-subset
/// enumeration up to 64 sites; refuses larger regions.
pub fn exact_min_ratio(
    cfg: &Config,
    region: &LatticeBox,
    size_floor: f64,
) -> Result<ExactMinRatio> {
    exact_min_ratio_inner(cfg, region, size_floor, None)
}

fn exact_min_ratio_inner(
    cfg: &Config,
    region: &LatticeBox,
    size_floor: f64,
    force_connected: Option<bool>,
) -> Result<ExactMinRatio> {
    let w = cfg.window();
    w.require_box(region, "exact_min_ratio")?;
    let d = w.dim();
    let mut sites = Vec::new();
    for p in region.points() {
        if let Some(i) = w.index(&p) {
            if cfg.occupied_index(i) {
                sites.push(i);
            }
        }
    }
    sites.sort_unstable();
    sites.dedup();
    let n = sites.len();
    if n == 0 {
        return Err(usage("exact_min_ratio: S ∩ region is empty"));
    }
    let floor = (size_floor.max(1.0)).ceil() as usize;
    if floor > n {
        return Err(usage(format!(
            "exact_min_ratio: size floor {floor} exceeds |S ∩ region| = {n}"
        )));
    }

    // per-site boundary data: edges leaving the candidate pool, and
    // adjacency bitmask within the pool
    let pos_of = |idx: usize| sites.binary_search(&idx).ok();
    let mut ext = vec![0u32; n];
    let mut adj = vec![0u64; n];
    for (k, &i) in sites.iter().enumerate() {
        for axis in 0..d {
            for dir in [1i64, -1] {
                if let Some(nb) = w.neighbor_index(i, axis, dir) {
                    if cfg.occupied_index(nb) {
                        match pos_of(nb) {
                            Some(j) => adj[k] |= 1 << j,
                            None => ext[k] += 1,
                        }
                    }
                }
            }
        }
    }
    let boundary_of = |mask: u64| -> u64 {
        let mut b = 0u64;
        let mut rest = mask;
        while rest != 0 {
            let k = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            b += ext[k] as u64 + (adj[k] & !mask).count_ones() as u64;
        }
        b
    };

    let mut best: Option<(f64, u64)> = None;
    let mut candidates = 0u64;
    let consider = |mask: u64, best: &mut Option<(f64, u64)>, candidates: &mut u64| {
        let size = mask.count_ones() as usize;
        if size < floor {
            return;
        }
        *candidates += 1;
        let r = ratio_of(boundary_of(mask), size, d);
        if best.map_or(true, |(b, _)| r < b) {
            *best = Some((r, mask));
        }
    };

    let connected_only = force_connected.unwrap_or(n > 24);
    if !connected_only {
        for mask in 1u64..(1u64 << n) {
            consider(mask, &mut best, &mut candidates);
        }
    } else if n <= 64 {
        // connected induced subsets, enumerated per smallest member
        let mut enumerated = 0u64;
        let cap = 30_000_000u64;
        for root in 0..n {
            let lowbits: u64 = (1u64 << root) - 1;
            let mut stack = vec![(1u64 << root, adj[root] & !lowbits & !(1u64 << root))];
            while let Some((set, frontier)) = stack.pop() {
                enumerated += 1;
                if enumerated > cap {
                    return Err(usage(
                        "exact_min_ratio: connected-subset enumeration exceeds the oracle guard",
                    ));
                }
                consider(set, &mut best, &mut candidates);
                if frontier == 0 {
                    continue;
                }
                let v = frontier.trailing_zeros() as usize;
                let vbit = 1u64 << v;
                // exclude v entirely
                stack.push((set, frontier & !vbit));
                // include v, extending the frontier by its new neighbors
                let new_frontier = (frontier | (adj[v] & !lowbits)) & !(set | vbit);
                stack.push((set | vbit, new_frontier));
            }
        }
    } else {
        return Err(usage(format!(
            "exact_min_ratio: {n} sites exceed the 64-site oracle guard"
        )));
    }

    let (ratio, mask) = best.ok_or_else(|| usage("exact_min_ratio: no admissible candidate"))?;
    let witness = (0..n)
        .filter(|k| (mask >> k) & 1 == 1)
        .map(|k| sites[k])
        .collect();
    Ok(ExactMinRatio {
        ratio,
        witness,
        candidates,
        connected_only,
    })
}

// --- heuristic profile ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct IsoCandidateSummary {
    pub method: String,
    pub size: usize,
    pub boundary: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct IsoperimetryReport {
    pub candidates: u64,
    pub min_ratio: f64,
    pub best: Option<IsoCandidateSummary>,
    pub size_floor: f64,
    pub floor_count: usize,
    /// Per-method minima for CSV output.
    pub per_method: Vec<IsoCandidateSummary>,
}

struct ClusterGraph {
    /// window site index per cluster vertex
    sites: Vec<usize>,
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
    /// degree in S (including neighbors outside the cluster)
    deg_s: Vec<u32>,
}

impl ClusterGraph {
    fn build(cfg: &Config, sites: Vec<usize>) -> ClusterGraph {
        let w = cfg.window();
        let d = w.dim();
        let mut pos = vec![u32::MAX; w.site_count()];
        for (k, &i) in sites.iter().enumerate() {
            pos[i] = k as u32;
        }
        let mut offsets = Vec::with_capacity(sites.len() + 1);
        let mut neighbors = Vec::new();
        let mut deg_s = vec![0u32; sites.len()];
        offsets.push(0u32);
        for (k, &i) in sites.iter().enumerate() {
            for axis in 0..d {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(i, axis, dir) {
                        if cfg.occupied_index(nb) {
                            deg_s[k] += 1;
                            if pos[nb] != u32::MAX {
                                neighbors.push(pos[nb]);
                            }
                        }
                    }
                }
            }
            offsets.push(neighbors.len() as u32);
        }
        ClusterGraph {
            sites,
            offsets,
            neighbors,
            deg_s,
        }
    }

    fn n(&self) -> usize {
        self.sites.len()
    }

    fn nbrs(&self, k: usize) -> &[u32] {
        &self.neighbors[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }
}

/// Minimal observed boundary ratio over three candidate families on the
/// largest cluster of B(0, R): chemical-ball truncations, Fiedler-order
/// sweep prefixes of the cluster walk operator, and greedy local search.
/// Deterministic given seed and budget; candidates respect the size floor
/// `|A| >= ceil(R^theta_iso)`.
pub fn heuristic_profile(
    cfg: &Config,
    radius: i64,
    theta_iso: f64,
    budget: u32,
    seed: u64,
) -> Result<IsoperimetryReport> {
    let w = cfg.window();
    let d = w.dim();
    let size_floor = (radius as f64).powf(theta_iso);
    let floor_count = size_floor.ceil().max(1.0) as usize;
    let mut report = IsoperimetryReport {
        candidates: 0,
        min_ratio: f64::INFINITY,
        best: None,
        size_floor,
        floor_count,
        per_method: Vec::new(),
    };
    if budget == 0 {
        return Ok(report);
    }

    let region = linf_ball(&Point::origin(d), radius as f64)?;
    let labeling = label_components(cfg);
    let best_comp = cluster::largest_component(cfg, &labeling, &region)?;
    let mut cr_sites = Vec::new();
    for p in region.points() {
        if let Some(i) = w.index(&p) {
            if labeling.label_of_index(i) == Some(best_comp.component) {
                cr_sites.push(i);
            }
        }
    }
    cr_sites.sort_unstable();
    cr_sites.dedup();
    if cr_sites.len() < floor_count {
        return Ok(report);
    }
    let graph = ClusterGraph::build(cfg, cr_sites);
    let n = graph.n();

    let mut per_method: std::collections::BTreeMap<String, IsoCandidateSummary> =
        Default::default();
    let mut record = |method: &str, size: usize, boundary: u64, report: &mut IsoperimetryReport| {
        let ratio = ratio_of(boundary, size, d);
        report.candidates += 1;
        let summary = IsoCandidateSummary {
            method: method.to_string(),
            size,
            boundary,
            ratio,
        };
        if ratio < report.min_ratio {
            report.min_ratio = ratio;
            report.best = Some(summary.clone());
        }
        per_method
            .entry(method.to_string())
            .and_modify(|s| {
                if ratio < s.ratio {
                    *s = summary.clone();
                }
            })
            .or_insert(summary);
    };

    // sweep along an ordering: prefixes with |A| >= floor, incremental cut
    let sweep =
        |order: &[u32], method: &str, report: &mut IsoperimetryReport, budget_left: &mut u32,
         record: &mut dyn FnMut(&str, usize, u64, &mut IsoperimetryReport)| {
            let mut in_a = vec![false; n];
            let mut cut = 0i64;
            for (rank, &v) in order.iter().enumerate() {
                let v = v as usize;
                let in_edges = graph.nbrs(v).iter().filter(|&&u| in_a[u as usize]).count();
                cut += graph.deg_s[v] as i64 - 2 * in_edges as i64;
                in_a[v] = true;
                let size = rank + 1;
                if size >= floor_count && *budget_left > 0 {
                    record(method, size, cut as u64, report);
                    *budget_left -= 1;
                }
            }
        };

    let mut budget_left = budget;

    // (i) chemical balls from deterministic centers
    let rng = CounterRng::new(seed, stream::ISO_CANDIDATES);
    let mut centers: Vec<usize> = vec![0]; // canonical site first
    for t in 0..8.min(n as u64) {
        centers.push(rng.below_at(t, n as u64) as usize);
    }
    centers.sort_unstable();
    centers.dedup();
    let mut ball_orders: Vec<Vec<u32>> = Vec::new();
    for &c in &centers {
        if budget_left == 0 {
            break;
        }
        let dist = bfs_in_graph(&graph, c);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by_key(|&v| (dist[v as usize], v));
        sweep(&order, "chemical-ball", &mut report, &mut budget_left, &mut record);
        ball_orders.push(order);
    }

    // (ii) spectral bisection sweep (both directions)
    let mut fiedler_order: Option<Vec<u32>> = None;
    if budget_left > 0 && n >= 2 {
        let fiedler = fiedler_vector(&graph, d, seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| {
            fiedler[a as usize]
                .partial_cmp(&fiedler[b as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        sweep(&order, "spectral-sweep", &mut report, &mut budget_left, &mut record);
        let mut rev = order.clone();
        rev.reverse();
        sweep(&rev, "spectral-sweep", &mut report, &mut budget_left, &mut record);
        fiedler_order = Some(order);
    }

    // (iii) greedy boundary-shrinking local search from the best candidate
    if budget_left > 0 {
        if let Some(best) = report.best.clone() {
            let order: Option<&[u32]> = match best.method.as_str() {
                "chemical-ball" => ball_orders.first().map(|o| o.as_slice()),
                _ => fiedler_order.as_deref(),
            };
            if let Some(order) = order {
                let mut in_a = vec![false; n];
                for &v in order.iter().take(best.size.min(n)) {
                    in_a[v as usize] = true;
                }
                let mut size = best.size.min(n);
                let mut cut: i64 = (0..n)
                    .filter(|&v| in_a[v])
                    .map(|v| {
                        graph.deg_s[v] as i64
                            - graph.nbrs(v).iter().filter(|&&u| in_a[u as usize]).count()
                                as i64
                    })
                    .sum();
                let mut improved = true;
                while improved && budget_left > 0 {
                    improved = false;
                    for v in 0..n {
                        if budget_left == 0 {
                            break;
                        }
                        let deg_in =
                            graph.nbrs(v).iter().filter(|&&u| in_a[u as usize]).count() as i64;
                        let (new_cut, new_size) = if in_a[v] {
                            if size <= floor_count {
                                continue;
                            }
                            (cut - graph.deg_s[v] as i64 + 2 * deg_in, size - 1)
                        } else {
                            (cut + graph.deg_s[v] as i64 - 2 * deg_in, size + 1)
                        };
                        let old_ratio = ratio_of(cut.max(0) as u64, size, d);
                        let new_ratio = ratio_of(new_cut.max(0) as u64, new_size, d);
                        if new_ratio < old_ratio {
                            in_a[v] = !in_a[v];
                            cut = new_cut;
                            size = new_size;
                            budget_left -= 1;
                            record("greedy", size, cut.max(0) as u64, &mut report);
                            improved = true;
                        }
                    }
                }
            }
        }
    }

    report.per_method = per_method.into_values().collect();
    Ok(report)
}

fn bfs_in_graph(graph: &ClusterGraph, start: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; graph.n()];
    let mut queue = std::collections::VecDeque::new();
    dist[start] = 0;
    queue.push_back(start);
    while let Some(cur) = queue.pop_front() {
        for &nb in graph.nbrs(cur) {
            if dist[nb as usize] == u32::MAX {
                dist[nb as usize] = dist[cur] + 1;
                queue.push_back(nb as usize);
            }
        }
    }
    dist
}

/// Second eigenvector of the lazy walk operator on the cluster, by power
/// iteration on (I + P)/2 with the constant mode deflated. Tolerance 1e-8,
/// at most 10^4 iterations; the heuristic accepts the final iterate on
/// non-convergence.
fn fiedler_vector(graph: &ClusterGraph, d: usize, seed: u64) -> Vec<f64> {
    let n = graph.n();
    let rng = CounterRng::new(seed, stream::ISO_CANDIDATES);
    let mut v: Vec<f64> = (0..n as u64).map(|i| rng.uniform_at(i) - 0.5).collect();
    let two_d = (2 * d) as f64;
    let mut next = vec![0.0f64; n];
    for _ in 0..10_000 {
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for k in 0..n {
            let mut acc = 0.0;
            for &nb in graph.nbrs(k) {
                acc += v[nb as usize];
            }
            let stay = 1.0 - graph.nbrs(k).len() as f64 / two_d;
            next[k] = 0.5 * (v[k] + acc / two_d + stay * v[k]);
        }
        let lambda: f64 = v.iter().zip(&next).map(|(a, b)| a * b).sum();
        let resid = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (b - lambda * a).abs())
            .fold(0.0f64, f64::max);
        std::mem::swap(&mut v, &mut next);
        if resid <= 1e-8 {
            break;
        }
    }
    v
}

// --- reduction maps and inequalities --------------------------------------------------

/// d-dimensional prefix sums over the window raster for O(2^d) box counts.
struct PrefixSums {
    data: Vec<u64>,
    side: i64,
    lo: i64,
    strides: Vec<usize>,
    d: usize,
}

impl PrefixSums {
    fn build(cfg: &Config, mask: &[bool]) -> PrefixSums {
        let w = cfg.window();
        let d = w.dim();
        let side = w.side();
        let n = w.site_count();
        let strides: Vec<usize> = (0..d)
            .map(|a| (side as usize).pow((d - 1 - a) as u32))
            .collect();
        let mut data: Vec<u64> = mask.iter().map(|&b| b as u64).collect();
        for a in 0..d {
            for idx in 0..n {
                let pos = (idx / strides[a]) % side as usize;
                if pos > 0 {
                    data[idx] += data[idx - strides[a]];
                }
            }
        }
        PrefixSums {
            data,
            side,
            lo: w.lo(),
            strides,
            d,
        }
    }

    /// Count of masked sites with coordinates in [lo_i, hi_i] per axis
    /// (clipped to the window).
    fn box_count(&self, lo: &[i64], hi: &[i64]) -> u64 {
        let mut lo_off = vec![0i64; self.d];
        let mut hi_off = vec![0i64; self.d];
        for a in 0..self.d {
            lo_off[a] = (lo[a] - self.lo).max(0);
            hi_off[a] = (hi[a] - self.lo).min(self.side - 1);
            if hi_off[a] < lo_off[a] {
                return 0;
            }
        }
        let mut total = 0i64;
        for corner in 0..(1u32 << self.d) {
            let mut idx = 0usize;
            let mut sign = 1i64;
            let mut skip = false;
            for a in 0..self.d {
                let off = if (corner >> a) & 1 == 1 {
                    sign = -sign;
                    lo_off[a] - 1
                } else {
                    hi_off[a]
                };
                if off < 0 {
                    skip = true;
                    break;
                }
                idx += off as usize * self.strides[a];
            }
            if !skip {
                total += sign * self.data[idx] as i64;
            }
        }
        total as u64
    }
}

/// The coarse image M_A (fat-set members whose special component meets A)
/// and the deep set D_A (sites of A within l-infinity distance 2 L_s of the
/// big cluster's complement of A).
pub fn map_ma_da(
    cfg: &Config,
    fat: &FatSet,
    special: &SpecialComponents,
    a: &SiteSet,
) -> Result<(BTreeSet<Point>, SiteSet)> {
    let w = cfg.window();
    if w.wrap() {
        return Err(usage("map_ma_da requires a hard-boundary window"));
    }
    let owner = special.site_owner();
    let mut m_a: BTreeSet<Point> = BTreeSet::new();
    for &i in a.indices() {
        if let Some(member) = owner.get(&i) {
            m_a.insert(member.clone());
        }
    }

    // C_{2R} = largest component of S ∩ B(0, 2R)
    let ball = linf_ball(&Point::origin(w.dim()), 2.0 * fat.radius as f64)?;
    w.require_box(&ball, "map_ma_da")?;
    let local = cluster::box_restricted_labels(cfg, &ball);
    let mut counts: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for &l in &local {
        if l != cluster::NO_LABEL {
            *counts.entry(l).or_default() += 1;
        }
    }
    let c2r = counts
        .into_iter()
        .max_by_key(|&(l, c)| (c, std::cmp::Reverse(l)))
        .map(|(l, _)| l)
        .ok_or_else(|| usage("map_ma_da: S ∩ B(0,2R) is empty"))?;

    let mut complement = vec![false; w.site_count()];
    for (i, &l) in local.iter().enumerate() {
        if l == c2r && !a.contains(i) {
            complement[i] = true;
        }
    }
    let sums = PrefixSums::build(cfg, &complement);
    let reach = 2 * fat.big_ls;
    let mut d_a = Vec::new();
    for &i in a.indices() {
        let p = w.decode(i);
        let lo: Vec<i64> = p.0.iter().map(|c| c - reach).collect();
        let hi: Vec<i64> = p.0.iter().map(|c| c + reach).collect();
        if sums.box_count(&lo, &hi) > 0 {
            d_a.push(i);
        }
    }
    Ok((m_a, SiteSet { indices: d_a }))
}

/// Boundary of a coarse subset within the fat set: member pairs at l1
/// distance L0 with one endpoint in the subset and the other outside it.
pub fn coarse_boundary(fat: &FatSet, subset: &BTreeSet<Point>) -> u64 {
    let mut count = 0u64;
    for m in subset {
        for axis in 0..m.dim() {
            for dir in [1i64, -1] {
                let mut n = m.clone();
                n.0[axis] += dir * fat.big_l0;
                if fat.members.contains(&n) && !subset.contains(&n) {
                    count += 1;
                }
            }
        }
    }
    count
}

#[derive(Clone, Debug)]
pub struct ReductionReport {
    pub a_size: usize,
    pub boundary: u64,
    pub m_a_size: usize,
    pub d_a_size: usize,
    pub coarse_boundary: u64,
    /// `|∂_S A| >= max{ |∂_G M_A| / (d 2^d), |D_A| / (11 L_s)^d }`
    pub boundary_ok: bool,
    /// `|A| <= 6^d L0^d |M_A| + |D_A|`
    pub volume_ok: bool,
    /// Empirical coarse isoperimetry constant `|∂_G M_A| / |M_A|^{(d-1)/d}`.
    pub gamma_coarse: Option<f64>,
    /// False marks the result as unconditioned: event H was not verified,
    /// and the inequalities are only guaranteed on H.
    pub conditioned_on_h: bool,
}

/// Evaluates both reduction inequalities for a subset A of the largest
/// cluster of B(0, R), plus the empirical coarse isoperimetry constant.
pub fn check_reduction_inequalities(
    cfg: &Config,
    fat: &FatSet,
    special: &SpecialComponents,
    a: &SiteSet,
    h_verified: bool,
) -> Result<ReductionReport> {
    let d = cfg.window().dim();
    let boundary = edge_boundary(cfg, a)?;
    let (m_a, d_a) = map_ma_da(cfg, fat, special, a)?;
    let coarse = coarse_boundary(fat, &m_a);

    let bound1 = coarse as f64 / (d as f64 * (2f64).powi(d as i32));
    let bound2 = d_a.len() as f64 / (11.0 * fat.big_ls as f64).powi(d as i32);
    let boundary_ok = boundary as f64 >= bound1.max(bound2);
    let volume_ok = a.len() as f64
        <= (6f64).powi(d as i32) * (fat.big_l0 as f64).powi(d as i32) * m_a.len() as f64
            + d_a.len() as f64;
    let gamma_coarse = if m_a.is_empty() {
        None
    } else {
        Some(coarse as f64 / (m_a.len() as f64).powf((d as f64 - 1.0) / d as f64))
    };
    Ok(ReductionReport {
        a_size: a.len(),
        boundary,
        m_a_size: m_a.len(),
        d_a_size: d_a.len(),
        coarse_boundary: coarse,
        boundary_ok,
        volume_ok,
        gamma_coarse,
        conditioned_on_h: h_verified,
    })
}

/// The set of L_s-boxes where the coarse set reaches density 1/2 (closed
/// threshold) in `(L_s/L0)^d` units.
pub fn coarse_density_boxes(fat: &FatSet, coarse: &BTreeSet<Point>) -> BTreeSet<Point> {
    let d = fat.top.first().map_or(2, |p| p.dim());
    let threshold = 0.5 * ((fat.big_ls / fat.big_l0) as f64).powi(d as i32);
    let mut out = BTreeSet::new();
    for top in &fat.top {
        let count = coarse
            .iter()
            .filter(|m| {
                m.0.iter()
                    .zip(&top.0)
                    .all(|(c, t)| *c >= *t && *c < *t + fat.big_ls)
            })
            .count();
        if count as f64 >= threshold {
            out.insert(top.clone());
        }
    }
    out
}

/// Minimal observed coarse slice boundary constant for one 3L_s box: over
/// coordinate-prefix cuts and ball-shaped coarse subsets whose sizes sit in
/// the band `[1/2 (L_s/L0)^d, (3^d - 1/2) (L_s/L0)^d]`, the smallest
/// `|∂_g a| / (L_s/L0)^{d-1}`. None when no candidate lands in the band.
pub fn coarse_slice_gamma(fat: &FatSet, x_s: &Point, seed: u64) -> Option<f64> {
    let d = x_s.dim();
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
    if in_box3.is_empty() {
        return None;
    }
    let unit = ((fat.big_ls / fat.big_l0) as f64).powi(d as i32);
    let band = 0.5 * unit..=((3f64).powi(d as i32) - 0.5) * unit;
    let scale = ((fat.big_ls / fat.big_l0) as f64).powi(d as i32 - 1);

    let boundary_in_g = |subset: &BTreeSet<Point>| -> u64 {
        let mut count = 0u64;
        for m in subset {
            for axis in 0..d {
                for dir in [1i64, -1] {
                    let mut n = m.clone();
                    n.0[axis] += dir * fat.big_l0;
                    let inside3 = n
                        .0
                        .iter()
                        .zip(&corner3.0)
                        .all(|(c, t)| *c >= *t && *c < *t + 3 * fat.big_ls);
                    if inside3 && fat.members.contains(&n) && !subset.contains(&n) {
                        count += 1;
                    }
                }
            }
        }
        count
    };

    let mut best: Option<f64> = None;
    let push = |subset: &BTreeSet<Point>, best: &mut Option<f64>| {
        if band.contains(&(subset.len() as f64)) {
            let gamma = boundary_in_g(subset) as f64 / scale;
            *best = Some(best.map_or(gamma, |b| b.min(gamma)));
        }
    };

    // coordinate-prefix cuts
    for axis in 0..d {
        let mut coords: Vec<i64> = in_box3.iter().map(|m| m.0[axis]).collect();
        coords.sort_unstable();
        coords.dedup();
        for &cut in &coords {
            let subset: BTreeSet<Point> = in_box3
                .iter()
                .filter(|m| m.0[axis] <= cut)
                .map(|m| (*m).clone())
                .collect();
            push(&subset, &mut best);
        }
    }
    // ball-shaped subsets from seeded centers
    let rng = CounterRng::new(seed, stream::SUBSETS);
    for t in 0..4u64 {
        let center = in_box3[rng.below_at(t, in_box3.len() as u64) as usize].clone();
        let mut by_dist: Vec<(&Point, u64)> = in_box3
            .iter()
            .map(|m| {
                let dist: u64 = m.0.iter().zip(&center.0).map(|(a, b)| a.abs_diff(*b)).sum();
                (*m, dist)
            })
            .collect();
        by_dist.sort_by(|a, b| (a.1, &a.0 .0).cmp(&(b.1, &b.0 .0)));
        let lo = (0.5 * unit).ceil() as usize;
        let hi = ((((3f64).powi(d as i32) - 0.5) * unit).floor() as usize).min(by_dist.len());
        for take in [lo, (lo + hi) / 2, hi] {
            if take == 0 || take > by_dist.len() {
                continue;
            }
            let subset: BTreeSet<Point> =
                by_dist[..take].iter().map(|(m, _)| (*m).clone()).collect();
            push(&subset, &mut best);
        }
    }
    best
}
