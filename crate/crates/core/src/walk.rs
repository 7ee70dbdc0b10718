//! The lazy simple random walk on a configuration and its diagnostics:
//! mean-square displacement, endpoint covariance of the rescaled process,
//! exact return probabilities by forward convolution, and the finite-window
//! corrector estimate with its sublinearity check.
//!
//! Kernel: from an occupied site y, each occupied l1-neighbor is reached
//! with probability 1/(2d) and the walk holds with probability
//! 1 - deg(y)/(2d). Walk positions are tracked unwrapped (cover
//! coordinates) so displacement statistics are meaningful on tori.

use nalgebra::DMatrix;

use crate::cluster::{label_components, largest_component};
use crate::error::{usage, Error, Result};
use crate::lattice::{LatticeBox, Point};
use crate::rng::{stream, substream, CounterRng};
use crate::sampler::Config;

/// One-step distribution at a site, kept in exact rational form: each entry
/// is a numerator over the common denominator 2d.
#[derive(Clone, Debug)]
pub struct StepDistribution {
    pub entries: Vec<(Point, u32)>,
    pub denominator: u32,
}

impl StepDistribution {
    pub fn numerator_sum(&self) -> u32 {
        self.entries.iter().map(|(_, n)| n).sum()
    }

    pub fn probability(&self, p: &Point) -> f64 {
        self.entries
            .iter()
            .find(|(q, _)| q == p)
            .map_or(0.0, |(_, n)| *n as f64 / self.denominator as f64)
    }
}

/// The kernel row at y: occupied neighbors get 1/(2d), y keeps the rest.
pub fn step_distribution(cfg: &Config, y: &Point) -> Result<StepDistribution> {
    let w = cfg.window();
    let d = w.dim();
    let yi = w
        .index(y)
        .filter(|&i| cfg.occupied_index(i))
        .ok_or_else(|| usage("step_distribution: y is not an occupied site"))?;
    let mut entries = Vec::with_capacity(2 * d + 1);
    let mut deg = 0u32;
    for axis in 0..d {
        for dir in [1i64, -1] {
            if let Some(nb) = w.neighbor_index(yi, axis, dir) {
                if cfg.occupied_index(nb) {
                    let mut q = y.clone();
                    q.0[axis] += dir;
                    entries.push((q, 1));
                    deg += 1;
                }
            }
        }
    }
    entries.push((y.clone(), 2 * d as u32 - deg));
    Ok(StepDistribution {
        entries,
        denominator: 2 * d as u32,
    })
}

/// A walker over one configuration with unwrapped position tracking.
/// Step j draws its direction from the counter stream at index j, so a
/// path is a pure function of (config, start, seed). The canonical site
/// index is maintained incrementally, keeping steps allocation-free.
pub struct Walker<'a> {
    cfg: &'a Config,
    pub pos: Vec<i64>,
    idx: usize,
    rng: CounterRng,
    step_index: u64,
    d: usize,
}

impl<'a> Walker<'a> {
    pub fn new(cfg: &'a Config, x0: &Point, seed: u64) -> Result<Walker<'a>> {
        let idx = cfg
            .window()
            .index(&cfg.window().reduce(x0))
            .filter(|&i| cfg.occupied_index(i))
            .ok_or_else(|| usage("walk start must be an occupied site"))?;
        Ok(Walker {
            cfg,
            pos: x0.0.clone(),
            idx,
            rng: CounterRng::new(seed, stream::WALK_STEPS),
            step_index: 0,
            d: cfg.window().dim(),
        })
    }

    /// One lazy step: pick one of 2d directions uniformly, move when the
    /// target is occupied (off-window targets of a hard window never are).
    #[inline]
    pub fn step(&mut self) {
        let dir = self.rng.below_at(self.step_index, 2 * self.d as u64) as usize;
        self.step_index += 1;
        let (axis, sign) = (dir / 2, if dir % 2 == 0 { 1i64 } else { -1 });
        if let Some(nb) = self.cfg.window().neighbor_index(self.idx, axis, sign) {
            if self.cfg.occupied_index(nb) {
                self.idx = nb;
                self.pos[axis] += sign;
            }
        }
    }
}

/// A realized path: n+1 unwrapped positions.
#[derive(Clone, Debug)]
pub struct WalkPath {
    pub sites: Vec<Point>,
    pub start: Point,
    pub seed: u64,
}

pub fn simulate_walk(cfg: &Config, x0: &Point, n: u64, seed: u64) -> Result<WalkPath> {
    let mut walker = Walker::new(cfg, x0, seed)?;
    let mut sites = Vec::with_capacity(n as usize + 1);
    sites.push(Point(walker.pos.clone()));
    for _ in 0..n {
        walker.step();
        sites.push(Point(walker.pos.clone()));
    }
    Ok(WalkPath {
        sites,
        start: x0.clone(),
        seed,
    })
}

/// The rescaled, linearly interpolated process at time t:
/// `(X_{floor(tn)} + (tn - floor(tn)) (X_{floor(tn)+1} - X_{floor(tn)})) / sqrt(n)`.
pub fn interpolate(path: &WalkPath, n: u64, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(usage("interpolate: t must be >= 0"));
    }
    let tn = t * n as f64;
    let k = tn.floor() as usize;
    let frac = tn - tn.floor();
    if k + 1 > path.sites.len() || (frac > 0.0 && k + 2 > path.sites.len()) {
        return Err(usage(format!(
            "interpolate: t = {t} reaches beyond the stored path"
        )));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let xk = &path.sites[k];
    let out = if frac == 0.0 {
        xk.0.iter().map(|&c| c as f64 * scale).collect()
    } else {
        let xk1 = &path.sites[k + 1];
        xk.0
            .iter()
            .zip(&xk1.0)
            .map(|(&a, &b)| (a as f64 + frac * (b - a) as f64) * scale)
            .collect()
    };
    Ok(out)
}

// --- displacement statistics ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MsdPoint {
    pub n: u64,
    pub msd: f64,
    pub stderr: f64,
}

/// Mean-square displacement E|X_n - X_0|^2 at the requested times, averaged
/// over replicas with independent derived seeds.
pub fn estimate_msd(
    cfg: &Config,
    x0: &Point,
    times: &[u64],
    replicas: u32,
    seed: u64,
) -> Result<Vec<MsdPoint>> {
    if replicas == 0 || times.is_empty() {
        return Err(usage("estimate_msd needs replicas >= 1 and a time grid"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_unstable();
    let horizon = *sorted.last().unwrap();
    let mut sum = vec![0.0f64; sorted.len()];
    let mut sumsq = vec![0.0f64; sorted.len()];
    for rep in 0..replicas {
        let mut walker = Walker::new(cfg, x0, substream(seed, stream::REPLICA, rep as u64))?;
        let mut next = 0usize;
        for step in 0..=horizon {
            while next < sorted.len() && sorted[next] == step {
                let disp: f64 = walker
                    .pos
                    .iter()
                    .zip(&x0.0)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                sum[next] += disp;
                sumsq[next] += disp * disp;
                next += 1;
            }
            if step < horizon {
                walker.step();
            }
        }
    }
    let m = replicas as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let mean = sum[i] / m;
            let var = (sumsq[i] / m - mean * mean).max(0.0);
            MsdPoint {
                n,
                msd: mean,
                stderr: (var / m).sqrt(),
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    /// d x d covariance of the rescaled endpoint.
    pub covariance: DMatrix<f64>,
    /// Jackknife half-widths per entry (1.96 sigma).
    pub halfwidths: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub min_eigenvalue_halfwidth: f64,
    pub replicas: u32,
}

/// Covariance of the rescaled endpoint `B_n(T)` over independent replicas,
/// with leave-one-out jackknife half-widths and the smallest eigenvalue as
/// the non-degeneracy diagnostic.
pub fn estimate_covariance(
    cfg: &Config,
    x0: &Point,
    n: u64,
    horizon_t: f64,
    replicas: u32,
    seed: u64,
) -> Result<CovarianceEstimate> {
    if replicas < 2 {
        return Err(usage("estimate_covariance needs at least two replicas"));
    }
    let d = cfg.window().dim();
    let steps = (horizon_t * n as f64).ceil() as u64;
    let scale = 1.0 / (n as f64).sqrt();

    let mut endpoints: Vec<Vec<f64>> = Vec::with_capacity(replicas as usize);
    for rep in 0..replicas {
        let mut walker = Walker::new(cfg, x0, substream(seed, stream::REPLICA, rep as u64))?;
        for _ in 0..steps {
            walker.step();
        }
        endpoints.push(
            walker
                .pos
                .iter()
                .zip(&x0.0)
                .map(|(a, b)| (a - b) as f64 * scale)
                .collect(),
        );
    }

    let m = replicas as f64;
    let mut mean = vec![0.0f64; d];
    for v in &endpoints {
        for (a, x) in mean.iter_mut().zip(v) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m);
    let mut cov = DMatrix::zeros(d, d);
    for v in &endpoints {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]);
            }
        }
    }
    cov /= m - 1.0;

    let min_eig = |mat: &DMatrix<f64>| -> f64 {
        mat.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };

    // leave-one-out jackknife on every entry and on the smallest eigenvalue
    let sum: Vec<f64> = (0..d).map(|i| endpoints.iter().map(|v| v[i]).sum()).collect();
    let mut cross = DMatrix::<f64>::zeros(d, d);
    for v in &endpoints {
        for i in 0..d {
            for j in 0..d {
                cross[(i, j)] += v[i] * v[j];
            }
        }
    }
    let mut theta_entries: Vec<DMatrix<f64>> = Vec::with_capacity(replicas as usize);
    let mut theta_eigs: Vec<f64> = Vec::with_capacity(replicas as usize);
    for v in &endpoints {
        let mm = m - 1.0;
        let mut loo = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let s_i = (sum[i] - v[i]) / mm;
                let s_j = (sum[j] - v[j]) / mm;
                let c = cross[(i, j)] - v[i] * v[j];
                loo[(i, j)] = (c - mm * s_i * s_j) / (mm - 1.0);
            }
        }
        theta_eigs.push(min_eig(&loo));
        theta_entries.push(loo);
    }
    let mut halfwidths = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let vals: Vec<f64> = theta_entries.iter().map(|t| t[(i, j)]).collect();
            halfwidths[(i, j)] = 1.96 * jackknife_se(&vals);
        }
    }
    let min_eigenvalue = min_eig(&cov);

    Ok(CovarianceEstimate {
        covariance: cov,
        halfwidths,
        min_eigenvalue,
        min_eigenvalue_halfwidth: 1.96 * jackknife_se(&theta_eigs),
        replicas,
    })
}

fn jackknife_se(theta: &[f64]) -> f64 {
    let m = theta.len() as f64;
    let mean = theta.iter().sum::<f64>() / m;
    let var = theta.iter().map(|t| (t - mean).powi(2)).sum::<f64>() * (m - 1.0) / m;
    var.sqrt()
}

// --- exact return probabilities ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ReturnProbabilities {
    /// p[k] = P[X_k = x], exact up to floating point.
    pub p: Vec<f64>,
    /// sup and inf of n^{d/2} p_{2n} over the stated n-range.
    pub sup_scaled: f64,
    pub inf_scaled: f64,
    pub range: (u64, u64),
    /// Set when the horizon exceeds side/2 steps of influence propagation
    /// (wrap images or the hard boundary may touch the values).
    pub truncated: bool,
}

/// Return probabilities at `x` by exact forward convolution of the kernel
/// over the window, up to `n_max` steps. The scaled statistics are reported
/// over `range` (inclusive, in n with p_{2n}).
pub fn return_probability(
    cfg: &Config,
    x: &Point,
    n_max: u64,
    range: (u64, u64),
) -> Result<ReturnProbabilities> {
    let w = cfg.window();
    let d = w.dim();
    let xi = w
        .index(x)
        .filter(|&i| cfg.occupied_index(i))
        .ok_or_else(|| usage("return_probability: x is not an occupied site"))?;
    let count = w.site_count();
    let two_d = 2 * d;
    let inv = 1.0 / two_d as f64;

    // occupied-neighbor table, u32::MAX marking closed directions
    let mut nbrs = vec![u32::MAX; count * two_d];
    for i in 0..count {
        if !cfg.occupied_index(i) {
            continue;
        }
        for axis in 0..d {
            for (slot, dir) in [(2 * axis, 1i64), (2 * axis + 1, -1)] {
                if let Some(nb) = w.neighbor_index(i, axis, dir) {
                    if cfg.occupied_index(nb) {
                        nbrs[i * two_d + slot] = nb as u32;
                    }
                }
            }
        }
    }

    let mut cur = vec![0.0f64; count];
    let mut next = vec![0.0f64; count];
    cur[xi] = 1.0;
    let mut p = Vec::with_capacity(n_max as usize + 1);
    p.push(1.0);
    for _ in 0..n_max {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let mut moved = 0u32;
            let spread = mass * inv;
            for slot in 0..two_d {
                let nb = nbrs[i * two_d + slot];
                if nb != u32::MAX {
                    next[nb as usize] += spread;
                    moved += 1;
                }
            }
            next[i] += mass * (1.0 - moved as f64 * inv);
        }
        std::mem::swap(&mut cur, &mut next);
        p.push(cur[xi]);
    }

    let (lo, hi) = range;
    let mut sup_scaled = f64::NEG_INFINITY;
    let mut inf_scaled = f64::INFINITY;
    for n in lo..=hi {
        if 2 * n > n_max {
            break;
        }
        let scaled = (n as f64).powf(d as f64 / 2.0) * p[(2 * n) as usize];
        sup_scaled = sup_scaled.max(scaled);
        inf_scaled = inf_scaled.min(scaled);
    }
    Ok(ReturnProbabilities {
        p,
        sup_scaled,
        inf_scaled,
        range,
        truncated: n_max > (w.side() / 2) as u64,
    })
}

// --- corrector ------------------------------------------------------------------------

/// The corrector field chi on a sub-window of the cluster: x + chi(x) is
/// harmonic for the walk kernel inside, with identity boundary data on the
/// cluster sites touching the sub-window boundary, shifted so that the
/// anchor has chi = 0.
#[derive(Clone, Debug)]
pub struct CorrectorField {
    pub sub_window: LatticeBox,
    pub anchor: Point,
    /// site index -> chi vector (only sites of the solved component)
    pub chi: std::collections::HashMap<usize, Vec<f64>>,
    pub residual: f64,
    pub iterations: u32,
    pub interior_sites: usize,
}

impl CorrectorField {
    pub fn max_abs(&self) -> f64 {
        self.chi
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Solves the Dirichlet problem for `phi = id + chi` on the component of
/// `anchor` within `sub_window` by conjugate gradients on the graph
/// Laplacian (identity start, so the full lattice solves in one step).
pub fn estimate_corrector(
    cfg: &Config,
    sub_window: &LatticeBox,
    anchor: &Point,
    tolerance: f64,
) -> Result<CorrectorField> {
    let w = cfg.window();
    let d = w.dim();
    w.require_box(sub_window, "estimate_corrector")?;
    let anchor_idx = w
        .index(anchor)
        .filter(|&i| cfg.occupied_index(i))
        .ok_or_else(|| usage("estimate_corrector: anchor must be occupied"))?;
    {
        let labeling = label_components(cfg);
        let best = largest_component(cfg, &labeling, &w.bounding_box())?;
        if labeling.label_of_index(anchor_idx) != Some(best.component) {
            return Err(usage(
                "estimate_corrector: anchor must lie in the largest component",
            ));
        }
    }

    // component of the anchor within the sub-window
    let mut in_sub = vec![false; w.site_count()];
    let mut on_ring = vec![false; w.site_count()];
    for p in sub_window.points() {
        if let Some(i) = w.index(&p) {
            in_sub[i] = true;
            let ring = p
                .0
                .iter()
                .zip(&sub_window.corner.0)
                .any(|(c, lo)| *c == *lo || *c == lo + sub_window.side - 1);
            on_ring[i] = ring;
        }
    }
    if !sub_window.contains(anchor) {
        return Err(usage("estimate_corrector: anchor outside the sub-window"));
    }
    let mut comp = Vec::new();
    {
        let mut visited = vec![false; w.site_count()];
        let mut queue = std::collections::VecDeque::new();
        visited[anchor_idx] = true;
        queue.push_back(anchor_idx);
        while let Some(cur) = queue.pop_front() {
            comp.push(cur);
            for axis in 0..d {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                        if in_sub[nb] && cfg.occupied_index(nb) && !visited[nb] {
                            visited[nb] = true;
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
    }
    comp.sort_unstable();

    let interior: Vec<usize> = comp.iter().copied().filter(|&i| !on_ring[i]).collect();
    let boundary: Vec<usize> = comp.iter().copied().filter(|&i| on_ring[i]).collect();

    let mut phi: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    for &i in &comp {
        let p = w.decode(i);
        phi.insert(i, p.0.iter().map(|&c| c as f64).collect());
    }

    if boundary.is_empty() && !interior.is_empty() {
        return Err(usage(
            "estimate_corrector: the component never touches the sub-window \
             boundary, so the Dirichlet data is empty",
        ));
    }
    let mut residual = 0.0f64;
    let mut iterations = 0u32;
    if !interior.is_empty() {
        // CG on L_II phi_I = -L_IB phi_B, one right-hand side per coordinate
        let pos: std::collections::HashMap<usize, usize> = interior
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, k))
            .collect();
        let n = interior.len();
        // adjacency of interior sites: (interior neighbor positions, boundary neighbors)
        let mut nbrs_in: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut nbrs_bd: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut in_comp = vec![false; w.site_count()];
        for &i in &comp {
            in_comp[i] = true;
        }
        for (k, &i) in interior.iter().enumerate() {
            for axis in 0..d {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(i, axis, dir) {
                        if in_comp[nb] {
                            match pos.get(&nb) {
                                Some(&kk) => nbrs_in[k].push(kk),
                                None => nbrs_bd[k].push(nb),
                            }
                        }
                    }
                }
            }
        }
        let apply = |x: &[f64], out: &mut [f64]| {
            for k in 0..n {
                let deg = (nbrs_in[k].len() + nbrs_bd[k].len()) as f64;
                let mut acc = deg * x[k];
                for &kk in &nbrs_in[k] {
                    acc -= x[kk];
                }
                out[k] = acc;
            }
        };

        for coord in 0..d {
            let mut x: Vec<f64> = interior
                .iter()
                .map(|&i| w.decode(i).0[coord] as f64)
                .collect();
            let mut b = vec![0.0f64; n];
            for k in 0..n {
                for &nbidx in &nbrs_bd[k] {
                    b[k] += w.decode(nbidx).0[coord] as f64;
                }
            }
            // r = b - A x
            let mut ax = vec![0.0; n];
            apply(&x, &mut ax);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let mut pvec = r.clone();
            let mut rs: f64 = r.iter().map(|v| v * v).sum();
            let cap = 20_000u32.max(4 * n as u32);
            let mut it = 0u32;
            while rs.sqrt() > tolerance && it < cap {
                let mut ap = vec![0.0; n];
                apply(&pvec, &mut ap);
                let denom: f64 = pvec.iter().zip(&ap).map(|(p, a)| p * a).sum();
                if denom <= 0.0 {
                    break;
                }
                let alpha = rs / denom;
                for k in 0..n {
                    x[k] += alpha * pvec[k];
                    r[k] -= alpha * ap[k];
                }
                let rs_new: f64 = r.iter().map(|v| v * v).sum();
                let beta = rs_new / rs;
                rs = rs_new;
                for k in 0..n {
                    pvec[k] = r[k] + beta * pvec[k];
                }
                it += 1;
            }
            iterations = iterations.max(it);
            if rs.sqrt() > tolerance {
                return Err(Error::Solver(format!(
                    "corrector CG stalled at residual {} (tolerance {tolerance})",
                    rs.sqrt()
                )));
            }
            residual = residual.max(rs.sqrt());
            for (k, &i) in interior.iter().enumerate() {
                phi.get_mut(&i).unwrap()[coord] = x[k];
            }
        }
    }

    // chi = phi - id, anchored at zero
    let anchor_phi = phi[&anchor_idx].clone();
    let anchor_coords: Vec<f64> = anchor.0.iter().map(|&c| c as f64).collect();
    let mut chi = std::collections::HashMap::new();
    for (&i, ph) in &phi {
        let p = w.decode(i);
        let v: Vec<f64> = (0..d)
            .map(|a| ph[a] - p.0[a] as f64 - (anchor_phi[a] - anchor_coords[a]))
            .collect();
        chi.insert(i, v);
    }
    Ok(CorrectorField {
        sub_window: sub_window.clone(),
        anchor: anchor.clone(),
        chi,
        residual,
        iterations,
        interior_sites: interior.len(),
    })
}

#[derive(Clone, Debug)]
pub struct SublinearityReport {
    /// (radius k, m_k = max |chi| / k) in increasing radius order.
    pub m: Vec<(i64, f64)>,
    /// Consecutive ratios m_{k+1} / m_k (0/0 counts as decreasing).
    pub ratios: Vec<f64>,
    /// Whether the top doubling decreased (m at the largest radius is at
    /// most m at the previous radius).
    pub top_decreasing: bool,
}

/// Sublinearity diagnostic over nested corrector fields: the sequence
/// `m_k = max |chi| / k` should trend down if `chi` is sublinear.
pub fn check_corrector_sublinearity(fields: &[CorrectorField]) -> Result<SublinearityReport> {
    if fields.len() < 3 {
        return Err(usage(
            "check_corrector_sublinearity needs at least 3 nested radii",
        ));
    }
    let mut m: Vec<(i64, f64)> = fields
        .iter()
        .map(|f| {
            let k = (f.sub_window.side - 1) / 2;
            (k, f.max_abs() / k as f64)
        })
        .collect();
    m.sort_by_key(|&(k, _)| k);
    if m.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(usage("sublinearity radii must be distinct"));
    }
    let ratios: Vec<f64> = m
        .windows(2)
        .map(|w| {
            if w[0].1 == 0.0 {
                if w[1].1 == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                w[1].1 / w[0].1
            }
        })
        .collect();
    let top_decreasing = m[m.len() - 1].1 <= m[m.len() - 2].1;
    Ok(SublinearityReport {
        m,
        ratios,
        top_decreasing,
    })
}

/// Spot-check of the shift consistency of the corrector: solving on a
/// translated sub-window of the same configuration, the difference
/// `chi(x) - chi(y)` should approximate the translated field at `x - y`.
/// Returns the maximal deviation over the common sites.
pub fn shift_consistency_check(
    cfg: &Config,
    sub_window: &LatticeBox,
    anchor: &Point,
    shift: &Point,
    tolerance: f64,
) -> Result<f64> {
    let w = cfg.window();
    let base = estimate_corrector(cfg, sub_window, anchor, tolerance)?;
    let shifted_window = LatticeBox::new(sub_window.corner.add(shift), sub_window.side)?;
    let shifted_anchor = anchor.add(shift);
    let shifted = estimate_corrector(cfg, &shifted_window, &shifted_anchor, tolerance)?;

    let yi = w
        .index(&shifted_anchor)
        .ok_or_else(|| usage("shifted anchor outside the window"))?;
    let chi_y = base
        .chi
        .get(&yi)
        .ok_or_else(|| usage("shifted anchor not in the base solve"))?;
    let mut max_dev = 0.0f64;
    for (&i, v_shifted) in &shifted.chi {
        let Some(v_base) = base.chi.get(&i) else {
            continue;
        };
        let dev: f64 = (0..w.dim())
            .map(|a| (v_base[a] - chi_y[a] - v_shifted[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        max_dev = max_dev.max(dev);
    }
    Ok(max_dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Window;
    use crate::sampler::{sample, ModelKind, ModelSpec};

    fn full_config(side: i64, d: usize, wrap: bool) -> Config {
        let w = Window::new(side, d, wrap).unwrap();
        sample(&ModelSpec::new(ModelKind::Bernoulli, 1.0, w, 0)).unwrap()
    }

    fn config_from_sites(side: i64, sites: &[&[i64]]) -> Config {
        let w = Window::new(side, 2, false).unwrap();
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.5, w.clone(), 0);
        let idx: std::collections::HashSet<usize> = sites
            .iter()
            .map(|s| w.index(&Point(s.to_vec())).unwrap())
            .collect();
        Config::from_bits(w, |i| idx.contains(&i), spec)
    }

    #[test]
    fn step_distribution_rows() {
        let cfg = full_config(8, 2, true);
        let dist = step_distribution(&cfg, &Point(vec![0, 0])).unwrap();
        assert_eq!(dist.numerator_sum(), 4);
        assert_eq!(dist.entries.len(), 5);
        assert_eq!(dist.probability(&Point(vec![0, 0])), 0.0 / 4.0);
        assert_eq!(dist.probability(&Point(vec![1, 0])), 0.25);

        // isolated site: stay with probability 1
        let cfg = config_from_sites(8, &[&[0, 0]]);
        let dist = step_distribution(&cfg, &Point(vec![0, 0])).unwrap();
        assert_eq!(dist.probability(&Point(vec![0, 0])), 1.0);
        assert_eq!(dist.numerator_sum(), 4);

        // degree 3 in d=2: stay probability 1/4
        let cfg = config_from_sites(8, &[&[0, 0], &[1, 0], &[-1, 0], &[0, 1]]);
        let dist = step_distribution(&cfg, &Point(vec![0, 0])).unwrap();
        assert_eq!(dist.probability(&Point(vec![0, 0])), 0.25);

        assert!(step_distribution(&cfg, &Point(vec![3, 3])).is_err());
    }

    #[test]
    fn walk_trivial_paths() {
        let cfg = config_from_sites(8, &[&[0, 0]]);
        let path = simulate_walk(&cfg, &Point(vec![0, 0]), 10, 1).unwrap();
        assert_eq!(path.sites.len(), 11);
        assert!(path.sites.iter().all(|p| p.0 == vec![0, 0]));

        let path = simulate_walk(&cfg, &Point(vec![0, 0]), 0, 1).unwrap();
        assert_eq!(path.sites.len(), 1);

        assert!(simulate_walk(&cfg, &Point(vec![1, 1]), 5, 1).is_err());
    }

    #[test]
    fn walk_is_deterministic() {
        let cfg = full_config(16, 2, true);
        let a = simulate_walk(&cfg, &Point(vec![0, 0]), 200, 9).unwrap();
        let b = simulate_walk(&cfg, &Point(vec![0, 0]), 200, 9).unwrap();
        assert_eq!(a.sites, b.sites);
        let c = simulate_walk(&cfg, &Point(vec![0, 0]), 200, 10).unwrap();
        assert_ne!(a.sites, c.sites);
    }

    #[test]
    fn interpolation_examples() {
        let cfg = full_config(16, 2, true);
        let n = 16u64;
        let path = simulate_walk(&cfg, &Point(vec![0, 0]), n, 3).unwrap();
        let scale = 1.0 / (n as f64).sqrt();

        let at0 = interpolate(&path, n, 0.0).unwrap();
        assert_eq!(at0, vec![0.0, 0.0]);

        let k = 4;
        let atk = interpolate(&path, n, k as f64 / n as f64).unwrap();
        for (a, &c) in atk.iter().zip(&path.sites[k].0) {
            assert!((a - c as f64 * scale).abs() < 1e-12);
        }

        let mid = interpolate(&path, n, (k as f64 + 0.5) / n as f64).unwrap();
        for ((m, &c0), &c1) in mid.iter().zip(&path.sites[k].0).zip(&path.sites[k + 1].0) {
            assert!((m - (c0 as f64 + c1 as f64) / 2.0 * scale).abs() < 1e-12);
        }

        assert!(interpolate(&path, n, 1.5).is_err());
    }

    #[test]
    fn full_lattice_msd_is_diffusive() {
        // classical anchor: per-step displacement variance 1 in total
        let cfg = full_config(32, 2, true);
        let times = [256u64, 1024];
        let out = estimate_msd(&cfg, &Point(vec![0, 0]), &times, 400, 11).unwrap();
        for pt in &out {
            let ratio = pt.msd / pt.n as f64;
            assert!((ratio - 1.0).abs() < 0.1, "n = {}: msd/n = {ratio}", pt.n);
        }
    }

    #[test]
    fn covariance_on_constant_path_is_zero() {
        let cfg = config_from_sites(8, &[&[0, 0]]);
        let est = estimate_covariance(&cfg, &Point(vec![0, 0]), 100, 1.0, 10, 3).unwrap();
        assert_eq!(est.covariance[(0, 0)], 0.0);
        assert_eq!(est.min_eigenvalue, 0.0);
    }

    #[test]
    fn covariance_full_lattice_small() {
        // reduced-size version of the classical anchor: (1/d) I within 10%
        let cfg = full_config(64, 2, true);
        let est = estimate_covariance(&cfg, &Point(vec![0, 0]), 1000, 1.0, 2000, 5).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!(
                    (est.covariance[(i, j)] - want).abs() < 0.05,
                    "cov[{i}{j}] = {}",
                    est.covariance[(i, j)]
                );
            }
        }
        assert!(est.min_eigenvalue > 0.3);
    }

    #[test]
    fn covariance_nondegenerate_on_cluster() {
        // reduced-size version of the non-degeneracy diagnostic: smallest
        // eigenvalue positive with margin over five half-widths
        let w = Window::new(64, 2, true).unwrap();
        let cfg = sample(&ModelSpec::new(ModelKind::Bernoulli, 0.75, w, 21)).unwrap();
        let x0 = crate::harness::walk_start(&cfg).unwrap();
        let est = estimate_covariance(&cfg, &x0, 2000, 1.0, 2000, 9).unwrap();
        assert!(
            est.min_eigenvalue > 5.0 * est.min_eigenvalue_halfwidth,
            "min eig {} vs halfwidth {}",
            est.min_eigenvalue,
            est.min_eigenvalue_halfwidth
        );
    }

    #[test]
    fn return_probabilities_on_full_lattice() {
        let cfg = full_config(64, 2, true);
        let out = return_probability(&cfg, &Point(vec![0, 0]), 32, (8, 16)).unwrap();
        assert_eq!(out.p[0], 1.0);
        assert_eq!(out.p[1], 0.0);
        assert_eq!(out.p[2], 0.25); // exact two-step return on Z^2
        assert!(!out.truncated);

        // p_{2n} non-increasing (reversible-chain spectral fact)
        for n in 1..16 {
            assert!(
                out.p[2 * n] <= out.p[2 * (n - 1)] + 1e-15,
                "p_{{2n}} rose at n = {n}"
            );
        }
        // scaled statistics close to the local CLT value 1/pi
        assert!(out.inf_scaled > 0.1 && out.sup_scaled < 1.0);
    }

    #[test]
    fn corrector_vanishes_on_full_lattice() {
        let cfg = full_config(32, 2, false);
        let sub = LatticeBox::new(Point(vec![-8, -8]), 17).unwrap();
        let field = estimate_corrector(&cfg, &sub, &Point(vec![0, 0]), 1e-10).unwrap();
        assert!(field.max_abs() <= 1e-10, "max |chi| = {}", field.max_abs());
        let anchor_idx = cfg.window().index(&Point(vec![0, 0])).unwrap();
        assert_eq!(field.chi[&anchor_idx], vec![0.0, 0.0]);
    }

    #[test]
    fn corrector_matches_dense_solver_on_comb() {
        // comb-shaped cluster: a spine with teeth, solved both by CG and by
        // a dense LU factorization
        let mut sites: Vec<Vec<i64>> = Vec::new();
        for x in -6..=6 {
            sites.push(vec![x, 0]);
            if x % 2 == 0 {
                for y in 1..=4 {
                    sites.push(vec![x, y]);
                }
            }
        }
        let refs: Vec<&[i64]> = sites.iter().map(|v| v.as_slice()).collect();
        let cfg = config_from_sites(24, &refs);
        // the spine endpoints sit on the sub-window ring and carry the
        // Dirichlet data
        let sub = LatticeBox::new(Point(vec![-6, -2]), 13).unwrap();
        let field = estimate_corrector(&cfg, &sub, &Point(vec![0, 0]), 1e-12).unwrap();

        // dense oracle over the same unknowns
        let w = cfg.window();
        let d = 2usize;
        let mut comp: Vec<usize> = field.chi.keys().copied().collect();
        comp.sort_unstable();
        let on_ring = |i: usize| {
            let p = w.decode(i);
            p.0.iter()
                .zip(&sub.corner.0)
                .any(|(c, lo)| *c == *lo || *c == lo + sub.side - 1)
        };
        let interior: Vec<usize> = comp.iter().copied().filter(|&i| !on_ring(i)).collect();
        let pos: std::collections::HashMap<usize, usize> =
            interior.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let n = interior.len();
        assert!(n > 0 && n <= 400);
        for coord in 0..d {
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut b = nalgebra::DVector::<f64>::zeros(n);
            for (k, &i) in interior.iter().enumerate() {
                let mut deg = 0.0;
                for axis in 0..d {
                    for dir in [1i64, -1] {
                        if let Some(nb) = w.neighbor_index(i, axis, dir) {
                            if field.chi.contains_key(&nb) {
                                deg += 1.0;
                                match pos.get(&nb) {
                                    Some(&kk) => a[(k, kk)] -= 1.0,
                                    None => b[k] += w.decode(nb).0[coord] as f64,
                                }
                            }
                        }
                    }
                }
                a[(k, k)] = deg;
            }
            let lu = a.lu();
            let x = lu.solve(&b).expect("dense solve");
            let anchor_idx = w.index(&Point(vec![0, 0])).unwrap();
            let anchor_phi_dense = if let Some(&k) = pos.get(&anchor_idx) {
                x[k]
            } else {
                0.0
            };
            for (k, &i) in interior.iter().enumerate() {
                let p = w.decode(i);
                let dense_chi =
                    x[k] - p.0[coord] as f64 - (anchor_phi_dense - 0.0);
                let cg_chi = field.chi[&i][coord];
                assert!(
                    (dense_chi - cg_chi).abs() < 1e-6,
                    "site {i} coord {coord}: dense {dense_chi} vs cg {cg_chi}"
                );
            }
        }
    }

    #[test]
    fn sublinearity_requires_three_radii() {
        let cfg = full_config(32, 2, false);
        let sub = LatticeBox::new(Point(vec![-4, -4]), 9).unwrap();
        let f = estimate_corrector(&cfg, &sub, &Point(vec![0, 0]), 1e-10).unwrap();
        assert!(check_corrector_sublinearity(&[f]).is_err());
    }

    #[test]
    fn sublinearity_on_full_lattice_is_zero() {
        let cfg = full_config(64, 2, false);
        let mut fields = Vec::new();
        for k in [6i64, 12, 24] {
            let sub = LatticeBox::new(Point(vec![-k, -k]), 2 * k + 1).unwrap();
            fields.push(estimate_corrector(&cfg, &sub, &Point(vec![0, 0]), 1e-10).unwrap());
        }
        let report = check_corrector_sublinearity(&fields).unwrap();
        for (_, mk) in &report.m {
            assert!(*mk <= 1e-10);
        }
        assert!(report.top_decreasing);
    }

    #[test]
    fn shift_consistency_is_exact_on_full_lattice() {
        let cfg = full_config(48, 2, false);
        let sub = LatticeBox::new(Point(vec![-10, -10]), 15).unwrap();
        let dev = shift_consistency_check(
            &cfg,
            &sub,
            &Point(vec![0, 0]),
            &Point(vec![3, 2]),
            1e-10,
        )
        .unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
    }
}
