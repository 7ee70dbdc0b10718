//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (run with `--nocapture` to see them). Tolerances and
//! thresholds are pinned here, not configurable.
//!
//! Criterion 6 is asserted exactly as stated (Monte-Carlo decay of the
//! bad-box probability at u = 0.8, L0 = 8). Those parameters sit below the
//! contraction threshold of the decay estimate, so the faithful measurement
//! comes out increasing and the criterion is expected red; the measured
//! values are printed for the record.

use std::collections::HashSet;
use std::time::Instant;

use perclab::cluster::{
    self, chemical_distance, label_components, ChemicalDistance,
};
use perclab::harness::{
    linear_fit, reduction_subsets, run_experiment, walk_start, CheckKind, ExperimentSpec,
};
use perclab::iso::{self, SiteSet};
use perclab::lattice::{linf_ball, LatticeBox, Point, Window};
use perclab::renorm::{
    build_fat_set, build_scale_ladder, check_event_h, classify_good, compute_f_j,
    estimate_bad_probability, override_scale_ladder, special_components, verify_fat_set,
    GoodnessField, Levels,
};
use perclab::rng::{mix64, stream, substream, CounterRng};
use perclab::sampler::{estimate_eta, sample, Config, ModelKind, ModelSpec};
use perclab::walk::{
    estimate_corrector, estimate_covariance, estimate_msd, return_probability,
    step_distribution,
};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

fn bernoulli(side: i64, wrap: bool, u: f64, seed: u64) -> Config {
    let w = Window::new(side, 2, wrap).unwrap();
    sample(&ModelSpec::new(ModelKind::Bernoulli, u, w, seed)).unwrap()
}

// --- criterion 1 -----------------------------------------------------------

/// Independent flood-fill partition (stack-based, no shared code with the
/// labeling under test).
fn oracle_partition(cfg: &Config) -> Vec<i32> {
    let w = cfg.window();
    let mut part = vec![-1i32; w.site_count()];
    let mut next = 0;
    for start in 0..w.site_count() {
        if part[start] >= 0 || !cfg.occupied_index(start) {
            continue;
        }
        let mut stack = vec![start];
        part[start] = next;
        while let Some(cur) = stack.pop() {
            for axis in 0..w.dim() {
                for dir in [1i64, -1] {
                    if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                        if cfg.occupied_index(nb) && part[nb] < 0 {
                            part[nb] = next;
                            stack.push(nb);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    part
}

fn same_partition(mine: &Config, oracle: &[i32]) -> bool {
    let labeling = label_components(mine);
    let w = mine.window();
    let mut map_ab = std::collections::HashMap::new();
    let mut map_ba = std::collections::HashMap::new();
    for i in 0..w.site_count() {
        match (labeling.label_of_index(i), oracle[i]) {
            (None, o) if o >= 0 => return false,
            (Some(_), o) if o < 0 => return false,
            (Some(a), o) => {
                if *map_ab.entry(a).or_insert(o) != o {
                    return false;
                }
                if *map_ba.entry(o).or_insert(a) != a {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}

#[test]
fn criterion_01_oracle_equivalence() {
    let start = Instant::now();
    let mut mismatches = 0u32;
    for run in 0..200u64 {
        let side = 6 + (run % 11) as i64; // up to 16^2 sites
        let wrap = run % 2 == 0;
        let u = 0.3 + 0.5 * ((run % 7) as f64 / 6.0);
        let cfg = bernoulli(side, wrap, u, 9000 + run);
        let w = cfg.window();
        let oracle = oracle_partition(&cfg);

        // labeling agrees as a partition
        if !same_partition(&cfg, &oracle) {
            mismatches += 1;
        }

        let occupied: Vec<usize> = (0..w.site_count())
            .filter(|&i| cfg.occupied_index(i))
            .collect();
        if occupied.len() >= 2 {
            // chemical distance vs a test-local BFS
            let rng = CounterRng::new(run, stream::SUBSETS);
            let a = occupied[rng.below_at(0, occupied.len() as u64) as usize];
            let b = occupied[rng.below_at(1, occupied.len() as u64) as usize];
            let mut dist = vec![u32::MAX; w.site_count()];
            let mut queue = std::collections::VecDeque::new();
            dist[a] = 0;
            queue.push_back(a);
            while let Some(cur) = queue.pop_front() {
                for axis in 0..w.dim() {
                    for dir in [1i64, -1] {
                        if let Some(nb) = w.neighbor_index(cur, axis, dir) {
                            if cfg.occupied_index(nb) && dist[nb] == u32::MAX {
                                dist[nb] = dist[cur] + 1;
                                queue.push_back(nb);
                            }
                        }
                    }
                }
            }
            let want = match dist[b] {
                u32::MAX => ChemicalDistance::Infinite,
                v => ChemicalDistance::Finite(v as u64),
            };
            let got = chemical_distance(&cfg, &w.decode(a), &w.decode(b)).unwrap();
            if got != want {
                mismatches += 1;
            }

            // edge boundary vs a direct pair scan
            let subset: Vec<usize> = occupied
                .iter()
                .copied()
                .filter(|&i| mix64(run ^ i as u64) % 3 == 0)
                .collect();
            let a_set = SiteSet::from_indices(&cfg, subset.clone()).unwrap();
            let in_a: HashSet<usize> = subset.iter().copied().collect();
            let mut oracle_edges = 0u64;
            for &i in &occupied {
                if !in_a.contains(&i) {
                    continue;
                }
                for axis in 0..w.dim() {
                    for dir in [1i64, -1] {
                        if let Some(nb) = w.neighbor_index(i, axis, dir) {
                            if cfg.occupied_index(nb) && !in_a.contains(&nb) {
                                oracle_edges += 1;
                            }
                        }
                    }
                }
            }
            if iso::edge_boundary(&cfg, &a_set).unwrap() != oracle_edges {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "1 (oracle equivalence)",
        mismatches == 0 && elapsed < 60.0,
        &format!("{mismatches} mismatches over 200 configs in {elapsed:.1}s (< 60s)"),
    );
}

// --- criterion 2 -----------------------------------------------------------

#[test]
fn criterion_02_kernel_sanity() {
    // rows sum to exactly 1 (integer numerators over 2d) at 10^4 sites
    let mut checked = 0u32;
    let mut exact = true;
    let mut run = 0u64;
    while checked < 10_000 {
        let cfg = bernoulli(24, run % 2 == 0, 0.4 + 0.55 * ((run % 5) as f64 / 4.0), 333 + run);
        let w = cfg.window();
        for i in 0..w.site_count() {
            if checked >= 10_000 {
                break;
            }
            if cfg.occupied_index(i) {
                let dist = step_distribution(&cfg, &w.decode(i)).unwrap();
                exact &= dist.numerator_sum() == dist.denominator;
                checked += 1;
            }
        }
        run += 1;
    }

    // exact convolution anchors on the full Z^2 window
    let full = bernoulli(32, true, 1.0, 0);
    let probs = return_probability(&full, &Point(vec![0, 0]), 4, (1, 2)).unwrap();
    let p0_ok = probs.p[0] == 1.0;
    let p2_ok = probs.p[2] == 0.25;
    verdict(
        "2 (kernel sanity)",
        exact && p0_ok && p2_ok,
        &format!(
            "rows exact at {checked} sites: {exact}; p_0 = {}, p_2 = {}",
            probs.p[0], probs.p[2]
        ),
    );
}

// --- criterion 3 -----------------------------------------------------------

#[test]
fn criterion_03_classical_covariance_anchor() {
    let start = Instant::now();
    let cfg = bernoulli(64, true, 1.0, 0);
    let est = estimate_covariance(&cfg, &Point(vec![0, 0]), 10_000, 1.0, 10_000, 7).unwrap();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { 0.5 } else { 0.0 };
            let dev = (est.covariance[(i, j)] - want).abs() / 0.5;
            worst = worst.max(dev);
            ok &= dev <= 0.05;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "3 (classical covariance anchor)",
        ok && elapsed < 300.0,
        &format!(
            "max deviation {:.3}% of 1/d (<= 5%), n = 10^4, replicas = 10^4, {elapsed:.1}s (< 300s)",
            100.0 * worst
        ),
    );
}

// --- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_04_heat_kernel_decay() {
    // pinned window [k, K] with K/k = 20
    const K_LO: f64 = 0.12;
    const K_HI: f64 = 2.4;
    let start = Instant::now();
    let mut passing = 0u32;
    let mut details = String::new();
    for seed in 1..=10u64 {
        let cfg = bernoulli(256, true, 0.75, seed);
        let x0 = walk_start(&cfg).unwrap();
        let out = return_probability(&cfg, &x0, 1024, (32, 512)).unwrap();
        let ok = out.inf_scaled >= K_LO && out.sup_scaled <= K_HI;
        if ok {
            passing += 1;
        }
        details.push_str(&format!(
            "seed {seed}: [{:.3}, {:.3}]{} ",
            out.inf_scaled,
            out.sup_scaled,
            if ok { "" } else { "!" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "4 (heat-kernel decay)",
        passing >= 9 && elapsed < 600.0,
        &format!(
            "{passing}/10 seeds inside [{K_LO}, {K_HI}] over n in [32, 512], {elapsed:.1}s (< 600s): {details}"
        ),
    );
}

// --- criterion 5 -----------------------------------------------------------

#[test]
fn criterion_05_diffusive_msd() {
    let times: Vec<u64> = (0..14)
        .map(|j| (1000f64 * 100f64.powf(j as f64 / 13.0)).round() as u64)
        .collect();
    let mut slopes = Vec::new();
    let mut r2s = Vec::new();
    for &u in &[0.7, 0.8] {
        // matched seeds: the same configuration seed and walk seeds per u
        let cfg = bernoulli(256, true, u, 5);
        let x0 = walk_start(&cfg).unwrap();
        let msd = estimate_msd(&cfg, &x0, &times, 300, 11).unwrap();
        let (slope, r2) = linear_fit(&msd);
        slopes.push(slope);
        r2s.push(r2);
    }
    let ok = r2s.iter().all(|&r| r >= 0.99) && slopes[1] > slopes[0] && slopes[0] > 0.0;
    verdict(
        "5 (diffusive MSD)",
        ok,
        &format!(
            "R2 = ({:.4}, {:.4}) >= 0.99; slopes {:.4} (u=0.7) < {:.4} (u=0.8)",
            r2s[0], r2s[1], slopes[0], slopes[1]
        ),
    );
}

// --- criterion 6 -----------------------------------------------------------

#[test]
fn criterion_06_renormalization_decay() {
    // Exactly as stated: u = 0.8, L0 = 8, l0 = 9, r0 = 2, 300 replicas,
    // non-increasing over k in {0,1,2} plus the 2*2^{-2^k} envelope at
    // k = 2, for at least 9 of 10 parameter seeds. Seeds are evaluated
    // lazily: a seed that already failed monotonicity at k = 1 skips its
    // k = 2 estimate, and the loop stops once 9/10 is out of reach.
    let ladder = build_scale_ladder(9, 2, 8, 1, 2).unwrap();
    let window = Window::new(64, 2, true).unwrap();
    let eta = {
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.8, window.clone(), 424_242);
        estimate_eta(&spec, 200).unwrap().value
    };
    let mut passing = 0u32;
    let mut failed = 0u32;
    let mut log = String::new();
    for seed in 1..=10u64 {
        let spec = ModelSpec::new(ModelKind::Bernoulli, 0.8, window.clone(), seed);
        let e0 = estimate_bad_probability(&spec, &ladder, eta, 0, 300).unwrap();
        let e1 = estimate_bad_probability(&spec, &ladder, eta, 1, 300).unwrap();
        let mut seed_ok = e1.estimate <= e0.estimate;
        let mut e2_text = String::from("skipped");
        if seed_ok {
            let e2 = estimate_bad_probability(&spec, &ladder, eta, 2, 300).unwrap();
            seed_ok = e2.estimate <= e1.estimate && e2.estimate < e2.envelope;
            e2_text = format!("{:.4}", e2.estimate);
        }
        log.push_str(&format!(
            "seed {seed}: ({:.4}, {:.4}, {e2_text}){} ",
            e0.estimate,
            e1.estimate,
            if seed_ok { "" } else { "!" }
        ));
        if seed_ok {
            passing += 1;
        } else {
            failed += 1;
        }
        if failed >= 2 {
            break; // 9/10 is no longer reachable
        }
    }
    verdict(
        "6 (renormalization decay)",
        passing >= 9,
        &format!("{passing} passing seeds (need >= 9), eta = {eta:.3}: {log}"),
    );
}

// --- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_07_fat_set_contract() {
    // f_d agrees with an independent high-precision evaluation
    let f2 = compute_f_j(2.0 / 9.0, 2, 1).unwrap();
    let mut log_sum = 0.0f64;
    for i in 0..400u64 {
        let q = (2.0 / 9.0) * (-((i as f64)) * std::f64::consts::LN_2).exp();
        log_sum += (1.0 - 3.0 * q * q).ln();
    }
    let f2_oracle = log_sum.exp();
    let f_ok = (f2 - f2_oracle).abs() <= 1e-9;

    let mut builds = 0u32;
    let mut verified = 0u32;
    let mut violations = Vec::new();

    // 25 sampled runs: canonical ladder, floor levels, H(a) gating builds
    let ladder = build_scale_ladder(9, 2, 8, 1, 2).unwrap();
    let levels = Levels { s: 0, r: 0 };
    for seed in 1..=25u64 {
        let cfg = bernoulli(336, false, 0.92, 40_000 + seed);
        let field = classify_good(&cfg, &ladder, 0.9, 0, false).unwrap();
        match build_fat_set(&field, &ladder, levels, 48) {
            Ok(fat) => {
                builds += 1;
                let report = verify_fat_set(&fat, &ladder, &field, 8).unwrap();
                if report.ok && report.min_density_b >= report.density_bound_d {
                    verified += 1;
                } else {
                    violations.extend(report.violations);
                }
            }
            Err(perclab::Error::CheckFailed(_)) => {} // H(a) failed: no build
            Err(e) => panic!("unexpected build error: {e}"),
        }
    }

    // 25 synthetic multi-level runs: override ladder, deletions at both
    // levels, random sparse bad placements
    let ladder2 = override_scale_ladder(&[(9, 2), (12, 3), (48, 12)], 1, 1).unwrap();
    let levels2 = Levels { s: 2, r: 2 };
    for seed in 1..=25u64 {
        let rng = CounterRng::new(seed, stream::SUBSETS);
        let mut a_bad = std::collections::BTreeSet::new();
        let mut b_bad = std::collections::BTreeSet::new();
        // one zone of 1-bad L1-boxes (far A-pairs inside), kept within a
        // 3 L1 cover so level 2 stays good
        let zx = 9 * rng.below_at(0, 10) as i64;
        let zy = 9 * rng.below_at(1, 10) as i64;
        for z in 0..=rng.below_at(2, 2) {
            let bx = zx + 9 * z as i64;
            a_bad.insert(Point(vec![bx + 1, zy + 1]));
            a_bad.insert(Point(vec![bx + 5, zy + 5]));
        }
        // lone bad boxes elsewhere (their parents stay 1-good)
        for t in 0..rng.below_at(3, 3) {
            let px = rng.below_at(10 + t, 100) as i64;
            let py = rng.below_at(20 + t, 100) as i64;
            if t % 2 == 0 {
                a_bad.insert(Point(vec![px, py]));
            } else {
                b_bad.insert(Point(vec![px, py]));
            }
        }
        let field = GoodnessField::synthetic(&ladder2, 2, 2, a_bad, b_bad).unwrap();
        match build_fat_set(&field, &ladder2, levels2, 216) {
            Ok(fat) => {
                builds += 1;
                let report = verify_fat_set(&fat, &ladder2, &field, 4).unwrap();
                if report.ok {
                    verified += 1;
                } else {
                    violations.extend(report.violations);
                }
            }
            Err(perclab::Error::CheckFailed(_)) => {}
            Err(e) => panic!("unexpected synthetic build error: {e}"),
        }
    }

    verdict(
        "7 (fat-set contract)",
        f_ok && builds > 20 && verified == builds,
        &format!(
            "f_2 agreement {:.2e} (<= 1e-9); {verified}/{builds} builds verified; \
             first violations: {:?}",
            (f2 - f2_oracle).abs(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

// --- criterion 8 -----------------------------------------------------------

#[test]
fn criterion_08_reduction_inequalities() {
    let ladder = build_scale_ladder(9, 2, 8, 1, 2).unwrap();
    let levels = Levels { s: 0, r: 0 };
    let radius = 48i64;
    let mut configs = 0u32;
    let mut subsets_checked = 0u32;
    let mut violations = 0u32;
    let mut seed = 0u64;
    while configs < 3 && seed < 20 {
        seed += 1;
        let cfg = bernoulli(336, false, 0.92, 70_000 + seed);
        let field = classify_good(&cfg, &ladder, 0.9, 0, false).unwrap();
        let h = check_event_h(&cfg, &ladder, levels, radius, &field).unwrap();
        if !h.holds {
            continue;
        }
        configs += 1;
        let fat = build_fat_set(&field, &ladder, levels, radius).unwrap();
        let special = special_components(&cfg, &fat, 0.9).unwrap();
        let subsets = reduction_subsets(&cfg, radius, seed, 36).unwrap();
        for a in &subsets {
            let rep =
                iso::check_reduction_inequalities(&cfg, &fat, &special, a, true).unwrap();
            subsets_checked += 1;
            if !(rep.boundary_ok && rep.volume_ok) {
                violations += 1;
            }
        }
    }
    verdict(
        "8 (reduction inequalities)",
        configs >= 3 && subsets_checked >= 100 && violations == 0,
        &format!(
            "{subsets_checked} subsets over {configs} verified-H configurations, {violations} violations"
        ),
    );
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_09_isoperimetry_statistical() {
    // full-lattice baseline at the same scale
    let full = bernoulli(128, false, 1.0, 0);
    let baseline = iso::heuristic_profile(&full, 48, 0.5, 20_000, 1).unwrap();
    let threshold = 0.2 * baseline.min_ratio;

    let mut worst = f64::INFINITY;
    let mut below = 0u32;
    for seed in 1..=20u64 {
        let cfg = bernoulli(128, false, 0.75, 60_000 + seed);
        let prof = iso::heuristic_profile(&cfg, 48, 0.5, 20_000, seed).unwrap();
        if prof.candidates == 0 {
            continue;
        }
        worst = worst.min(prof.min_ratio);
        if prof.min_ratio < threshold {
            below += 1;
        }
    }

    // oracle consistency: heuristic-best never beats the exact minimum on
    // instances small enough for the exhaustive oracle
    let mut oracle_instances = 0u32;
    let mut oracle_violations = 0u32;
    for seed in 0..40u64 {
        let cfg = bernoulli(9, false, 0.55, 80_000 + seed);
        let region = linf_ball(&Point(vec![0, 0]), 2.0).unwrap();
        let w = cfg.window();
        let n = region
            .points()
            .filter_map(|p| w.index(&p))
            .filter(|&i| cfg.occupied_index(i))
            .count();
        if n == 0 || n > 24 {
            continue;
        }
        let Ok(exact) = iso::exact_min_ratio(&cfg, &region, 1.0) else {
            continue;
        };
        let Ok(heur) = iso::heuristic_profile(&cfg, 2, 0.1, 500, seed) else {
            continue;
        };
        if heur.candidates == 0 {
            continue;
        }
        oracle_instances += 1;
        if heur.min_ratio < exact.ratio - 1e-12 {
            oracle_violations += 1;
        }
    }

    verdict(
        "9 (isoperimetry, statistical)",
        below == 0 && oracle_instances > 10 && oracle_violations == 0,
        &format!(
            "cluster minimum {worst:.3} vs threshold {threshold:.3} (baseline {:.3}); \
             {oracle_violations} oracle violations over {oracle_instances} small instances",
            baseline.min_ratio
        ),
    );
}

// --- criterion 10 ------------------------------------------------------------

#[test]
fn criterion_10_corrector() {
    // full lattice: chi vanishes to 1e-10
    let full = bernoulli(64, false, 1.0, 0);
    let sub = LatticeBox::new(Point(vec![-12, -12]), 25).unwrap();
    let field = estimate_corrector(&full, &sub, &Point(vec![0, 0]), 1e-10).unwrap();
    let flat_ok = field.max_abs() <= 1e-10;

    // dense-solver equivalence on small clusters (<= 400 sites)
    let mut dense_checked = 0u32;
    let mut dense_ok = true;
    for seed in 0..6u64 {
        let cfg = bernoulli(20, false, 0.72, 91_000 + seed);
        let Ok(x0) = walk_start(&cfg) else { continue };
        let sub = LatticeBox::new(Point(vec![x0.0[0] - 7, x0.0[1] - 7]), 15).unwrap();
        if cfg.window().require_box(&sub, "t").is_err() {
            continue;
        }
        let Ok(field) = estimate_corrector(&cfg, &sub, &x0, 1e-12) else {
            continue;
        };
        if field.interior_sites == 0 || field.interior_sites > 400 {
            continue;
        }
        let max_dev = dense_oracle_deviation(&cfg, &sub, &x0, &field);
        dense_ok &= max_dev <= 1e-6;
        dense_checked += 1;
    }

    // sublinearity trend at u = 0.8 over >= 8/10 seeds
    let radii = [10i64, 20, 40];
    let mut trend_pass = 0u32;
    for seed in 1..=10u64 {
        let cfg = bernoulli(96, false, 0.8, 30_000 + seed);
        let Ok(x0) = walk_start(&cfg) else { continue };
        let mut fields = Vec::new();
        let mut ok = true;
        for &k in &radii {
            let corner = Point(vec![x0.0[0] - k, x0.0[1] - k]);
            let sub = LatticeBox::new(corner, 2 * k + 1).unwrap();
            match (
                cfg.window().require_box(&sub, "t"),
                estimate_corrector(&cfg, &sub, &x0, 1e-8),
            ) {
                (Ok(()), Ok(f)) => fields.push(f),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || fields.len() < 3 {
            continue;
        }
        let report = perclab::walk::check_corrector_sublinearity(&fields).unwrap();
        if report.top_decreasing {
            trend_pass += 1;
        }
    }

    verdict(
        "10 (corrector)",
        flat_ok && dense_ok && dense_checked >= 3 && trend_pass >= 8,
        &format!(
            "full-lattice max|chi| = {:.2e} (<= 1e-10); dense equivalence on {dense_checked} \
             clusters <= 1e-6: {dense_ok}; sublinearity top doubling {trend_pass}/10 (need >= 8)",
            field.max_abs()
        ),
    );
}

fn dense_oracle_deviation(
    cfg: &Config,
    sub: &LatticeBox,
    anchor: &Point,
    field: &perclab::walk::CorrectorField,
) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let w = cfg.window();
    let d = w.dim();
    let mut comp: Vec<usize> = field.chi.keys().copied().collect();
    comp.sort_unstable();
    let on_ring = |i: usize| {
        let p = w.decode(i);
        p.0.iter()
            .zip(&sub.corner.0)
            .any(|(c, lo)| *c == *lo || *c == lo + sub.side - 1)
    };
    let interior: Vec<usize> = comp.iter().copied().filter(|&i| !on_ring(i)).collect();
    if interior.is_empty() {
        return 0.0;
    }
    let pos: std::collections::HashMap<usize, usize> =
        interior.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let n = interior.len();
    let anchor_idx = w.index(anchor).unwrap();
    let mut max_dev = 0.0f64;
    for coord in 0..d {
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
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
        let x = a.lu().solve(&b).expect("dense solve");
        let anchor_phi = pos
            .get(&anchor_idx)
            .map(|&k| x[k])
            .unwrap_or(anchor.0[coord] as f64);
        for (k, &i) in interior.iter().enumerate() {
            let p = w.decode(i);
            let dense_chi = x[k] - p.0[coord] as f64 - (anchor_phi - anchor.0[coord] as f64);
            max_dev = max_dev.max((dense_chi - field.chi[&i][coord]).abs());
        }
    }
    max_dev
}

// --- criterion 11 ------------------------------------------------------------

#[test]
fn criterion_11_reproducibility() {
    let base = {
        let mut spec = ExperimentSpec {
            side: 96,
            radius: 10,
            steps: 400,
            heat_steps: 64,
            replicas: 30,
            budget: 300,
            u: 0.75,
            eta: Some(0.7),
            k_max: 1,
            seed: 77,
            ..Default::default()
        };
        spec.checks = [
            CheckKind::Eta,
            CheckKind::BadProb,
            CheckKind::WalkMsd,
            CheckKind::HeatKernel,
            CheckKind::IsoProfile,
        ]
        .into_iter()
        .collect();
        spec
    };
    let files = ["eta.csv", "badprob.csv", "msd.csv", "heatkernel.csv", "iso.csv", "config.raster"];

    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    for threads in [1usize, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let mut spec = base.clone();
        spec.out_dir = tempfile::tempdir().unwrap().keep();
        pool.install(|| run_experiment(&spec)).unwrap();
        outputs.push(
            files
                .iter()
                .map(|f| std::fs::read(spec.out_dir.join(f)).unwrap())
                .collect(),
        );
    }
    // and a plain rerun in the default pool
    let mut spec = base.clone();
    spec.out_dir = tempfile::tempdir().unwrap().keep();
    run_experiment(&spec).unwrap();
    outputs.push(
        files
            .iter()
            .map(|f| std::fs::read(spec.out_dir.join(f)).unwrap())
            .collect(),
    );

    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        "11 (reproducibility)",
        identical,
        &format!(
            "{} files byte-identical across thread counts 1 and 4 plus a rerun",
            files.len()
        ),
    );
}

// --- supporting assertions on the suite itself ---------------------------------

#[test]
fn a3_and_local_uniqueness_probes_hold_at_high_density() {
    // reduced-size statistical probes behind the A-predicates: at u = 0.75
    // the directional reach and local uniqueness hold on most samples
    let mut a3_all = 0u32;
    let mut lu_ok = 0u32;
    let reps = 30u64;
    for seed in 0..reps {
        let cfg = bernoulli(128, true, 0.75, 20_500 + seed);
        let dirs = cluster::check_a3(&cfg, 32).unwrap();
        if dirs.iter().all(|&b| b) {
            a3_all += 1;
        }
        // local uniqueness needs R large enough that S_{R/10} excludes
        // small fragments
        let cfg = bernoulli(176, true, 0.8, 20_500 + seed);
        let (exists, unique) = cluster::check_local_uniqueness(&cfg, 40).unwrap();
        if exists && unique {
            lu_ok += 1;
        }
    }
    assert!(a3_all as f64 / reps as f64 >= 0.95, "A3 fraction {a3_all}/{reps}");
    assert!(lu_ok as f64 / reps as f64 >= 0.8, "S1 fraction {lu_ok}/{reps}");
}

#[test]
fn event_h_probability_increases_with_u() {
    // matched seeds across the u-grid; P[H] should trend upward
    let ladder = build_scale_ladder(9, 2, 8, 1, 1).unwrap();
    let levels = Levels { s: 0, r: 0 };
    let mut rates = Vec::new();
    for &u in &[0.7, 0.75, 0.8] {
        let eta = 0.95 * u;
        let mut holds = 0u32;
        for seed in 0..12u64 {
            let cfg = bernoulli(144, false, u, 700 + seed);
            let field = classify_good(&cfg, &ladder, eta, 0, false).unwrap();
            let report = check_event_h(&cfg, &ladder, levels, 16, &field).unwrap();
            if report.holds {
                holds += 1;
            }
        }
        rates.push(holds);
    }
    assert!(
        rates[2] >= rates[0],
        "P[H] did not trend upward across u: {rates:?}"
    );
}

#[test]
fn eta_estimate_brackets_long_run_oracle() {
    // d=2, N=128, u=0.7, 500 replicas vs an independent longer oracle run
    let w = Window::new(128, 2, true).unwrap();
    let spec = ModelSpec::new(ModelKind::Bernoulli, 0.7, w.clone(), 11);
    let est = estimate_eta(&spec, 500).unwrap();
    let oracle = {
        let spec2 = ModelSpec::new(ModelKind::Bernoulli, 0.7, w, substream(999, stream::REPLICA, 1));
        estimate_eta(&spec2, 1000).unwrap()
    };
    let tol = 3.0 * (est.stderr + oracle.stderr);
    assert!(
        (est.value - oracle.value).abs() <= tol,
        "eta {} vs oracle {} (tol {tol})",
        est.value,
        oracle.value
    );
}
