//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashSet;

use hierlens_core::geometry::{exterior_angle, Curvature, SpaceKind};
use hierlens_core::loss::{bidirectional_loss, loss_gradients, LossConfig, NegativeMode, PairBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub struct Case {
    pub rows: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub relations: HashSet<(usize, usize)>,
    pub tau: f64,
    pub c: f64,
}

pub fn random_case(rng: &mut ChaCha8Rng, nodes: usize, dim: usize, batch: usize) -> Case {
    let rows: Vec<Vec<f64>> = (0..nodes)
        .map(|_| (0..dim).map(|_| rng.random_range(-0.8..0.8)).collect())
        .collect();
    let mut pairs = Vec::with_capacity(batch);
    while pairs.len() < batch {
        let p = rng.random_range(0..nodes);
        let c = rng.random_range(0..nodes);
        if p != c {
            pairs.push((p, c));
        }
    }
    let mut relations: HashSet<(usize, usize)> = pairs.iter().copied().collect();
    // extra dataset relations so some batch items drop out of negative sets
    for _ in 0..nodes {
        let p = rng.random_range(0..nodes);
        let c = rng.random_range(0..nodes);
        if p != c {
            relations.insert((p, c));
        }
    }
    Case {
        rows,
        pairs,
        relations,
        tau: rng.random_range(0.1..1.0),
        c: rng.random_range(0.5..2.0),
    }
}

pub fn loss_at(case: &Case, rows: &Vec<Vec<f64>>, tau: f64, c: f64, space: SpaceKind) -> f64 {
    let batch = PairBatch::new(case.pairs.clone(), rows, &case.relations, NegativeMode::Oracle).unwrap();
    let cfg = LossConfig::new(tau, space, Curvature::new(c).unwrap()).unwrap();
    bidirectional_loss(&batch, &cfg).unwrap()
}

/// Nodes taking part in an angle whose cosine is within 1e-3 of +-1.
pub fn near_clamp_nodes(case: &Case, space: SpaceKind) -> HashSet<usize> {
    let c = Curvature::new(case.c).unwrap();
    let mut out = HashSet::new();
    let nodes: HashSet<usize> = case.pairs.iter().flat_map(|&(p, c)| [p, c]).collect();
    for &a in &nodes {
        for &b in &nodes {
            if a == b {
                continue;
            }
            if let Ok(e) = exterior_angle(&case.rows[a], &case.rows[b], space, c) {
                if e.cos().abs() > 1.0 - 1e-3 {
                    out.insert(a);
                    out.insert(b);
                }
            }
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_gradient_error(case: &Case, space: SpaceKind) -> (f64, usize) {
    let c = Curvature::new(case.c).unwrap();
    let batch = PairBatch::new(case.pairs.clone(), &case.rows, &case.relations, NegativeMode::Oracle).unwrap();
    let cfg = LossConfig::new(case.tau, space, c).unwrap();
    let g = loss_gradients(&batch, &cfg).unwrap();
    let skip = near_clamp_nodes(case, space);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (&node, grad) in &g.rows {
        if skip.contains(&node) {
            continue;
        }
        for k in 0..grad.len() {
            let mut plus = case.rows.clone();
            plus[node][k] += H;
            let mut minus = case.rows.clone();
            minus[node][k] -= H;
            let fd = (loss_at(case, &plus, case.tau, case.c, space) - loss_at(case, &minus, case.tau, case.c, space))
                / (2.0 * H);
            worst = worst.max(rel_err(grad[k], fd));
            checked += 1;
        }
    }
    let fd_tau = (loss_at(case, &case.rows, case.tau + H, case.c, space)
        - loss_at(case, &case.rows, case.tau - H, case.c, space))
        / (2.0 * H);
    worst = worst.max(rel_err(g.d_tau, fd_tau));
    checked += 1;
    if space == SpaceKind::Hyperbolic && skip.is_empty() {
        let fd_c = (loss_at(case, &case.rows, case.tau, case.c + H, space)
            - loss_at(case, &case.rows, case.tau, case.c - H, space))
            / (2.0 * H);
        worst = worst.max(rel_err(g.d_curvature, fd_c));
        checked += 1;
    }
    (worst, checked)
}

/// Minimizes `c.x` subject to `a x = b`, `x >= 0` (with `b >= 0`) by a
/// two-phase tableau simplex using Bland's rule.
pub fn simplex_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    let m = a.len();
    let n = c.len();
    // columns: n originals, m artificials, then rhs
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = vec![0.0; width];
            row[..n].copy_from_slice(&a[i]);
            row[n + i] = 1.0;
            row[width - 1] = b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    let pivot = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, r: usize, col: usize| {
        let p = t[r][col];
        t[r].iter_mut().for_each(|v| *v /= p);
        for i in 0..t.len() {
            if i != r {
                let f = t[i][col];
                if f != 0.0 {
                    for j in 0..t[i].len() {
                        t[i][j] -= f * t[r][j];
                    }
                }
            }
        }
        basis[r] = col;
    };

    let run = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, cost: &[f64], allowed: usize| {
        loop {
            // reduced costs
            let entering = (0..allowed).find(|&j| {
                if basis.contains(&j) {
                    return false;
                }
                let z: f64 = (0..t.len()).map(|i| cost[basis[i]] * t[i][j]).sum();
                cost[j] - z < -1e-12
            });
            let Some(col) = entering else { return };
            let mut best: Option<(f64, usize)> = None;
            for i in 0..t.len() {
                if t[i][col] > 1e-12 {
                    let ratio = t[i][t[i].len() - 1] / t[i][col];
                    let better = match best {
                        None => true,
                        Some((r, bi)) => ratio < r - 1e-15 || (ratio <= r + 1e-15 && basis[i] < basis[bi]),
                    };
                    if better {
                        best = Some((ratio, i));
                    }
                }
            }
            let (_, r) = best.expect("transport LP is bounded");
            pivot(t, basis, r, col);
        }
    };

    // phase 1: drive artificials out
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut t, &mut basis, &phase1, n + m);
    for r in 0..m {
        if basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| t[r][j].abs() > 1e-12) {
                pivot(&mut t, &mut basis, r, col);
            }
        }
    }
    // phase 2 over original columns
    let mut cost = vec![0.0; n + m];
    cost[..n].copy_from_slice(c);
    run(&mut t, &mut basis, &cost, n);
    (0..m).map(|i| cost[basis[i]] * t[i][width - 1]).sum()
}

/// Earth mover's distance between histograms on bins 0..k with ground
/// cost |i - j|, solved as a transport LP.
pub fn transport_lp(h: &[f64], r: &[f64]) -> f64 {
    let k = h.len();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..k {
        let mut row = vec![0.0; k * k];
        (0..k).for_each(|j| row[i * k + j] = 1.0);
        a.push(row);
        b.push(h[i]);
    }
    for j in 0..k {
        let mut row = vec![0.0; k * k];
        (0..k).for_each(|i| row[i * k + j] = 1.0);
        a.push(row);
        b.push(r[j]);
    }
    let c: Vec<f64> = (0..k * k).map(|idx| ((idx / k) as f64 - (idx % k) as f64).abs()).collect();
    simplex_min(&a, &b, &c)
}

pub fn random_mass(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if w.iter().sum::<f64>() == 0.0 {
        w[rng.random_range(0..k)] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}


/// Runs `n` random gradient checks per space; returns the worst relative
/// error per space and the number of coordinates checked.
pub fn gradient_check(seed: u64, n: usize) -> Vec<(SpaceKind, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [SpaceKind::Hyperbolic, SpaceKind::Euclidean]
        .into_iter()
        .map(|space| {
            let mut worst: f64 = 0.0;
            let mut checked = 0;
            for _ in 0..n {
                let case = random_case(&mut rng, 20, 8, 16);
                let (w, k) = max_gradient_error(&case, space);
                worst = worst.max(w);
                checked += k;
            }
            (space, worst, checked)
        })
        .collect()
}
