//! Pointing evaluation: exact EMD, Spearman rank correlation, resampling,
//! and the uniform / random-point baselines.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{AttentionMap, GroundTruthHeatmap};
use crate::report::ScoreReport;

/// Grid side used for scoring.
pub const SCORING_SIZE: usize = 14;
/// Inputs whose mass is within this of one are renormalized; others are rejected.
pub const EMD_MASS_TOLERANCE: f64 = 1e-6;

fn normalized(values: &[f64], other_sum: f64) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("distribution has negative or non-finite cells".into()));
    }
    if (sum - 1.0).abs() > EMD_MASS_TOLERANCE || (other_sum - 1.0).abs() > EMD_MASS_TOLERANCE {
        return Err(Error::MassMismatch {
            p_sum: sum,
            q_sum: other_sum,
        });
    }
    Ok(values.iter().map(|v| v / sum).collect())
}

/// Earth Mover's Distance between two unit-mass grids of equal shape, with
/// Euclidean ground distance between cell centers scaled by `cell_spacing`.
///
/// Mass shared by both grids at a cell stays in place at zero cost (valid for
/// any metric ground distance); the rest is routed exactly by successive
/// shortest paths on the supply/demand bipartite graph.
pub fn emd(p: &AttentionMap, q: &AttentionMap, cell_spacing: f64) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::shape("emd", &[p.rows(), p.cols()], &[q.rows(), q.cols()]));
    }
    emd_values(p.values(), q.values(), p.cols(), cell_spacing)
}

/// [`emd`] on raw row-major values with `cols` columns.
pub fn emd_values(p: &[f64], q: &[f64], cols: usize, cell_spacing: f64) -> Result<f64> {
    if p.len() != q.len() || cols == 0 || !p.len().is_multiple_of(cols) {
        return Err(Error::shape("emd", &[p.len()], &[q.len()]));
    }
    let (ps, qs) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    let p = normalized(p, qs)?;
    let q = normalized(q, ps)?;
    let mut supply = Vec::new();
    let mut demand = Vec::new();
    for (i, (&a, &b)) in p.iter().zip(&q).enumerate() {
        if a > b {
            supply.push((i, a - b));
        } else if b > a {
            demand.push((i, b - a));
        }
    }
    if supply.is_empty() || demand.is_empty() {
        return Ok(0.0);
    }
    let pos = |i: usize| ((i / cols) as f64, (i % cols) as f64);
    let cost: Vec<Vec<f64>> = supply
        .iter()
        .map(|&(i, _)| {
            let (ri, ci) = pos(i);
            demand
                .iter()
                .map(|&(j, _)| {
                    let (rj, cj) = pos(j);
                    ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt() * cell_spacing
                })
                .collect()
        })
        .collect();
    let supply: Vec<f64> = supply.into_iter().map(|(_, m)| m).collect();
    let demand: Vec<f64> = demand.into_iter().map(|(_, m)| m).collect();
    Ok(min_cost_transport(&supply, &demand, &cost))
}

/// Successive shortest paths with Dijkstra on reduced costs.
///
/// Nodes: super source, sources `0..s`, sinks `0..t`, super sink.
fn min_cost_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (s, t) = (supply.len(), demand.len());
    let n = s + t + 2;
    let (src, snk) = (0, n - 1);
    let source = |i: usize| 1 + i;
    let sink = |j: usize| 1 + s + j;
    let mut left = supply.to_vec();
    let mut need = demand.to_vec();
    let mut sent = vec![0.0; s];
    let mut got = vec![0.0; t];
    let mut flow = vec![vec![0.0; t]; s];
    let mut phi = vec![0.0; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];

    loop {
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u == snk {
                break;
            }
            let relax = |v: usize, c: f64, dist: &mut [f64], prev: &mut [usize]| {
                let nd = dist[u] + c + phi[u] - phi[v];
                if !done[v] && nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u == src {
                for i in 0..s {
                    if left[i] > 0.0 {
                        relax(source(i), 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u == snk {
                for j in 0..t {
                    if got[j] > 0.0 {
                        relax(sink(j), 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= s {
                let i = u - 1;
                for j in 0..t {
                    relax(sink(j), cost[i][j], &mut dist, &mut prev);
                }
                if sent[i] > 0.0 {
                    relax(src, 0.0, &mut dist, &mut prev);
                }
            } else {
                let j = u - 1 - s;
                for i in 0..s {
                    if flow[i][j] > 0.0 {
                        relax(source(i), -cost[i][j], &mut dist, &mut prev);
                    }
                }
                if need[j] > 0.0 {
                    relax(snk, 0.0, &mut dist, &mut prev);
                }
            }
        }
        if !dist[snk].is_finite() {
            break;
        }
        let reach = dist[snk];
        for v in 0..n {
            phi[v] += dist[v].min(reach);
        }
        // Walk back to find the bottleneck, then push it.
        let mut bottleneck = f64::INFINITY;
        let mut v = snk;
        while v != src {
            let u = prev[v];
            let cap = if u == src {
                left[v - 1]
            } else if v == snk {
                need[u - 1 - s]
            } else if u == snk {
                got[v - 1 - s]
            } else if v == src {
                sent[u - 1]
            } else if u <= s {
                f64::INFINITY
            } else {
                flow[v - 1][u - 1 - s]
            };
            bottleneck = bottleneck.min(cap);
            v = u;
        }
        if !(bottleneck > 0.0) {
            break;
        }
        let take = |x: &mut f64| {
            *x = if *x == bottleneck { 0.0 } else { *x - bottleneck };
        };
        let mut v = snk;
        while v != src {
            let u = prev[v];
            if u == src {
                take(&mut left[v - 1]);
                sent[v - 1] += bottleneck;
            } else if v == snk {
                take(&mut need[u - 1 - s]);
                got[u - 1 - s] += bottleneck;
            } else if u == snk {
                take(&mut got[v - 1 - s]);
                need[v - 1 - s] += bottleneck;
            } else if v == src {
                take(&mut sent[u - 1]);
                left[u - 1] += bottleneck;
            } else if u <= s {
                flow[u - 1][v - 1 - s] += bottleneck;
            } else {
                take(&mut flow[v - 1][u - 1 - s]);
            }
            v = u;
        }
    }
    let mut total = 0.0;
    for i in 0..s {
        for j in 0..t {
            total += flow[i][j] * cost[i][j];
        }
    }
    total
}

/// `sum_i |CDF_p(i) - CDF_q(i)|`: exact EMD on a line with unit spacing.
pub fn emd_1d_oracle(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("emd_1d_oracle", &[p.len()], &[q.len()]));
    }
    let (ps, qs) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    let p = normalized(p, qs)?;
    let q = normalized(q, ps)?;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for i in 0..p.len().saturating_sub(1) {
        cp += p[i];
        cq += q[i];
        total += (cp - cq).abs();
    }
    Ok(total)
}

/// Midranks (1-based) of `xs`; tied values share the mean of their ranks.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation with midranks. `None` when either input is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("rank_correlation", &[a.len()], &[b.len()]));
    }
    Ok(pearson(&midranks(a), &midranks(b)))
}

/// Area-weighted average pooling (or spreading) onto a `target x target`
/// grid, renormalized to unit mass. Already-`target` grids are returned as is.
pub fn resample(map: &AttentionMap, target: usize) -> Result<AttentionMap> {
    if target == 0 {
        return Err(Error::Contract("resample target must be positive".into()));
    }
    let (rows, cols) = (map.rows(), map.cols());
    if rows == target && cols == target {
        return Ok(map.clone());
    }
    // Input cell k spans [k*target, (k+1)*target) and output cell r spans
    // [r*n, (r+1)*n) in units of 1/(n*target), so overlaps are integers.
    let overlaps = |n: usize| -> Vec<Vec<(usize, f64)>> {
        (0..target)
            .map(|r| {
                let (lo, hi) = (r * n, (r + 1) * n);
                (0..n)
                    .filter_map(|k| {
                        let (a, b) = (k * target, (k + 1) * target);
                        let o = hi.min(b).saturating_sub(lo.max(a));
                        (o > 0).then_some((k, o as f64))
                    })
                    .collect()
            })
            .collect()
    };
    let (ro, co) = (overlaps(rows), overlaps(cols));
    let mut out = vec![0.0; target * target];
    for (r, rw) in ro.iter().enumerate() {
        for (c, cw) in co.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, wi) in rw {
                for &(j, wj) in cw {
                    acc += wi * wj * map.get(i, j);
                }
            }
            out[r * target + c] = acc;
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("resampled map has no mass".into()));
    }
    for v in &mut out {
        *v /= total;
    }
    AttentionMap::new(target, target, out)
}

pub fn baseline_uniform(rows: usize, cols: usize) -> AttentionMap {
    AttentionMap::uniform(rows, cols)
}

/// All mass on one cell drawn uniformly with a seeded generator.
pub fn baseline_random_point(rows: usize, cols: usize, seed: u64) -> AttentionMap {
    let cell = ChaCha8Rng::seed_from_u64(seed).gen_range(0..rows * cols);
    AttentionMap::delta(rows, cols, cell / cols, cell % cols)
}

/// Mean and standard error (sample std / sqrt(n)); a single value has error 0.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointingScore {
    pub emd: ScoreReport,
    pub rank_correlation: ScoreReport,
}

/// Scores predictions against aggregated ground truth, both resampled to 14x14.
pub fn score_pointing(
    predictions: &BTreeMap<String, AttentionMap>,
    ground_truth: &BTreeMap<String, GroundTruthHeatmap>,
) -> Result<PointingScore> {
    let mut missing: Vec<String> = predictions
        .keys()
        .filter(|k| !ground_truth.contains_key(*k))
        .map(|k| format!("{k} (no ground truth)"))
        .collect();
    missing.extend(
        ground_truth
            .keys()
            .filter(|k| !predictions.contains_key(*k))
            .map(|k| format!("{k} (no prediction)")),
    );
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no instances to score".into()));
    }
    let mut emds = Vec::new();
    let mut ranks = Vec::new();
    let mut excluded = 0;
    for (id, pred) in predictions {
        let p = resample(pred, SCORING_SIZE)?;
        let g = resample(&ground_truth[id].map, SCORING_SIZE)?;
        emds.push((id.clone(), emd(&p, &g, 1.0)?));
        match rank_correlation(p.values(), g.values())? {
            Some(r) => ranks.push((id.clone(), r)),
            None => excluded += 1,
        }
    }
    Ok(PointingScore {
        emd: ScoreReport::from_values("EMD", emds, 0),
        rank_correlation: ScoreReport::from_values("RankCorrelation", ranks, excluded),
    })
}
