//! Bottleneck ring selection for collective communication: the ring over a
//! device set whose slowest hop is fastest.

use crate::topology::LinkMatrix;

/// Largest ring solved exactly; above this a constructive heuristic is used.
pub const EXACT_RING_LIMIT: usize = 8;

/// min over Hamiltonian cycles of max over hops of (α + volume/β).
///
/// One device costs nothing; two devices use their single link.
pub fn min_ring_bottleneck(devices: &[usize], volume: f64, links: &LinkMatrix) -> f64 {
    let n = devices.len();
    match n {
        0 | 1 => return 0.0,
        2 => {
            let (a, b) = (devices[0], devices[1]);
            return links.cost(a, b, volume).max(links.cost(b, a, volume));
        }
        _ => {}
    }
    let mut cost = vec![0.0; n * n];
    let mut uniform = true;
    let first = links.cost(devices[0], devices[1], volume);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let c = links
                    .cost(devices[a], devices[b], volume)
                    .max(links.cost(devices[b], devices[a], volume));
                cost[a * n + b] = c;
                uniform &= c == first;
            }
        }
    }
    if uniform {
        return first;
    }
    if n <= EXACT_RING_LIMIT {
        exact_bottleneck_cycle(&cost, n)
    } else {
        heuristic_bottleneck_cycle(&cost, n)
    }
}

/// Held-Karp style DP with max in place of sum; the cycle is anchored at 0.
fn exact_bottleneck_cycle(cost: &[f64], n: usize) -> f64 {
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full * n];
    best[n] = 0.0; // mask {0}, ending at 0
    for mask in 1..full {
        if mask & 1 == 0 {
            continue;
        }
        for v in 0..n {
            let cur = best[mask * n + v];
            if !cur.is_finite() || mask & (1 << v) == 0 {
                continue;
            }
            for w in 1..n {
                if mask & (1 << w) != 0 {
                    continue;
                }
                let next = mask | (1 << w);
                let val = cur.max(cost[v * n + w]);
                let slot = &mut best[next * n + w];
                if val < *slot {
                    *slot = val;
                }
            }
        }
    }
    let last = full - 1;
    (1..n)
        .map(|v| best[last * n + v].max(cost[v * n]))
        .fold(f64::INFINITY, f64::min)
}

fn tour_edge(cost: &[f64], n: usize, tour: &[usize], p: usize) -> f64 {
    cost[tour[p] * n + tour[(p + 1) % n]]
}

/// Nearest-neighbour construction from a few starts, each refined by 2-opt
/// moves that replace a bottleneck hop with two strictly cheaper hops.
fn heuristic_bottleneck_cycle(cost: &[f64], n: usize) -> f64 {
    let starts = [0, n / 3, (2 * n) / 3, n - 1];
    let mut best = f64::INFINITY;
    let mut tried = Vec::new();
    for &s in &starts {
        if tried.contains(&s) {
            continue;
        }
        tried.push(s);
        let mut tour = nearest_neighbour(cost, n, s);
        bottleneck_two_opt(cost, n, &mut tour);
        let width = (0..n).map(|p| tour_edge(cost, n, &tour, p)).fold(0.0, f64::max);
        best = best.min(width);
    }
    best
}

fn nearest_neighbour(cost: &[f64], n: usize, start: usize) -> Vec<usize> {
    let mut visited = vec![false; n];
    let mut tour = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    tour.push(cur);
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_cost = f64::INFINITY;
        for w in 0..n {
            if !visited[w] && cost[cur * n + w] < next_cost {
                next_cost = cost[cur * n + w];
                next = w;
            }
        }
        visited[next] = true;
        tour.push(next);
        cur = next;
    }
    tour
}

fn bottleneck_two_opt(cost: &[f64], n: usize, tour: &mut [usize]) {
    // bounded so pathological inputs cannot spin
    for _ in 0..4 * n * n {
        let width = (0..n).map(|p| tour_edge(cost, n, tour, p)).fold(0.0, f64::max);
        let mut improved = false;
        'edges: for p in 0..n {
            if tour_edge(cost, n, tour, p) < width {
                continue;
            }
            let a = tour[p];
            let b = tour[(p + 1) % n];
            for off in 2..n - 1 {
                let q = (p + off) % n;
                let c = tour[q];
                let d = tour[(q + 1) % n];
                if cost[a * n + c].max(cost[b * n + d]) < width {
                    // reverse the segment b..=c
                    let (mut lo, mut hi) = (p + 1, p + off);
                    while lo < hi {
                        tour.swap(lo % n, hi % n);
                        lo += 1;
                        hi -= 1;
                    }
                    improved = true;
                    break 'edges;
                }
            }
        }
        if !improved {
            return;
        }
    }
}
