//! Exact k-nearest-neighbour distances over a 3D point set using a uniform hash grid.

use std::collections::HashMap;

type Cell = (i64, i64, i64);

/// Mean Euclidean distance from each point to its `k` nearest other points.
///
/// Points with no neighbours (a single-point set) get `None`.
pub fn mean_knn_distance(points: &[[f64; 3]], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![None; n];
    }
    let k = k.min(n - 1);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    // Surface-like clouds: about one point per cell over the dominant extent.
    let mut h = extent / (n as f64).sqrt();
    if !(h > 0.0) || !h.is_finite() {
        h = 1.0;
    }
    let cell_of = |p: &[f64; 3]| -> Cell {
        (
            ((p[0] - lo[0]) / h).floor() as i64,
            ((p[1] - lo[1]) / h).floor() as i64,
            ((p[2] - lo[2]) / h).floor() as i64,
        )
    };
    let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i as u32);
    }
    let max_ring = (extent / h).ceil() as i64 + 1;

    let mut out = Vec::with_capacity(n);
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        let c = cell_of(p);
        best.clear();
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            for &j in ids {
                                if j as usize == i {
                                    continue;
                                }
                                let q = &points[j as usize];
                                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                                if best.len() < k {
                                    best.push(d2);
                                    best.sort_by(f64::total_cmp);
                                } else if d2 < best[k - 1] {
                                    best[k - 1] = d2;
                                    best.sort_by(f64::total_cmp);
                                }
                            }
                        }
                    }
                }
            }
            // Every unvisited cell is at least `ring * h` away.
            let covered = ring as f64 * h;
            if (best.len() == k && best[k - 1] <= covered * covered) || ring > max_ring {
                break;
            }
            ring += 1;
        }
        let mean = best.iter().map(|d2| d2.sqrt()).sum::<f64>() / best.len() as f64;
        out.push(Some(mean));
    }
    out
}
