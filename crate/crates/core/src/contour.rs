//! Marching squares on a regular grid with missing values.

/// A polyline in grid-axis coordinates.
pub type Polyline = Vec<(f64, f64)>;

/// Crossing points are keyed by the grid edge they lie on so neighbouring
/// squares join exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum EdgeId {
    /// Between `(i, j)` and `(i + 1, j)`.
    AlongA(usize, usize),
    /// Between `(i, j)` and `(i, j + 1)`.
    AlongB(usize, usize),
}

/// Iso-lines of `values` (row-major `[na, nb]`, sampled at `xs[i], ys[j]`)
/// at `level`. `NaN` marks missing data; squares touching it are skipped.
/// Saddles are resolved by the square's mean value.
pub fn marching_squares(values: &[f64], xs: &[f64], ys: &[f64], level: f64) -> Vec<Polyline> {
    let (na, nb) = (xs.len(), ys.len());
    assert_eq!(values.len(), na * nb, "grid size mismatch");
    let v = |i: usize, j: usize| values[i * nb + j];
    let point = |e: EdgeId| -> (f64, f64) {
        let ((i0, j0), (i1, j1)) = match e {
            EdgeId::AlongA(i, j) => ((i, j), (i + 1, j)),
            EdgeId::AlongB(i, j) => ((i, j), (i, j + 1)),
        };
        let (a, b) = (v(i0, j0), v(i1, j1));
        let t = if b != a { ((level - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
        (xs[i0] + t * (xs[i1] - xs[i0]), ys[j0] + t * (ys[j1] - ys[j0]))
    };
    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for i in 0..na.saturating_sub(1) {
        for j in 0..nb.saturating_sub(1) {
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            if c.iter().any(|x| x.is_nan()) {
                continue;
            }
            let above: Vec<bool> = c.iter().map(|&x| x >= level).collect();
            // square edges in corner order: bottom, right, top, left
            let edges = [
                EdgeId::AlongA(i, j),
                EdgeId::AlongB(i + 1, j),
                EdgeId::AlongA(i, j + 1),
                EdgeId::AlongB(i, j),
            ];
            let crossing: Vec<usize> = (0..4).filter(|&k| above[k] != above[(k + 1) % 4]).collect();
            match crossing.len() {
                2 => segments.push((edges[crossing[0]], edges[crossing[1]])),
                4 => {
                    let center_above = c.iter().sum::<f64>() / 4.0 >= level;
                    // pair each crossing with the neighbour that keeps the
                    // centre on its own side
                    if center_above == above[0] {
                        segments.push((edges[0], edges[1]));
                        segments.push((edges[2], edges[3]));
                    } else {
                        segments.push((edges[3], edges[0]));
                        segments.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }
    join(segments).into_iter().map(|chain| chain.into_iter().map(point).collect()).collect()
}

fn join(segments: Vec<(EdgeId, EdgeId)>) -> Vec<Vec<EdgeId>> {
    use std::collections::BTreeMap;
    let mut adj: BTreeMap<EdgeId, Vec<usize>> = BTreeMap::new();
    for (k, &(a, b)) in segments.iter().enumerate() {
        adj.entry(a).or_default().push(k);
        adj.entry(b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut chains = Vec::new();
    // start from open ends first so open chains come out whole
    let mut starts: Vec<EdgeId> = adj.iter().filter(|(_, s)| s.len() == 1).map(|(e, _)| *e).collect();
    starts.extend(segments.iter().map(|s| s.0));
    for start in starts {
        let Some(&first) = adj[&start].iter().find(|&&k| !used[k]) else {
            continue;
        };
        let mut chain = vec![start];
        let mut cur = start;
        let mut seg = first;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == cur { b } else { a };
            chain.push(next);
            cur = next;
            match adj[&cur].iter().find(|&&k| !used[k]) {
                Some(&k) => seg = k,
                None => break,
            }
        }
        chains.push(chain);
    }
    chains
}

/// Smallest distance from `p` to any segment of `lines`, with each axis
/// divided by its scale first.
pub fn distance_to_polylines(p: (f64, f64), lines: &[Polyline], scale: (f64, f64)) -> f64 {
    let q = (p.0 / scale.0, p.1 / scale.1);
    let mut best = f64::INFINITY;
    for line in lines {
        for w in line.windows(2) {
            let a = (w[0].0 / scale.0, w[0].1 / scale.1);
            let b = (w[1].0 / scale.0, w[1].1 / scale.1);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 { (((q.0 - a.0) * dx + (q.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
            best = best.min(((q.0 - cx).powi(2) + (q.1 - cy).powi(2)).sqrt());
        }
        if line.len() == 1 {
            best = best.min(((q.0 - line[0].0 / scale.0).powi(2) + (q.1 - line[0].1 / scale.1).powi(2)).sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn straight_line_level_set() {
        // f = x + y, level 3 on a 5x5 grid
        let xs = grid(5);
        let vals: Vec<f64> = (0..25).map(|k| (k / 5 + k % 5) as f64).collect();
        let lines = marching_squares(&vals, &xs, &xs, 3.5);
        assert_eq!(lines.len(), 1);
        for &(x, y) in &lines[0] {
            assert!((x + y - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_closes() {
        let n = 21;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let vals: Vec<f64> = (0..n * n).map(|k| xs[k / n].powi(2) + xs[k % n].powi(2)).collect();
        let lines = marching_squares(&vals, &xs, &xs, 0.5);
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert_eq!(l.first(), l.last());
        for &(x, y) in l {
            assert!(((x * x + y * y).sqrt() - 0.5f64.sqrt()).abs() < 0.02);
        }
    }

    #[test]
    fn constant_field_has_no_lines() {
        let xs = grid(4);
        assert!(marching_squares(&[1.0; 16], &xs, &xs, 0.5).is_empty());
    }

    #[test]
    fn missing_cells_skipped() {
        let xs = grid(3);
        let mut vals: Vec<f64> = (0..9).map(|k| (k / 3) as f64).collect();
        vals[4] = f64::NAN;
        assert!(marching_squares(&vals, &xs, &xs, 0.5).is_empty());
    }

    #[test]
    fn distance_scaled() {
        let line = vec![vec![(0.0, 0.0), (10.0, 0.0)]];
        assert!((distance_to_polylines((5.0, 3.0), &line, (1.0, 1.0)) - 3.0).abs() < 1e-12);
        assert!((distance_to_polylines((5.0, 3.0), &line, (1.0, 2.0)) - 1.5).abs() < 1e-12);
    }
}
