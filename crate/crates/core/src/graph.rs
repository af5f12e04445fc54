//! Radius graphs over tracer particles and the raw node/edge features fed to
//! the graph network.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::Vec3;

/// Velocity frames carried in each node's history.
pub const HISTORY_STEPS: usize = 5;
pub const NODE_FEATURES: usize = 6 + 3 * HISTORY_STEPS;
pub const EDGE_FEATURES: usize = 7;
pub const STD_FLOOR: f64 = 1e-8;

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Directed edge `[receiver, sender]`: messages flow from sender `j` into
/// receiver `i` and the edge features describe `p_i - p_j`.
pub type Edge = [usize; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    pub node_positions: Vec<Vec3>,
    pub node_features: Features,
    pub edge_index: Vec<Edge>,
    pub edge_features: Features,
}

impl FlowGraph {
    /// Builds the graph at time `t` from positions at `t-1`, `t` and the
    /// velocity history (most recent first).
    pub fn build(
        prev: &[Vec3],
        cur: &[Vec3],
        velocities: &[Vec<Vec3>],
        radius: f64,
        max_neighbors: usize,
    ) -> Result<Self> {
        let node_features = assemble_node_features(prev, cur, velocities)?;
        let edge_index = build_radius_graph(cur, radius, max_neighbors)?;
        let edge_features = assemble_edge_features(cur, prev, &edge_index)?;
        Ok(Self {
            node_positions: cur.to_vec(),
            node_features,
            edge_index,
            edge_features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_positions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// All directed pairs closer than `radius` (strictly). A receiver with more
/// than `max_neighbors` candidates keeps the nearest ones, ties broken by the
/// lower sender index. Edges are ordered by receiver, then by that ranking.
pub fn build_radius_graph(positions: &[Vec3], radius: f64, max_neighbors: usize) -> Result<Vec<Edge>> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!("graph radius {radius} must be positive")));
    }
    if max_neighbors == 0 {
        return Err(Error::Config("max_neighbors must be positive".into()));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite particle position".into()));
    }
    let cell_of = |p: &Vec3| -> [i64; 3] {
        [
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
            (p[2] / radius).floor() as i64,
        ]
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut edges = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        candidates.clear();
        let c = cell_of(p);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &j in members {
                            if j == i {
                                continue;
                            }
                            let d2 = dist2(p, &positions[j]);
                            if d2 < r2 {
                                candidates.push((d2, j));
                            }
                        }
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(candidates.iter().take(max_neighbors).map(|&(_, j)| [i, j]));
    }
    Ok(edges)
}

/// Node rows `[p(t-1), p(t), v(t-1), v(t-2), …, v(t-C)]`.
pub fn assemble_node_features(prev: &[Vec3], cur: &[Vec3], velocities: &[Vec<Vec3>]) -> Result<Features> {
    let n = cur.len();
    if prev.len() != n {
        return Err(Error::Input(format!(
            "position history has {} and {n} particles",
            prev.len()
        )));
    }
    if velocities.len() != HISTORY_STEPS {
        return Err(Error::Input(format!(
            "velocity history has {} frames, need {HISTORY_STEPS}",
            velocities.len()
        )));
    }
    if let Some(v) = velocities.iter().find(|v| v.len() != n) {
        return Err(Error::Input(format!(
            "velocity frame has {} particles, expected {n}",
            v.len()
        )));
    }
    let mut out = Features::zeros(n, NODE_FEATURES);
    for i in 0..n {
        let row = out.row_mut(i);
        row[0..3].copy_from_slice(&prev[i]);
        row[3..6].copy_from_slice(&cur[i]);
        for (k, frame) in velocities.iter().enumerate() {
            row[6 + 3 * k..9 + 3 * k].copy_from_slice(&frame[i]);
        }
    }
    Ok(out)
}

/// Edge rows `[p_i(t) - p_j(t), p_i(t-1) - p_j(t-1), ‖·‖₂ of those six]`.
pub fn assemble_edge_features(cur: &[Vec3], prev: &[Vec3], edges: &[Edge]) -> Result<Features> {
    if cur.len() != prev.len() {
        return Err(Error::Input("position frames differ in particle count".into()));
    }
    let n = cur.len();
    let mut out = Features::zeros(edges.len(), EDGE_FEATURES);
    for (e, &[i, j]) in edges.iter().enumerate() {
        if i >= n || j >= n {
            return Err(Error::Input(format!("edge ({i}, {j}) outside {n} nodes")));
        }
        let row = out.row_mut(e);
        for a in 0..3 {
            row[a] = cur[i][a] - cur[j][a];
            row[3 + a] = prev[i][a] - prev[j][a];
        }
        row[6] = row[..6].iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(out)
}

/// Per-column mean and population standard deviation (floored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn fit<'a>(cols: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; cols];
        let mut sum_sq = vec![0.0; cols];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            if r.len() != cols {
                return Err(Error::Shape(format!("row of {} features, expected {cols}", r.len())));
            }
            count += 1;
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        if count == 0 {
            return Err(Error::Input("cannot fit statistics on an empty dataset".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for r in &rows {
            for ((s, v), m) in sum_sq.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = sum_sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn normalize_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }

    pub fn normalize(&self, f: &Features) -> Features {
        let mut out = f.clone();
        for r in 0..out.rows {
            self.normalize_row(out.row_mut(r));
        }
        out
    }

    pub fn denormalize(&self, f: &Features) -> Features {
        let mut out = f.clone();
        for r in 0..out.rows {
            self.denormalize_row(out.row_mut(r));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node: ColumnStats,
    pub edge: ColumnStats,
    pub velocity: ColumnStats,
}

impl NormStats {
    /// Fits statistics over every node row, edge row and target velocity of
    /// the training graphs.
    pub fn fit(graphs: &[&FlowGraph], targets: &[&[Vec3]]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Input("cannot fit statistics on an empty dataset".into()));
        }
        let node = ColumnStats::fit(
            NODE_FEATURES,
            graphs
                .iter()
                .flat_map(|g| (0..g.node_features.rows).map(move |r| g.node_features.row(r))),
        )?;
        let edge_rows: Vec<&[f64]> = graphs
            .iter()
            .flat_map(|g| (0..g.edge_features.rows).map(move |r| g.edge_features.row(r)))
            .collect();
        let edge = if edge_rows.is_empty() {
            ColumnStats::identity(EDGE_FEATURES)
        } else {
            ColumnStats::fit(EDGE_FEATURES, edge_rows)?
        };
        let velocity = ColumnStats::fit(
            3,
            targets.iter().flat_map(|t| t.iter().map(|v| v.as_slice())),
        )?;
        Ok(Self { node, edge, velocity })
    }

    pub fn identity() -> Self {
        Self {
            node: ColumnStats::identity(NODE_FEATURES),
            edge: ColumnStats::identity(EDGE_FEATURES),
            velocity: ColumnStats::identity(3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_graph(positions: &[Vec3], r: f64, max_neighbors: usize) -> Vec<Edge> {
        let mut edges = Vec::new();
        for i in 0..positions.len() {
            let mut cand: Vec<(f64, usize)> = (0..positions.len())
                .filter(|&j| j != i)
                .map(|j| (dist2(&positions[i], &positions[j]), j))
                .filter(|&(d2, _)| d2 < r * r)
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.truncate(max_neighbors);
            edges.extend(cand.into_iter().map(|(_, j)| [i, j]));
        }
        edges
    }

    fn random_positions(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                ]
            })
            .collect()
    }

    #[test]
    fn radius_is_strict() {
        let p = vec![[0.0, 0.0, 0.0], [32.0, 0.0, 0.0]];
        assert!(build_radius_graph(&p, 32.0, 64).unwrap().is_empty());
        let p = vec![[0.0, 0.0, 0.0], [16.0, 0.0, 0.0]];
        assert_eq!(build_radius_graph(&p, 32.0, 64).unwrap(), vec![[0, 1], [1, 0]]);
    }

    #[test]
    fn random_graphs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, k) in &[(8.0, 64), (12.0, 5), (32.0, 64), (5.0, 1)] {
            let p = random_positions(&mut rng, 50, 40.0);
            assert_eq!(build_radius_graph(&p, r, k).unwrap(), brute_force_graph(&p, r, k));
        }
    }

    #[test]
    fn truncation_ties_prefer_lower_index() {
        let p = vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let e = build_radius_graph(&p, 5.0, 2).unwrap();
        assert_eq!(&e[..2], &[[0, 1], [0, 2]]);
    }

    #[test]
    fn non_finite_positions_rejected() {
        let p = vec![[0.0; 3], [f64::NAN, 0.0, 0.0]];
        assert!(matches!(build_radius_graph(&p, 1.0, 4), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn graph_is_permutation_consistent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_positions(&mut rng, 30, 20.0);
            let mut perm: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // new label k holds old particle perm[k]
            let q: Vec<Vec3> = perm.iter().map(|&o| p[o]).collect();
            let mut inv = vec![0; 30];
            for (k, &o) in perm.iter().enumerate() {
                inv[o] = k;
            }
            let mut a: Vec<Edge> = build_radius_graph(&p, 6.0, 64).unwrap()
                .into_iter().map(|[i, j]| [inv[i], inv[j]]).collect();
            let mut b = build_radius_graph(&q, 6.0, 64).unwrap();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn edge_features_are_translation_invariant(seed in 0u64..200, off in -50i32..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cur = random_positions(&mut rng, 12, 10.0);
            let prev = random_positions(&mut rng, 12, 10.0);
            let edges = build_radius_graph(&cur, 5.0, 64).unwrap();
            let shift = |p: &[Vec3]| -> Vec<Vec3> {
                p.iter().map(|v| [v[0] + off as f64, v[1] + off as f64 * 0.5, v[2] - off as f64]).collect()
            };
            let a = assemble_edge_features(&cur, &prev, &edges).unwrap();
            let b = assemble_edge_features(&shift(&cur), &shift(&prev), &edges).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for e in 0..a.rows {
                let row = a.row(e);
                let norm = row[..6].iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(row[6] >= 0.0 && (row[6] - norm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn node_feature_layout() {
        let zero = vec![[0.0; 3]];
        let vels = vec![zero.clone(); HISTORY_STEPS];
        let f = assemble_node_features(&zero, &zero, &vels).unwrap();
        assert_eq!(f.data, vec![0.0; 21]);

        let vels = vec![vec![[1.0, 0.0, 0.0]]; HISTORY_STEPS];
        let f = assemble_node_features(&zero, &[[1.0, 0.0, 0.0]], &vels).unwrap();
        let mut expected = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        for _ in 0..5 {
            expected.extend([1.0, 0.0, 0.0]);
        }
        assert_eq!(f.data, expected);

        assert!(assemble_node_features(&zero, &zero, &vels[..4]).is_err());
    }

    #[test]
    fn node_features_unpack_to_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 7;
        let prev = random_positions(&mut rng, n, 5.0);
        let cur = random_positions(&mut rng, n, 5.0);
        let vels: Vec<Vec<Vec3>> = (0..HISTORY_STEPS).map(|_| random_positions(&mut rng, n, 1.0)).collect();
        let f = assemble_node_features(&prev, &cur, &vels).unwrap();
        for i in 0..n {
            let row = f.row(i);
            let take = |o: usize| [row[o], row[o + 1], row[o + 2]];
            assert_eq!(take(0), prev[i]);
            assert_eq!(take(3), cur[i]);
            for (k, frame) in vels.iter().enumerate() {
                assert_eq!(take(6 + 3 * k), frame[i]);
            }
        }
    }

    #[test]
    fn edge_feature_cases() {
        let cur = vec![[3.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let prev = vec![[0.0, 4.0, 0.0], [0.0, 0.0, 0.0]];
        let f = assemble_edge_features(&cur, &prev, &[[0, 1]]).unwrap();
        assert_eq!(f.data, vec![3.0, 0.0, 0.0, 0.0, 4.0, 0.0, 5.0]);
        let same = vec![[1.0, 2.0, 3.0]; 2];
        let f = assemble_edge_features(&same, &same, &[[0, 1]]).unwrap();
        assert_eq!(f.data, vec![0.0; 7]);
        assert!(assemble_edge_features(&same, &same, &[[0, 2]]).is_err());
    }

    #[test]
    fn column_stats_cases() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 3.0], vec![2.0, 3.0]];
        let s = ColumnStats::fit(2, rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(s.mean, vec![1.0, 3.0]);
        assert_eq!(s.std, vec![1.0, STD_FLOOR]);
        let f = Features {
            rows: 2,
            cols: 2,
            data: vec![0.0, 3.0, 2.0, 3.0],
        };
        let n = s.normalize(&f);
        assert_eq!(n.data, vec![-1.0, 0.0, 1.0, 0.0]);
        let back = s.denormalize(&n);
        for (a, b) in back.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(ColumnStats::fit(2, std::iter::empty()).is_err());
    }
}
