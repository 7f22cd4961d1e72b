//! Sensor graph: thresholded Gaussian-kernel adjacency, its row-normalized
//! form, and first-order neighborhoods.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default kernel-weight threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Pairwise distances; `None` marks a pair with no recorded distance.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceInput {
    n: usize,
    dist: Vec<Option<f64>>,
}

impl DistanceInput {
    /// Row-major `n × n` matrix; non-finite entries count as missing.
    pub fn dense(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape("distance matrix", &[n, n], &[values.len()]));
        }
        let dist = values.iter().map(|&v| v.is_finite().then_some(v)).collect();
        Ok(DistanceInput { n, dist })
    }

    /// Directed edges `(from, to, cost)`; later duplicates overwrite earlier ones.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut dist = vec![None; n * n];
        for &(i, j, d) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if d.is_finite() {
                dist[i * n + j] = Some(d);
            }
        }
        Ok(DistanceInput { n, dist })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.dist[i * self.n + j]
    }

    /// Population standard deviation of every provided distance.
    pub fn sigma(&self) -> f64 {
        let vals: Vec<f64> = self.dist.iter().flatten().copied().collect();
        if vals.is_empty() {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    }
}

/// Reads a `from,to,cost` edge list with integer node ids in `0..n`.
pub fn read_edge_list(path: &Path, n: usize) -> Result<DistanceInput> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Graph("empty edge list".into()))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols != ["from", "to", "cost"] {
        return Err(Error::Graph(format!(
            "expected header from,to,cost, got {header:?}"
        )));
    }
    let mut edges = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Graph(format!("line {}: malformed edge {line:?}", lineno + 2));
        let mut parts = line.split(',').map(str::trim);
        let i: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let j: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let d: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        edges.push((i, j, d));
    }
    DistanceInput::from_edges(n, &edges)
}

pub fn write_edge_list(path: &Path, edges: &[(usize, usize, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "from,to,cost")?;
    for (i, j, d) in edges {
        writeln!(out, "{i},{j},{d}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    n: usize,
    adjacency: Tensor,
    normalized: Tensor,
    neighbors: Vec<Vec<usize>>,
}

/// `W_ij = exp(−d_ij² / σ²)`, kept when `W_ij ≥ threshold`.
///
/// `threshold` is on the kernel weight, so it must lie in `[0, 1]`; a
/// larger value almost certainly means a distance-scale threshold and is
/// rejected instead of silently reinterpreted.
pub fn build_adjacency(dist: &DistanceInput, threshold: f64) -> Result<SensorGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Graph(format!(
            "threshold {threshold} is not a kernel weight in [0, 1]"
        )));
    }
    if let Some(d) = dist.dist.iter().flatten().find(|d| **d < 0.0) {
        return Err(Error::Graph(format!("negative distance {d}")));
    }
    let sigma = dist.sigma();
    if sigma == 0.0 {
        return Err(Error::Graph(
            "distance standard deviation is zero; kernel undefined".into(),
        ));
    }
    let n = dist.n;
    let weights = dist
        .dist
        .iter()
        .map(|d| match d {
            Some(d) => {
                let w = (-(d * d) / (sigma * sigma)).exp();
                if w >= threshold {
                    w
                } else {
                    0.0
                }
            }
            None => 0.0,
        })
        .collect();
    SensorGraph::from_weights(n, weights)
}

/// Row-stochastic `D⁻¹(A + I)`.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut out = a.data().to_vec();
    for i in 0..n {
        out[i * n + i] += 1.0;
        let row = &mut out[i * n..(i + 1) * n];
        let deg: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= deg);
    }
    Tensor::new([n, n], out).expect("square")
}

impl SensorGraph {
    /// Graph from a row-major weight matrix with entries in `[0, 1]`.
    pub fn from_weights(n: usize, weights: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Graph(format!("adjacency weight {w} outside [0, 1]")));
        }
        let adjacency = Tensor::new([n, n], weights)?;
        let normalized = normalize_adjacency(&adjacency);
        let a = adjacency.data();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && (a[i * n + j] > 0.0 || a[j * n + i] > 0.0))
                    .collect()
            })
            .collect();
        Ok(SensorGraph {
            n,
            adjacency,
            normalized,
            neighbors,
        })
    }

    /// Graph with no edges.
    pub fn isolated(n: usize) -> Result<Self> {
        Self::from_weights(n, vec![0.0; n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    /// `{j ≠ i : A_ij > 0 or A_ji > 0}`, sorted.
    pub fn first_order_neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Graph(format!("node {i} out of range for {} nodes", self.n)))
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency
            .data()
            .iter()
            .enumerate()
            .filter(|(k, w)| **w > 0.0 && k / self.n != k % self.n)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line3() -> DistanceInput {
        #[rustfmt::skip]
        let d = [
            0.0, 1.0, 2.0,
            1.0, 0.0, 1.0,
            2.0, 1.0, 0.0,
        ];
        DistanceInput::dense(3, &d).unwrap()
    }

    #[test]
    fn self_distance_gives_unit_weight() {
        let g = build_adjacency(&line3(), DEFAULT_THRESHOLD).unwrap();
        for i in 0..3 {
            assert_eq!(g.adjacency().data()[i * 3 + i], 1.0);
        }
    }

    #[test]
    fn line_graph_kernel_by_hand() {
        // entries {0,1,2,1,0,1,2,1,0}: mean 8/9, population variance 44/81
        let sigma2: f64 = 44.0 / 81.0;
        assert!((line3().sigma() - sigma2.sqrt()).abs() < 1e-15);
        let w1 = (-1.0 / sigma2).exp(); // ≈ 0.159, kept at k = 0.1
        let w2 = (-4.0 / sigma2).exp(); // ≈ 6e-4, dropped
        assert!(w1 >= 0.1 && w2 < 0.1);
        let g = build_adjacency(&line3(), 0.1).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, w1, 0.0,
            w1, 1.0, w1,
            0.0, w1, 1.0,
        ];
        for (a, b) in g.adjacency().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let same = DistanceInput::dense(2, &[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(build_adjacency(&same, 0.1).is_err());
        let neg = DistanceInput::dense(2, &[0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!(build_adjacency(&neg, 0.1).is_err());
        assert!(build_adjacency(&line3(), 5.0).is_err());
    }

    #[test]
    fn missing_distance_is_zero_weight() {
        let d = DistanceInput::from_edges(3, &[(0, 1, 1.0), (1, 2, 3.0)]).unwrap();
        let g = build_adjacency(&d, 0.0).unwrap();
        assert_eq!(g.adjacency().data()[2], 0.0);
        assert_eq!(g.adjacency().data()[3], 0.0);
    }

    #[test]
    fn normalize_zero_matrix_is_identity() {
        let g = SensorGraph::isolated(3).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        assert_eq!(g.normalized().data(), eye.as_slice());
    }

    #[test]
    fn normalize_two_node_graph() {
        let g = SensorGraph::from_weights(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.normalized().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn neighbors_follow_symmetric_or() {
        let g = SensorGraph::from_weights(3, vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(g.first_order_neighbors(0).unwrap(), &[1]);
        assert_eq!(g.first_order_neighbors(1).unwrap(), &[0]);
        assert!(g.first_order_neighbors(2).unwrap().is_empty());
        assert!(g.first_order_neighbors(3).is_err());
    }

    #[test]
    fn line_graph_neighbors() {
        let g = build_adjacency(&line3(), 0.1).unwrap();
        assert_eq!(g.first_order_neighbors(1).unwrap(), &[0, 2]);
    }

    #[test]
    fn edge_list_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let edges = vec![(0, 1, 1.5), (1, 0, 1.5), (1, 2, 0.25)];
        write_edge_list(&path, &edges).unwrap();
        let d = read_edge_list(&path, 3).unwrap();
        assert_eq!(d, DistanceInput::from_edges(3, &edges).unwrap());
    }

    #[test]
    fn edge_list_requires_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        std::fs::write(&path, "a,b,c\n0,1,1\n").unwrap();
        assert!(read_edge_list(&path, 2).is_err());
    }
}
