use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed graph over forecasting nodes. Every neighbourhood lists the node
/// itself exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    neighborhoods: Vec<Vec<usize>>,
    /// Planar positions in kilometres.
    coordinates: Vec<[f64; 2]>,
    /// Adjacency weights aligned with `neighborhoods`.
    weights: Vec<Vec<f64>>,
}

impl GraphTopology {
    pub fn new(
        neighborhoods: Vec<Vec<usize>>,
        coordinates: Vec<[f64; 2]>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = neighborhoods.len();
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        if coordinates.len() != n {
            return Err(Error::dim("graph coordinates", n, coordinates.len()));
        }
        if weights.len() != n {
            return Err(Error::dim("graph weights", n, weights.len()));
        }
        for (i, nbrs) in neighborhoods.iter().enumerate() {
            if nbrs.iter().filter(|&&j| j == i).count() != 1 {
                return Err(Error::invalid(format!(
                    "neighbourhood of node {i} must contain the node itself exactly once"
                )));
            }
            if let Some(&bad) = nbrs.iter().find(|&&j| j >= n) {
                return Err(Error::invalid(format!("neighbour index {bad} out of range for node {i}")));
            }
            if weights[i].len() != nbrs.len() {
                return Err(Error::dim("adjacency weight row", nbrs.len(), weights[i].len()));
            }
            if weights[i].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invalid(format!("adjacency weights of node {i} must be finite and nonnegative")));
            }
            if coordinates[i].iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!("coordinates of node {i} are not finite")));
            }
        }
        Ok(Self {
            neighborhoods,
            coordinates,
            weights,
        })
    }

    /// Nodes connected to all nodes within `radius_km` (inclusive), unit weights.
    pub fn from_coordinates(coordinates: Vec<[f64; 2]>, radius_km: f64) -> Result<Self> {
        let n = coordinates.len();
        let mut neighborhoods = Vec::with_capacity(n);
        for i in 0..n {
            let mut nbrs = vec![i];
            for j in 0..n {
                if j != i && euclid(coordinates[i], coordinates[j]) <= radius_km + 1e-12 {
                    nbrs.push(j);
                }
            }
            neighborhoods.push(nbrs);
        }
        let weights = neighborhoods.iter().map(|nb| vec![1.0; nb.len()]).collect();
        Self::new(neighborhoods, coordinates, weights)
    }

    /// Rook-adjacent lattice with `spacing_km` between node centres.
    pub fn lattice(rows: usize, cols: usize, spacing_km: f64) -> Result<Self> {
        let coords = (0..rows * cols)
            .map(|k| [(k % cols) as f64 * spacing_km, (k / cols) as f64 * spacing_km])
            .collect();
        Self::from_coordinates(coords, spacing_km)
    }

    pub fn node_count(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn coordinates(&self) -> &[[f64; 2]] {
        &self.coordinates
    }

    pub fn distance_km(&self, i: usize, j: usize) -> f64 {
        euclid(self.coordinates[i], self.coordinates[j])
    }

    /// All nodes within `hops` graph hops of `center`, in BFS order
    /// starting with `center`.
    pub fn hop_neighborhood(&self, center: usize, hops: usize) -> Vec<usize> {
        let n = self.node_count();
        let mut depth = vec![usize::MAX; n];
        let mut order = Vec::new();
        let mut queue = VecDeque::new();
        depth[center] = 0;
        queue.push_back(center);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            if depth[u] == hops {
                continue;
            }
            for &v in &self.neighborhoods[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        order
    }
}

pub(crate) fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
