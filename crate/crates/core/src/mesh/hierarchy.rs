use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::topology::{graph_spirals, TopologyTemplate};
use crate::error::{Result, WsdfError};

/// Sparse row-major matrix: row `r` is `sum_k w_k * x[idx_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// One resolution of the encoder pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLevel {
    pub vertex_count: usize,
    /// Spiral neighbourhoods; entries equal to `vertex_count` are padding.
    pub spirals: Vec<Vec<usize>>,
    /// Averaging operator from the previous (finer) level; `None` on level 0.
    pub down: Option<SparseRows>,
}

/// Multi-resolution spiral neighbourhoods obtained by repeated graph
/// decimation. Coarse vertices are chosen by farthest-point sampling on
/// hop distance; every fine vertex is assigned to its nearest kept vertex
/// and the pooling operator averages each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshHierarchy {
    pub levels: Vec<PoolLevel>,
}

impl MeshHierarchy {
    pub fn build(topology: &TopologyTemplate, factors: &[usize]) -> Result<Self> {
        let len = topology.spiral_len();
        let mut levels = vec![PoolLevel {
            vertex_count: topology.vertex_count(),
            spirals: topology.spirals().to_vec(),
            down: None,
        }];
        let mut adjacency = topology.adjacency();
        for &factor in factors {
            if factor == 0 {
                return Err(WsdfError::Config("pooling factor must be positive".into()));
            }
            let n = adjacency.len();
            let keep = n.div_ceil(factor).max(1);
            let seeds = farthest_point_seeds(&adjacency, keep);
            let owner = assign_clusters(&adjacency, &seeds);
            let mut rows = vec![Vec::new(); seeds.len()];
            for (v, &c) in owner.iter().enumerate() {
                rows[c].push(v);
            }
            let down = SparseRows {
                cols: n,
                rows: rows
                    .iter()
                    .map(|members| {
                        let w = 1.0 / members.len() as f64;
                        members.iter().map(|&v| (v, w)).collect()
                    })
                    .collect(),
            };
            let mut coarse = vec![BTreeSet::new(); seeds.len()];
            for (v, nbrs) in adjacency.iter().enumerate() {
                for &w in nbrs {
                    let (a, b) = (owner[v], owner[w]);
                    if a != b {
                        coarse[a].insert(b);
                        coarse[b].insert(a);
                    }
                }
            }
            adjacency = coarse.into_iter().map(|s| s.into_iter().collect()).collect();
            levels.push(PoolLevel {
                vertex_count: seeds.len(),
                spirals: graph_spirals(&adjacency, len),
                down: Some(down),
            });
        }
        Ok(Self { levels })
    }
}

fn bfs_distances(adjacency: &[Vec<usize>], source: usize, dist: &mut [usize]) {
    let mut local = vec![usize::MAX; adjacency.len()];
    local[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if local[w] == usize::MAX {
                local[w] = local[v] + 1;
                queue.push_back(w);
            }
        }
    }
    for (d, l) in dist.iter_mut().zip(local) {
        *d = (*d).min(l);
    }
}

fn farthest_point_seeds(adjacency: &[Vec<usize>], count: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adjacency.len()];
    let mut seeds = Vec::with_capacity(count);
    let mut next = 0;
    while seeds.len() < count {
        seeds.push(next);
        bfs_distances(adjacency, next, &mut dist);
        // max distance, lowest index on ties
        let mut best = (0usize, usize::MAX);
        for (v, &d) in dist.iter().enumerate() {
            if d > best.0 || (d == best.0 && v < best.1) {
                best = (d, v);
            }
        }
        if best.0 == 0 {
            break;
        }
        next = best.1;
    }
    seeds
}

/// Multi-source BFS; ties go to the seed that was chosen first.
fn assign_clusters(adjacency: &[Vec<usize>], seeds: &[usize]) -> Vec<usize> {
    let mut owner = vec![usize::MAX; adjacency.len()];
    let mut queue = VecDeque::new();
    for (c, &s) in seeds.iter().enumerate() {
        owner[s] = c;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if owner[w] == usize::MAX {
                owner[w] = owner[v];
                queue.push_back(w);
            }
        }
    }
    owner
}
