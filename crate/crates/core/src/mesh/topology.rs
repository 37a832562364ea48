use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WsdfError};

/// Default number of entries in each spiral sequence.
pub const DEFAULT_SPIRAL_LEN: usize = 9;

/// Fixed triangle connectivity shared by every registered scan, with the
/// spiral neighbourhoods used by the mesh encoders.
///
/// Spiral entries equal to `vertex_count` are padding; gathering through them
/// yields zero features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyTemplate {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    spiral_len: usize,
    spirals: Vec<Vec<usize>>,
}

impl TopologyTemplate {
    pub fn new(vertex_count: usize, faces: Vec<[usize; 3]>, spiral_len: usize) -> Result<Self> {
        if vertex_count == 0 {
            return Err(WsdfError::Validation("topology needs at least one vertex".into()));
        }
        if spiral_len == 0 {
            return Err(WsdfError::Validation("spiral length must be positive".into()));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertex_count)) {
            return Err(WsdfError::Validation(format!(
                "face {f:?} references a vertex outside 0..{vertex_count}"
            )));
        }
        if let Some(f) = faces.iter().find(|f| f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) {
            return Err(WsdfError::Validation(format!("degenerate face {f:?}")));
        }
        let adjacency = face_adjacency(vertex_count, &faces);
        if !is_connected(&adjacency) {
            return Err(WsdfError::Validation("face graph is not connected".into()));
        }
        let rings = ordered_rings(vertex_count, &faces);
        let spirals = (0..vertex_count)
            .map(|v| spiral_from_rings(v, &rings, spiral_len, vertex_count))
            .collect();
        Ok(Self { vertex_count, faces, spiral_len, spirals })
    }

    /// Regular triangulated grid with `rows * cols` vertices, indexed row-major.
    pub fn grid(rows: usize, cols: usize, spiral_len: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(WsdfError::Validation("grid needs at least 2x2 vertices".into()));
        }
        let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let a = r * cols + c;
                let b = a + 1;
                let d = a + cols;
                let e = d + 1;
                faces.push([a, b, e]);
                faces.push([a, e, d]);
            }
        }
        Self::new(rows * cols, faces, spiral_len)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn spiral_len(&self) -> usize {
        self.spiral_len
    }

    pub fn spirals(&self) -> &[Vec<usize>] {
        &self.spirals
    }

    /// Sentinel index used to pad spirals of boundary vertices.
    pub fn padding_index(&self) -> usize {
        self.vertex_count
    }

    /// Sorted, de-duplicated undirected neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        face_adjacency(self.vertex_count, &self.faces)
    }
}

pub(crate) fn face_adjacency(vertex_count: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut sets = vec![BTreeSet::new(); vertex_count];
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

pub(crate) fn is_connected(adjacency: &[Vec<usize>]) -> bool {
    if adjacency.is_empty() {
        return true;
    }
    let mut seen = vec![false; adjacency.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == adjacency.len()
}

/// One-ring of every vertex, ordered counter-clockwise (with respect to the
/// face winding) starting at the lowest-index neighbour. On open fans the
/// walk stops at the boundary and the leftover neighbours follow in
/// ascending order.
fn ordered_rings(vertex_count: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut next: Vec<HashMap<usize, usize>> = vec![HashMap::new(); vertex_count];
    for f in faces {
        for k in 0..3 {
            let (v, a, b) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            next[v].insert(a, b);
        }
    }
    let adjacency = face_adjacency(vertex_count, faces);
    adjacency
        .iter()
        .enumerate()
        .map(|(v, neighbours)| {
            let Some(&start) = neighbours.first() else {
                return Vec::new();
            };
            let mut ring = Vec::with_capacity(neighbours.len());
            let mut visited = BTreeSet::new();
            let mut cur = start;
            loop {
                ring.push(cur);
                visited.insert(cur);
                match next[v].get(&cur) {
                    Some(&n) if !visited.contains(&n) => cur = n,
                    _ => break,
                }
            }
            ring.extend(neighbours.iter().copied().filter(|n| !visited.contains(n)));
            ring
        })
        .collect()
}

fn spiral_from_rings(center: usize, rings: &[Vec<usize>], len: usize, pad: usize) -> Vec<usize> {
    let mut seq = vec![center];
    let mut seen = BTreeSet::from([center]);
    let mut frontier = vec![center];
    while seq.len() < len && !frontier.is_empty() {
        let mut next_frontier = Vec::new();
        for &u in &frontier {
            for &w in &rings[u] {
                if seen.insert(w) {
                    next_frontier.push(w);
                }
            }
        }
        seq.extend(next_frontier.iter().copied());
        frontier = next_frontier;
    }
    seq.truncate(len);
    seq.resize(len, pad);
    seq
}

/// Breadth-first spiral over an unordered graph: neighbours are visited in
/// ascending index order. Used on decimated levels, which carry no faces.
pub(crate) fn graph_spirals(adjacency: &[Vec<usize>], len: usize) -> Vec<Vec<usize>> {
    let pad = adjacency.len();
    (0..adjacency.len())
        .map(|v| spiral_from_rings(v, adjacency, len, pad))
        .collect()
}
