//! Registered meshes on a shared topology and the geometric utilities used
//! throughout training and evaluation.

mod hierarchy;
pub mod io;
mod topology;

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WsdfError};

pub use hierarchy::{MeshHierarchy, PoolLevel, SparseRows};
pub use topology::{TopologyTemplate, DEFAULT_SPIRAL_LEN};

/// Vertex positions of one scan on a registered topology.
#[derive(Debug, Clone)]
pub struct FaceMesh {
    vertices: Array2<f64>,
    topology: Arc<TopologyTemplate>,
}

impl FaceMesh {
    pub fn new(vertices: Array2<f64>, topology: Arc<TopologyTemplate>) -> Result<Self> {
        if vertices.dim() != (topology.vertex_count(), 3) {
            return Err(WsdfError::Shape(format!(
                "mesh has shape {:?}, topology expects ({}, 3)",
                vertices.dim(),
                topology.vertex_count()
            )));
        }
        if vertices.iter().any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("mesh has non-finite coordinates".into()));
        }
        Ok(Self { vertices, topology })
    }

    /// Builds a mesh from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64], topology: Arc<TopologyTemplate>) -> Result<Self> {
        let v = topology.vertex_count();
        if flat.len() != v * 3 {
            return Err(WsdfError::Shape(format!(
                "flat buffer has {} values, expected {}",
                flat.len(),
                v * 3
            )));
        }
        let vertices = Array2::from_shape_vec((v, 3), flat.to_vec())
            .map_err(|e| WsdfError::Shape(e.to_string()))?;
        Self::new(vertices, topology)
    }

    pub fn zeros(topology: Arc<TopologyTemplate>) -> Self {
        let vertices = Array2::zeros((topology.vertex_count(), 3));
        Self { vertices, topology }
    }

    pub fn vertices(&self) -> ArrayView2<'_, f64> {
        self.vertices.view()
    }

    pub fn into_vertices(self) -> Array2<f64> {
        self.vertices
    }

    pub fn vertex(&self, v: usize) -> [f64; 3] {
        let r = self.vertices.row(v);
        [r[0], r[1], r[2]]
    }

    pub fn topology(&self) -> &Arc<TopologyTemplate> {
        &self.topology
    }

    pub fn vertex_count(&self) -> usize {
        self.topology.vertex_count()
    }

    /// Row-major flattened coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().copied().collect()
    }

    pub fn same_topology(&self, other: &FaceMesh) -> bool {
        Arc::ptr_eq(&self.topology, &other.topology) || self.topology == other.topology
    }

    /// The same vertices attached to an equal topology instance.
    pub fn with_topology(&self, topology: Arc<TopologyTemplate>) -> Result<FaceMesh> {
        if !Arc::ptr_eq(&self.topology, &topology) && *self.topology != *topology {
            return Err(WsdfError::Shape(format!(
                "topology mismatch ({} vs {} vertices)",
                self.vertex_count(),
                topology.vertex_count()
            )));
        }
        Ok(Self { vertices: self.vertices.clone(), topology })
    }

    fn check_pair(&self, other: &FaceMesh) -> Result<()> {
        if self.same_topology(other) {
            Ok(())
        } else {
            Err(WsdfError::Shape(format!(
                "topology mismatch ({} vs {} vertices)",
                self.vertex_count(),
                other.vertex_count()
            )))
        }
    }

    pub(crate) fn with_vertices(&self, vertices: Array2<f64>) -> Result<Self> {
        Self::new(vertices, self.topology.clone())
    }
}

/// One registered scan together with its labels.
///
/// The expression label is kept for evaluation only; the training pipeline
/// converts records into [`crate::dataset::TrainScan`], which has no such field.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub mesh: FaceMesh,
    pub subject_id: String,
    pub expression_label: Option<String>,
    pub source_tag: String,
}

impl ScanRecord {
    pub fn new(
        mesh: FaceMesh,
        subject_id: impl Into<String>,
        expression_label: Option<String>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(WsdfError::Validation("subject id must not be empty".into()));
        }
        Ok(Self { mesh, subject_id, expression_label, source_tag: source_tag.into() })
    }
}

/// Per-coordinate mean mesh and a single global scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Array2<f64>,
    pub scale: f64,
}

impl NormalizationStats {
    pub fn new(mean: Array2<f64>, scale: f64) -> Result<Self> {
        let stats = Self { mean, scale };
        stats.validate()?;
        Ok(stats)
    }

    /// Mean over all meshes; scale is the standard deviation of every
    /// centred coordinate.
    pub fn fit(meshes: &[&FaceMesh]) -> Result<Self> {
        let first = meshes
            .first()
            .ok_or_else(|| WsdfError::Validation("cannot fit normalization on zero meshes".into()))?;
        let mut mean = Array2::<f64>::zeros(first.vertices.dim());
        for m in meshes {
            first.check_pair(m)?;
            mean += &m.vertices;
        }
        mean /= meshes.len() as f64;
        let mut sq = 0.0;
        for m in meshes {
            sq += (&m.vertices - &mean).iter().map(|d| d * d).sum::<f64>();
        }
        let count = (meshes.len() * mean.len()) as f64;
        let mut scale = (sq / count).sqrt();
        if scale <= f64::EPSILON {
            scale = 1.0;
        }
        Self::new(mean, scale)
    }

    fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(WsdfError::Validation(format!("normalization scale {} must be positive", self.scale)));
        }
        if self.mean.ncols() != 3 || self.mean.iter().any(|x| !x.is_finite()) {
            return Err(WsdfError::Validation("normalization mean must be finite (V, 3)".into()));
        }
        Ok(())
    }

    fn check(&self, mesh: &FaceMesh) -> Result<()> {
        self.validate()?;
        if self.mean.dim() != mesh.vertices.dim() {
            return Err(WsdfError::Shape(format!(
                "normalization stats {:?} do not match mesh {:?}",
                self.mean.dim(),
                mesh.vertices.dim()
            )));
        }
        Ok(())
    }
}

pub fn normalize(mesh: &FaceMesh, stats: &NormalizationStats) -> Result<FaceMesh> {
    stats.check(mesh)?;
    mesh.with_vertices((&mesh.vertices - &stats.mean) / stats.scale)
}

pub fn denormalize(mesh: &FaceMesh, stats: &NormalizationStats) -> Result<FaceMesh> {
    stats.check(mesh)?;
    mesh.with_vertices(&mesh.vertices * stats.scale + &stats.mean)
}

/// Mean Euclidean distance between corresponding vertices.
pub fn average_vertex_distance(a: &FaceMesh, b: &FaceMesh) -> Result<f64> {
    a.check_pair(b)?;
    Ok(avd_views(a.vertices(), b.vertices()))
}

pub(crate) fn avd_views(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = a
        .axis_iter(Axis(0))
        .zip(b.axis_iter(Axis(0)))
        .map(|(p, q)| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .sum();
    total / a.nrows() as f64
}

/// Rotation and translation (no scaling) that best maps `source` onto
/// `target` in the least-squares sense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, vertices: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(vertices.dim());
        for (src, mut dst) in vertices.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let p = self.rotation * Vector3::new(src[0], src[1], src[2]) + self.translation;
            dst[0] = p.x;
            dst[1] = p.y;
            dst[2] = p.z;
        }
        out
    }
}

/// Kabsch solution of the orthogonal Procrustes problem.
pub fn estimate_rigid(source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<RigidTransform> {
    if source.dim() != target.dim() || source.ncols() != 3 {
        return Err(WsdfError::Shape("rigid alignment needs matching (V, 3) point sets".into()));
    }
    let n = source.nrows();
    if n < 3 {
        return Err(WsdfError::Degenerate("rigid alignment needs at least 3 vertices".into()));
    }
    let centroid = |pts: ArrayView2<'_, f64>| {
        let m = pts.mean_axis(Axis(0)).expect("non-empty");
        Vector3::new(m[0], m[1], m[2])
    };
    let cs = centroid(source);
    let ct = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, t) in source.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))) {
        let ps = Vector3::new(s[0], s[1], s[2]) - cs;
        let pt = Vector3::new(t[0], t[1], t[2]) - ct;
        cov += pt * ps.transpose();
        spread += ps * ps.transpose();
    }
    let eig = spread.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(WsdfError::Degenerate("source vertices are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let translation = ct - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

/// Returns `source` rigidly moved onto `target`.
pub fn rigid_align(source: &FaceMesh, target: &FaceMesh) -> Result<FaceMesh> {
    source.check_pair(target)?;
    let t = estimate_rigid(source.vertices(), target.vertices())?;
    source.with_vertices(t.apply(source.vertices()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn topo(v: usize) -> Arc<TopologyTemplate> {
        // a strip of v vertices: v must be >= 3
        let faces = (0..v - 2).map(|i| [i, i + 1, i + 2]).collect();
        Arc::new(TopologyTemplate::new(v, faces, 4).unwrap())
    }

    fn random_mesh(rng: &mut ChaCha8Rng, t: &Arc<TopologyTemplate>) -> FaceMesh {
        let n = t.vertex_count();
        let data = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        FaceMesh::new(Array2::from_shape_vec((n, 3), data).unwrap(), t.clone()).unwrap()
    }

    fn rotation_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn avd_identity_and_unit_offset() {
        let t = topo(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mesh(&mut rng, &t);
        assert_eq!(average_vertex_distance(&a, &a).unwrap(), 0.0);
        let mut shifted = a.vertices().to_owned();
        shifted.column_mut(0).mapv_inplace(|x| x + 1.0);
        let b = FaceMesh::new(shifted, t).unwrap();
        assert!((average_vertex_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn avd_matches_per_vertex_loop() {
        let t = topo(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mesh(&mut rng, &t);
        let b = random_mesh(&mut rng, &t);
        let mut acc = 0.0;
        for v in 0..5 {
            let (p, q) = (a.vertex(v), b.vertex(v));
            let mut s = 0.0;
            for k in 0..3 {
                s += (p[k] - q[k]).powi(2);
            }
            acc += s.sqrt();
        }
        assert!((average_vertex_distance(&a, &b).unwrap() - acc / 5.0).abs() < 1e-14);
    }

    #[test]
    fn avd_rejects_topology_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_mesh(&mut rng, &topo(5));
        let b = random_mesh(&mut rng, &topo(6));
        assert!(matches!(average_vertex_distance(&a, &b), Err(WsdfError::Shape(_))));
    }

    #[test]
    fn rigid_align_recovers_rotation_and_translation() {
        let t = topo(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random_mesh(&mut rng, &t);
        let moved = RigidTransform { rotation: rotation_z(90.0), translation: Vector3::new(3.0, -2.0, 0.5) }
            .apply(target.vertices());
        let source = FaceMesh::new(moved, t).unwrap();
        let aligned = rigid_align(&source, &target).unwrap();
        assert!(average_vertex_distance(&aligned, &target).unwrap() < 1e-6);
        let same = rigid_align(&target, &target).unwrap();
        assert!(average_vertex_distance(&same, &target).unwrap() < 1e-12);
    }

    #[test]
    fn rigid_align_rejects_collinear_points() {
        let t = topo(5);
        let line = Array2::from_shape_fn((5, 3), |(i, k)| if k == 0 { i as f64 } else { 0.0 });
        let a = FaceMesh::new(line.clone(), t.clone()).unwrap();
        assert!(matches!(rigid_align(&a, &a), Err(WsdfError::Degenerate(_))));
    }

    #[test]
    fn normalize_round_trip_and_zero_case() {
        let t = topo(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_mesh(&mut rng, &t);
        let mean = random_mesh(&mut rng, &t).into_vertices();
        let stats = NormalizationStats::new(mean.clone(), 2.5).unwrap();
        let n = normalize(&x, &stats).unwrap();
        for ((a, b), m) in n.vertices().iter().zip(x.vertices().iter()).zip(mean.iter()) {
            assert!((a - (b - m) / 2.5).abs() < 1e-15);
        }
        let back = denormalize(&n, &stats).unwrap();
        for (a, b) in back.vertices().iter().zip(x.vertices().iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let zero = normalize(&x, &NormalizationStats::new(x.vertices().to_owned(), 1.0).unwrap()).unwrap();
        assert!(zero.vertices().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_rejects_bad_scale() {
        let t = topo(4);
        assert!(NormalizationStats::new(Array2::zeros((4, 3)), 0.0).is_err());
        assert!(NormalizationStats::new(Array2::zeros((4, 3)), f64::NAN).is_err());
        let mut bad = NormalizationStats::new(Array2::zeros((4, 3)), 1.0).unwrap();
        bad.mean[[0, 0]] = f64::INFINITY;
        assert!(normalize(&FaceMesh::zeros(t), &bad).is_err());
    }

    proptest! {
        #[test]
        fn avd_is_a_metric(seed in 0u64..10_000) {
            let t = topo(7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mesh(&mut rng, &t);
            let b = random_mesh(&mut rng, &t);
            let c = random_mesh(&mut rng, &t);
            let ab = average_vertex_distance(&a, &b).unwrap();
            let ba = average_vertex_distance(&b, &a).unwrap();
            let bc = average_vertex_distance(&b, &c).unwrap();
            let ac = average_vertex_distance(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-14);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn rigid_align_never_increases_avd_and_is_idempotent(seed in 0u64..10_000, deg in -180.0f64..180.0) {
            let t = topo(10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = random_mesh(&mut rng, &t);
            let noisy = target.vertices().mapv(|x| x + 0.05 * rng.random_range(-1.0..1.0));
            let moved = RigidTransform { rotation: rotation_z(deg), translation: Vector3::new(1.0, 2.0, 3.0) }
                .apply(noisy.view());
            let source = FaceMesh::new(moved, t).unwrap();
            let once = rigid_align(&source, &target).unwrap();
            let twice = rigid_align(&once, &target).unwrap();
            let before = average_vertex_distance(&source, &target).unwrap();
            let d1 = average_vertex_distance(&once, &target).unwrap();
            let d2 = average_vertex_distance(&twice, &target).unwrap();
            prop_assert!(d1 <= before + 1e-12);
            prop_assert!((d1 - d2).abs() < 1e-8);
        }
    }
}
