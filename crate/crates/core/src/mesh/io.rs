//! Wavefront-style ASCII meshes and the little-endian mesh-batch container.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use super::{FaceMesh, TopologyTemplate};
use crate::error::{Result, WsdfError};

pub const BATCH_MAGIC: &[u8; 8] = b"WSDFMB1\0";
pub const BATCH_MAGIC_F64: &[u8; 8] = b"WSDFMB2\0";

/// Vertices and 0-based faces parsed from an OBJ file.
#[derive(Debug, Clone)]
pub struct ObjData {
    pub vertices: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
}

pub fn read_obj(path: &Path) -> Result<ObjData> {
    let file = fs::File::open(path).map_err(|e| WsdfError::io(path, e))?;
    parse_obj(BufReader::new(file), path)
}

fn parse_obj(reader: impl BufRead, path: &Path) -> Result<ObjData> {
    let mut coords = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| WsdfError::io(path, e))?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| WsdfError::parse(path, format!("line {}: {e}", lineno + 1)))?;
                if xyz.len() != 3 {
                    return Err(WsdfError::parse(path, format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                coords.extend(xyz);
            }
            Some("f") => {
                // accepts "i", "i/t" and "i/t/n" references
                let idx: Vec<usize> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| WsdfError::parse(path, format!("line {}: {e}", lineno + 1)))?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(WsdfError::parse(path, format!("line {}: bad face", lineno + 1)));
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    let n = coords.len() / 3;
    let vertices = Array2::from_shape_vec((n, 3), coords).map_err(|e| WsdfError::parse(path, e.to_string()))?;
    Ok(ObjData { vertices, faces })
}

/// Reads an OBJ and validates its vertex count against `topology`.
pub fn read_obj_mesh(path: &Path, topology: &Arc<TopologyTemplate>) -> Result<FaceMesh> {
    let data = read_obj(path)?;
    if data.vertices.nrows() != topology.vertex_count() {
        return Err(WsdfError::Shape(format!(
            "{}: {} vertices, topology has {}",
            path.display(),
            data.vertices.nrows(),
            topology.vertex_count()
        )));
    }
    FaceMesh::new(data.vertices, topology.clone())
}

pub fn write_obj(path: &Path, mesh: &FaceMesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| WsdfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| WsdfError::io(path, e);
    for row in mesh.vertices().rows() {
        writeln!(w, "v {} {} {}", row[0], row[1], row[2]).map_err(io)?;
    }
    for f in mesh.topology().faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes meshes as `WSDFMB1\0`, u32 vertex count, u32 mesh count, then f32
/// coordinates in row-major order, all little-endian.
pub fn write_mesh_batch(path: &Path, meshes: &[FaceMesh]) -> Result<()> {
    write_batch(path, meshes, false)
}

/// Same layout with magic `WSDFMB2\0` and f64 coordinates.
pub fn write_mesh_batch_f64(path: &Path, meshes: &[FaceMesh]) -> Result<()> {
    write_batch(path, meshes, true)
}

fn write_batch(path: &Path, meshes: &[FaceMesh], wide: bool) -> Result<()> {
    let vertex_count = meshes.first().map_or(0, |m| m.vertex_count());
    if meshes.iter().any(|m| m.vertex_count() != vertex_count) {
        return Err(WsdfError::Shape("mesh batch mixes vertex counts".into()));
    }
    let width = if wide { 8 } else { 4 };
    let mut buf = Vec::with_capacity(16 + meshes.len() * vertex_count * 3 * width);
    buf.extend_from_slice(if wide { BATCH_MAGIC_F64 } else { BATCH_MAGIC });
    buf.extend_from_slice(&(vertex_count as u32).to_le_bytes());
    buf.extend_from_slice(&(meshes.len() as u32).to_le_bytes());
    for m in meshes {
        for &x in m.vertices().iter() {
            if wide {
                buf.extend_from_slice(&x.to_le_bytes());
            } else {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| WsdfError::io(path, e))
}

/// Reads either batch flavour.
pub fn read_mesh_batch(path: &Path, topology: &Arc<TopologyTemplate>) -> Result<Vec<FaceMesh>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| WsdfError::io(path, e))?;
    if bytes.len() < 16 {
        return Err(WsdfError::parse(path, "truncated mesh batch header"));
    }
    let width = match &bytes[..8] {
        m if m == BATCH_MAGIC => 4,
        m if m == BATCH_MAGIC_F64 => 8,
        _ => return Err(WsdfError::parse(path, "missing WSDFMB header")),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (vertex_count, count) = (u32_at(8), u32_at(12));
    if count == 0 && bytes.len() == 16 {
        return Ok(Vec::new());
    }
    if vertex_count != topology.vertex_count() {
        return Err(WsdfError::Shape(format!(
            "batch holds {vertex_count}-vertex meshes, topology has {}",
            topology.vertex_count()
        )));
    }
    let floats = vertex_count * 3;
    if bytes.len() != 16 + count * floats * width {
        return Err(WsdfError::parse(path, "payload length does not match header"));
    }
    bytes[16..]
        .chunks_exact(floats * width)
        .map(|chunk| {
            let data: Vec<f64> = chunk
                .chunks_exact(width)
                .map(|b| match width {
                    4 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                    _ => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                })
                .collect();
            FaceMesh::from_flat(&data, topology.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let topo = Arc::new(TopologyTemplate::grid(3, 3, 5).unwrap());
        let verts = Array2::from_shape_fn((9, 3), |(i, k)| i as f64 * 0.5 + k as f64 * 0.125);
        let mesh = FaceMesh::new(verts.clone(), topo.clone()).unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&path, &mesh).unwrap();
        let data = read_obj(&path).unwrap();
        assert_eq!(data.vertices, verts);
        assert_eq!(data.faces, topo.faces());
    }

    #[test]
    fn obj_parses_slashed_quads() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n";
        let d = parse_obj(text.as_bytes(), Path::new("q.obj")).unwrap();
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn batch_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let topo = Arc::new(TopologyTemplate::grid(2, 2, 4).unwrap());
        let a = FaceMesh::from_flat(&(0..12).map(|i| i as f64).collect::<Vec<_>>(), topo.clone()).unwrap();
        let path = dir.path().join("b.bin");
        write_mesh_batch(&path, &[a.clone(), a]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"WSDFMB1\0");
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 2 * 12 * 4);
        let back = read_mesh_batch(&path, &topo).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].vertex(3), [9.0, 10.0, 11.0]);
    }

    #[test]
    fn wide_batch_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let topo = Arc::new(TopologyTemplate::grid(2, 2, 4).unwrap());
        let a = FaceMesh::from_flat(&(0..12).map(|i| 0.1 * i as f64 + 1e-12).collect::<Vec<_>>(), topo.clone()).unwrap();
        let path = dir.path().join("b.bin");
        write_mesh_batch_f64(&path, std::slice::from_ref(&a)).unwrap();
        let back = read_mesh_batch(&path, &topo).unwrap();
        assert_eq!(back[0].vertices(), a.vertices());
        write_mesh_batch_f64(&path, &[]).unwrap();
        assert!(read_mesh_batch(&path, &topo).unwrap().is_empty());
    }
}
