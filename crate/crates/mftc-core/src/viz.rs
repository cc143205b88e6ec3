//! Visualization: axial slice montages with label overlays (PNG) and
//! per-class surface meshes (OBJ text) extracted by marching cubes.
//!
//! The cube triangulation is derived once at startup instead of being
//! transcribed: for every one of the 256 corner configurations, the
//! marching-squares crossings on each cube face are linked into closed
//! loops and fan-triangulated, with crossing points at edge midpoints
//! (binary mask, iso level 0.5). Ambiguous faces (two diagonal corners
//! inside) always separate the inside corners, and the rule depends only
//! on corner states, so adjacent cubes agree on their shared face and the
//! extracted surface is watertight for every input mask.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub type Dims = (usize, usize, usize);

/// Fixed 8-color overlay palette; class c > 0 uses entry (c - 1) mod 8.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 60],   // red
    [60, 180, 75],   // green
    [70, 130, 240],  // blue
    [240, 200, 50],  // yellow
    [170, 90, 220],  // purple
    [70, 210, 210],  // cyan
    [245, 140, 40],  // orange
    [230, 100, 190], // magenta
];

pub const MONTAGE_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];
const OVERLAY_ALPHA: f64 = 0.5;

// ---------------------------------------------------------------------------
// Marching cubes: derived 256-entry triangle table.
// ---------------------------------------------------------------------------

/// Corner c sits at offset (z, y, x) = ((c>>2)&1, (c>>1)&1, c&1).
fn corner_pos(c: usize) -> [f64; 3] {
    [((c >> 2) & 1) as f64, ((c >> 1) & 1) as f64, (c & 1) as f64]
}

fn corner_offset(c: usize) -> (i64, i64, i64) {
    (((c >> 2) & 1) as i64, ((c >> 1) & 1) as i64, (c & 1) as i64)
}

/// The 12 cube edges as corner pairs, in a fixed enumeration order.
fn edge_list() -> [(usize, usize); 12] {
    let mut out = [(0usize, 0usize); 12];
    let mut n = 0;
    for a in 0..8usize {
        for b in (a + 1)..8 {
            if (a ^ b).count_ones() == 1 {
                out[n] = (a, b);
                n += 1;
            }
        }
    }
    debug_assert_eq!(n, 12);
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// One directed marching-squares segment: enters at edge `from`, leaves at
/// edge `to`, with `inside` a face corner on the inside of the surface.
struct FaceSegment {
    from: u8,
    to: u8,
    inside: usize,
}

/// Derives the triangle fan for one corner configuration.
fn triangulate_config(config: usize, edges: &[(usize, usize); 12]) -> Vec<[u8; 3]> {
    let inside = |c: usize| (config >> c) & 1 == 1;
    let edge_id = |a: usize, b: usize| -> u8 {
        edges
            .iter()
            .position(|&(x, y)| (x, y) == (a.min(b), a.max(b)))
            .expect("corner pair is a cube edge") as u8
    };
    let midpoint = |e: u8| -> [f64; 3] {
        let (a, b) = edges[e as usize];
        let (pa, pb) = (corner_pos(a), corner_pos(b));
        [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0]
    };

    let mut segments: Vec<FaceSegment> = Vec::new();
    // Faces: fixed axis (0 = z, 1 = y, 2 = x) at side 0 or 1; the other two
    // axes trace the corner cycle (0,0) -> (0,1) -> (1,1) -> (1,0).
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let bit = |ax: usize| 1usize << (2 - ax); // axis 0 -> bit 2 (z)
            let cyc: [usize; 4] = {
                let base = side * bit(axis);
                [
                    base,
                    base + bit(v),
                    base + bit(u) + bit(v),
                    base + bit(u),
                ]
            };
            let s = [inside(cyc[0]), inside(cyc[1]), inside(cyc[2]), inside(cyc[3])];
            let count = s.iter().filter(|&&b| b).count();
            // Face edge i joins cyc[i] and cyc[i+1].
            let fe = |i: usize| edge_id(cyc[i % 4], cyc[(i + 1) % 4]);
            let mut push = |enter: u8, leave: u8, inside_corner: usize| {
                segments.push(FaceSegment { from: enter, to: leave, inside: inside_corner });
            };
            match count {
                0 | 4 => {}
                1 | 3 => {
                    // One corner differs from the rest: its two adjacent
                    // face edges are crossed.
                    let k = (0..4)
                        .find(|&i| s[i] == (count == 1))
                        .expect("exactly one corner differs");
                    let inside_ref = if count == 1 { cyc[k] } else { cyc[(k + 1) % 4] };
                    push(fe(k + 3), fe(k), inside_ref);
                }
                2 => {
                    if s[0] == s[1] {
                        // Adjacent pair (0,1)/(2,3) or ambiguous? s[0]==s[1]
                        // means pairs {0,1} vs {2,3}: one segment.
                        let k = if s[0] { 0 } else { 2 }; // inside pair starts at k
                        push(fe(k + 3), fe(k + 1), cyc[k]);
                    } else if s[1] == s[2] {
                        // Pairs {1,2} vs {3,0}.
                        let k = if s[1] { 1 } else { 3 };
                        push(fe(k + 3), fe(k + 1), cyc[k]);
                    } else {
                        // Diagonal (ambiguous) face: cut off each inside
                        // corner separately, leaving the face center outside.
                        for k in 0..4 {
                            if s[k] {
                                push(fe(k + 3), fe(k), cyc[k]);
                            }
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // Orient every segment so the inside corner lies to its left when the
    // face is viewed from outside the cube (normal x tangent points inside).
    let mut next: [Option<u8>; 12] = [None; 12];
    for seg in &segments {
        let p = midpoint(seg.from);
        let q = midpoint(seg.to);
        let t = sub(q, p);
        // Face normal: recompute from the two midpoints and the inside
        // corner is overkill; the segment knows its face only through the
        // stored orientation test, so re-derive "left" directly: both
        // midpoints share the face's fixed axis coordinate (0 or 1).
        let mut n = [0.0; 3];
        for ax in 0..3 {
            if (p[ax] == 0.0 && q[ax] == 0.0) || (p[ax] == 1.0 && q[ax] == 1.0) {
                n[ax] = if p[ax] == 1.0 { 1.0 } else { -1.0 };
                break;
            }
        }
        let left = cross(n, t);
        let m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0];
        let to_inside = sub(corner_pos(seg.inside), m);
        let (from, to) = if dot(to_inside, left) >= 0.0 { (seg.from, seg.to) } else { (seg.to, seg.from) };
        debug_assert!(next[from as usize].is_none(), "config {config}: edge {from} has two exits");
        next[from as usize] = Some(to);
    }

    // Trace the directed loops and fan-triangulate each.
    let mut triangles = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12u8 {
        if visited[start as usize] || next[start as usize].is_none() {
            continue;
        }
        let mut ring = vec![start];
        visited[start as usize] = true;
        let mut cur = next[start as usize].expect("crossed edge has an exit");
        while cur != start {
            visited[cur as usize] = true;
            ring.push(cur);
            cur = next[cur as usize].expect("loops are closed");
        }
        debug_assert!(ring.len() >= 3, "config {config}: degenerate loop");
        for i in 1..ring.len() - 1 {
            // Reversed fan order: outward orientation under the (z, y, x)
            // coordinate convention (positive divergence-theorem volume).
            triangles.push([ring[0], ring[i + 1], ring[i]]);
        }
    }
    triangles
}

/// The 256-entry triangle table (triangles index cube edges).
pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<Box<[Vec<[u8; 3]>; 256]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let edges = edge_list();
        let table: Vec<Vec<[u8; 3]>> =
            (0..256).map(|c| triangulate_config(c, &edges)).collect();
        table.try_into().expect("256 entries")
    })
}

/// An indexed triangle mesh in physical coordinates (spacing applied),
/// stored as (z, y, x) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// orientation as produced by `marching_cubes`.
    pub fn signed_volume(&self) -> f64 {
        let mut six_v = 0.0;
        for f in &self.faces {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            six_v += dot(a, cross(b, c));
        }
        six_v / 6.0
    }

    pub fn area(&self) -> f64 {
        let mut area = 0.0;
        for f in &self.faces {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            let n = cross(sub(b, a), sub(c, a));
            area += dot(n, n).sqrt() / 2.0;
        }
        area
    }

    /// True when every directed edge is matched by its reverse exactly once
    /// (a closed, consistently oriented surface).
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(usize, usize), i64> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
                // Paired opposite directions cancel; a balanced closed mesh
                // drives every count to zero. Also track totals to reject
                // an edge used 0 or 4 times with canceling signs.
            }
        }
        let mut totals: HashMap<(usize, usize), u32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *totals.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts.values().all(|&c| c == 0) && totals.values().all(|&t| t == 2)
    }

    /// Wavefront OBJ text (vertices as x y z, 1-based face indices).
    pub fn to_obj(&self, name: &str) -> String {
        let mut out = String::with_capacity(32 * self.vertices.len());
        out.push_str(&format!("o {name}\n"));
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v[2], v[1], v[0]));
        }
        for f in &self.faces {
            out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        out
    }
}

/// Extracts the 0.5-isosurface of a binary mask. Crossing vertices sit at
/// cube-edge midpoints; the volume border is treated as outside, so the
/// mesh is always closed.
pub fn marching_cubes(mask: &[bool], dims: Dims, spacing: (f64, f64, f64)) -> Mesh {
    assert_eq!(mask.len(), dims.0 * dims.1 * dims.2, "mask length mismatch");
    let table = triangle_table();
    let edges = edge_list();
    let inside = |z: i64, y: i64, x: i64| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < dims.0
            && (y as usize) < dims.1
            && (x as usize) < dims.2
            && mask[(z as usize * dims.1 + y as usize) * dims.2 + x as usize]
    };
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let sp = [spacing.0, spacing.1, spacing.2];
    for z in -1..dims.0 as i64 {
        for y in -1..dims.1 as i64 {
            for x in -1..dims.2 as i64 {
                let mut config = 0usize;
                for c in 0..8 {
                    let (dz, dy, dx) = corner_offset(c);
                    if inside(z + dz, y + dy, x + dx) {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                for tri in &table[config] {
                    let mut ids = [0usize; 3];
                    for (i, &e) in tri.iter().enumerate() {
                        let (a, b) = edges[e as usize];
                        let (az, ay, ax) = corner_offset(a);
                        let (bz, by, bx) = corner_offset(b);
                        // Doubled coordinates keep the midpoint integral.
                        let key =
                            (2 * z + az + bz, 2 * y + ay + by, 2 * x + ax + bx);
                        let next_id = vertices.len();
                        let id = *index.entry(key).or_insert_with(|| {
                            vertices.push([
                                key.0 as f64 / 2.0 * sp[0],
                                key.1 as f64 / 2.0 * sp[1],
                                key.2 as f64 / 2.0 * sp[2],
                            ]);
                            next_id
                        });
                        ids[i] = id;
                    }
                    faces.push(ids);
                }
            }
        }
    }
    Mesh { vertices, faces }
}

/// Surface mesh of one label class; None when the class is absent.
pub fn class_mesh(l: &LabelVolume, class: u8) -> Option<Mesh> {
    let mask: Vec<bool> = l.labels.iter().map(|&v| v == class).collect();
    if !mask.iter().any(|&m| m) {
        return None;
    }
    Some(marching_cubes(&mask, l.shape, l.spacing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshExport {
    pub class: u8,
    /// None when the class was absent and the mesh was skipped.
    pub path: Option<PathBuf>,
    pub vertices: usize,
    pub faces: usize,
}

/// Writes `<prefix>_class{c}.obj` for every non-background class present;
/// absent classes are reported with `path: None`.
pub fn write_class_meshes(
    l: &LabelVolume,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<MeshExport>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut exports = Vec::new();
    for class in 1..l.num_classes {
        let class = class as u8;
        match class_mesh(l, class) {
            Some(mesh) => {
                let path = out_dir.join(format!("{prefix}_class{class}.obj"));
                let obj = mesh.to_obj(&format!("{prefix}_class{class}"));
                std::fs::write(&path, obj).map_err(|e| Error::io(&path, e))?;
                exports.push(MeshExport {
                    class,
                    path: Some(path),
                    vertices: mesh.vertices.len(),
                    faces: mesh.faces.len(),
                });
            }
            None => exports.push(MeshExport { class, path: None, vertices: 0, faces: 0 }),
        }
    }
    Ok(exports)
}

// ---------------------------------------------------------------------------
// Slice montage.
// ---------------------------------------------------------------------------

/// Axial slices at the given depth fractions, laid out left to right, with
/// the label overlay alpha-blended over the normalized grayscale image.
pub fn slice_montage(
    v: &Volume,
    labels: Option<&LabelVolume>,
    fractions: &[f64],
) -> Result<image::RgbImage> {
    if fractions.is_empty() {
        return Err(Error::Config("montage needs at least one slice fraction".into()));
    }
    if let Some(l) = labels {
        if l.shape != v.shape {
            return Err(Error::Shape(format!(
                "label shape {:?} != volume shape {:?}",
                l.shape, v.shape
            )));
        }
    }
    let (d, h, w) = v.shape;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = (hi - lo).max(f32::MIN_POSITIVE);
    let mut img = image::RgbImage::new((fractions.len() * w) as u32, h as u32);
    for (i, &f) in fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("slice fraction {f} outside [0,1]")));
        }
        let z = (((d - 1) as f64) * f).round() as usize;
        for y in 0..h {
            for x in 0..w {
                let g = ((v.at(z, y, x) - lo) / range * 255.0).round().clamp(0.0, 255.0) as f64;
                let mut px = [g, g, g];
                if let Some(l) = labels {
                    let c = l.at(z, y, x);
                    if c > 0 {
                        let col = PALETTE[(c as usize - 1) % PALETTE.len()];
                        for k in 0..3 {
                            px[k] = (1.0 - OVERLAY_ALPHA) * px[k] + OVERLAY_ALPHA * col[k] as f64;
                        }
                    }
                }
                img.put_pixel(
                    (i * w + x) as u32,
                    y as u32,
                    image::Rgb([px[0].round() as u8, px[1].round() as u8, px[2].round() as u8]),
                );
            }
        }
    }
    Ok(img)
}

/// Renders and saves a montage PNG at the standard fractions.
pub fn write_montage_png(
    v: &Volume,
    labels: Option<&LabelVolume>,
    fractions: &[f64],
    path: &Path,
) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some("png") {
        return Err(Error::Config(format!("montage path must end in .png: {}", path.display())));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let img = slice_montage(v, labels, fractions)?;
    img.save(path).map_err(|e| Error::Runtime(format!("PNG encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn mask_at(dims: Dims, voxels: &[(usize, usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; dims.0 * dims.1 * dims.2];
        for &(z, y, x) in voxels {
            m[(z * dims.1 + y) * dims.2 + x] = true;
        }
        m
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // `config` is the cube bit pattern, not just an index
    fn table_has_expected_structure() {
        let table = triangle_table();
        assert!(table[0].is_empty());
        assert!(table[255].is_empty());
        // A single inside corner yields one triangle through the three
        // adjacent edge midpoints.
        assert_eq!(table[1].len(), 1);
        // Every non-trivial config triangulates every crossed edge.
        let edges = edge_list();
        for config in 1..255usize {
            let crossed: Vec<usize> = (0..12)
                .filter(|&e| {
                    let (a, b) = edges[e];
                    ((config >> a) & 1) != ((config >> b) & 1)
                })
                .collect();
            let mut used: Vec<usize> = table[config]
                .iter()
                .flat_map(|t| t.iter().map(|&e| e as usize))
                .collect();
            used.sort();
            used.dedup();
            assert_eq!(used, crossed, "config {config} leaves crossings unused");
        }
    }

    #[test]
    fn single_voxel_is_a_closed_octahedron() {
        let dims = (3, 3, 3);
        let mesh = marching_cubes(&mask_at(dims, &[(1, 1, 1)]), dims, (1.0, 1.0, 1.0));
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.faces.len(), 8);
        assert!(mesh.is_closed());
        // Octahedron spanning +-0.5 along each axis: volume 4/3 * 0.5^3.
        assert!((mesh.signed_volume() - 1.0 / 6.0).abs() < 1e-12, "{}", mesh.signed_volume());
        // Eight equilateral triangles with side sqrt(1/2).
        assert!((mesh.area() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spacing_scales_physical_size() {
        let dims = (3, 3, 3);
        let mesh = marching_cubes(&mask_at(dims, &[(1, 1, 1)]), dims, (2.0, 1.0, 0.5));
        // Volume scales by the spacing product.
        assert!((mesh.signed_volume() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cuboid_area_close_to_analytic() {
        // A 14 x 18 x 22 voxel solid: analytic area of the equivalent box.
        let dims = (18, 22, 26);
        let mut vox = Vec::new();
        for z in 2..16 {
            for y in 2..20 {
                for x in 2..24 {
                    vox.push((z, y, x));
                }
            }
        }
        let mesh = marching_cubes(&mask_at(dims, &vox), dims, (1.0, 1.0, 1.0));
        assert!(mesh.is_closed());
        let (a, b, c) = (14.0, 18.0, 22.0);
        let analytic = 2.0 * (a * b + b * c + a * c);
        let rel = (mesh.area() - analytic).abs() / analytic;
        assert!(rel < 0.05, "area {} vs analytic {analytic} ({rel:.3} rel)", mesh.area());
        // Volume likewise approaches a*b*c from below (chamfered edges).
        assert!(mesh.signed_volume() > 0.9 * a * b * c);
        assert!(mesh.signed_volume() < a * b * c);
    }

    #[test]
    fn random_masks_always_mesh_closed_with_positive_volume() {
        // Includes the diagonal-neighbor cases that crack naive tables.
        let dims = (4, 4, 4);
        for seed in 0..25u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
            let mesh = marching_cubes(&mask, dims, (1.0, 1.0, 1.0));
            if mask.iter().any(|&m| m) {
                assert!(mesh.is_closed(), "seed {seed} open mesh");
                assert!(mesh.signed_volume() > 0.0, "seed {seed} volume");
            } else {
                assert!(mesh.is_empty());
            }
        }
        // The classic two-diagonal-voxel configuration, explicitly.
        let mesh =
            marching_cubes(&mask_at(dims, &[(1, 1, 1), (2, 2, 2)]), dims, (1.0, 1.0, 1.0));
        assert!(mesh.is_closed());
        assert!((mesh.signed_volume() - 2.0 / 6.0).abs() < 0.2);
    }

    #[test]
    fn class_meshes_skip_absent_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = vec![0u8; 5 * 5 * 5];
        labels[(2 * 5 + 2) * 5 + 2] = 2;
        let l = LabelVolume::new((5, 5, 5), (1.0, 1.0, 1.0), labels, 4).unwrap();
        assert!(class_mesh(&l, 1).is_none());
        assert!(class_mesh(&l, 2).is_some());
        let exports = write_class_meshes(&l, dir.path(), "case").unwrap();
        assert_eq!(exports.len(), 3);
        assert!(exports[0].path.is_none(), "absent class 1 must be skipped");
        assert!(exports[1].path.is_some());
        assert!(exports[2].path.is_none());
        let obj = std::fs::read_to_string(exports[1].path.as_ref().unwrap()).unwrap();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 6);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 8);
        // Deterministic output: regenerating gives identical text.
        let again = class_mesh(&l, 2).unwrap().to_obj("case_class2");
        assert_eq!(obj, again);
    }

    fn demo_volume() -> (Volume, LabelVolume) {
        let dims = (8, 6, 5);
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f32> = (0..n).map(|i| (i % 9) as f32).collect();
        let mut labels = vec![0u8; n];
        labels[(4 * 6 + 3) * 5 + 2] = 1;
        labels[(4 * 6 + 3) * 5 + 3] = 2;
        let v = Volume::new(dims, (1.0, 1.0, 1.0), data, "demo").unwrap();
        let l = LabelVolume::new(dims, (1.0, 1.0, 1.0), labels, 3).unwrap();
        (v, l)
    }

    #[test]
    fn montage_lays_slices_side_by_side() {
        let (v, l) = demo_volume();
        let img = slice_montage(&v, Some(&l), &MONTAGE_FRACTIONS).unwrap();
        assert_eq!(img.dimensions(), (3 * 5, 6));
        // Fraction 0.5 of depth 8 picks z = round(3.5) = 4, where labels
        // exist: the overlay must tint those pixels away from gray.
        let plain = slice_montage(&v, None, &MONTAGE_FRACTIONS).unwrap();
        let tinted = img.get_pixel(5 + 2, 3);
        let gray = plain.get_pixel(5 + 2, 3);
        assert_ne!(tinted, gray);
        assert_eq!(gray.0[0], gray.0[1]);
        // Pure background pixels are identical in both renders.
        assert_eq!(img.get_pixel(0, 0), plain.get_pixel(0, 0));
        // Grayscale normalization: data is (i % 9), so the global max 8
        // appears in fraction-0.25's slice (z = round(1.75) = 2) at flat
        // index 62 = (z 2, y 0, x 2), and the global min 0 right after it.
        assert_eq!(v.at(2, 0, 2), 8.0);
        assert_eq!(plain.get_pixel(2, 0).0[0], 255);
        assert_eq!(v.at(2, 0, 3), 0.0);
        assert_eq!(plain.get_pixel(3, 0).0[0], 0);
    }

    #[test]
    fn montage_png_bytes_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (v, l) = demo_volume();
        let p1 = dir.path().join("m1.png");
        let p2 = dir.path().join("m2.png");
        write_montage_png(&v, Some(&l), &MONTAGE_FRACTIONS, &p1).unwrap();
        write_montage_png(&v, Some(&l), &MONTAGE_FRACTIONS, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
        assert!(write_montage_png(&v, None, &MONTAGE_FRACTIONS, &dir.path().join("x.jpg")).is_err());
        assert!(slice_montage(&v, None, &[1.5]).is_err());
    }
}
