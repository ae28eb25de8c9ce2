//! Parametric articulated body: shape blendshapes, forward kinematics,
//! linear blend skinning, weak-perspective projection and rigid transforms.
//!
//! Conventions used everywhere downstream:
//! - image space is y-down, x-right, normalized to `[-1, 1]` with `(-1, -1)`
//!   at the top-left corner; pixel `(i, j)` has center
//!   `((2j+1)/W - 1, (2i+1)/H - 1)`;
//! - projection keeps camera-space Z as depth, smaller Z wins the depth test.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rest-pose template plus everything needed to pose it.
#[derive(Debug, Clone)]
pub struct BodyModel {
    /// `N_v x 3`, meters, rest pose.
    pub template_vertices: Array2<f64>,
    /// Triangle vertex indices, `N_f x 3`.
    pub faces: Vec<[usize; 3]>,
    /// Blendshape basis, `N_v x 3 x n_beta`.
    pub shape_dirs: Array3<f64>,
    /// `n_J x N_v`, joints = regressor · vertices.
    pub joint_regressor: Array2<f64>,
    /// Parent joint per joint; `None` for the root (joint 0).
    pub parents: Vec<Option<usize>>,
    /// `N_v x n_J`, rows non-negative and summing to 1.
    pub skin_weights: Array2<f64>,
    /// Optional head/body face partition shipped with the model.
    pub head_faces: Option<Vec<usize>>,
}

/// Axis-angle rotation per joint, radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    /// `n_J x 3`.
    pub theta: Array2<f64>,
}

/// Blendshape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

/// Weak-perspective camera: uniform scale and 2D translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraWP {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

/// A posed mesh; faces share the model topology.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// `N_v x 3`.
    pub vertices: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl PoseParams {
    pub fn zeros(n_joints: usize) -> Self {
        PoseParams {
            theta: Array2::zeros((n_joints, 3)),
        }
    }

    /// Builds from a flat `n_J * 3` vector (SMPL layout: 72 entries).
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 || flat.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "pose vector length {} is not a positive multiple of 3",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("pose contains non-finite values".into()));
        }
        let n = flat.len() / 3;
        Ok(PoseParams {
            theta: Array2::from_shape_vec((n, 3), flat.to_vec()).unwrap(),
        })
    }
}

impl ShapeParams {
    pub fn zeros(n_beta: usize) -> Self {
        ShapeParams {
            beta: vec![0.0; n_beta],
        }
    }
}

impl CameraWP {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) || !tx.is_finite() || !ty.is_finite() {
            return Err(Error::Invariant(format!(
                "camera scale must be finite and positive, got s={scale} tx={tx} ty={ty}"
            )));
        }
        Ok(CameraWP { scale, tx, ty })
    }
}

impl BodyModel {
    pub fn n_vertices(&self) -> usize {
        self.template_vertices.nrows()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_dirs.shape()[2]
    }

    /// Checks every structural invariant; returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        let nj = self.n_joints();
        if self.template_vertices.ncols() != 3 {
            return Err(Error::Invariant("template vertices must be N_v x 3".into()));
        }
        if self.template_vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite template vertex".into()));
        }
        for (f, tri) in self.faces.iter().enumerate() {
            for &vi in tri {
                if vi >= nv {
                    return Err(Error::Invariant(format!(
                        "face {f} references vertex {vi} but model has {nv} vertices"
                    )));
                }
            }
        }
        if self.shape_dirs.shape()[0] != nv || self.shape_dirs.shape()[1] != 3 {
            return Err(Error::Invariant("shape_dirs must be N_v x 3 x n_beta".into()));
        }
        if self.joint_regressor.shape() != [nj, nv] {
            return Err(Error::Invariant("joint_regressor must be n_J x N_v".into()));
        }
        if self.skin_weights.shape() != [nv, nj] {
            return Err(Error::Invariant("skin_weights must be N_v x n_J".into()));
        }
        for (v, row) in self.skin_weights.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::Invariant(format!(
                        "skin weight of vertex {v} is negative or non-finite"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!(
                    "skin weight row {v} sums to {sum}, expected 1"
                )));
            }
        }
        if self.parents.is_empty() || self.parents[0].is_some() {
            return Err(Error::Invariant("joint 0 must be the root".into()));
        }
        for j in 1..nj {
            // walk to the root to reject cycles and bad indices
            let mut cur = j;
            let mut hops = 0;
            loop {
                match self.parents[cur] {
                    None => break,
                    Some(p) => {
                        if p >= nj {
                            return Err(Error::Invariant(format!(
                                "joint {cur} has out-of-range parent {p}"
                            )));
                        }
                        cur = p;
                        hops += 1;
                        if hops > nj {
                            return Err(Error::Invariant(format!(
                                "kinematic tree has a cycle through joint {j}"
                            )));
                        }
                    }
                }
            }
        }
        if let Some(head) = &self.head_faces {
            let nf = self.n_faces();
            if head.iter().any(|&f| f >= nf) {
                return Err(Error::Invariant("head face index out of range".into()));
            }
        }
        Ok(())
    }
}

/// On-disk model layout: flat arrays, row-major.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    vertices: Vec<f64>,
    faces: Vec<u64>,
    shape_dirs: Vec<f64>,
    joint_regressor: Vec<f64>,
    parents: Vec<i64>,
    skin_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_faces: Option<Vec<usize>>,
    /// Reserved for pose-dependent corrective blendshapes; ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose_dirs: Option<Vec<f64>>,
}

/// Reads a model JSON file and validates all invariants.
pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: ModelFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    model_from_file(raw)
}

fn model_from_file(raw: ModelFile) -> Result<BodyModel> {
    if raw.vertices.len() % 3 != 0 || raw.vertices.is_empty() {
        return Err(Error::Parse("vertices length must be 3*N_v".into()));
    }
    let nv = raw.vertices.len() / 3;
    if raw.faces.len() % 3 != 0 {
        return Err(Error::Parse("faces length must be 3*N_f".into()));
    }
    let nj = raw.parents.len();
    if nj == 0 {
        return Err(Error::Parse("parents must be non-empty".into()));
    }
    if raw.joint_regressor.len() != nj * nv {
        return Err(Error::Parse(format!(
            "joint_regressor length {} != n_J*N_v = {}",
            raw.joint_regressor.len(),
            nj * nv
        )));
    }
    if raw.skin_weights.len() != nv * nj {
        return Err(Error::Parse(format!(
            "skin_weights length {} != N_v*n_J = {}",
            raw.skin_weights.len(),
            nv * nj
        )));
    }
    if raw.shape_dirs.len() % (3 * nv) != 0 {
        return Err(Error::Parse(format!(
            "shape_dirs length {} is not a multiple of 3*N_v",
            raw.shape_dirs.len()
        )));
    }
    let n_beta = raw.shape_dirs.len() / (3 * nv);
    let faces = raw
        .faces
        .chunks_exact(3)
        .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
        .collect();
    let parents = raw
        .parents
        .iter()
        .map(|&p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    let model = BodyModel {
        template_vertices: Array2::from_shape_vec((nv, 3), raw.vertices).unwrap(),
        faces,
        shape_dirs: Array3::from_shape_vec((nv, 3, n_beta), raw.shape_dirs).unwrap(),
        joint_regressor: Array2::from_shape_vec((nj, nv), raw.joint_regressor).unwrap(),
        parents,
        skin_weights: Array2::from_shape_vec((nv, nj), raw.skin_weights).unwrap(),
        head_faces: raw.head_faces,
    };
    model.validate()?;
    Ok(model)
}

/// Writes a model back out in the same JSON layout `load_model` reads.
pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = ModelFile {
        vertices: model.template_vertices.iter().copied().collect(),
        faces: model
            .faces
            .iter()
            .flat_map(|f| f.iter().map(|&v| v as u64))
            .collect(),
        shape_dirs: model.shape_dirs.iter().copied().collect(),
        joint_regressor: model.joint_regressor.iter().copied().collect(),
        parents: model
            .parents
            .iter()
            .map(|p| p.map(|v| v as i64).unwrap_or(-1))
            .collect(),
        skin_weights: model.skin_weights.iter().copied().collect(),
        head_faces: model.head_faces.clone(),
        pose_dirs: None,
    };
    let text = serde_json::to_string(&raw).expect("model serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Camera that frames the synthetic capsule comfortably inside `[-1, 1]`.
pub fn synth_default_camera() -> CameraWP {
    CameraWP {
        scale: 1.2,
        tx: 0.0,
        ty: -0.5,
    }
}

const RING_VERTS: usize = 8;
const CAPSULE_RADIUS: f64 = 0.15;

/// Deterministic two-joint capsule figure used as the test asset.
///
/// The mesh is a closed tube along +Y spanning `[0, 1]`: a bottom cap vertex
/// at the origin, a top cap vertex at `(0, 1, 0)`, and `2*n_segments + 1`
/// rings of 8 vertices. Joint 0 (root) sits at the origin, joint 1 at
/// `(0, 0.5, 0)`; vertices with rest `y < 0.5` are skinned rigidly to the
/// root, the rest to the child. One blendshape direction scales Y. Faces
/// whose vertices all have rest `y >= 0.75` form the shipped head partition.
pub fn synth_model(n_segments: usize) -> BodyModel {
    assert!(n_segments >= 1, "n_segments must be >= 1");
    let n_rings = 2 * n_segments + 1;
    let nv = 2 + n_rings * RING_VERTS;
    let mut verts = Array2::zeros((nv, 3));
    verts[[0, 1]] = 0.0; // bottom cap center
    verts[[1, 1]] = 1.0; // top cap center
    let ring = |k: usize, m: usize| 2 + k * RING_VERTS + m;
    for k in 0..n_rings {
        let y = k as f64 / (2 * n_segments) as f64;
        for m in 0..RING_VERTS {
            let a = 2.0 * std::f64::consts::PI * m as f64 / RING_VERTS as f64;
            let v = ring(k, m);
            verts[[v, 0]] = CAPSULE_RADIUS * a.cos();
            verts[[v, 1]] = y;
            verts[[v, 2]] = CAPSULE_RADIUS * a.sin();
        }
    }

    let mut faces = Vec::new();
    for m in 0..RING_VERTS {
        let m1 = (m + 1) % RING_VERTS;
        faces.push([0, ring(0, m), ring(0, m1)]);
    }
    for k in 0..n_rings - 1 {
        for m in 0..RING_VERTS {
            let m1 = (m + 1) % RING_VERTS;
            faces.push([ring(k, m), ring(k, m1), ring(k + 1, m1)]);
            faces.push([ring(k, m), ring(k + 1, m1), ring(k + 1, m)]);
        }
    }
    for m in 0..RING_VERTS {
        let m1 = (m + 1) % RING_VERTS;
        faces.push([1, ring(n_rings - 1, m), ring(n_rings - 1, m1)]);
    }

    // one blendshape: scale along Y
    let mut shape_dirs = Array3::zeros((nv, 3, 1));
    for v in 0..nv {
        shape_dirs[[v, 1, 0]] = verts[[v, 1]];
    }

    // root = bottom cap vertex, child = centroid of the mid ring
    let mut regressor = Array2::zeros((2, nv));
    regressor[[0, 0]] = 1.0;
    let mid = n_segments; // ring at y = 0.5
    for m in 0..RING_VERTS {
        regressor[[1, ring(mid, m)]] = 1.0 / RING_VERTS as f64;
    }

    let mut skin = Array2::zeros((nv, 2));
    for v in 0..nv {
        if verts[[v, 1]] < 0.5 {
            skin[[v, 0]] = 1.0;
        } else {
            skin[[v, 1]] = 1.0;
        }
    }

    let head_faces = faces
        .iter()
        .enumerate()
        .filter(|(_, tri)| tri.iter().all(|&v| verts[[v, 1]] >= 0.75 - 1e-12))
        .map(|(f, _)| f)
        .collect::<Vec<_>>();

    let model = BodyModel {
        template_vertices: verts,
        faces,
        shape_dirs,
        joint_regressor: regressor,
        parents: vec![None, Some(0)],
        skin_weights: skin,
        head_faces: Some(head_faces),
    };
    debug_assert!(model.validate().is_ok());
    model
}

/// Axis-angle to rotation matrix; identity below the small-angle threshold.
pub fn rodrigues(axis_angle: [f64; 3]) -> [[f64; 3]; 3] {
    let [x, y, z] = axis_angle;
    let angle = (x * x + y * y + z * z).sqrt();
    if angle < 1e-8 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let (kx, ky, kz) = (x / angle, y / angle, z / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + kx * kx * t, kx * ky * t - kz * s, kx * kz * t + ky * s],
        [ky * kx * t + kz * s, c + ky * ky * t, ky * kz * t - kx * s],
        [kz * kx * t - ky * s, kz * ky * t + kx * s, c + kz * kz * t],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_vec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Poses the model: shape blendshapes, forward kinematics through the
/// kinematic tree (Rodrigues per joint), then linear blend skinning.
/// Pose-dependent corrective blendshapes are not applied.
pub fn skin(model: &BodyModel, pose: &PoseParams, shape: &ShapeParams) -> Result<Mesh> {
    let nv = model.n_vertices();
    let nj = model.n_joints();
    if pose.theta.nrows() != nj {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, model has {nj}",
            pose.theta.nrows()
        )));
    }
    if shape.beta.len() != model.n_shape() {
        return Err(Error::ShapeMismatch(format!(
            "shape has {} coefficients, model has {}",
            shape.beta.len(),
            model.n_shape()
        )));
    }

    // shaped rest vertices
    let mut shaped = model.template_vertices.clone();
    for v in 0..nv {
        for axis in 0..3 {
            let mut acc = 0.0;
            for (b, &beta) in shape.beta.iter().enumerate() {
                acc += model.shape_dirs[[v, axis, b]] * beta;
            }
            shaped[[v, axis]] += acc;
        }
    }

    // rest joints from the regressor
    let mut joints = vec![[0.0f64; 3]; nj];
    for j in 0..nj {
        for v in 0..nv {
            let w = model.joint_regressor[[j, v]];
            if w != 0.0 {
                for axis in 0..3 {
                    joints[j][axis] += w * shaped[[v, axis]];
                }
            }
        }
    }

    // forward kinematics: global rotation + translation per joint
    let mut glob_r = vec![[[0.0f64; 3]; 3]; nj];
    let mut glob_t = vec![[0.0f64; 3]; nj];
    for j in 0..nj {
        let local = rodrigues([pose.theta[[j, 0]], pose.theta[[j, 1]], pose.theta[[j, 2]]]);
        match model.parents[j] {
            None => {
                glob_r[j] = local;
                glob_t[j] = joints[j];
            }
            Some(p) => {
                let offset = [
                    joints[j][0] - joints[p][0],
                    joints[j][1] - joints[p][1],
                    joints[j][2] - joints[p][2],
                ];
                glob_r[j] = mat_mul(&glob_r[p], &local);
                let moved = mat_vec(&glob_r[p], offset);
                glob_t[j] = [
                    glob_t[p][0] + moved[0],
                    glob_t[p][1] + moved[1],
                    glob_t[p][2] + moved[2],
                ];
            }
        }
    }
    // relative-to-rest transforms: x -> Rg x + (tg - Rg j_rest)
    let mut rel_t = vec![[0.0f64; 3]; nj];
    for j in 0..nj {
        let rj = mat_vec(&glob_r[j], joints[j]);
        rel_t[j] = [glob_t[j][0] - rj[0], glob_t[j][1] - rj[1], glob_t[j][2] - rj[2]];
    }

    let mut out = Array2::zeros((nv, 3));
    for v in 0..nv {
        let p = [shaped[[v, 0]], shaped[[v, 1]], shaped[[v, 2]]];
        let mut acc = [0.0f64; 3];
        for j in 0..nj {
            let w = model.skin_weights[[v, j]];
            if w != 0.0 {
                let moved = mat_vec(&glob_r[j], p);
                acc[0] += w * (moved[0] + rel_t[j][0]);
                acc[1] += w * (moved[1] + rel_t[j][1]);
                acc[2] += w * (moved[2] + rel_t[j][2]);
            }
        }
        for axis in 0..3 {
            out[[v, axis]] = acc[axis];
        }
    }

    Ok(Mesh {
        vertices: out,
        faces: model.faces.clone(),
    })
}

/// Weak-perspective projection: `x = s(X+tx)`, `y = s(Y+ty)` (y-down image),
/// Z passed through as depth. Output is `N_v x 3`.
pub fn project(mesh: &Mesh, cam: &CameraWP) -> Array2<f64> {
    let nv = mesh.vertices.nrows();
    let mut out = Array2::zeros((nv, 3));
    for v in 0..nv {
        out[[v, 0]] = cam.scale * (mesh.vertices[[v, 0]] + cam.tx);
        out[[v, 1]] = cam.scale * (mesh.vertices[[v, 1]] + cam.ty);
        out[[v, 2]] = mesh.vertices[[v, 2]];
    }
    out
}

/// Checks R is orthonormal with determinant +1 (tolerance 1e-6).
fn check_rotation(r: &[[f64; 3]; 3]) -> Result<()> {
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::Invariant(format!("R determinant {det} != 1")));
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > 1e-6 {
                return Err(Error::Invariant("R is not orthonormal".into()));
            }
        }
    }
    Ok(())
}

/// Rigid motion with row-vector convention: `v' = v·R + t`.
pub fn rigid_transform(mesh: &Mesh, r: &[[f64; 3]; 3], t: [f64; 3]) -> Result<Mesh> {
    check_rotation(r)?;
    let nv = mesh.vertices.nrows();
    let mut out = Array2::zeros((nv, 3));
    for v in 0..nv {
        let p = [mesh.vertices[[v, 0]], mesh.vertices[[v, 1]], mesh.vertices[[v, 2]]];
        for j in 0..3 {
            out[[v, j]] = p[0] * r[0][j] + p[1] * r[1][j] + p[2] * r[2][j] + t[j];
        }
    }
    Ok(Mesh {
        vertices: out,
        faces: mesh.faces.clone(),
    })
}

/// Rotation about Z by `angle` radians (row-vector convention).
pub fn rot_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about Y by `angle` radians (row-vector convention).
pub fn rot_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn synth_model_sizes_and_symmetry() {
        let m = synth_model(2);
        assert_eq!(m.n_vertices(), 42);
        assert_eq!(m.n_faces(), 2 * m.n_vertices() - 4);
        m.validate().unwrap();
        // symmetric about the Y axis: for every vertex, its x-negated twin exists
        for v in 0..m.n_vertices() {
            let (x, y, z) = (
                m.template_vertices[[v, 0]],
                m.template_vertices[[v, 1]],
                m.template_vertices[[v, 2]],
            );
            let found = (0..m.n_vertices()).any(|u| {
                (m.template_vertices[[u, 0]] + x).abs() < 1e-12
                    && (m.template_vertices[[u, 1]] - y).abs() < 1e-12
                    && (m.template_vertices[[u, 2]] - z).abs() < 1e-12
            });
            assert!(found, "no mirror twin for vertex {v}");
        }
    }

    #[test]
    fn synth_model_deterministic() {
        let a = synth_model(3);
        let b = synth_model(3);
        assert_eq!(a.template_vertices, b.template_vertices);
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.skin_weights, b.skin_weights);
    }

    #[test]
    fn synth_model_skin_rows_exact() {
        let m = synth_model(4);
        for row in m.skin_weights.rows() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn model_roundtrip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = synth_model(2);
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.n_vertices(), 42);
        assert_eq!(loaded.template_vertices, m.template_vertices);
        assert_eq!(loaded.faces, m.faces);
        assert_eq!(loaded.head_faces, m.head_faces);
    }

    #[test]
    fn load_rejects_bad_skin_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut m = synth_model(1);
        m.skin_weights[[0, 0]] = 0.9;
        m.skin_weights[[0, 1]] = 0.0;
        save_model(&m, &path).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)), "got {err:?}");
        assert!(err.to_string().contains("sums to"));
    }

    #[test]
    fn load_rejects_missing_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noparents.json");
        let m = synth_model(1);
        save_model(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("parents");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "got {err:?}");
    }

    #[test]
    fn skin_identity_pose_is_template() {
        let m = synth_model(2);
        let mesh = skin(&m, &PoseParams::zeros(2), &ShapeParams::zeros(1)).unwrap();
        assert_eq!(mesh.vertices, m.template_vertices);
    }

    #[test]
    fn skin_root_rotation_is_rigid() {
        let m = synth_model(2);
        let mut pose = PoseParams::zeros(2);
        pose.theta[[0, 2]] = 0.7; // rotation about Z at the root (origin)
        let mesh = skin(&m, &pose, &ShapeParams::zeros(1)).unwrap();
        let r = rodrigues([0.0, 0.0, 0.7]);
        for v in 0..m.n_vertices() {
            let p = [
                m.template_vertices[[v, 0]],
                m.template_vertices[[v, 1]],
                m.template_vertices[[v, 2]],
            ];
            let q = mat_vec(&r, p);
            for axis in 0..3 {
                assert_abs_diff_eq!(mesh.vertices[[v, axis]], q[axis], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn skin_child_rotation_moves_upper_half() {
        let m = synth_model(2);
        let mut pose = PoseParams::zeros(2);
        let half_pi = std::f64::consts::FRAC_PI_2;
        pose.theta[[1, 2]] = half_pi;
        let mesh = skin(&m, &pose, &ShapeParams::zeros(1)).unwrap();
        let r = rodrigues([0.0, 0.0, half_pi]);
        let joint = [0.0, 0.5, 0.0];
        for v in 0..m.n_vertices() {
            let p = [
                m.template_vertices[[v, 0]],
                m.template_vertices[[v, 1]],
                m.template_vertices[[v, 2]],
            ];
            let expect = if p[1] < 0.5 {
                p
            } else {
                // rotate about the child joint location
                let d = [p[0] - joint[0], p[1] - joint[1], p[2] - joint[2]];
                let q = mat_vec(&r, d);
                [q[0] + joint[0], q[1] + joint[1], q[2] + joint[2]]
            };
            for axis in 0..3 {
                assert_abs_diff_eq!(mesh.vertices[[v, axis]], expect[axis], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn skin_rejects_dimension_mismatch() {
        let m = synth_model(1);
        let err = skin(&m, &PoseParams::zeros(3), &ShapeParams::zeros(1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn project_identity_camera() {
        let mesh = Mesh {
            vertices: Array2::from_shape_vec((1, 3), vec![0.5, -0.5, 2.0]).unwrap(),
            faces: vec![],
        };
        let cam = CameraWP::new(1.0, 0.0, 0.0).unwrap();
        let p = project(&mesh, &cam);
        assert_eq!(p[[0, 0]], 0.5);
        assert_eq!(p[[0, 1]], -0.5);
        assert_eq!(p[[0, 2]], 2.0);
    }

    #[test]
    fn project_scale_and_shift() {
        let mesh = Mesh {
            vertices: Array2::from_shape_vec((1, 3), vec![0.2, 0.0, 1.0]).unwrap(),
            faces: vec![],
        };
        let cam = CameraWP::new(2.0, 0.1, 0.0).unwrap();
        let p = project(&mesh, &cam);
        assert_abs_diff_eq!(p[[0, 0]], 0.6, epsilon = 1e-15);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[0, 2]], 1.0);
    }

    #[test]
    fn default_camera_keeps_synth_on_screen() {
        let m = synth_model(2);
        let mesh = skin(&m, &PoseParams::zeros(2), &ShapeParams::zeros(1)).unwrap();
        let cam = synth_default_camera();
        let p = project(&mesh, &cam);
        for v in 0..m.n_vertices() {
            assert!(p[[v, 0]].abs() <= 1.0 && p[[v, 1]].abs() <= 1.0);
        }
    }

    #[test]
    fn rigid_identity_and_shift() {
        let m = synth_model(1);
        let mesh = Mesh {
            vertices: m.template_vertices.clone(),
            faces: m.faces.clone(),
        };
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let same = rigid_transform(&mesh, &eye, [0.0; 3]).unwrap();
        assert_eq!(same.vertices, mesh.vertices);
        let shifted = rigid_transform(&mesh, &eye, [0.0, 0.0, 1.0]).unwrap();
        for v in 0..mesh.vertices.nrows() {
            assert_eq!(shifted.vertices[[v, 2]], mesh.vertices[[v, 2]] + 1.0);
        }
    }

    #[test]
    fn rigid_rz_pi_twice_is_identity() {
        let m = synth_model(1);
        let mesh = Mesh {
            vertices: m.template_vertices.clone(),
            faces: m.faces.clone(),
        };
        let r = rot_z(std::f64::consts::PI);
        let once = rigid_transform(&mesh, &r, [0.0; 3]).unwrap();
        let twice = rigid_transform(&once, &r, [0.0; 3]).unwrap();
        for (a, b) in twice.vertices.iter().zip(mesh.vertices.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn rigid_rejects_non_rotation() {
        let m = synth_model(1);
        let mesh = Mesh {
            vertices: m.template_vertices.clone(),
            faces: m.faces.clone(),
        };
        let bad = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(rigid_transform(&mesh, &bad, [0.0; 3]).is_err());
    }

    #[test]
    fn skin_commutes_with_root_rotation() {
        // skinning then rotating about the root joint equals composing the
        // rotation into the root joint angle
        let m = synth_model(2);
        let mut pose = PoseParams::zeros(2);
        pose.theta[[1, 0]] = 0.4;
        let base = skin(&m, &pose, &ShapeParams::zeros(1)).unwrap();
        let angle = 0.9;
        let rotated = rigid_transform(&base, &rot_z(angle), [0.0; 3]).unwrap();

        let mut composed = pose.clone();
        composed.theta[[0, 2]] = angle; // root at the origin, column-vector Rz
        let direct = skin(&m, &composed, &ShapeParams::zeros(1)).unwrap();
        for (a, b) in rotated.vertices.iter().zip(direct.vertices.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }
}
