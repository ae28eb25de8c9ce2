//! Transformation-flow composition between correspondence renders and the
//! three task-specific flow builders (motion imitation, novel view
//! synthesis, appearance transfer), plus foreground/background masking.
//!
//! A flow maps each target pixel to the normalized source-image coordinate
//! to sample. Barycentric weights are read from the *target* rasterization
//! of a face and applied to the *source* projected triangle of the same
//! face, which carries each target pixel to the matching source surface
//! point.

use ndarray::{Array2, Array3};

use crate::body::{
    project, rigid_transform, skin, BodyModel, CameraWP, Mesh, PoseParams, ShapeParams,
};
use crate::error::{Error, Result};
use crate::raster::{face_tris, pixel_center, rasterize, visibility, FaceTris, RenderMaps};

/// Per-target-pixel normalized source coordinates plus a validity mask.
/// Invalid pixels carry exactly `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformFlow {
    /// `H x W x 2`.
    pub flow: Array3<f64>,
    pub valid: Array2<bool>,
}

impl TransformFlow {
    pub fn height(&self) -> usize {
        self.valid.nrows()
    }

    pub fn width(&self) -> usize {
        self.valid.ncols()
    }

    pub fn invalid(h: usize, w: usize) -> Self {
        TransformFlow {
            flow: Array3::zeros((h, w, 2)),
            valid: Array2::from_elem((h, w), false),
        }
    }
}

/// Renders and flows for one task instance.
#[derive(Debug, Clone)]
pub struct FlowBundle {
    pub src_maps: Vec<RenderMaps>,
    pub tgt_maps: RenderMaps,
    /// One flow per source.
    pub flows: Vec<TransformFlow>,
}

/// Flow whose every pixel is valid and samples its own center.
pub fn identity_flow(h: usize, w: usize) -> TransformFlow {
    let mut flow = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let c = pixel_center(i, j, h, w);
            flow[[i, j, 0]] = c[0];
            flow[[i, j, 1]] = c[1];
        }
    }
    TransformFlow {
        flow,
        valid: Array2::from_elem((h, w), true),
    }
}

/// Composes the target-to-source flow given an explicit source-face
/// visibility mask.
pub fn compose_flow_masked(
    src_vis: &[bool],
    src_tris: &FaceTris,
    tgt_maps: &RenderMaps,
) -> Result<TransformFlow> {
    if src_vis.len() != src_tris.tris.len() {
        return Err(Error::ShapeMismatch(format!(
            "visibility has {} faces, triangles {}",
            src_vis.len(),
            src_tris.tris.len()
        )));
    }
    let h = tgt_maps.height();
    let w = tgt_maps.width();
    let mut out = TransformFlow::invalid(h, w);
    for i in 0..h {
        for j in 0..w {
            let f = tgt_maps.corr[[i, j]];
            if f < 0 {
                continue;
            }
            let f = f as usize;
            if f >= src_tris.tris.len() {
                return Err(Error::ShapeMismatch(format!(
                    "target correspondence references face {f}, source has {}",
                    src_tris.tris.len()
                )));
            }
            if !src_vis[f] {
                continue;
            }
            let tri = &src_tris.tris[f];
            let mut x = 0.0;
            let mut y = 0.0;
            for k in 0..3 {
                let b = tgt_maps.bary[[i, j, k]];
                x += b * tri[k][0];
                y += b * tri[k][1];
            }
            out.flow[[i, j, 0]] = x;
            out.flow[[i, j, 1]] = y;
            out.valid[[i, j]] = true;
        }
    }
    Ok(out)
}

/// Target-to-source flow: for each target pixel covered by face `f`, if `f`
/// is visible in the source render, combine the target barycentric weights
/// with the source projected triangle of `f`.
pub fn compose_flow(
    src_maps: &RenderMaps,
    src_tris: &FaceTris,
    tgt_maps: &RenderMaps,
) -> Result<TransformFlow> {
    if (src_maps.height(), src_maps.width()) != (tgt_maps.height(), tgt_maps.width()) {
        return Err(Error::ShapeMismatch(format!(
            "source render is {}x{}, target {}x{}",
            src_maps.height(),
            src_maps.width(),
            tgt_maps.height(),
            tgt_maps.width()
        )));
    }
    let vis = visibility(&src_maps.corr, src_tris.tris.len());
    compose_flow_masked(&vis, src_tris, tgt_maps)
}

fn render(mesh: &Mesh, cam: &CameraWP, h: usize, w: usize) -> Result<(FaceTris, RenderMaps)> {
    let proj = project(mesh, cam);
    let ft = face_tris(&proj, &mesh.faces)?;
    let maps = rasterize(&ft, h, w);
    Ok((ft, maps))
}

/// Motion imitation: the target takes the reference pose but keeps the
/// source shape, and both renders share the source camera.
pub fn imitation_flow(
    model: &BodyModel,
    src: (&PoseParams, &ShapeParams, &CameraWP),
    ref_pose: &PoseParams,
    h: usize,
    w: usize,
) -> Result<FlowBundle> {
    let (pose_s, shape_s, cam_s) = src;
    let mesh_s = skin(model, pose_s, shape_s)?;
    let mesh_t = skin(model, ref_pose, shape_s)?;
    let (ft_s, maps_s) = render(&mesh_s, cam_s, h, w)?;
    let (_, maps_t) = render(&mesh_t, cam_s, h, w)?;
    let flow = compose_flow(&maps_s, &ft_s, &maps_t)?;
    Ok(FlowBundle {
        src_maps: vec![maps_s],
        tgt_maps: maps_t,
        flows: vec![flow],
    })
}

/// Novel view synthesis: the target mesh is the rigidly moved source mesh,
/// rendered under the same camera.
pub fn novelview_flow(
    model: &BodyModel,
    src: (&PoseParams, &ShapeParams, &CameraWP),
    r: &[[f64; 3]; 3],
    t: [f64; 3],
    h: usize,
    w: usize,
) -> Result<FlowBundle> {
    let (pose_s, shape_s, cam_s) = src;
    let mesh_s = skin(model, pose_s, shape_s)?;
    let mesh_t = rigid_transform(&mesh_s, r, t)?;
    let (ft_s, maps_s) = render(&mesh_s, cam_s, h, w)?;
    let (_, maps_t) = render(&mesh_t, cam_s, h, w)?;
    let flow = compose_flow(&maps_s, &ft_s, &maps_t)?;
    Ok(FlowBundle {
        src_maps: vec![maps_s],
        tgt_maps: maps_t,
        flows: vec![flow],
    })
}

fn submesh(mesh: &Mesh, face_subset: &[usize]) -> Mesh {
    Mesh {
        vertices: mesh.vertices.clone(),
        faces: face_subset.iter().map(|&f| mesh.faces[f]).collect(),
    }
}

/// Appearance transfer: the output keeps the source layout. `T1` samples the
/// source image identically on the source head silhouette; `T2` carries
/// source body pixels to the reference image via the shared body submesh.
pub fn swap_flows(
    model: &BodyModel,
    src: (&PoseParams, &ShapeParams, &CameraWP),
    reference: (&PoseParams, &ShapeParams, &CameraWP),
    head_faces: &[usize],
    h: usize,
    w: usize,
) -> Result<(TransformFlow, TransformFlow)> {
    if head_faces.is_empty() {
        return Err(Error::Invariant("head face set is empty".into()));
    }
    let nf = model.n_faces();
    if head_faces.iter().any(|&f| f >= nf) {
        return Err(Error::Invariant("head face index out of range".into()));
    }
    let head_set: std::collections::HashSet<usize> = head_faces.iter().copied().collect();
    let body_faces: Vec<usize> = (0..nf).filter(|f| !head_set.contains(f)).collect();

    let (pose_s, shape_s, cam_s) = src;
    let (pose_r, shape_r, cam_r) = reference;
    let mesh_s = skin(model, pose_s, shape_s)?;
    let mesh_r = skin(model, pose_r, shape_r)?;

    // T1: identity grid masked by the source head silhouette
    let head_mesh = submesh(&mesh_s, head_faces);
    let (_, head_maps) = render(&head_mesh, cam_s, h, w)?;
    let mut t1 = TransformFlow::invalid(h, w);
    for i in 0..h {
        for j in 0..w {
            if head_maps.silhouette[[i, j]] {
                let c = pixel_center(i, j, h, w);
                t1.flow[[i, j, 0]] = c[0];
                t1.flow[[i, j, 1]] = c[1];
                t1.valid[[i, j]] = true;
            }
        }
    }

    // T2: body pixels of the source render sample the reference image
    let src_body = submesh(&mesh_s, &body_faces);
    let ref_body = submesh(&mesh_r, &body_faces);
    let (ref_ft, ref_maps) = render(&ref_body, cam_r, h, w)?;
    let (_, src_body_maps) = render(&src_body, cam_s, h, w)?;
    let t2 = compose_flow(&ref_maps, &ref_ft, &src_body_maps)?;
    Ok((t1, t2))
}

/// Square dilation of a boolean mask by radius `d` (separable passes).
fn dilate(mask: &Array2<bool>, d: usize) -> Array2<bool> {
    if d == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(d);
            let hi = (j + d).min(w - 1);
            rows[[i, j]] = (lo..=hi).any(|jj| mask[[i, jj]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let lo = i.saturating_sub(d);
            let hi = (i + d).min(h - 1);
            out[[i, j]] = (lo..=hi).any(|ii| rows[[ii, j]]);
        }
    }
    out
}

/// Splits an image into masked foreground and background using the render
/// silhouette dilated by `dilate_px`. Pixels outside each region are zeroed.
pub fn mask_decompose(
    image: &Array3<u8>,
    src_maps: &RenderMaps,
    dilate_px: usize,
) -> Result<(Array3<u8>, Array3<u8>, Array2<bool>)> {
    let (h, w, c) = image.dim();
    if (h, w) != (src_maps.height(), src_maps.width()) {
        return Err(Error::ShapeMismatch(format!(
            "image is {h}x{w}, render maps {}x{}",
            src_maps.height(),
            src_maps.width()
        )));
    }
    let mask = dilate(&src_maps.silhouette, dilate_px);
    let mut fg = Array3::zeros((h, w, c));
    let mut bg = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                if mask[[i, j]] {
                    fg[[i, j, k]] = image[[i, j, k]];
                } else {
                    bg[[i, j, k]] = image[[i, j, k]];
                }
            }
        }
    }
    Ok((fg, bg, mask))
}
