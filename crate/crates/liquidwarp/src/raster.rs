//! Deterministic z-buffered triangle rasterizer producing the correspondence
//! map, barycentric weight map, silhouette and depth buffer.
//!
//! Fill rule: pixel-center sampling with a top-left rule, so an edge shared
//! by two faces assigns each boundary pixel to exactly one of them. Equal
//! interpolated depths break ties toward the smaller face index. No
//! back-face culling, no anti-aliasing.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Per-face projected 2D triangles plus per-vertex depth.
#[derive(Debug, Clone)]
pub struct FaceTris {
    /// `N_f x 3 x 2` projected xy in normalized image coordinates.
    pub tris: Vec<[[f64; 2]; 3]>,
    /// `N_f x 3` camera depths.
    pub tri_depth: Vec<[f64; 3]>,
}

/// Rasterization output maps, all `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderMaps {
    /// Face index per pixel, -1 for background.
    pub corr: Array2<i32>,
    /// Barycentric weights of the covering face, `H x W x 3`.
    pub bary: Array3<f64>,
    pub silhouette: Array2<bool>,
    /// Interpolated depth, +inf at background.
    pub depth: Array2<f64>,
}

impl RenderMaps {
    pub fn height(&self) -> usize {
        self.corr.nrows()
    }

    pub fn width(&self) -> usize {
        self.corr.ncols()
    }
}

/// Center of pixel `(i, j)` in normalized image coordinates
/// (`(-1,-1)` = top-left image corner, y-down).
pub fn pixel_center(i: usize, j: usize, h: usize, w: usize) -> [f64; 2] {
    [
        (2 * j + 1) as f64 / w as f64 - 1.0,
        (2 * i + 1) as f64 / h as f64 - 1.0,
    ]
}

/// Normalized x coordinate to continuous pixel column (row works the same).
pub fn norm_to_pix(x: f64, extent: usize) -> f64 {
    (x + 1.0) * extent as f64 / 2.0 - 0.5
}

/// Gathers projected vertex xy and depth by face: `tris = projected[faces]`.
pub fn face_tris(projected: &Array2<f64>, faces: &[[usize; 3]]) -> Result<FaceTris> {
    let nv = projected.nrows();
    let mut tris = Vec::with_capacity(faces.len());
    let mut tri_depth = Vec::with_capacity(faces.len());
    for (f, tri) in faces.iter().enumerate() {
        let mut xy = [[0.0; 2]; 3];
        let mut z = [0.0; 3];
        for k in 0..3 {
            let v = tri[k];
            if v >= nv {
                return Err(Error::ShapeMismatch(format!(
                    "face {f} references vertex {v}, but only {nv} projected vertices given"
                )));
            }
            xy[k] = [projected[[v, 0]], projected[[v, 1]]];
            z[k] = projected[[v, 2]];
        }
        tris.push(xy);
        tri_depth.push(z);
    }
    Ok(FaceTris { tris, tri_depth })
}

fn cross(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Top-left classification for an oriented edge direction in y-down pixel
/// space, assuming the triangle interior lies on the positive edge-function
/// side.
fn is_top_left(dx: f64, dy: f64) -> bool {
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

struct PixTri {
    // vertices in continuous pixel coordinates
    v: [[f64; 2]; 3],
    z: [f64; 3],
    area2: f64,
}

impl PixTri {
    /// Barycentric coverage test with the top-left rule. Returns weights in
    /// the original vertex order when the pixel is covered.
    fn cover(&self, px: f64, py: f64) -> Option<[f64; 3]> {
        let [v0, v1, v2] = self.v;
        let sign = if self.area2 > 0.0 { 1.0 } else { -1.0 };
        // edge functions opposite each vertex
        let w = [
            cross(v2[0] - v1[0], v2[1] - v1[1], px - v1[0], py - v1[1]),
            cross(v0[0] - v2[0], v0[1] - v2[1], px - v2[0], py - v2[1]),
            cross(v1[0] - v0[0], v1[1] - v0[1], px - v0[0], py - v0[1]),
        ];
        let dirs = [
            [v2[0] - v1[0], v2[1] - v1[1]],
            [v0[0] - v2[0], v0[1] - v2[1]],
            [v1[0] - v0[0], v1[1] - v0[1]],
        ];
        for k in 0..3 {
            let oriented = w[k] * sign;
            if oriented < 0.0 {
                return None;
            }
            if oriented == 0.0 && !is_top_left(dirs[k][0] * sign, dirs[k][1] * sign) {
                return None;
            }
        }
        Some([w[0] / self.area2, w[1] / self.area2, w[2] / self.area2])
    }
}

/// Rasterizes the projected triangles into an `H x W` grid.
pub fn rasterize(ftris: &FaceTris, h: usize, w: usize) -> RenderMaps {
    assert!(h >= 1 && w >= 1, "render size must be at least 1x1");
    let nf = ftris.tris.len();

    // triangles in pixel space; degenerate ones dropped up front
    let mut pix: Vec<Option<PixTri>> = Vec::with_capacity(nf);
    let mut row_buckets: Vec<Vec<u32>> = vec![Vec::new(); h];
    for f in 0..nf {
        let t = &ftris.tris[f];
        let v = [
            [norm_to_pix(t[0][0], w), norm_to_pix(t[0][1], h)],
            [norm_to_pix(t[1][0], w), norm_to_pix(t[1][1], h)],
            [norm_to_pix(t[2][0], w), norm_to_pix(t[2][1], h)],
        ];
        let area2 = cross(v[1][0] - v[0][0], v[1][1] - v[0][1], v[2][0] - v[0][0], v[2][1] - v[0][1]);
        if area2 == 0.0 {
            pix.push(None);
            continue;
        }
        let y_min = v[0][1].min(v[1][1]).min(v[2][1]);
        let y_max = v[0][1].max(v[1][1]).max(v[2][1]);
        let i0 = y_min.ceil().max(0.0) as usize;
        let i1 = y_max.floor().min((h - 1) as f64);
        if i1 >= 0.0 && i0 < h {
            for i in i0..=(i1 as usize) {
                row_buckets[i].push(f as u32);
            }
        }
        pix.push(Some(PixTri {
            v,
            z: ftris.tri_depth[f],
            area2,
        }));
    }

    // per-row scan; faces visited in index order so equal depths keep the
    // smaller face, independent of the parallel schedule
    let rows: Vec<(Vec<i32>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let py = i as f64;
            let mut corr = vec![-1i32; w];
            let mut bary = vec![0.0f64; w * 3];
            let mut depth = vec![f64::INFINITY; w];
            for &fi in &row_buckets[i] {
                let tri = pix[fi as usize].as_ref().unwrap();
                let x_min = tri.v[0][0].min(tri.v[1][0]).min(tri.v[2][0]);
                let x_max = tri.v[0][0].max(tri.v[1][0]).max(tri.v[2][0]);
                let j0 = x_min.ceil().max(0.0) as usize;
                let j1 = x_max.floor().min((w - 1) as f64);
                if j1 < 0.0 || j0 >= w {
                    continue;
                }
                for j in j0..=(j1 as usize) {
                    if let Some(b) = tri.cover(j as f64, py) {
                        let z = b[0] * tri.z[0] + b[1] * tri.z[1] + b[2] * tri.z[2];
                        if z < depth[j] {
                            depth[j] = z;
                            corr[j] = fi as i32;
                            bary[j * 3] = b[0];
                            bary[j * 3 + 1] = b[1];
                            bary[j * 3 + 2] = b[2];
                        }
                    }
                }
            }
            (corr, bary, depth)
        })
        .collect();

    let mut corr = Array2::from_elem((h, w), -1i32);
    let mut bary = Array3::zeros((h, w, 3));
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);
    let mut silhouette = Array2::from_elem((h, w), false);
    for (i, (rc, rb, rd)) in rows.into_iter().enumerate() {
        for j in 0..w {
            corr[[i, j]] = rc[j];
            depth[[i, j]] = rd[j];
            silhouette[[i, j]] = rc[j] >= 0;
            for k in 0..3 {
                bary[[i, j, k]] = rb[j * 3 + k];
            }
        }
    }
    RenderMaps {
        corr,
        bary,
        silhouette,
        depth,
    }
}

/// Marks every face index that occurs in the correspondence map.
pub fn visibility(corr: &Array2<i32>, n_faces: usize) -> Vec<bool> {
    let mut vis = vec![false; n_faces];
    for &f in corr.iter() {
        if f >= 0 {
            vis[f as usize] = true;
        }
    }
    vis
}
