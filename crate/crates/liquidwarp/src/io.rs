//! Bit-exact file formats: the `LWTF` tensor container, parameter JSON
//! files, PNG images, and layout conversions between them.
//!
//! Container layout, all little-endian: magic `LWTF`, version u32 = 1,
//! dtype u32 (0 = f32, 1 = u8, 2 = i32), rank u32, `rank` u32 dims,
//! then the row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::body::{CameraWP, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::flow::TransformFlow;
use crate::raster::RenderMaps;

const MAGIC: &[u8; 4] = b"LWTF";
const VERSION: u32 = 1;

/// A dense row-major tensor with one of the three supported dtypes.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Vec<u32>, Vec<f32>),
    U8(Vec<u32>, Vec<u8>),
    I32(Vec<u32>, Vec<i32>),
}

impl Tensor {
    pub fn dims(&self) -> &[u32] {
        match self {
            Tensor::F32(d, _) | Tensor::U8(d, _) | Tensor::I32(d, _) => d,
        }
    }

    fn dtype_code(&self) -> u32 {
        match self {
            Tensor::F32(..) => 0,
            Tensor::U8(..) => 1,
            Tensor::I32(..) => 2,
        }
    }

    pub fn into_f32(self) -> Result<(Vec<u32>, Vec<f32>)> {
        match self {
            Tensor::F32(d, v) => Ok((d, v)),
            other => Err(Error::TensorFormat(format!(
                "expected f32 tensor, found dtype {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<u32>, Vec<u8>)> {
        match self {
            Tensor::U8(d, v) => Ok((d, v)),
            other => Err(Error::TensorFormat(format!(
                "expected u8 tensor, found dtype {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<u32>, Vec<i32>)> {
        match self {
            Tensor::I32(d, v) => Ok((d, v)),
            other => Err(Error::TensorFormat(format!(
                "expected i32 tensor, found dtype {}",
                other.dtype_code()
            ))),
        }
    }

    fn len(&self) -> usize {
        match self {
            Tensor::F32(_, v) => v.len(),
            Tensor::U8(_, v) => v.len(),
            Tensor::I32(_, v) => v.len(),
        }
    }
}

/// Writes a tensor; the payload length must equal the dim product.
pub fn tensor_write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let expect: usize = tensor.dims().iter().map(|&d| d as usize).product();
    if expect != tensor.len() {
        return Err(Error::TensorFormat(format!(
            "payload has {} elements, dims {:?} imply {expect}",
            tensor.len(),
            tensor.dims()
        )));
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    file.write_all(&tensor.dtype_code().to_le_bytes()).map_err(io)?;
    file.write_all(&(tensor.dims().len() as u32).to_le_bytes())
        .map_err(io)?;
    for &d in tensor.dims() {
        file.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    match tensor {
        Tensor::F32(_, v) => {
            for x in v {
                file.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Tensor::U8(_, v) => file.write_all(v).map_err(io)?,
        Tensor::I32(_, v) => {
            for x in v {
                file.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    file.flush().map_err(io)
}

/// Reads a tensor, rejecting bad magic/version/dtype and truncation.
pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::TensorFormat(format!(
                "{}: truncated (needed {} bytes at offset {}, file has {})",
                path.display(),
                n,
                *pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    }
    let mut pos = 0usize;
    let mut take = |n: usize| take(&bytes, &mut pos, n, path);
    let magic = take(4)?;
    if magic != MAGIC {
        return Err(Error::TensorFormat(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(Error::TensorFormat(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dtype = u32_at(take(4)?);
    let rank = u32_at(take(4)?) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32_at(take(4)?));
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let tensor = match dtype {
        0 => {
            let payload = take(count * 4)?;
            Tensor::F32(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        1 => Tensor::U8(dims, take(count)?.to_vec()),
        2 => {
            let payload = take(count * 4)?;
            Tensor::I32(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        other => {
            return Err(Error::TensorFormat(format!(
                "{}: unknown dtype {other}",
                path.display()
            )))
        }
    };
    if pos != bytes.len() {
        return Err(Error::TensorFormat(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(tensor)
}

/// Per-image body parameters as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// `[s, tx, ty]`.
    pub camera: [f64; 3],
}

impl ParamsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self).expect("params"))
            .map_err(|e| Error::io(path, e))
    }

    pub fn decode(&self) -> Result<(PoseParams, ShapeParams, CameraWP)> {
        let pose = PoseParams::from_flat(&self.theta)?;
        let shape = ShapeParams {
            beta: self.beta.clone(),
        };
        let cam = CameraWP::new(self.camera[0], self.camera[1], self.camera[2])?;
        Ok((pose, shape, cam))
    }
}

/// Loads a PNG as `H x W x 3` u8.
pub fn load_png(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for k in 0..3 {
            out[[y as usize, x as usize, k]] = p.0[k];
        }
    }
    Ok(out)
}

/// Saves an `H x W x 3` u8 array as PNG.
pub fn save_png(path: impl AsRef<Path>, img: &Array3<u8>) -> Result<()> {
    let (h, w, c) = img.dim();
    assert_eq!(c, 3, "expected an H x W x 3 image");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([img[[i, j, 0]], img[[i, j, 1]], img[[i, j, 2]]]),
            );
        }
    }
    buf.save(path.as_ref())?;
    Ok(())
}

/// u8 `H x W x C` image to normalized f32 `C x H x W` features.
pub fn image_to_chw(img: &Array3<u8>) -> Array3<f32> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((c, h, w), |(k, i, j)| img[[i, j, k]] as f32 / 255.0)
}

/// Normalized f32 `C x H x W` back to u8 `H x W x C`, round half up.
pub fn chw_to_image(data: &Array3<f32>) -> Array3<u8> {
    let (c, h, w) = data.dim();
    Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let v = (data[[k, i, j]] as f64 * 255.0).clamp(0.0, 255.0);
        (v + 0.5).floor() as u8
    })
}

/// u8 `H x W x C` image to normalized f32 in the same layout (for metrics).
pub fn image_to_f32(img: &Array3<u8>) -> Array3<f32> {
    img.map(|&v| v as f32 / 255.0)
}

/// Flow to its two on-disk tensors: f32 `(H, W, 2)` and u8 mask `(H, W)`.
pub fn flow_to_tensors(tf: &TransformFlow) -> (Tensor, Tensor) {
    let (h, w) = (tf.height(), tf.width());
    let flow = Tensor::F32(
        vec![h as u32, w as u32, 2],
        tf.flow.iter().map(|&v| v as f32).collect(),
    );
    let mask = Tensor::U8(
        vec![h as u32, w as u32],
        tf.valid.iter().map(|&v| u8::from(v)).collect(),
    );
    (flow, mask)
}

/// Rebuilds a flow from its tensors, zeroing coordinates at invalid pixels.
pub fn flow_from_tensors(flow: Tensor, mask: Tensor) -> Result<TransformFlow> {
    let (fd, fv) = flow.into_f32()?;
    let (md, mv) = mask.into_u8()?;
    if fd.len() != 3 || fd[2] != 2 {
        return Err(Error::TensorFormat(format!(
            "flow tensor must be (H, W, 2), got {fd:?}"
        )));
    }
    if md.len() != 2 || md[0] != fd[0] || md[1] != fd[1] {
        return Err(Error::TensorFormat(format!(
            "mask dims {md:?} do not match flow dims {fd:?}"
        )));
    }
    let (h, w) = (fd[0] as usize, fd[1] as usize);
    let valid = Array2::from_shape_vec((h, w), mv.iter().map(|&v| v != 0).collect()).unwrap();
    let mut out = TransformFlow::invalid(h, w);
    for i in 0..h {
        for j in 0..w {
            if valid[[i, j]] {
                out.flow[[i, j, 0]] = fv[(i * w + j) * 2] as f64;
                out.flow[[i, j, 1]] = fv[(i * w + j) * 2 + 1] as f64;
                out.valid[[i, j]] = true;
            }
        }
    }
    Ok(out)
}

/// Render maps to their four on-disk tensors (corr, bary, silhouette, depth).
pub fn render_maps_tensors(maps: &RenderMaps) -> [(&'static str, Tensor); 4] {
    let (h, w) = (maps.height() as u32, maps.width() as u32);
    [
        (
            "corr",
            Tensor::I32(vec![h, w], maps.corr.iter().copied().collect()),
        ),
        (
            "bary",
            Tensor::F32(
                vec![h, w, 3],
                maps.bary.iter().map(|&v| v as f32).collect(),
            ),
        ),
        (
            "silhouette",
            Tensor::U8(
                vec![h, w],
                maps.silhouette.iter().map(|&v| u8::from(v)).collect(),
            ),
        ),
        (
            "depth",
            Tensor::F32(
                vec![h, w],
                maps.depth.iter().map(|&v| v as f32).collect(),
            ),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lwt");
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = Tensor::F32(vec![3, 4, 5], data.clone());
        tensor_write(&path, &t).unwrap();
        let back = tensor_read(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn u8_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lwt");
        let t = Tensor::U8(vec![4, 4], (0..16).collect());
        tensor_write(&path, &t).unwrap();
        assert_eq!(tensor_read(&path).unwrap(), t);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.lwt");
        let t = Tensor::I32(vec![10], (0..10).collect());
        tensor_write(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = tensor_read(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lwt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = tensor_read(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Array3::from_shape_fn((9, 7, 3), |(i, j, k)| (i * 23 + j * 11 + k * 5) as u8);
        save_png(&path, &img).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn u8_f32_conversion_roundtrip() {
        let img = Array3::from_shape_fn((5, 6, 3), |(i, j, k)| (i * 31 + j * 17 + k * 3) as u8);
        let chw = image_to_chw(&img);
        assert_eq!(chw_to_image(&chw), img);
    }

    #[test]
    fn params_roundtrip_and_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = ParamsFile {
            theta: vec![0.0; 6],
            beta: vec![0.5],
            camera: [1.2, 0.0, -0.5],
        };
        p.save(&path).unwrap();
        let q = ParamsFile::load(&path).unwrap();
        assert_eq!(q.theta, p.theta);
        let (pose, shape, cam) = q.decode().unwrap();
        assert_eq!(pose.theta.nrows(), 2);
        assert_eq!(shape.beta, vec![0.5]);
        assert_eq!(cam.scale, 1.2);
    }

    #[test]
    fn flow_tensor_roundtrip_enforces_invalid_zero() {
        let mut tf = crate::flow::identity_flow(4, 4);
        tf.valid[[1, 1]] = false;
        tf.flow[[1, 1, 0]] = 0.0;
        tf.flow[[1, 1, 1]] = 0.0;
        let (f, m) = flow_to_tensors(&tf);
        let back = flow_from_tensors(f, m).unwrap();
        assert_eq!(back.valid, tf.valid);
        for (a, b) in back.flow.iter().zip(tf.flow.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
