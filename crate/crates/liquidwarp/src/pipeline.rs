//! End-to-end pipeline chaining body posing, rasterization, flow
//! composition, warping and masking for the three tasks, writing every
//! product to an output directory together with a manifest.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::body::{skin, BodyModel, PoseParams};
use crate::error::{Error, Result};
use crate::flow::{imitation_flow, mask_decompose, novelview_flow, swap_flows, FlowBundle};
use crate::io::{
    chw_to_image, flow_to_tensors, image_to_chw, render_maps_tensors, save_png, tensor_write,
    ParamsFile, Tensor,
};
use crate::warp::compose_syn;

/// Task selector plus its task-specific inputs.
#[derive(Debug, Clone)]
pub enum PipelineMode {
    /// Imitate the reference pose, keeping each source's shape.
    Imitate { reference: ParamsFile },
    /// Re-render each source under a rigid novel view.
    View {
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    },
    /// Appearance transfer from a reference image onto the first source.
    Swap {
        reference: ParamsFile,
        reference_image: Array3<u8>,
    },
}

impl PipelineMode {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::Imitate { .. } => "imitate",
            PipelineMode::View { .. } => "view",
            PipelineMode::Swap { .. } => "swap",
        }
    }
}

/// Everything a pipeline run consumes.
pub struct PipelineInputs {
    pub model: BodyModel,
    /// Source parameter/image pairs; all images must share dimensions.
    pub sources: Vec<(ParamsFile, Array3<u8>)>,
    pub mode: PipelineMode,
    /// Silhouette dilation radius for fore/background masking.
    pub dilate_px: usize,
    /// Which source supplies the masked background (default 0).
    pub background_index: usize,
}

/// The exact list of files a run wrote, stored as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: String,
    pub files: Vec<String>,
}

struct Writer {
    out_dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        tensor_write(self.out_dir.join(name), t)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn png(&mut self, name: &str, img: &Array3<u8>) -> Result<()> {
        save_png(self.out_dir.join(name), img)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn maps(&mut self, prefix: &str, maps: &crate::raster::RenderMaps) -> Result<()> {
        for (suffix, t) in render_maps_tensors(maps) {
            self.tensor(&format!("{prefix}_{suffix}.lwt"), &t)?;
        }
        Ok(())
    }
}

fn image_dims(sources: &[(ParamsFile, Array3<u8>)]) -> Result<(usize, usize)> {
    let (h, w, _) = sources[0].1.dim();
    for (i, (_, img)) in sources.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch(format!(
                "source image {i} is {:?}, expected ({h}, {w}, 3)",
                img.dim()
            )));
        }
    }
    Ok((h, w))
}

/// Runs one task end to end; returns the manifest it also wrote to disk.
pub fn run_pipeline(inputs: &PipelineInputs, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if inputs.sources.is_empty() {
        return Err(Error::ShapeMismatch("pipeline needs at least one source".into()));
    }
    if inputs.background_index >= inputs.sources.len() {
        return Err(Error::ShapeMismatch(format!(
            "background index {} out of range for {} sources",
            inputs.background_index,
            inputs.sources.len()
        )));
    }
    let (h, w) = image_dims(&inputs.sources)?;
    let model = &inputs.model;
    let mut writer = Writer {
        out_dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };

    match &inputs.mode {
        PipelineMode::Imitate { reference } => {
            let ref_pose = PoseParams::from_flat(&reference.theta)?;
            let bundles: Vec<FlowBundle> = inputs
                .sources
                .iter()
                .map(|(params, _)| {
                    let (pose, shape, cam) = params.decode()?;
                    imitation_flow(model, (&pose, &shape, &cam), &ref_pose, h, w)
                })
                .collect::<Result<_>>()?;
            write_multi_source(&mut writer, inputs, &bundles)?;
        }
        PipelineMode::View {
            rotation,
            translation,
        } => {
            let bundles: Vec<FlowBundle> = inputs
                .sources
                .iter()
                .map(|(params, _)| {
                    let (pose, shape, cam) = params.decode()?;
                    novelview_flow(model, (&pose, &shape, &cam), rotation, *translation, h, w)
                })
                .collect::<Result<_>>()?;
            write_multi_source(&mut writer, inputs, &bundles)?;
        }
        PipelineMode::Swap {
            reference,
            reference_image,
        } => {
            if reference_image.dim() != (h, w, 3) {
                return Err(Error::ShapeMismatch(format!(
                    "reference image is {:?}, expected ({h}, {w}, 3)",
                    reference_image.dim()
                )));
            }
            let head = model.head_faces.clone().ok_or_else(|| {
                Error::Invariant("appearance transfer needs a head/body face partition".into())
            })?;
            let (src_params, src_image) = &inputs.sources[0];
            let (pose_s, shape_s, cam_s) = src_params.decode()?;
            let (pose_r, shape_r, cam_r) = reference.decode()?;
            let (t1, t2) = swap_flows(
                model,
                (&pose_s, &shape_s, &cam_s),
                (&pose_r, &shape_r, &cam_r),
                &head,
                h,
                w,
            )?;

            // correspondence maps of the full meshes: reference (flow source)
            // and source (target layout)
            let mesh_r = skin(model, &pose_r, &shape_r)?;
            let proj_r = crate::body::project(&mesh_r, &cam_r);
            let maps_r =
                crate::raster::rasterize(&crate::raster::face_tris(&proj_r, &model.faces)?, h, w);
            let mesh_s = skin(model, &pose_s, &shape_s)?;
            let proj_s = crate::body::project(&mesh_s, &cam_s);
            let maps_s =
                crate::raster::rasterize(&crate::raster::face_tris(&proj_s, &model.faces)?, h, w);
            writer.maps("c_s", &maps_r)?;
            writer.maps("c_t", &maps_s)?;

            for (name, tf) in [("t1", &t1), ("t2", &t2)] {
                let (f, m) = flow_to_tensors(tf);
                writer.tensor(&format!("{name}.lwt"), &f)?;
                writer.tensor(&format!("{name}_mask.lwt"), &m)?;
            }

            let srcs = vec![image_to_chw(src_image), image_to_chw(reference_image)];
            let (syn, _) = compose_syn(&srcs, &[t1, t2])?;
            writer.png("i_syn.png", &chw_to_image(&syn))?;

            let (fg, bg, mask) = mask_decompose(src_image, &maps_s, inputs.dilate_px)?;
            writer.png("fg.png", &fg)?;
            writer.png("bg.png", &bg)?;
            writer.tensor(
                "mask.lwt",
                &Tensor::U8(
                    vec![h as u32, w as u32],
                    mask.iter().map(|&v| u8::from(v)).collect(),
                ),
            )?;
        }
    }

    let manifest = Manifest {
        mode: inputs.mode.name().to_string(),
        files: writer.files,
    };
    let path = out_dir.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_multi_source(
    writer: &mut Writer,
    inputs: &PipelineInputs,
    bundles: &[FlowBundle],
) -> Result<()> {
    // target correspondence taken under the first source's camera
    writer.maps("c_t", &bundles[0].tgt_maps)?;
    for (i, bundle) in bundles.iter().enumerate() {
        writer.maps(&format!("c_s_{i}"), &bundle.src_maps[0])?;
        let (f, m) = flow_to_tensors(&bundle.flows[0]);
        writer.tensor(&format!("flow_{i}.lwt"), &f)?;
        writer.tensor(&format!("flow_{i}_mask.lwt"), &m)?;
    }
    let srcs: Vec<_> = inputs
        .sources
        .iter()
        .map(|(_, img)| image_to_chw(img))
        .collect();
    let flows: Vec<_> = bundles.iter().map(|b| b.flows[0].clone()).collect();
    let (syn, _) = compose_syn(&srcs, &flows)?;
    writer.png("i_syn.png", &chw_to_image(&syn))?;

    let bi = inputs.background_index;
    let (fg, bg, mask) = mask_decompose(
        &inputs.sources[bi].1,
        &bundles[bi].src_maps[0],
        inputs.dilate_px,
    )?;
    writer.png("fg.png", &fg)?;
    writer.png("bg.png", &bg)?;
    let (hh, ww) = (mask.nrows(), mask.ncols());
    writer.tensor(
        "mask.lwt",
        &Tensor::U8(
            vec![hh as u32, ww as u32],
            mask.iter().map(|&v| u8::from(v)).collect(),
        ),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{synth_default_camera, synth_model};
    use crate::io::load_png;

    fn synth_params(theta1_z: f64, beta: f64) -> ParamsFile {
        let cam = synth_default_camera();
        ParamsFile {
            theta: vec![0.0, 0.0, 0.0, 0.0, 0.0, theta1_z],
            beta: vec![beta],
            camera: [cam.scale, cam.tx, cam.ty],
        }
    }

    fn gradient_image(h: usize, w: usize) -> Array3<u8> {
        Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
            ((i * 255 / h + j * 191 / w + k * 37) % 256) as u8
        })
    }

    #[test]
    fn imitate_writes_manifest_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = PipelineInputs {
            model: synth_model(2),
            sources: vec![(synth_params(0.0, 0.0), gradient_image(32, 32))],
            mode: PipelineMode::Imitate {
                reference: synth_params(0.4, 0.0),
            },
            dilate_px: 0,
            background_index: 0,
        };
        let manifest = run_pipeline(&inputs, dir.path()).unwrap();
        assert_eq!(manifest.mode, "imitate");
        let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        on_disk.sort();
        let mut expected = manifest.files.clone();
        expected.push("manifest.json".to_string());
        expected.sort();
        assert_eq!(on_disk, expected);
    }

    #[test]
    fn swap_same_person_has_disjoint_flow_regions() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = PipelineInputs {
            model: synth_model(2),
            sources: vec![(synth_params(0.0, 0.0), gradient_image(48, 48))],
            mode: PipelineMode::Swap {
                reference: synth_params(0.0, 0.0),
                reference_image: gradient_image(48, 48),
            },
            dilate_px: 0,
            background_index: 0,
        };
        let manifest = run_pipeline(&inputs, dir.path()).unwrap();
        assert!(manifest.files.iter().any(|f| f == "t1.lwt"));
        assert!(manifest.files.iter().any(|f| f == "t2.lwt"));
        let t1m = crate::io::tensor_read(dir.path().join("t1_mask.lwt"))
            .unwrap()
            .into_u8()
            .unwrap()
            .1;
        let t2m = crate::io::tensor_read(dir.path().join("t2_mask.lwt"))
            .unwrap()
            .into_u8()
            .unwrap()
            .1;
        for (a, b) in t1m.iter().zip(t2m.iter()) {
            assert!(!(*a != 0 && *b != 0), "flow regions overlap");
        }
    }

    #[test]
    fn pipeline_is_byte_deterministic() {
        let run = |dir: &std::path::Path| {
            let inputs = PipelineInputs {
                model: synth_model(2),
                sources: vec![(synth_params(0.2, 0.0), gradient_image(32, 32))],
                mode: PipelineMode::View {
                    rotation: crate::body::rot_y(0.5),
                    translation: [0.0; 3],
                },
                dilate_px: 1,
                background_index: 0,
            };
            run_pipeline(&inputs, dir).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = run(d1.path());
        let m2 = run(d2.path());
        assert_eq!(m1.files, m2.files);
        for f in m1.files.iter().chain(std::iter::once(&"manifest.json".to_string())) {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between runs");
        }
    }

    #[test]
    fn imitate_identity_reproduces_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let params = synth_params(0.3, 0.0);
        let image = gradient_image(64, 64);
        let inputs = PipelineInputs {
            model: synth_model(2),
            sources: vec![(params.clone(), image.clone())],
            mode: PipelineMode::Imitate { reference: params },
            dilate_px: 0,
            background_index: 0,
        };
        run_pipeline(&inputs, dir.path()).unwrap();
        let syn = load_png(dir.path().join("i_syn.png")).unwrap();
        let fg = load_png(dir.path().join("fg.png")).unwrap();
        let mask = crate::io::tensor_read(dir.path().join("flow_0_mask.lwt"))
            .unwrap()
            .into_u8()
            .unwrap()
            .1;
        let mut valid = 0usize;
        let mut close = 0usize;
        for i in 0..64 {
            for j in 0..64 {
                if mask[i * 64 + j] == 0 {
                    continue;
                }
                valid += 1;
                let ok = (0..3).all(|k| {
                    (syn[[i, j, k]] as i32 - fg[[i, j, k]] as i32).abs() <= 1
                });
                if ok {
                    close += 1;
                }
            }
        }
        assert!(valid > 0);
        assert!(close as f64 >= 0.99 * valid as f64, "{close}/{valid}");
    }
}
