use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};

use liquidwarp::body::{rot_y, synth_model, PoseParams};
use liquidwarp::error::{Error, Result};
use liquidwarp::flow::{imitation_flow, novelview_flow, swap_flows, TransformFlow};
use liquidwarp::fusion::{lwb_apply, FusionParams, LwbKind};
use liquidwarp::io::{
    chw_to_image, flow_from_tensors, flow_to_tensors, image_to_chw, image_to_f32, load_png,
    render_maps_tensors, save_png, tensor_read, tensor_write, ParamsFile, Tensor,
};
use liquidwarp::metrics::{attention_reg, pixel_l1, psnr, ssim, AttentionMap, LossWeights};
use liquidwarp::pipeline::{run_pipeline, PipelineInputs, PipelineMode};
use liquidwarp::warp::{bilinear_sample, compose_syn, FeatureMap};
use liquidwarp::{load_model, save_model, BodyModel};

/// Geometry-driven human image synthesis toolkit.
#[derive(Parser)]
#[command(name = "liquidwarp", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SizeArgs {
    /// Output height in pixels.
    #[arg(long)]
    height: usize,
    /// Output width in pixels.
    #[arg(long)]
    width: usize,
}

#[derive(Args)]
struct ViewArgs {
    /// Rotation about the y axis, radians.
    #[arg(long, default_value_t = 0.0)]
    rot_y: f64,
    /// Translation added after rotation.
    #[arg(long, default_value_t = 0.0)]
    tx: f64,
    #[arg(long, default_value_t = 0.0)]
    ty: f64,
    #[arg(long, default_value_t = 0.0)]
    tz: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic capsule body model as a model JSON file.
    Genmodel {
        /// Subdivision count; vertex count grows with it.
        #[arg(long, default_value_t = 2)]
        segments: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize a posed model into correspondence/barycentric/depth maps.
    Rasterize {
        #[arg(long)]
        model: PathBuf,
        /// Pose/shape/camera parameter JSON.
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        size: SizeArgs,
        /// Tensors are written as <prefix>_corr.lwt, _bary.lwt,
        /// _silhouette.lwt, _depth.lwt.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Build a transformation flow for one of the three tasks.
    Flow {
        #[arg(long)]
        model: PathBuf,
        /// Source parameter JSON.
        #[arg(long)]
        src: PathBuf,
        /// Task: imitate, view or swap.
        #[arg(long)]
        task: String,
        /// Reference parameter JSON (imitate, swap).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        size: SizeArgs,
        /// imitate/view write <prefix>.lwt + <prefix>_mask.lwt; swap writes
        /// <prefix>_t1.lwt, <prefix>_t1_mask.lwt, <prefix>_t2.lwt,
        /// <prefix>_t2_mask.lwt.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Warp an image under a flow with bilinear sampling.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp several images and average them where their flows are valid.
    Compose {
        /// Repeatable; pairs up with --flow/--mask by position.
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long, required = true)]
        flow: Vec<PathBuf>,
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-pixel valid-source count tensor.
        #[arg(long)]
        count_out: Option<PathBuf>,
    },
    /// Apply a liquid-warping block to feature-map tensors.
    Fuse {
        /// add, mean, gate_add, gate_mean or attention.
        #[arg(long)]
        block: String,
        /// Target-stream features, f32 tensor of shape (C, H, W).
        #[arg(long)]
        xt: PathBuf,
        /// Source features, one tensor per source.
        #[arg(long, required = true)]
        xs: Vec<PathBuf>,
        #[arg(long, required = true)]
        flow: Vec<PathBuf>,
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        /// Directory of saved fusion parameters; omitted means seeded init.
        #[arg(long)]
        params_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print psnr= and ssim= for two PNGs.
    Metrics { a: PathBuf, b: PathBuf },
    /// Print pixel/regularization losses from tensor files.
    Losses {
        /// Predicted image, f32 tensor (H, W, C).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth image, f32 tensor (H, W, C).
        #[arg(long)]
        target: PathBuf,
        /// Attention maps, f32 tensors (H, W); pairs with --silhouette.
        #[arg(long)]
        attention: Vec<PathBuf>,
        /// Silhouettes, u8 tensors (H, W).
        #[arg(long)]
        silhouette: Vec<PathBuf>,
    },
    /// Run a full task end to end into an output directory.
    Pipeline {
        #[arg(long)]
        model: PathBuf,
        /// imitate, view or swap.
        #[arg(long)]
        task: String,
        /// Source parameter JSON files; pairs with --image by position.
        #[arg(long, required = true)]
        src: Vec<PathBuf>,
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        reference_image: Option<PathBuf>,
        #[command(flatten)]
        view: ViewArgs,
        /// Silhouette dilation radius for the background mask.
        #[arg(long, default_value_t = 0)]
        dilate: usize,
        /// Which source supplies the background.
        #[arg(long, default_value_t = 0)]
        background_index: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("LWF_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                // 0 means auto; leave rayon to its default
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn read_feature(path: &Path) -> Result<FeatureMap> {
    let (dims, data) = tensor_read(path)?.into_f32()?;
    if dims.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a rank-3 feature tensor, got rank {}",
            dims.len()
        )));
    }
    let shape = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    Array3::from_shape_vec(shape, data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn read_flow(flow: &Path, mask: &Path) -> Result<TransformFlow> {
    flow_from_tensors(tensor_read(flow)?, tensor_read(mask)?)
}

fn read_flows(flows: &[PathBuf], masks: &[PathBuf]) -> Result<Vec<TransformFlow>> {
    if flows.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} flows but {} masks",
            flows.len(),
            masks.len()
        )));
    }
    flows
        .iter()
        .zip(masks)
        .map(|(f, m)| read_flow(f, m))
        .collect()
}

fn feature_tensor(fm: &FeatureMap) -> Tensor {
    let (c, h, w) = fm.dim();
    Tensor::F32(
        vec![c as u32, h as u32, w as u32],
        fm.iter().copied().collect(),
    )
}

fn write_flow(prefix: &Path, suffix: &str, tf: &TransformFlow) -> Result<()> {
    let (f, m) = flow_to_tensors(tf);
    tensor_write(with_suffix(prefix, &format!("{suffix}.lwt")), &f)?;
    tensor_write(with_suffix(prefix, &format!("{suffix}_mask.lwt")), &m)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_owned()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn load_model_checked(path: &Path) -> Result<BodyModel> {
    let model = load_model(path)?;
    model.validate()?;
    Ok(model)
}

fn array2_f32(path: &Path) -> Result<Array2<f32>> {
    let (dims, data) = tensor_read(path)?.into_f32()?;
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a rank-2 tensor, got rank {}",
            dims.len()
        )));
    }
    Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn hwc_f32(path: &Path) -> Result<Array3<f32>> {
    let (dims, data) = tensor_read(path)?.into_f32()?;
    if dims.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a rank-3 tensor, got rank {}",
            dims.len()
        )));
    }
    Array3::from_shape_vec(
        (dims[0] as usize, dims[1] as usize, dims[2] as usize),
        data,
    )
    .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Genmodel { segments, out } => {
            let model = synth_model(segments);
            save_model(&model, out)?;
        }
        Cmd::Rasterize {
            model,
            params,
            size,
            out_prefix,
        } => {
            let model = load_model_checked(&model)?;
            let (pose, shape, cam) = ParamsFile::load(params)?.decode()?;
            let mesh = liquidwarp::skin(&model, &pose, &shape)?;
            let projected = liquidwarp::project(&mesh, &cam);
            let ftris = liquidwarp::face_tris(&projected, &model.faces)?;
            let maps = liquidwarp::rasterize(&ftris, size.height, size.width);
            for (suffix, t) in render_maps_tensors(&maps) {
                tensor_write(with_suffix(&out_prefix, &format!("_{suffix}.lwt")), &t)?;
            }
        }
        Cmd::Flow {
            model,
            src,
            task,
            reference,
            view,
            size,
            out_prefix,
        } => {
            let model = load_model_checked(&model)?;
            let (pose, shape, cam) = ParamsFile::load(src)?.decode()?;
            let (h, w) = (size.height, size.width);
            match task.as_str() {
                "imitate" => {
                    let reference = reference.ok_or_else(|| {
                        Error::Parse("imitate needs --reference".into())
                    })?;
                    let ref_params = ParamsFile::load(reference)?;
                    let ref_pose = PoseParams::from_flat(&ref_params.theta)?;
                    let bundle =
                        imitation_flow(&model, (&pose, &shape, &cam), &ref_pose, h, w)?;
                    write_flow(&out_prefix, "", &bundle.flows[0])?;
                }
                "view" => {
                    let r = rot_y(view.rot_y);
                    let bundle = novelview_flow(
                        &model,
                        (&pose, &shape, &cam),
                        &r,
                        [view.tx, view.ty, view.tz],
                        h,
                        w,
                    )?;
                    write_flow(&out_prefix, "", &bundle.flows[0])?;
                }
                "swap" => {
                    let reference = reference.ok_or_else(|| {
                        Error::Parse("swap needs --reference".into())
                    })?;
                    let (pose_r, shape_r, cam_r) = ParamsFile::load(reference)?.decode()?;
                    let head = model.head_faces.clone().ok_or_else(|| {
                        Error::Invariant("model has no head face partition".into())
                    })?;
                    let (t1, t2) = swap_flows(
                        &model,
                        (&pose, &shape, &cam),
                        (&pose_r, &shape_r, &cam_r),
                        &head,
                        h,
                        w,
                    )?;
                    write_flow(&out_prefix, "_t1", &t1)?;
                    write_flow(&out_prefix, "_t2", &t2)?;
                }
                other => {
                    return Err(Error::Parse(format!(
                        "unknown task '{other}' (expected imitate, view or swap)"
                    )))
                }
            }
        }
        Cmd::Warp {
            image,
            flow,
            mask,
            out,
        } => {
            let img = load_png(image)?;
            let tf = read_flow(&flow, &mask)?;
            let warped = bilinear_sample(&image_to_chw(&img), &tf)?;
            save_png(out, &chw_to_image(&warped))?;
        }
        Cmd::Compose {
            image,
            flow,
            mask,
            out,
            count_out,
        } => {
            let srcs: Vec<FeatureMap> = image
                .iter()
                .map(|p| Ok(image_to_chw(&load_png(p)?)))
                .collect::<Result<_>>()?;
            let flows = read_flows(&flow, &mask)?;
            let (syn, count) = compose_syn(&srcs, &flows)?;
            save_png(out, &chw_to_image(&syn))?;
            if let Some(path) = count_out {
                let (h, w) = count.dim();
                tensor_write(
                    path,
                    &Tensor::I32(
                        vec![h as u32, w as u32],
                        count.iter().map(|&n| n as i32).collect(),
                    ),
                )?;
            }
        }
        Cmd::Fuse {
            block,
            xt,
            xs,
            flow,
            mask,
            params_dir,
            seed,
            out,
        } => {
            let kind: LwbKind = block.parse()?;
            let xt = read_feature(&xt)?;
            let xs: Vec<FeatureMap> = xs.iter().map(|p| read_feature(p)).collect::<Result<_>>()?;
            let flows = read_flows(&flow, &mask)?;
            let params = match params_dir {
                Some(dir) => FusionParams::load(dir)?,
                None => FusionParams::seeded(xt.dim().0, seed),
            };
            let fused = lwb_apply(kind, &params, &xs, &flows, &xt)?;
            tensor_write(out, &feature_tensor(&fused))?;
        }
        Cmd::Metrics { a, b } => {
            let ia = image_to_f32(&load_png(a)?);
            let ib = image_to_f32(&load_png(b)?);
            println!("psnr={}", psnr(&ia, &ib)?);
            println!("ssim={}", ssim(&ia, &ib)?);
        }
        Cmd::Losses {
            pred,
            target,
            attention,
            silhouette,
        } => {
            let p = hwc_f32(&pred)?;
            let t = hwc_f32(&target)?;
            let weights = LossWeights::default();
            let l1 = pixel_l1(&p, &t)?;
            println!("pixel_l1={l1}");
            let mut total = weights.lambda_p * l1;
            if !attention.is_empty() {
                if attention.len() != silhouette.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} attention maps but {} silhouettes",
                        attention.len(),
                        silhouette.len()
                    )));
                }
                let maps: Vec<AttentionMap> = attention
                    .iter()
                    .map(|p| AttentionMap::new(array2_f32(p)?))
                    .collect::<Result<_>>()?;
                let sils: Vec<Array2<bool>> = silhouette
                    .iter()
                    .map(|p| {
                        let (dims, data) = tensor_read(p)?.into_u8()?;
                        if dims.len() != 2 {
                            return Err(Error::ShapeMismatch(
                                "silhouette tensors must be rank 2".into(),
                            ));
                        }
                        Ok(Array2::from_shape_vec(
                            (dims[0] as usize, dims[1] as usize),
                            data.iter().map(|&v| v != 0).collect(),
                        )
                        .map_err(|e| Error::ShapeMismatch(e.to_string()))?)
                    })
                    .collect::<Result<_>>()?;
                let reg = attention_reg(&maps, &sils)?;
                println!("attention_reg={reg}");
                total += weights.lambda_a * reg;
            }
            println!("weighted_total={total}");
        }
        Cmd::Pipeline {
            model,
            task,
            src,
            image,
            reference,
            reference_image,
            view,
            dilate,
            background_index,
            out_dir,
        } => {
            if src.len() != image.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} parameter files but {} images",
                    src.len(),
                    image.len()
                )));
            }
            let model = load_model_checked(&model)?;
            let sources: Vec<(ParamsFile, Array3<u8>)> = src
                .iter()
                .zip(&image)
                .map(|(p, i)| Ok((ParamsFile::load(p)?, load_png(i)?)))
                .collect::<Result<_>>()?;
            let mode = match task.as_str() {
                "imitate" => PipelineMode::Imitate {
                    reference: ParamsFile::load(reference.ok_or_else(|| {
                        Error::Parse("imitate needs --reference".into())
                    })?)?,
                },
                "view" => PipelineMode::View {
                    rotation: rot_y(view.rot_y),
                    translation: [view.tx, view.ty, view.tz],
                },
                "swap" => PipelineMode::Swap {
                    reference: ParamsFile::load(reference.ok_or_else(|| {
                        Error::Parse("swap needs --reference".into())
                    })?)?,
                    reference_image: load_png(reference_image.ok_or_else(|| {
                        Error::Parse("swap needs --reference-image".into())
                    })?)?,
                },
                other => {
                    return Err(Error::Parse(format!(
                        "unknown task '{other}' (expected imitate, view or swap)"
                    )))
                }
            };
            let inputs = PipelineInputs {
                model,
                sources,
                mode,
                dilate_px: dilate,
                background_index,
            };
            let manifest = run_pipeline(&inputs, &out_dir)?;
            println!("wrote {} files to {}", manifest.files.len() + 1, out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
