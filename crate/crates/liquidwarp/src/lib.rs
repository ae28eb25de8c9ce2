//! Geometry-driven human image synthesis: a parametric body model with
//! linear blend skinning, a z-buffered correspondence rasterizer,
//! transformation-flow composition for motion imitation, novel view
//! synthesis and appearance transfer, bilinear warping, liquid-warping
//! fusion blocks, and the metrics/losses used to evaluate the results.

pub mod body;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod warp;

pub use body::{
    load_model, project, rigid_transform, rodrigues, rot_y, rot_z, save_model, skin,
    synth_default_camera, synth_model, BodyModel, CameraWP, Mesh, PoseParams, ShapeParams,
};
pub use error::{Error, Result};
pub use flow::{
    compose_flow, identity_flow, imitation_flow, mask_decompose, novelview_flow, swap_flows,
    FlowBundle, TransformFlow,
};
pub use fusion::{FusionParams, LwbKind};
pub use io::{load_png, save_png, tensor_read, tensor_write, ParamsFile, Tensor};
pub use metrics::{
    attention_reg, compose_output, pixel_l1, psnr, ssim, tv, AttentionMap, LossWeights,
};
pub use pipeline::{run_pipeline, Manifest, PipelineInputs, PipelineMode};
pub use raster::{face_tris, rasterize, visibility, FaceTris, RenderMaps};
pub use warp::{bilinear_sample, compose_syn, FeatureMap};

// The guide's code snippets run as doc-tests so the book can never drift
// from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/body-model.md")]
    mod body_model {}
    #[doc = include_str!("../../../book/src/rasterization.md")]
    mod rasterization {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/warping-fusion.md")]
    mod warping_fusion {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli-formats.md")]
    mod cli_formats {}
}
