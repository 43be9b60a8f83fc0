//! Crop phenotyping from a moving monocular camera.
//!
//! Given an ordered frame sequence from a nadir camera on a constant-speed
//! platform, plus per-frame instance-segmentation masks, this crate computes
//! per-plant head volume and total leaf area. The depth stack is classic
//! structure-from-motion stereo:
//!
//! 1. **features** – blob detection on integral-image box filters, upright
//!    64-component descriptors, ratio-test matching between frame pairs.
//! 2. **epipolar** – seeded RANSAC around the normalized 8-point solve,
//!    projective rectification, homography warping.
//! 3. **stereo** – 5×5 census matching cost, semi-global aggregation,
//!    winner-take-all with subpixel refinement, forward/backward fusion,
//!    metric depth from the platform motion model.
//! 4. **phenometrics** – circle-equivalent head radius, pixel→cm conversion
//!    at the head equator, spherical volume, leaf assignment and 3-D leaf
//!    length, leaf area regression.
//!
//! `synth` renders frame sequences with exact ground truth so every stage can
//! be checked against analytic values; `eval` holds the segmentation and
//! measurement-precision metrics; `pipeline` ties everything to files and the
//! `pipeline` CLI.

pub mod eval;
pub mod epipolar;
pub mod features;
pub mod io;
pub mod phenometrics;
pub mod pipeline;
pub mod raster;
pub mod stereo;
pub mod synth;
