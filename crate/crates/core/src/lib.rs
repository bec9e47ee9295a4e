//! 3D nuclei instance segmentation for fluorescence microscopy volumes.
//!
//! The pipeline detects nucleus centers with a 3D U-Net, then segments each
//! nucleus individually inside a patch with a dilated-convolution network:
//!
//! 1. **phantom** – paired synthetic volumes (appearance, nuclei mask,
//!    center-region mask) with exactly known per-nucleus ground truth.
//! 2. **nn** – a minimal f64 autograd engine with the 3D layers, losses and
//!    optimizer the two networks need.
//! 3. **detect** – the dual-head detection U-Net, sliding-window inference
//!    over large volumes, and centroid extraction.
//! 4. **instance** – the per-nucleus patch segmentation network and
//!    label-coded paste-back.
//! 5. **watershed** – the distance-transform watershed comparison baseline.
//! 6. **eval** – object-wise matching and precision/recall/F1 scoring.
//! 7. **pipeline** – end-to-end orchestration with run manifests.

pub mod components;
pub mod detect;
pub mod error;
pub mod instance;
pub mod nn;
pub mod phantom;
pub mod seeds;
pub mod volio;
pub mod volume;

pub use error::{Axis, Error, Result};
