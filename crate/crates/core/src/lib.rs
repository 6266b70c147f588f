//! Structure-aware detection transformer for dental caries at desk scale.
//!
//! The crate implements the full pipeline on top of a small reverse-mode
//! autodiff engine, so every stage is exact-gradient-checkable on a CPU:
//!
//! 1. **imgproc** – grayscale conversion, Scharr gradient magnitude, and the
//!    log-compressed, min-max normalized structural target used as the
//!    self-supervised regression label.
//! 2. **spb** – the structure perception branch, a small conv net pretrained
//!    to reconstruct the structural target from frozen backbone features.
//! 3. **tsqi** – tooth-structure-aware query initialization: hybrid
//!    semantic/structural score map, top-K anchor selection, and
//!    confidence-embedded positional queries.
//! 4. **matcher** – Hungarian assignment between queries and ground truth.
//! 5. **ldlr** – lesion-aware dynamic loss refinement: per-match quality
//!    vector, linear hardness weights, and the weighted Focal/L1/GIoU total.
//! 6. **detector** – toy backbone + two-layer cross-attention decoder with
//!    class/box heads; training step and inference.
//! 7. **data** – synthetic tooth/lesion corpus generator and COCO-style IO.
//! 8. **eval** – per-class AP and mAP over IoU thresholds 0.50:0.05:0.95.
//!
//! Per-image work (target computation, dataset generation, inference,
//! evaluation matching) runs data-parallel under the default `parallel`
//! feature and falls back to sequential iteration without it. Training
//! steps are single-threaded and bit-deterministic for a fixed seed.

pub mod autograd;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod ldlr;
pub mod matcher;
pub mod nn;
pub mod par;
pub mod spb;
pub mod tsqi;

pub use error::{Error, Result};
