//! Semi-supervised semantic segmentation with a gentle teaching assistant.
//!
//! Three models share one architecture. The teacher pseudo-labels unlabeled
//! images; the teaching assistant learns from those labels and passes only
//! its feature-extractor weights to the student by EMA; the student learns
//! from ground truth alone; the teacher tracks the student by EMA.
//!
//! Everything runs on a small from-scratch tensor kernel ([`numkernel`])
//! over a synthetic shape-segmentation task ([`synthdata`]).

pub mod error;
pub mod harness;
pub mod numkernel;
pub mod pseudolabel;
pub mod segmodel;
pub mod synthdata;
pub mod trainer;
pub mod transmission;

pub use error::{Error, Result};
