//! Collaborative automatic modulation classification workbench.
//!
//! A device-side encoder compresses amplitude/phase frames into a short
//! semantic embedding; a server-side classifier labels the noisy embedding.
//! Both are trained jointly across a simulated or real noisy link, then
//! pruned and quantized.

pub mod numcore;
pub mod sigsynth;
pub mod nn;
pub mod sscnet;
pub mod mcnet;
pub mod splittrain;
pub mod compressor;
pub mod transport;
