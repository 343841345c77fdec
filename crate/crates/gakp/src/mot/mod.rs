//! Sequence-level plumbing: MOTChallenge-style text files, synthetic scene
//! generation with ground truth, and CLEAR-MOT / IDF1 scoring.

pub mod eval;
pub mod files;
pub mod synth;

pub use eval::{evaluate, mota, EvalReport};
pub use files::{
    assemble_frames, read_mot_file, write_detections, write_results, FrameDetections, MotRow,
};
pub use synth::{generate_synthetic, SyntheticScene, SyntheticSceneConfig};
