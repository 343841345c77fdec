//! The per-frame unit of input shared by the association and tracking
//! layers.

use crate::appearance::Embedding;
use crate::geometry::BoundingBox;

/// One detector output: a box, its confidence, and (when a sidecar is
/// loaded) the appearance embedding aligned with it.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub embedding: Option<Embedding>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64, embedding: Option<Embedding>) -> Self {
        Detection {
            bbox,
            confidence,
            embedding,
        }
    }
}
