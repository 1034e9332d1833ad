//! A unit of the input stream: multi-scale features, label and mask.

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, Tensor3};

/// Ground-truth label of a stream frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One unit of streaming input: raw multi-scale backbone features (or a single
/// pre-fused tensor), plus optional evaluation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    /// Largest scale first; every other scale is resized onto its grid.
    pub scales: Vec<Tensor3>,
    pub label: Label,
    /// Binary `H×W` ground truth at mask resolution.
    pub mask: Option<Matrix>,
    pub frame_idx: usize,
}

impl StreamFrame {
    pub fn new(scales: Vec<Tensor3>, label: Label, frame_idx: usize) -> Self {
        Self {
            scales,
            label,
            mask: None,
            frame_idx,
        }
    }

    pub fn with_mask(mut self, mask: Matrix) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Total raw channel count across scales.
    pub fn raw_channels(&self) -> usize {
        self.scales.iter().map(Tensor3::channels).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.scales.iter().all(Tensor3::is_finite)
    }
}
