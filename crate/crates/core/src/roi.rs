//! Pixel ROIs, their patch-grid index sets, and the slot alignment map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiSpec {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RoiSpec {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Rejects zero-area boxes and boxes reaching outside a `size × size` image.
    pub fn validate(&self, size: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::InvalidInput(format!("degenerate roi {self:?}")));
        }
        if self.x1 > size || self.y1 > size {
            return Err(Error::InvalidInput(format!(
                "roi {self:?} outside {size}x{size} image"
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Row-major patch indices whose cells intersect an ROI.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchIndexSet {
    indices: Vec<usize>,
}

impl PatchIndexSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `T_v`, the number of ROI visual tokens.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn roi_to_patch_indices(roi: &RoiSpec, image_size: usize, patch_size: usize) -> Result<PatchIndexSet> {
    roi.validate(image_size)?;
    let grid = image_size / patch_size;
    let (c0, c1) = (roi.x0 / patch_size, (roi.x1 - 1) / patch_size);
    let (r0, r1) = (roi.y0 / patch_size, (roi.y1 - 1) / patch_size);
    let indices = (r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |c| r * grid + c))
        .collect();
    Ok(PatchIndexSet { indices })
}

/// Order-preserving bijection from ROI patch indices to latent steps `1..=T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotAlignment {
    /// `pairs[k] = (patch index, latent step)`, steps counted from 1.
    pairs: Vec<(usize, usize)>,
}

impl SlotAlignment {
    pub fn step_of(&self, patch: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == patch).map(|&(_, s)| s)
    }

    /// Inverse map: the patch reconstructed at latent step `step` (1-based).
    pub fn patch_at(&self, step: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, s)| *s == step).map(|&(p, _)| p)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_steps(&self) -> usize {
        self.pairs.len()
    }
}

/// Builds φ under the supervised contract `T = T_v`.
pub fn build_phi(indices: &PatchIndexSet, steps: usize) -> Result<SlotAlignment> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty patch index set".into()));
    }
    if steps != indices.len() {
        return Err(Error::InvalidInput(format!(
            "latent steps {steps} must equal ROI token count {}",
            indices.len()
        )));
    }
    let pairs = indices
        .indices()
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, k + 1))
        .collect();
    Ok(SlotAlignment { pairs })
}
