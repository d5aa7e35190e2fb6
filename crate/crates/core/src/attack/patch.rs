//! Adversarial patch state: a perturbation matrix anchored to the lead
//! vehicle's bounding box, a binary support mask from attribution ranking,
//! and the geometry update that carries values across box changes.

use crate::sensor::{Frame, PixelBox};

/// Bounded perturbation tied to the current bounding box. The delivered
/// patch is `delta * mask` elementwise; support never leaves the box.
#[derive(Debug, Clone)]
pub struct AdversarialPatch {
    pub bbox: PixelBox,
    /// Row-major over the box.
    pub delta: Vec<f64>,
    pub mask: Vec<bool>,
}

impl AdversarialPatch {
    pub fn zeroed(bbox: PixelBox) -> Self {
        AdversarialPatch {
            bbox,
            delta: vec![0.0; bbox.area()],
            mask: vec![true; bbox.area()],
        }
    }

    /// Max |delta * mask| over the support.
    pub fn max_abs(&self) -> f64 {
        self.delta
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(d, _)| d.abs())
            .fold(0.0, f64::max)
    }

    /// Mean |delta * mask| over the whole box area (unmasked cells count as
    /// zero), which is what the displayed patch area looks like.
    pub fn mean_abs(&self) -> f64 {
        if self.delta.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .delta
            .iter()
            .zip(&self.mask)
            .map(|(d, m)| if *m { d.abs() } else { 0.0 })
            .sum();
        sum / self.delta.len() as f64
    }

    /// Clamp every entry into [lo, hi].
    pub fn project(&mut self, lo: f64, hi: f64) {
        for d in self.delta.iter_mut() {
            *d = d.clamp(lo, hi);
        }
    }

    /// Adds the masked patch onto `frame`, clipping pixels to [0, 1].
    /// Returns the columns touched.
    pub fn compose_onto(&self, frame: &mut Frame) -> std::ops::Range<usize> {
        for br in 0..self.bbox.h {
            let r = self.bbox.y0 + br;
            if r >= frame.h {
                break;
            }
            for bc in 0..self.bbox.w {
                let c = self.bbox.x0 + bc;
                if c >= frame.w {
                    break;
                }
                let i = br * self.bbox.w + bc;
                if self.mask[i] && self.delta[i] != 0.0 {
                    let v = frame.get(r, c) + self.delta[i];
                    frame.set(r, c, v.clamp(0.0, 1.0));
                }
            }
        }
        self.bbox.x0..(self.bbox.x0 + self.bbox.w).min(frame.w)
    }
}

/// Anchor displacement between two boxes (new center minus old center).
pub fn anchor_shift(prev: &PixelBox, now: &PixelBox) -> (f64, f64) {
    let (px, py) = prev.center();
    let (nx, ny) = now.center();
    (nx - px, ny - py)
}

/// Re-anchors the patch to a new box: values keep their position relative
/// to the box center, newly exposed cells start at zero, and the mask is
/// reset pending a fresh attribution ranking.
pub fn update_patch_geometry(patch: &AdversarialPatch, bbox_now: PixelBox) -> AdversarialPatch {
    let (pcx, pcy) = patch.bbox.center();
    let (ncx, ncy) = bbox_now.center();
    update_patch_geometry_tracked(patch, bbox_now, (ncx - pcx, ncy - pcy))
}

/// Re-anchors with an explicit image-space content shift. The plain
/// geometry update shifts content with the detected box; a tracker that
/// smooths detector noise passes the estimated body motion instead so the
/// carved values stay glued to the vehicle.
pub fn update_patch_geometry_tracked(
    patch: &AdversarialPatch,
    bbox_now: PixelBox,
    content_shift: (f64, f64),
) -> AdversarialPatch {
    let mut next = AdversarialPatch::zeroed(bbox_now);
    // Image-space displacement of content, then into new-box-local coords.
    let dx = patch.bbox.x0 as isize + content_shift.0.round() as isize - bbox_now.x0 as isize;
    let dy = patch.bbox.y0 as isize + content_shift.1.round() as isize - bbox_now.y0 as isize;
    for br in 0..patch.bbox.h {
        let nr = br as isize + dy;
        if nr < 0 || nr >= bbox_now.h as isize {
            continue;
        }
        for bc in 0..patch.bbox.w {
            let nc = bc as isize + dx;
            if nc < 0 || nc >= bbox_now.w as isize {
                continue;
            }
            next.delta[nr as usize * bbox_now.w + nc as usize] =
                patch.delta[br * patch.bbox.w + bc];
        }
    }
    next
}

/// Binary mask keeping the top `q_keep` fraction of |attribution| inside
/// the box; ties break toward the lower row-major index.
pub fn make_mask(attributions: &[f64], bbox: &PixelBox, q_keep: f64) -> Vec<bool> {
    let n = bbox.area();
    assert_eq!(attributions.len(), n, "attribution shape mismatch");
    let keep = ((q_keep * n as f64).round() as usize).min(n);
    let mut mask = vec![false; n];
    if keep == 0 {
        return mask;
    }
    if keep == n {
        mask.fill(true);
        return mask;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        attributions[b]
            .abs()
            .partial_cmp(&attributions[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}
