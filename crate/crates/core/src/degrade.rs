//! Hole degradation `x ⊙ (1 − M) + M` and self-supervised training pairs.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::masks::{derive_child_mask, BrushConfig, ChildFamily, Mask, MaskFamily, RateConfig};
use crate::seeding::Rng;

/// Value written into hole pixels.
pub const HOLE_FILL: f32 = 1.0;

pub(crate) fn check_dims(image: &Image, mask: &Mask) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// Replaces every hole pixel with white; valid pixels are copied.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    check_dims(image, mask)?;
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(CHANNELS).zip(mask.data()) {
        if m != 0 {
            px.fill(HOLE_FILL);
        }
    }
    Ok(out)
}

/// How child masks are drawn during adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildSampler {
    /// Family of the parent hole; non-parent-like children come from it.
    pub parent_family: MaskFamily,
    /// Probability of drawing a rotated/scaled copy of the parent instead.
    pub parent_like_prob: f64,
    pub rates: RateConfig,
    pub brush: BrushConfig,
}

impl ChildSampler {
    pub fn new(parent_family: MaskFamily, parent_like_prob: f64) -> Self {
        ChildSampler {
            parent_family,
            parent_like_prob,
            rates: RateConfig::default(),
            brush: BrushConfig::default(),
        }
    }

    pub fn sample(&self, parent: &Mask, rng: &mut Rng) -> Result<Mask> {
        let family = if rng.gen_bool(self.parent_like_prob.clamp(0.0, 1.0)) {
            ChildFamily::ParentLike
        } else {
            self.parent_family.into()
        };
        derive_child_mask(parent, family, &self.rates, &self.brush, rng)
    }
}

/// One self-supervised pair: the doubly degraded image and its child mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub degraded: Image,
    pub child: Mask,
}

/// Draws `batch_size` independent child masks and degrades `x_d` with each.
pub fn make_training_batch(
    x_d: &Image,
    parent: &Mask,
    batch_size: usize,
    sampler: &ChildSampler,
    rng: &mut Rng,
) -> Result<Vec<TrainingPair>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    check_dims(x_d, parent)?;
    (0..batch_size)
        .map(|_| {
            let child = sampler.sample(parent, rng)?;
            Ok(TrainingPair {
                degraded: apply_mask(x_d, &child)?,
                child,
            })
        })
        .collect()
}
