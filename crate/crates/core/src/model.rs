//! A trained dynamic scene: canonical cloud, deformation field, rectifier and
//! per-frame membership, evaluated frame by frame in temporal order.

use crate::deform::{AttributeGrads, DeformRecord, DeformationNet, FrameAttributes};
use crate::density::{align_correspondence, DensityLedger};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::rectifier::{FeatureRow, FrameRecord, RectifiedFrame, RectifierGrads, TemporalBuffer, TemporalRectifier};
use crate::scene::normalized_time;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub deform: DeformationNet,
    pub rectifier: TemporalRectifier,
    pub ledger: DensityLedger,
    /// Applies the rectifier after the deformation field.
    pub temporal: bool,
}

/// Forward state of one frame. `attrs` rows follow the frame's membership
/// order; `members[i]` is the canonical row of `attrs` row `i`.
#[derive(Debug, Clone)]
pub struct FramePass {
    pub frame: usize,
    pub members: Vec<usize>,
    pub attrs: FrameAttributes,
    /// Correlated feature to push into the buffer once the frame is done.
    pub f_hat: Option<FeatureRow>,
    sub: GaussianCloud,
    deform: DeformRecord,
    rectify: Option<FrameRecord>,
}

#[derive(Debug, Clone)]
pub struct FrameGrads {
    pub deform: Vec<f64>,
    pub rectifier: Option<RectifierGrads>,
    /// Aligned with [`FramePass::members`].
    pub canonical: AttributeGrads,
}

/// Rolling temporal state carried from one frame to the next.
#[derive(Debug, Clone)]
pub struct Carry {
    pub buffer: TemporalBuffer,
    pub previous: Option<RectifiedFrame>,
}

impl Carry {
    pub fn new(model: &Model) -> Self {
        Self { buffer: model.rectifier.new_buffer(), previous: None }
    }

    /// Records a finished frame. History is stored detached.
    pub fn advance(&mut self, pass: &FramePass) -> Result<()> {
        if let Some(f) = &pass.f_hat {
            self.buffer.push(pass.frame, f)?;
        }
        self.previous = Some(RectifiedFrame::from_attributes(&pass.attrs));
        Ok(())
    }
}

fn check_finite(attrs: &FrameAttributes) -> Result<()> {
    let bad = |what: &str| Err(Error::NonFinite { frame: attrs.frame_index, what: what.into() });
    if attrs.positions.iter().flatten().any(|v| !v.is_finite()) {
        return bad("positions");
    }
    if attrs.log_scales.iter().flatten().any(|v| !v.is_finite()) {
        return bad("log-scales");
    }
    if attrs.rotations.iter().flatten().any(|v| !v.is_finite()) {
        return bad("rotations");
    }
    if attrs.opacity_logits.iter().any(|v| !v.is_finite()) {
        return bad("opacities");
    }
    Ok(())
}

impl Model {
    /// Every frame starts with every canonical point.
    pub fn new(
        cloud: GaussianCloud,
        deform: DeformationNet,
        rectifier: TemporalRectifier,
        frames: usize,
        temporal: bool,
    ) -> Result<Self> {
        let ledger = DensityLedger::new(&cloud, frames)?;
        Ok(Self { cloud, deform, rectifier, ledger, temporal })
    }

    pub fn num_frames(&self) -> usize {
        self.ledger.num_frames()
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        normalized_time(frame, self.num_frames())
    }

    /// Deforms the frame's members to time `t` and, when enabled, rectifies
    /// them against `carry`. The previous frame's history is re-indexed to
    /// this frame's membership first.
    pub fn forward_frame(&self, frame: usize, t: f64, carry: &Carry) -> Result<FramePass> {
        if frame >= self.num_frames() {
            return Err(Error::InvalidInput(format!("frame {frame} out of range")));
        }
        let members = self.ledger.member_indices(frame, &self.cloud)?;
        let sub = self.cloud.subset(&members);
        let (mut attrs, deform) = self.deform.deform_with_record(&sub, t, frame)?;
        let (rectify, f_hat) = if self.temporal {
            let prev = carry.previous.as_ref().map(|p| align_correspondence(&self.ledger, p, &attrs)).transpose()?;
            let (f, rec) = self.rectifier.process_frame(&carry.buffer, &mut attrs, prev.as_ref())?;
            (Some(rec), Some(f))
        } else {
            (None, None)
        };
        check_finite(&attrs)?;
        Ok(FramePass { frame, members, attrs, f_hat, sub, deform, rectify })
    }

    /// Backpropagates gradients on the frame's final attributes.
    pub fn backward_frame(&self, pass: &FramePass, upstream: &AttributeGrads) -> Result<FrameGrads> {
        let (rectifier, pre) = match &pass.rectify {
            Some(rec) => {
                let (g, a) = self.rectifier.process_frame_backward(&pass.attrs, rec, upstream)?;
                (Some(g), a)
            }
            None => (None, upstream.clone()),
        };
        let (deform, canonical) = self.deform.deform_backward(&pass.sub, &pass.deform, &pre)?;
        Ok(FrameGrads { deform, rectifier, canonical })
    }

    /// Runs frames `0..=last` in order, handing each pass to `visit`.
    pub fn replay(&self, last: usize, mut visit: impl FnMut(&FramePass) -> Result<()>) -> Result<()> {
        let mut carry = Carry::new(self);
        for frame in 0..=last {
            let pass = self.forward_frame(frame, self.time_of(frame), &carry)?;
            visit(&pass)?;
            carry.advance(&pass)?;
        }
        Ok(())
    }

    /// Final attributes of every frame.
    pub fn frame_sequence(&self) -> Result<Vec<FrameAttributes>> {
        let mut out = Vec::with_capacity(self.num_frames());
        self.replay(self.num_frames() - 1, |p| {
            out.push(p.attrs.clone());
            Ok(())
        })?;
        Ok(out)
    }

    /// Attributes at an arbitrary normalized time. Membership and temporal
    /// history come from the nearest frame and the frames before it.
    pub fn attributes_at(&self, t: f64) -> Result<FrameAttributes> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let frame = (t * (self.num_frames() - 1) as f64).round() as usize;
        let mut carry = Carry::new(self);
        for f in 0..frame {
            let pass = self.forward_frame(f, self.time_of(f), &carry)?;
            carry.advance(&pass)?;
        }
        Ok(self.forward_frame(frame, t, &carry)?.attrs)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.ledger.counts()
    }
}
