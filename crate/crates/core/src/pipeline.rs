//! The per-pixel enhancement chain shared by training and inference:
//!
//! ```text
//! sRGB → Lab (normalized) → 1D LUT per axis → Lab → sRGB → fused 3D LUT → clamp
//! ```
//!
//! Without 1D LUTs the chain starts directly at the 3D LUT. The final clamp is
//! skipped by the training path so that gradients reach saturated outputs.

use crate::color::{
    lab_denormalize, lab_normalize, lab_to_srgb_with_jacobian, srgb_to_lab, ColorError, ColorSpace, ImageBuffer,
    RgbPixel, LAB_DENORM_SCALE,
};
use crate::lut::{Lut1DTriple, Lut3D, LutError};

/// An image-adaptive color transform: optional 1D curves in Lab followed by a 3D LUT in RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub luts: Option<Lut1DTriple>,
    pub lut3d: Lut3D,
}

/// Intermediates of one pixel kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct PixelTrace {
    /// Normalized Lab input of the 1D stage.
    pub lab_in: [f64; 3],
    /// Normalized Lab output of the 1D stage.
    pub lab_out: [f64; 3],
    /// `∂rgb/∂lab` of the Lab → sRGB re-encode.
    pub jacobian: [[f64; 3]; 3],
    /// Input of the 3D stage.
    pub rgb_mid: [f64; 3],
}

impl Transform {
    pub fn identity(lut1d_size: Option<usize>, lut3d_dim: usize) -> Result<Self, LutError> {
        Ok(Self {
            luts: lut1d_size.map(Lut1DTriple::identity).transpose()?,
            lut3d: Lut3D::identity(lut3d_dim)?,
        })
    }

    /// Runs the chain on one sRGB pixel and returns the unclamped output and its trace.
    pub fn trace_pixel(&self, rgb: [f64; 3]) -> ([f64; 3], PixelTrace) {
        let (mid, lab_in, lab_out, jacobian) = match &self.luts {
            Some(luts) => {
                let lab_in = lab_normalize(srgb_to_lab(RgbPixel::from_array(rgb)));
                let lab_out = luts.apply(lab_in);
                let (mid, jac) = lab_to_srgb_with_jacobian(lab_denormalize(lab_out));
                (mid.to_array(), lab_in, lab_out, jac)
            }
            None => (rgb, [0.0; 3], [0.0; 3], [[0.0; 3]; 3]),
        };
        let out = self.lut3d.interpolate(mid);
        (out, PixelTrace { lab_in, lab_out, jacobian, rgb_mid: mid })
    }

    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        self.trace_pixel(rgb).0.map(|v| v.clamp(0.0, 1.0))
    }

    /// Applies the transform at full resolution.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, ColorError> {
        if img.space() != ColorSpace::Srgb {
            return Err(ColorError::UnsupportedConversion { from: img.space(), to: ColorSpace::Srgb });
        }
        Ok(img.map_pixels(ColorSpace::Srgb, |p| self.apply_pixel(p)))
    }

    /// Back-propagates `upstream = ∂loss/∂out` of one pixel into dense
    /// gradients on the 1D entries (`[l.., a.., b..]`) and the 3D grid.
    pub fn backward_pixel(
        &self,
        trace: &PixelTrace,
        upstream: [f64; 3],
        grad_luts: Option<&mut [f64]>,
        grad_grid: &mut [f64],
    ) {
        let g3 = self.lut3d.backward(trace.rgb_mid);
        g3.accumulate(upstream, grad_grid);
        let (Some(luts), Some(grad_luts)) = (&self.luts, grad_luts) else {
            return;
        };
        let g_mid = g3.grad_input(upstream);
        let s = luts.size();
        for (c, lut) in luts.channels().into_iter().enumerate() {
            // Lab values outside the valid range are clamped before re-encoding.
            if !(0.0..=1.0).contains(&trace.lab_out[c]) {
                continue;
            }
            let mut g_lab = 0.0;
            for (r, g) in g_mid.iter().enumerate() {
                g_lab += g * trace.jacobian[r][c];
            }
            g_lab *= LAB_DENORM_SCALE[c];
            lut.backward(trace.lab_in[c]).accumulate(g_lab, &mut grad_luts[c * s..(c + 1) * s]);
        }
    }
}
