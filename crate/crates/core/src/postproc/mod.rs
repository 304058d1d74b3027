//! Heatmap post-processing: min-max normalization, align-corners bilinear
//! upsampling, explanation maps (heatmap ⊙ image), and colormap overlays.
//! The pipeline order is fixed as normalize-then-upsample.

pub mod netpbm;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::float::Real;
use crate::tensor::Tensor;

/// Where an image came from; carried through for report labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File(PathBuf),
    Synthetic(u64),
    Derived,
}

/// A 1- or 3-channel image with values in [0, 1], stored channel-major.
#[derive(Debug, Clone)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub provenance: Provenance,
}

/// Explanation maps have exactly the shape and value range of an image.
pub type ExplanationMap<T> = Image<T>;

impl<T: Real> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>, provenance: Provenance) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat(format!("{channels} channels (must be 1 or 3)")));
        }
        if data.len() != channels * height * width {
            return Err(Error::ImageFormat("pixel count does not match dimensions".into()));
        }
        // Unit range with headroom for convex-combination rounding.
        let slack = T::from_f64_rn(1e-9);
        if data.iter().any(|v| !v.is_finite() || *v < -slack || *v > T::one() + slack) {
            return Err(Error::ImageFormat("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { channels, height, width, data, provenance })
    }

    /// `[channels, height, width]` tensor view of the pixel data.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(vec![self.channels, self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor<T>, provenance: Provenance) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::ImageFormat(format!("rank-{} tensor is not an image", t.rank())));
        }
        Image::new(t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec(), provenance)
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Heatmap rescaled to [0, 1]. A constant source map cannot be rescaled;
/// it normalizes to all zeros with the `degenerate` flag set, so an
/// uninformative map obscures the image instead of passing it through.
#[derive(Debug, Clone)]
pub struct NormalizedHeatmap<T> {
    pub values: Tensor<T>,
    pub degenerate: bool,
}

/// Min-max normalization of a 2-D map: `(v - min) / (max - min)`.
pub fn min_max_normalize<T: Real>(values: &Tensor<T>) -> NormalizedHeatmap<T> {
    let min = values.min_all();
    let max = values.max_all();
    if max == min {
        return NormalizedHeatmap { values: Tensor::zeros(values.shape().to_vec()), degenerate: true };
    }
    let range = max - min;
    NormalizedHeatmap { values: values.map(|v| (v - min) / range), degenerate: false }
}

/// Align-corners bilinear upsampling of raw 2-D values: destination pixel
/// `d` samples source coordinate `d * (srcDim - 1) / (dstDim - 1)`, so the
/// four corners are copied exactly and every output is a convex combination
/// of its neighbors.
pub fn bilinear_upsample_values<T: Real>(values: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if values.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: values.shape().to_vec(),
            reason: "upsampling expects a 2-D map".into(),
        });
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    if out_h < h || out_w < w {
        return Err(Error::InvalidRequest(format!(
            "upsample target {}x{} smaller than source {}x{}",
            out_h, out_w, h, w
        )));
    }
    let src = values.data();
    let coord = |d: usize, dst_dim: usize, src_dim: usize| -> (usize, usize, T) {
        if dst_dim == 1 || src_dim == 1 {
            return (0, 0, T::zero());
        }
        let s = T::from_usize(d).unwrap() * T::from_usize(src_dim - 1).unwrap()
            / T::from_usize(dst_dim - 1).unwrap();
        let lo = s.floor();
        let lo_ix = (lo.as_f64() as usize).min(src_dim - 1);
        let hi_ix = (lo_ix + 1).min(src_dim - 1);
        (lo_ix, hi_ix, s - lo)
    };
    let mut out = vec![T::zero(); out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let one = T::one();
            out[y * out_w + x] = v00 * (one - fy) * (one - fx)
                + v01 * (one - fy) * fx
                + v10 * fy * (one - fx)
                + v11 * fy * fx;
        }
    }
    Tensor::from_vec(vec![out_h, out_w], out)
}

/// Upsamples a normalized heatmap, carrying the degenerate flag through.
pub fn bilinear_upsample<T: Real>(
    h: &NormalizedHeatmap<T>,
    out_h: usize,
    out_w: usize,
) -> Result<NormalizedHeatmap<T>> {
    Ok(NormalizedHeatmap {
        values: bilinear_upsample_values(&h.values, out_h, out_w)?,
        degenerate: h.degenerate,
    })
}

/// Explanation map `E = L ⊙ I`: the per-channel pointwise product of a
/// normalized heatmap (already at image resolution) and the image.
pub fn explanation_map<T: Real>(heat: &NormalizedHeatmap<T>, img: &Image<T>) -> Result<ExplanationMap<T>> {
    let (h, w) = (heat.values.shape()[0], heat.values.shape()[1]);
    if h != img.height || w != img.width {
        return Err(Error::ShapeMismatch {
            left: vec![h, w],
            right: vec![img.height, img.width],
        });
    }
    let hd = heat.values.data();
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                data.push(hd[y * w + x] * img.data[(c * h + y) * w + x]);
            }
        }
    }
    Image::new(img.channels, img.height, img.width, data, Provenance::Derived)
}

/// Five-stop linear colormap over [0, 1]:
/// 0 -> blue, 0.25 -> cyan, 0.5 -> green, 0.75 -> yellow, 1 -> red.
pub fn colormap(v: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let v = v.clamp(0.0, 1.0);
    let scaled = v * 4.0;
    let seg = (scaled.floor() as usize).min(3);
    let t = scaled - seg as f64;
    let lo = STOPS[seg];
    let hi = STOPS[seg + 1];
    [
        lo[0] + t * (hi[0] - lo[0]),
        lo[1] + t * (hi[1] - lo[1]),
        lo[2] + t * (hi[2] - lo[2]),
    ]
}

/// Blends the colormapped heatmap onto the image at 50% opacity, producing
/// an RGB overlay image. Grayscale sources are replicated across channels.
pub fn overlay<T: Real>(img: &Image<T>, heat: &NormalizedHeatmap<T>) -> Result<Image<T>> {
    let (h, w) = (heat.values.shape()[0], heat.values.shape()[1]);
    if h != img.height || w != img.width {
        return Err(Error::ShapeMismatch {
            left: vec![h, w],
            right: vec![img.height, img.width],
        });
    }
    let hd = heat.values.data();
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = colormap(hd[y * w + x].as_f64());
            for c in 0..3 {
                let src = if img.channels == 3 { img.pixel(c, y, x) } else { img.pixel(0, y, x) };
                let blended = 0.5 * src.as_f64() + 0.5 * rgb[c];
                data[(c * h + y) * w + x] = T::from_f64_rn(blended);
            }
        }
    }
    Image::new(3, img.height, img.width, data, Provenance::Derived)
}
