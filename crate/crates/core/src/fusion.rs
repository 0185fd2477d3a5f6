//! Slice-by-slice activation volumes, their consensus and thresholding.

use std::fmt;

use ndarray::{s, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkEnsemble, UNet};
use crate::parallel::parallel_map;
use crate::postprocess::{clean_mask, Connectivity};
use crate::volumes::{
    center_crop_pad, normalize_minmax, slice_triplet, to_canonical, AxisCode, CanonicalTransform, EdgeMode, LabelMask,
    Orientation, Placement, Volume,
};

/// Slices pushed through the network together during prediction.
const SLICE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationSource {
    Sagittal,
    Coronal,
    Axial,
    Consensus,
}

impl From<Orientation> for ActivationSource {
    fn from(o: Orientation) -> Self {
        match o {
            Orientation::Sagittal => ActivationSource::Sagittal,
            Orientation::Coronal => ActivationSource::Coronal,
            Orientation::Axial => ActivationSource::Axial,
        }
    }
}

impl fmt::Display for ActivationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationSource::Sagittal => "sagittal",
            ActivationSource::Coronal => "coronal",
            ActivationSource::Axial => "axial",
            ActivationSource::Consensus => "consensus",
        })
    }
}

/// Soft foreground prediction on the canonical grid, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVolume {
    pub data: Array3<f32>,
    pub source: ActivationSource,
}

/// Predicts every slice of `volume` along `orientation` and stacks the
/// foreground activations back into a volume of the same shape.
pub fn predict_orientation(
    net: &UNet<f32>,
    volume: &Volume,
    orientation: Orientation,
    edge: EdgeMode,
) -> Result<ActivationVolume> {
    let data = &volume.data;
    let axis = Axis(orientation.axis());
    let extent = data.len_of(axis);
    let (a, b) = orientation.plane_axes();
    let dims = [data.shape()[a], data.shape()[b]];
    let crop = net.config().padded_shape(dims);
    let mut out = Array3::<f32>::zeros(data.raw_dim());
    let placement = Placement::new(dims, crop);
    for start in (0..extent).step_by(SLICE_CHUNK) {
        let end = (start + SLICE_CHUNK).min(extent);
        let mut input = Array4::<f32>::zeros((end - start, 3, crop[0], crop[1]));
        for (n, index) in (start..end).enumerate() {
            let triplet = slice_triplet(data, orientation, index, edge);
            for ch in 0..3 {
                let (plane, _) = center_crop_pad(triplet.index_axis(Axis(0), ch), crop)?;
                input.slice_mut(s![n, ch, .., ..]).assign(&plane);
            }
        }
        let fg = net.foreground(&input)?;
        for (n, index) in (start..end).enumerate() {
            out.index_axis_mut(axis, index).assign(&placement.restore(fg.index_axis(Axis(0), n)));
        }
    }
    Ok(ActivationVolume { data: out, source: orientation.into() })
}

/// Activation volumes of all three networks, in sagittal, coronal, axial
/// order. With `workers > 1` the orientations run on separate threads.
pub fn predict_ensemble(
    ensemble: &NetworkEnsemble,
    volume: &Volume,
    edge: EdgeMode,
    workers: usize,
) -> Result<[ActivationVolume; 3]> {
    let mut out = parallel_map(&Orientation::ALL, workers, |&o| predict_orientation(ensemble.get(o), volume, o, edge))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let axial = out.pop().expect("three orientations");
    let coronal = out.pop().expect("three orientations");
    let sagittal = out.pop().expect("three orientations");
    Ok([sagittal, coronal, axial])
}

/// Voxelwise mean of three activation volumes.
pub fn consensus(a: &ActivationVolume, b: &ActivationVolume, c: &ActivationVolume) -> Result<ActivationVolume> {
    for other in [b, c] {
        if other.data.shape() != a.data.shape() {
            return Err(Error::shape(a.data.shape(), other.data.shape()));
        }
    }
    let mut data = Array3::<f32>::zeros(a.data.raw_dim());
    Zip::from(&mut data).and(&a.data).and(&b.data).and(&c.data).for_each(|o, &x, &y, &z| {
        // Summed in f64 so the result does not depend on argument order.
        *o = ((x as f64 + y as f64 + z as f64) / 3.0) as f32;
    });
    Ok(ActivationVolume { data, source: ActivationSource::Consensus })
}

/// Voxels at or above `threshold` become foreground.
pub fn binarize(activation: &ActivationVolume, threshold: f32) -> Result<LabelMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be in (0, 1)")));
    }
    LabelMask::new(activation.data.mapv(|v| u8::from(v >= threshold)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub threshold: f32,
    /// Components kept after thresholding.
    pub keep: usize,
    pub connectivity: Connectivity,
    pub edge: EdgeMode,
    pub workers: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions { threshold: 0.5, keep: 2, connectivity: Connectivity::TwentySix, edge: EdgeMode::Replicate, workers: 1 }
    }
}

/// Everything the full pipeline produces for one canonical volume.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub activations: [ActivationVolume; 3],
    pub consensus: ActivationVolume,
    /// Thresholded consensus before component filtering.
    pub raw: LabelMask,
    pub mask: LabelMask,
}

/// Predict, average, threshold and keep the largest components.
pub fn segment(ensemble: &NetworkEnsemble, volume: &Volume, options: &SegmentOptions) -> Result<Segmentation> {
    let activations = predict_ensemble(ensemble, volume, options.edge, options.workers)?;
    let [s, c, a] = &activations;
    let consensus = consensus(s, c, a)?;
    let raw = binarize(&consensus, options.threshold)?;
    let mask = clean_mask(&raw, options.keep, options.connectivity);
    Ok(Segmentation { activations, consensus, raw, mask })
}

/// [`segment`] for a volume in its own grid: reorders to canonical axes,
/// normalizes, segments, and maps the mask back onto the input grid. The
/// returned segmentation and transform stay in canonical order.
pub fn segment_native(
    ensemble: &NetworkEnsemble,
    volume: &Volume,
    options: &SegmentOptions,
    assume_canonical: bool,
) -> Result<(LabelMask, Segmentation, CanonicalTransform)> {
    let mut volume = volume.clone();
    if volume.axes.is_none() && assume_canonical {
        volume.axes = Some(AxisCode::CANONICAL);
    }
    let (canonical, _, transform) = to_canonical(&volume, None)?;
    let seg = segment(ensemble, &normalize_minmax(&canonical), options)?;
    let mask = LabelMask::new(transform.invert(seg.mask.data().view()))?;
    Ok((mask, seg, transform))
}
