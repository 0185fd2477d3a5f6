//! Volumes, label masks and the geometric helpers shared by training and
//! prediction: min-max normalization, axis canonicalization, extended-2D
//! slice triplets and center crop/pad with an invertible placement record.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three anatomical slicing planes. In canonical space the
/// orientation's slicing axis is `axis()`: sagittal slices index axis 0,
/// coronal axis 1 and axial axis 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Sagittal,
    Coronal,
    Axial,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Sagittal, Orientation::Coronal, Orientation::Axial];

    pub fn axis(self) -> usize {
        match self {
            Orientation::Sagittal => 0,
            Orientation::Coronal => 1,
            Orientation::Axial => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Sagittal => "sagittal",
            Orientation::Coronal => "coronal",
            Orientation::Axial => "axial",
        }
    }

    /// The two in-plane axes, in increasing order.
    pub fn plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::Sagittal => (1, 2),
            Orientation::Coronal => (0, 2),
            Orientation::Axial => (0, 1),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" | "sag" => Ok(Orientation::Sagittal),
            "coronal" | "cor" => Ok(Orientation::Coronal),
            "axial" | "axi" => Ok(Orientation::Axial),
            other => Err(Error::InvalidArgument(format!("unknown orientation '{other}'"))),
        }
    }
}

/// Orientation code in the usual three-letter form: letter `i` names the
/// anatomical direction that array axis `i` increases towards (R/L, A/P,
/// S/I). The canonical code is `RAS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AxisCode {
    /// `anatomical[i]` is the canonical axis (0 = left-right, 1 = posterior-anterior,
    /// 2 = inferior-superior) that array axis `i` runs along.
    anatomical: [usize; 3],
    /// `flipped[i]` is true when array axis `i` runs in the negative direction (L, P or I).
    flipped: [bool; 3],
}

impl AxisCode {
    pub const CANONICAL: AxisCode = AxisCode { anatomical: [0, 1, 2], flipped: [false; 3] };

    pub fn new(anatomical: [usize; 3], flipped: [bool; 3]) -> Option<Self> {
        let mut seen = [false; 3];
        for &a in &anatomical {
            if a > 2 || seen[a] {
                return None;
            }
            seen[a] = true;
        }
        Some(AxisCode { anatomical, flipped })
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::CANONICAL
    }

    pub fn anatomical(&self) -> [usize; 3] {
        self.anatomical
    }

    pub fn flipped(&self) -> [bool; 3] {
        self.flipped
    }
}

impl fmt::Display for AxisCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const POS: [char; 3] = ['R', 'A', 'S'];
        const NEG: [char; 3] = ['L', 'P', 'I'];
        for i in 0..3 {
            let a = self.anatomical[i];
            let c = if self.flipped[i] { NEG[a] } else { POS[a] };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for AxisCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let letters: Vec<char> = s.trim().chars().map(|c| c.to_ascii_uppercase()).collect();
        if letters.len() != 3 {
            return Err(Error::InvalidArgument(format!("orientation code '{s}' must have 3 letters")));
        }
        let mut anatomical = [0; 3];
        let mut flipped = [false; 3];
        for (i, c) in letters.iter().enumerate() {
            let (a, neg) = match c {
                'R' => (0, false),
                'L' => (0, true),
                'A' => (1, false),
                'P' => (1, true),
                'S' => (2, false),
                'I' => (2, true),
                _ => return Err(Error::InvalidArgument(format!("bad orientation letter '{c}' in '{s}'"))),
            };
            anatomical[i] = a;
            flipped[i] = neg;
        }
        AxisCode::new(anatomical, flipped)
            .ok_or_else(|| Error::InvalidArgument(format!("orientation code '{s}' repeats an axis")))
    }
}

impl Serialize for AxisCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AxisCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 3D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel size in mm, per array axis.
    pub spacing: [f64; 3],
    /// `None` when the source carried no usable orientation.
    pub axes: Option<AxisCode>,
    /// Where the volume was read from, for error messages.
    pub source: Option<PathBuf>,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], axes: Option<AxisCode>) -> Result<Self> {
        if data.shape().iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("volume shape {:?} has an empty axis", data.shape())));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Volume { data, spacing, axes, source: None })
    }

    /// A canonical volume with unit spacing.
    pub fn canonical(data: Array3<f32>) -> Result<Self> {
        Self::new(data, [1.0; 3], Some(AxisCode::CANONICAL))
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }
}

/// Binary segmentation aligned to a [`Volume`]. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    data: Array3<u8>,
}

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(LabelMask { data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelMask { data: Array3::zeros(shape) }
    }

    /// Any nonzero value becomes foreground.
    pub fn from_nonzero<T: Copy + PartialEq + Default>(data: &Array3<T>) -> Self {
        let zero = T::default();
        LabelMask { data: data.mapv(|v| u8::from(v != zero)) }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn get(&self, idx: [usize; 3]) -> bool {
        self.data[idx] == 1
    }
}

pub(crate) fn dims3<T>(a: &Array3<T>) -> [usize; 3] {
    let d = a.dim();
    [d.0, d.1, d.2]
}

/// A slice position along one orientation's axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub orientation: Orientation,
    pub index: usize,
}

impl SlicePlane {
    pub fn new(orientation: Orientation, index: usize, shape: [usize; 3]) -> Result<Self> {
        let extent = shape[orientation.axis()];
        if index >= extent {
            return Err(Error::InvalidArgument(format!(
                "{orientation} slice {index} out of range for extent {extent}"
            )));
        }
        Ok(SlicePlane { orientation, index })
    }
}

/// Maps data to `[0, 1]`; constant volumes become all zeros.
pub fn normalize_minmax(volume: &Volume) -> Volume {
    let mut out = volume.clone();
    normalize_in_place(&mut out.data);
    out
}

pub(crate) fn normalize_in_place(data: &mut Array3<f32>) {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        data.fill(0.0);
        return;
    }
    let range = hi - lo;
    data.mapv_inplace(|v| (v - lo) / range);
}

/// Permutation and flips that take a volume from its stored axis order to
/// canonical RAS order. Invertible exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalTransform {
    /// `perm[k]` is the source axis that becomes canonical axis `k`.
    pub perm: [usize; 3],
    /// `flip[k]` reverses canonical axis `k` after permutation.
    pub flip: [bool; 3],
    pub original_axes: AxisCode,
}

impl CanonicalTransform {
    pub fn identity() -> Self {
        CanonicalTransform { perm: [0, 1, 2], flip: [false; 3], original_axes: AxisCode::CANONICAL }
    }

    pub fn from_axes(axes: AxisCode) -> Self {
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for src in 0..3 {
            let k = axes.anatomical[src];
            perm[k] = src;
            flip[k] = axes.flipped[src];
        }
        CanonicalTransform { perm, flip, original_axes: axes }
    }

    pub fn is_identity(&self) -> bool {
        self.perm == [0, 1, 2] && self.flip == [false; 3]
    }

    pub fn apply<T: Clone>(&self, data: ArrayView3<'_, T>) -> Array3<T> {
        let mut view = data.permuted_axes(self.perm);
        for (k, &f) in self.flip.iter().enumerate() {
            if f {
                view.invert_axis(Axis(k));
            }
        }
        view.as_standard_layout().into_owned()
    }

    pub fn invert<T: Clone>(&self, data: ArrayView3<'_, T>) -> Array3<T> {
        let mut view = data;
        for (k, &f) in self.flip.iter().enumerate() {
            if f {
                view.invert_axis(Axis(k));
            }
        }
        let mut inverse = [0; 3];
        for (k, &src) in self.perm.iter().enumerate() {
            inverse[src] = k;
        }
        view.permuted_axes(inverse).as_standard_layout().into_owned()
    }

    pub fn apply_spacing(&self, spacing: [f64; 3]) -> [f64; 3] {
        [spacing[self.perm[0]], spacing[self.perm[1]], spacing[self.perm[2]]]
    }

    pub fn invert_shape(&self, canonical: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for k in 0..3 {
            out[self.perm[k]] = canonical[k];
        }
        out
    }
}

/// Reorders a volume (and optional mask) to canonical axis order.
pub fn to_canonical(
    volume: &Volume,
    mask: Option<&LabelMask>,
) -> Result<(Volume, Option<LabelMask>, CanonicalTransform)> {
    let axes = volume.axes.ok_or_else(|| Error::Orientation {
        path: volume.source.clone().unwrap_or_else(|| PathBuf::from("<in-memory volume>")),
    })?;
    if let Some(m) = mask {
        if m.shape() != volume.shape() {
            return Err(Error::shape(&volume.shape(), &m.shape()));
        }
    }
    let transform = CanonicalTransform::from_axes(axes);
    let out = Volume {
        data: transform.apply(volume.data.view()),
        spacing: transform.apply_spacing(volume.spacing),
        axes: Some(AxisCode::CANONICAL),
        source: volume.source.clone(),
    };
    let mask = mask.map(|m| LabelMask { data: transform.apply(m.data.view()) });
    Ok((out, mask, transform))
}

/// How neighbor channels are filled at the first and last slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    #[default]
    Replicate,
    Zero,
}

/// One plane of a 3D array along `orientation`.
pub fn slice_view<T>(data: &Array3<T>, orientation: Orientation, index: usize) -> ArrayView2<'_, T> {
    data.index_axis(Axis(orientation.axis()), index)
}

/// Extended-2D input for one plane: channels hold slices `index-1`,
/// `index`, `index+1`.
pub fn extract_slice_triplet(volume: &Volume, plane: SlicePlane, edge: EdgeMode) -> Array3<f32> {
    slice_triplet(&volume.data, plane.orientation, plane.index, edge)
}

pub(crate) fn slice_triplet(data: &Array3<f32>, orientation: Orientation, index: usize, edge: EdgeMode) -> Array3<f32> {
    let extent = data.shape()[orientation.axis()];
    let center = slice_view(data, orientation, index);
    let (h, w) = center.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    out.index_axis_mut(Axis(0), 1).assign(&center);
    let neighbors = [(0, index.checked_sub(1)), (2, Some(index + 1).filter(|&i| i < extent))];
    for (channel, neighbor) in neighbors {
        match (neighbor, edge) {
            (Some(i), _) => out.index_axis_mut(Axis(0), channel).assign(&slice_view(data, orientation, i)),
            (None, EdgeMode::Replicate) => out.index_axis_mut(Axis(0), channel).assign(&center),
            (None, EdgeMode::Zero) => {}
        }
    }
    out
}

/// Records where a crop/pad window sits relative to the original image so
/// the transformation can be undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub original: [usize; 2],
    pub target: [usize; 2],
    /// First copied row/column in the original image.
    pub src_offset: [usize; 2],
    /// Where that row/column lands in the target image.
    pub dst_offset: [usize; 2],
    /// Size of the copied overlap.
    pub extent: [usize; 2],
}

impl Placement {
    pub fn new(original: [usize; 2], target: [usize; 2]) -> Self {
        let mut src_offset = [0; 2];
        let mut dst_offset = [0; 2];
        let mut extent = [0; 2];
        for d in 0..2 {
            if original[d] >= target[d] {
                src_offset[d] = (original[d] - target[d]) / 2;
                extent[d] = target[d];
            } else {
                dst_offset[d] = (target[d] - original[d]) / 2;
                extent[d] = original[d];
            }
        }
        Placement { original, target, src_offset, dst_offset, extent }
    }

    /// Maps a target-image array back to the original grid; pixels outside
    /// the overlap are zero.
    pub fn restore<T: Clone + num_traits::Zero>(&self, image: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((self.original[0], self.original[1]));
        out.slice_mut(s![
            self.src_offset[0]..self.src_offset[0] + self.extent[0],
            self.src_offset[1]..self.src_offset[1] + self.extent[1]
        ])
        .assign(&image.slice(s![
            self.dst_offset[0]..self.dst_offset[0] + self.extent[0],
            self.dst_offset[1]..self.dst_offset[1] + self.extent[1]
        ]));
        out
    }

    pub(crate) fn apply<T: Clone + num_traits::Zero>(&self, image: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((self.target[0], self.target[1]));
        out.slice_mut(s![
            self.dst_offset[0]..self.dst_offset[0] + self.extent[0],
            self.dst_offset[1]..self.dst_offset[1] + self.extent[1]
        ])
        .assign(&image.slice(s![
            self.src_offset[0]..self.src_offset[0] + self.extent[0],
            self.src_offset[1]..self.src_offset[1] + self.extent[1]
        ]));
        out
    }
}

/// Center-crops and/or zero-pads `image` to `target`.
pub fn center_crop_pad<T: Clone + num_traits::Zero>(
    image: ArrayView2<'_, T>,
    target: [usize; 2],
) -> Result<(Array2<T>, Placement)> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!("crop target {target:?} must be positive")));
    }
    let (h, w) = image.dim();
    let placement = Placement::new([h, w], target);
    Ok((placement.apply(image), placement))
}
