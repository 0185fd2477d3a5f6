//! Runtime patch sampling: positive patches centered on the structure's
//! border, negative patches from the brain, extended-2D channels and
//! random augmentation. Nothing is cached between epochs.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantoms::{Cohort, Phantom};
use crate::volumes::{slice_view, EdgeMode, LabelMask, Orientation, Volume};

/// Intensity above which a voxel of a normalized volume counts as brain
/// when no explicit brain mask is available.
pub const BRAIN_THRESHOLD: f32 = 0.1;

/// A training or evaluation subject in canonical orientation.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub cohort: Option<Cohort>,
    pub volume: Volume,
    pub mask: LabelMask,
    pub brain: LabelMask,
}

impl Subject {
    /// Builds a subject, deriving the brain region by thresholding.
    pub fn new(id: impl Into<String>, volume: Volume, mask: LabelMask) -> Result<Self> {
        if volume.shape() != mask.shape() {
            return Err(Error::shape(&volume.shape(), &mask.shape()));
        }
        let brain = LabelMask::from_nonzero(&volume.data.mapv(|v| u8::from(v > BRAIN_THRESHOLD)));
        Ok(Subject { id: id.into(), cohort: None, volume, mask, brain })
    }
}

impl From<Phantom> for Subject {
    fn from(p: Phantom) -> Self {
        Subject { id: p.id, cohort: Some(p.cohort), volume: p.volume, mask: p.mask, brain: p.brain }
    }
}

/// Where negative patch centers may come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScope {
    /// Brain voxels on slices that contain some of the structure.
    #[default]
    StructureSlices,
    /// Any brain voxel.
    Brain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub intensity_shift: [f32; 2],
    pub rotation_degrees: [f64; 2],
    /// Percent.
    pub scale_percent: [f64; 2],
    pub noise_mean: f64,
    pub noise_variance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            intensity_shift: [-0.05, 0.05],
            rotation_degrees: [-10.0, 10.0],
            scale_percent: [-10.0, 10.0],
            noise_mean: 0.0,
            noise_variance: 0.0002,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch_size: [usize; 2],
    pub positive_fraction: f64,
    pub orientation: Orientation,
    pub epoch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    #[serde(default)]
    pub negative_scope: NegativeScope,
    #[serde(default)]
    pub edge_mode: EdgeMode,
}

impl SamplerConfig {
    pub fn new(orientation: Orientation, seed: u64) -> Self {
        SamplerConfig {
            patch_size: [64, 64],
            positive_fraction: 0.8,
            orientation,
            epoch_size: default_epoch_size(orientation),
            augment: AugmentConfig::default(),
            seed,
            negative_scope: NegativeScope::default(),
            edge_mode: EdgeMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("patch size {:?} must be positive", self.patch_size)));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::InvalidArgument(format!(
                "positive_fraction {} must be in [0, 1]",
                self.positive_fraction
            )));
        }
        if self.augment.noise_variance < 0.0 {
            return Err(Error::InvalidArgument("noise variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Patches per epoch for each orientation at full scale.
pub fn default_epoch_size(o: Orientation) -> usize {
    match o {
        Orientation::Sagittal => 5000,
        Orientation::Coronal => 4000,
        Orientation::Axial => 3000,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Draw {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: String,
    pub orientation: Orientation,
    /// Canonical voxel at the patch center.
    pub center: [usize; 3],
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct Patch {
    /// `(3, H, W)`.
    pub input: Array3<f32>,
    /// `(H, W)`, values 0 or 1.
    pub target: Array2<u8>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `(B, 3, H, W)`.
    pub inputs: Array4<f32>,
    /// `(B, H, W)`, values 0 or 1.
    pub targets: Array3<u8>,
    pub provenance: Vec<Provenance>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    fn stack(patches: Vec<Patch>) -> Self {
        let b = patches.len();
        let (c, h, w) = patches[0].input.dim();
        let mut inputs = Array4::<f32>::zeros((b, c, h, w));
        let mut targets = Array3::<u8>::zeros((b, h, w));
        let mut provenance = Vec::with_capacity(b);
        for (n, p) in patches.into_iter().enumerate() {
            inputs.index_axis_mut(Axis(0), n).assign(&p.input);
            targets.index_axis_mut(Axis(0), n).assign(&p.target);
            provenance.push(p.provenance);
        }
        PatchBatch { inputs, targets, provenance }
    }
}

/// Whether mask voxel `idx` touches background through an in-plane edge.
/// Neighbors outside the grid count as background.
pub fn is_border_voxel(mask: &LabelMask, idx: [usize; 3], orientation: Orientation) -> bool {
    if !mask.get(idx) {
        return false;
    }
    let shape = mask.shape();
    let (a, b) = orientation.plane_axes();
    for axis in [a, b] {
        for delta in [-1isize, 1] {
            let v = idx[axis] as isize + delta;
            if v < 0 || v >= shape[axis] as isize {
                return true;
            }
            let mut n = idx;
            n[axis] = v as usize;
            if !mask.get(n) {
                return true;
            }
        }
    }
    false
}

/// Candidate patch centers of one subject for one orientation, as flat
/// C-order voxel indices.
#[derive(Debug, Clone)]
struct Candidates {
    positive: Vec<u32>,
    negative: Vec<u32>,
}

fn flat(idx: [usize; 3], shape: [usize; 3]) -> u32 {
    ((idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]) as u32
}

fn unflat(i: u32, shape: [usize; 3]) -> [usize; 3] {
    let i = i as usize;
    [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]]
}

fn candidates(subject: &Subject, orientation: Orientation, scope: NegativeScope) -> Candidates {
    let shape = subject.mask.shape();
    let axis = orientation.axis();
    let mut has_structure = vec![false; shape[axis]];
    let mut positive = Vec::new();
    for ((i, j, k), &m) in subject.mask.data().indexed_iter() {
        if m == 0 {
            continue;
        }
        let idx = [i, j, k];
        has_structure[idx[axis]] = true;
        if is_border_voxel(&subject.mask, idx, orientation) {
            positive.push(flat(idx, shape));
        }
    }
    let negative = subject
        .brain
        .data()
        .indexed_iter()
        .filter(|&((i, j, k), &b)| {
            b != 0 && (scope == NegativeScope::Brain || has_structure[[i, j, k][axis]])
        })
        .map(|((i, j, k), _)| flat([i, j, k], shape))
        .collect();
    Candidates { positive, negative }
}

/// Draws patches from a fixed set of subjects for one orientation.
#[derive(Debug)]
pub struct Sampler<'a> {
    subjects: &'a [Subject],
    config: SamplerConfig,
    candidates: Vec<Candidates>,
    with_positive: Vec<usize>,
    with_negative: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(subjects: &'a [Subject], config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if subjects.is_empty() {
            return Err(Error::EmptySubset("sampler subjects"));
        }
        let candidates: Vec<Candidates> =
            subjects.iter().map(|s| candidates(s, config.orientation, config.negative_scope)).collect();
        let with_positive: Vec<usize> = (0..subjects.len()).filter(|&i| !candidates[i].positive.is_empty()).collect();
        let with_negative: Vec<usize> = (0..subjects.len()).filter(|&i| !candidates[i].negative.is_empty()).collect();
        if with_positive.is_empty() && config.positive_fraction > 0.0 {
            return Err(Error::EmptyMask("no subject has structure voxels to center positive patches on"));
        }
        if with_negative.is_empty() && config.positive_fraction < 1.0 {
            return Err(Error::EmptyMask("no subject has brain voxels to center negative patches on"));
        }
        Ok(Sampler { subjects, config, candidates, with_positive, with_negative })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// One patch from subject `subject` (an index into the sampler's
    /// subjects), not augmented.
    pub fn sample_patch<R: Rng>(&self, subject: usize, draw: Draw, rng: &mut R) -> Result<Patch> {
        let s = self.subjects.get(subject).ok_or_else(|| {
            Error::InvalidArgument(format!("subject index {subject} out of range ({})", self.subjects.len()))
        })?;
        let pool = match draw {
            Draw::Positive => &self.candidates[subject].positive,
            Draw::Negative => &self.candidates[subject].negative,
        };
        if pool.is_empty() {
            return Err(match draw {
                Draw::Positive => Error::EmptyMask("positive draw on a subject without structure voxels"),
                Draw::Negative => Error::EmptyMask("negative draw on a subject without brain voxels"),
            });
        }
        let center = unflat(pool[rng.gen_range(0..pool.len())], s.mask.shape());
        let (input, target) =
            extract_patch(&s.volume.data, s.mask.data(), self.config.orientation, center, self.config.patch_size, self.config.edge_mode);
        Ok(Patch {
            input,
            target,
            provenance: Provenance {
                subject: s.id.clone(),
                orientation: self.config.orientation,
                center,
                positive: draw == Draw::Positive,
            },
        })
    }

    /// Draws one random (augmented) patch, positive with the configured
    /// probability.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Patch {
        let draw = if rng.gen_bool(self.config.positive_fraction) { Draw::Positive } else { Draw::Negative };
        let pool = match draw {
            Draw::Positive => &self.with_positive,
            Draw::Negative => &self.with_negative,
        };
        let subject = pool[rng.gen_range(0..pool.len())];
        let patch = self.sample_patch(subject, draw, rng).expect("candidate pools are non-empty");
        let (input, target) = augment_patch(patch.input, patch.target, &self.config.augment, rng);
        Patch { input, target, provenance: patch.provenance }
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.config.epoch_size.div_ceil(batch_size.max(1))
    }

    /// Batch `index` of `epoch`. Each batch has its own generator derived
    /// from `(seed, epoch, index)`, so batches can be produced in any order
    /// or in parallel with identical results.
    pub fn batch(&self, epoch: usize, index: usize, batch_size: usize) -> PatchBatch {
        let batch_size = batch_size.max(1);
        let start = index * batch_size;
        let n = batch_size.min(self.config.epoch_size.saturating_sub(start)).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(self.config.seed, epoch, index));
        PatchBatch::stack((0..n).map(|_| self.draw(&mut rng)).collect())
    }

    /// All batches of one epoch, in order.
    pub fn epoch(&self, epoch: usize, batch_size: usize) -> impl Iterator<Item = PatchBatch> + '_ {
        (0..self.batches_per_epoch(batch_size)).map(move |i| self.batch(epoch, i, batch_size))
    }
}

fn batch_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Cuts a `size` window centered on `center` out of the slice through
/// `center` and its two neighbors. The center lands at `(H/2, W/2)`;
/// pixels outside the slice are zero.
pub fn extract_patch(
    data: &Array3<f32>,
    mask: &Array3<u8>,
    orientation: Orientation,
    center: [usize; 3],
    size: [usize; 2],
    edge: EdgeMode,
) -> (Array3<f32>, Array2<u8>) {
    let axis = orientation.axis();
    let extent = data.shape()[axis];
    let (a, b) = orientation.plane_axes();
    let index = center[axis];
    let origin = [center[a] as isize - (size[0] / 2) as isize, center[b] as isize - (size[1] / 2) as isize];
    let plane_dims = [data.shape()[a], data.shape()[b]];

    let copy = |src: ndarray::ArrayView2<'_, f32>, dst: &mut ndarray::ArrayViewMut2<'_, f32>| {
        for r in 0..size[0] {
            let sr = origin[0] + r as isize;
            if sr < 0 || sr >= plane_dims[0] as isize {
                continue;
            }
            for c in 0..size[1] {
                let sc = origin[1] + c as isize;
                if sc >= 0 && sc < plane_dims[1] as isize {
                    dst[[r, c]] = src[[sr as usize, sc as usize]];
                }
            }
        }
    };

    let mut input = Array3::<f32>::zeros((3, size[0], size[1]));
    let neighbors = [index.checked_sub(1), Some(index), Some(index + 1).filter(|&i| i < extent)];
    for (channel, slice) in neighbors.into_iter().enumerate() {
        let slice = match (slice, edge) {
            (Some(i), _) => i,
            (None, EdgeMode::Replicate) => index,
            (None, EdgeMode::Zero) => continue,
        };
        let mut dst = input.index_axis_mut(Axis(0), channel);
        copy(slice_view(data, orientation, slice), &mut dst);
    }

    let mut target = Array2::<u8>::zeros((size[0], size[1]));
    let m = slice_view(mask, orientation, index);
    for r in 0..size[0] {
        let sr = origin[0] + r as isize;
        if sr < 0 || sr >= plane_dims[0] as isize {
            continue;
        }
        for c in 0..size[1] {
            let sc = origin[1] + c as isize;
            if sc >= 0 && sc < plane_dims[1] as isize {
                target[[r, c]] = u8::from(m[[sr as usize, sc as usize]] != 0);
            }
        }
    }
    (input, target)
}

/// Random rotation and scaling about the patch center (bilinear for the
/// input, nearest for the target), then an intensity shift with clamping
/// to [0, 1], then Gaussian noise on the input only.
pub fn augment_patch<R: Rng>(
    input: Array3<f32>,
    target: Array2<u8>,
    config: &AugmentConfig,
    rng: &mut R,
) -> (Array3<f32>, Array2<u8>) {
    if !config.enabled {
        return (input, target);
    }
    let angle = uniform(rng, config.rotation_degrees).to_radians();
    let scale = 1.0 + uniform(rng, config.scale_percent) / 100.0;
    let (mut input, target) = if angle == 0.0 && scale == 1.0 {
        (input, target)
    } else {
        warp(&input, &target, angle, scale)
    };

    let shift = if config.intensity_shift[0] < config.intensity_shift[1] {
        rng.gen_range(config.intensity_shift[0]..config.intensity_shift[1])
    } else {
        config.intensity_shift[0]
    };
    if shift != 0.0 {
        input.mapv_inplace(|v| (v + shift).clamp(0.0, 1.0));
    }

    if config.noise_variance > 0.0 {
        let noise = Normal::new(config.noise_mean, config.noise_variance.sqrt()).expect("valid noise std");
        input.mapv_inplace(|v| v + noise.sample(rng) as f32);
    } else if config.noise_mean != 0.0 {
        input.mapv_inplace(|v| v + config.noise_mean as f32);
    }
    (input, target)
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] < range[1] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn warp(input: &Array3<f32>, target: &Array2<u8>, angle: f64, scale: f64) -> (Array3<f32>, Array2<u8>) {
    let (c, h, w) = input.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut tout = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse map: output pixel back to its source location.
            let dy = (y as f64 - cy) / scale;
            let dx = (x as f64 - cx) / scale;
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;

            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                tout[[y, x]] = target[[ny as usize, nx as usize]];
            }

            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let sample = |ch: usize, yy: f64, xx: f64| -> f32 {
                if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                    0.0
                } else {
                    input[[ch, yy as usize, xx as usize]]
                }
            };
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * sample(ch, y0, x0) + fx * sample(ch, y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * sample(ch, y0 + 1.0, x0) + fx * sample(ch, y0 + 1.0, x0 + 1.0));
                out[[ch, y, x]] = v;
            }
        }
    }
    (out, tout)
}
