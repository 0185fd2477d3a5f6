//! The 2D encoder-decoder used by each orientation: residual double-conv
//! blocks with batch normalization, bias-free padded 3×3 convolutions,
//! three-channel (extended-2D) input and a sigmoid or two-channel softmax
//! head.

mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{center_crop_pad, Orientation, Placement};
use layers::{
    concat_channels, head_activation, head_activation_backward, max_pool2, max_pool2_backward, relu, relu_backward,
    split_channels, upsample2, upsample2_backward, BatchNorm2d, Conv2d, Param,
};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

/// Floating-point element type the network can run in.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "sigmoid-1ch")]
    Sigmoid,
    #[serde(rename = "softmax-2ch")]
    Softmax,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Sigmoid => 1,
            Head::Softmax => 2,
        }
    }

    /// Index of the foreground probability channel.
    pub fn foreground(self) -> usize {
        self.channels() - 1
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" | "sigmoid-1ch" => Ok(Head::Sigmoid),
            "softmax" | "softmax-2ch" => Ok(Head::Softmax),
            other => Err(Error::InvalidArgument(format!("unknown head '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// Channels at the first level.
    pub base_width: usize,
    pub head: Head,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { depth: 4, base_width: 8, head: Head::Softmax, input_channels: 3 }
    }
}

impl NetworkConfig {
    /// VGG-11-shaped progression (64, 128, 256, 512, 512, ...) scaled so
    /// the first level has `base_width` channels.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width * (1usize << l.min(3))).collect()
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {h}x{w} is not divisible by 2^{} = {d}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Smallest network-compatible shape that contains `dims`.
    pub fn padded_shape(&self, dims: [usize; 2]) -> [usize; 2] {
        let d = self.divisor();
        dims.map(|n| n.max(1).div_ceil(d) * d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidArgument("base_width and input_channels must be positive".into()));
        }
        if self.depth > 8 {
            return Err(Error::InvalidArgument(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + conv1x1(x))`.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Real> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Conv2d<T>,
    cache: Option<(Array4<T>, Array4<T>)>,
}

impl<T: Real> ResBlock<T> {
    fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, false, rng),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, false, rng),
            bn2: BatchNorm2d::new(out_channels),
            shortcut: Conv2d::new(in_channels, out_channels, 1, false, rng),
            cache: None,
        }
    }

    fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let a = relu(self.bn1.forward(&self.conv1.forward(x)));
        let mut m = self.bn2.forward(&self.conv2.forward(&a));
        m += &self.shortcut.forward(x);
        relu(m)
    }

    fn forward_train(&mut self, x: Array4<T>) -> Array4<T> {
        let s = self.shortcut.forward_train(x.clone());
        let a = relu(self.bn1.forward_train(self.conv1.forward_train(x)));
        let mut m = self.bn2.forward_train(self.conv2.forward_train(a.clone()));
        m += &s;
        let y = relu(m);
        self.cache = Some((a, y.clone()));
        y
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (a, y) = self.cache.take().expect("backward without forward_train");
        let dsum = relu_backward(&y, dy.clone());
        let mut dx = self.shortcut.backward(&dsum);
        let da = self.conv2.backward(&self.bn2.backward(&dsum));
        let dz = relu_backward(&a, da);
        dx += &self.conv1.backward(&self.bn1.backward(&dz));
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.conv1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        out.extend(self.shortcut.params_mut());
        out
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![
            &mut self.conv1.weight.value,
            &mut self.bn1.gamma.value,
            &mut self.bn1.beta.value,
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
            &mut self.conv2.weight.value,
            &mut self.bn2.gamma.value,
            &mut self.bn2.beta.value,
            &mut self.bn2.running_mean,
            &mut self.bn2.running_var,
            &mut self.shortcut.weight.value,
        ]
    }
}

struct TrainCache<T: Real> {
    pool: Vec<(Vec<u32>, (usize, usize, usize, usize))>,
    probs: Array4<T>,
}

/// U-shaped encoder-decoder with skip connections.
pub struct UNet<T: Real> {
    config: NetworkConfig,
    encoder: Vec<ResBlock<T>>,
    /// `decoder[l]` produces level `l` from level `l + 1` and the level-`l` skip.
    decoder: Vec<ResBlock<T>>,
    head: Conv2d<T>,
    cache: Option<TrainCache<T>>,
}

impl<T: Real> Clone for UNet<T> {
    /// Clones parameters and statistics; any pending training cache is dropped.
    fn clone(&self) -> Self {
        UNet {
            config: self.config,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            cache: None,
        }
    }
}

impl<T: Real> fmt::Debug for UNet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UNet").field("config", &self.config).field("parameters", &self.parameter_count()).finish()
    }
}

impl<T: Real> UNet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.widths();
        let mut encoder = Vec::with_capacity(config.depth + 1);
        let mut in_ch = config.input_channels;
        for &w in &widths {
            encoder.push(ResBlock::new(in_ch, w, &mut rng));
            in_ch = w;
        }
        let decoder = (0..config.depth).map(|l| ResBlock::new(widths[l] + widths[l + 1], widths[l], &mut rng)).collect();
        let head = Conv2d::new(widths[0], config.head.channels(), 1, true, &mut rng);
        Ok(UNet { config, encoder, decoder, head, cache: None })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if c != self.config.input_channels {
            return Err(Error::shape(&[b, self.config.input_channels, h, w], x.shape()));
        }
        self.config.check_spatial(h, w)
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    /// Returns head probabilities `(B, C, H, W)`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = self.encoder[0].forward(x);
        for l in 0..depth {
            let pooled = max_pool2(&h).0;
            skips.push(h);
            h = self.encoder[l + 1].forward(&pooled);
        }
        for l in (0..depth).rev() {
            h = self.decoder[l].forward(&concat_channels(&skips[l], &upsample2(&h)));
        }
        Ok(head_activation(&self.head.forward(&h)))
    }

    /// Training-mode forward pass; caches everything `backward` needs.
    pub fn forward_train(&mut self, x: Array4<T>) -> Result<Array4<T>> {
        self.check_input(&x)?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut pool = Vec::with_capacity(depth);
        let mut h = self.encoder[0].forward_train(x);
        for l in 0..depth {
            let (pooled, arg) = max_pool2(&h);
            pool.push((arg, h.dim()));
            skips.push(h);
            h = self.encoder[l + 1].forward_train(pooled);
        }
        for l in (0..depth).rev() {
            let joined = concat_channels(&skips[l], &upsample2(&h));
            h = self.decoder[l].forward_train(joined);
        }
        let probs = head_activation(&self.head.forward_train(h));
        self.cache = Some(TrainCache { pool, probs: probs.clone() });
        Ok(probs)
    }

    /// Backpropagates a gradient with respect to the head probabilities
    /// returned by the last `forward_train`, accumulating parameter gradients.
    pub fn backward(&mut self, dprobs: &Array4<T>) -> Array4<T> {
        let TrainCache { pool, probs } = self.cache.take().expect("backward without forward_train");
        let widths = self.config.widths();
        let depth = self.config.depth;
        let mut dh = self.head.backward(&head_activation_backward(&probs, dprobs));
        let mut dskips = Vec::with_capacity(depth);
        for l in 0..depth {
            let d = self.decoder[l].backward(&dh);
            let (dskip, dup) = split_channels(&d, widths[l]);
            dskips.push(dskip);
            dh = upsample2_backward(&dup);
        }
        dh = self.encoder[depth].backward(&dh);
        for l in (0..depth).rev() {
            let (arg, dim) = &pool[l];
            let mut d = max_pool2_backward(&dh, arg, *dim);
            d += &dskips[l];
            dh = self.encoder[l].backward(&d);
        }
        dh
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Every stored array, including batch-norm running statistics.
    pub(crate) fn state_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(b.state_mut());
        }
        out.push(&mut self.head.weight.value);
        out.push(&mut self.head.bias.as_mut().expect("head has bias").value);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.clone().params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Final 1×1 layer, exposed for initialization experiments.
    pub fn head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.head
    }

    /// Foreground probability for a batch of inputs, `(B, H, W)`.
    pub fn foreground(&self, x: &Array4<T>) -> Result<Array3<T>> {
        let probs = self.forward(x)?;
        Ok(probs.index_axis(Axis(1), self.config.head.foreground()).to_owned())
    }

    /// Converts parameters to another precision; caches are dropped.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut out = UNet::<U>::new(self.config, 0).expect("validated config");
        let mut src = self.clone();
        for (dst, src) in out.state_mut().into_iter().zip(src.state_mut()) {
            *dst = src.iter().map(|v| U::from(*v).expect("float cast")).collect();
        }
        out
    }
}

impl UNet<f32> {
    /// Predicts a full slice triplet `(3, H, W)`: pad/crop to `crop`, run
    /// the network, and place the foreground activation back on the
    /// original grid (zero outside the crop window).
    pub fn predict_slice_with_crop(&self, triplet: ArrayView3<'_, f32>, crop: [usize; 2]) -> Result<Array2<f32>> {
        let (c, h, w) = triplet.dim();
        self.config.check_spatial(crop[0], crop[1])?;
        let mut input = Array4::<f32>::zeros((1, c, crop[0], crop[1]));
        let mut placement = Placement::new([h, w], crop);
        for ch in 0..c {
            let (plane, p) = center_crop_pad(triplet.index_axis(Axis(0), ch), crop)?;
            input.slice_mut(s![0, ch, .., ..]).assign(&plane);
            placement = p;
        }
        let fg = self.foreground(&input)?;
        Ok(placement.restore(fg.index_axis(Axis(0), 0)))
    }

    /// As [`Self::predict_slice_with_crop`] with the smallest padded shape,
    /// so nothing is cropped away.
    pub fn predict_slice(&self, triplet: ArrayView3<'_, f32>) -> Result<Array2<f32>> {
        let (_, h, w) = triplet.dim();
        self.predict_slice_with_crop(triplet, self.config.padded_shape([h, w]))
    }
}

/// Three independently parameterized networks, one per orientation.
#[derive(Debug, Clone)]
pub struct NetworkEnsemble {
    pub sagittal: UNet<f32>,
    pub coronal: UNet<f32>,
    pub axial: UNet<f32>,
}

impl NetworkEnsemble {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        Ok(NetworkEnsemble {
            sagittal: UNet::new(config, seed_for(seed, Orientation::Sagittal))?,
            coronal: UNet::new(config, seed_for(seed, Orientation::Coronal))?,
            axial: UNet::new(config, seed_for(seed, Orientation::Axial))?,
        })
    }

    pub fn get(&self, o: Orientation) -> &UNet<f32> {
        match o {
            Orientation::Sagittal => &self.sagittal,
            Orientation::Coronal => &self.coronal,
            Orientation::Axial => &self.axial,
        }
    }

    pub fn get_mut(&mut self, o: Orientation) -> &mut UNet<f32> {
        match o {
            Orientation::Sagittal => &mut self.sagittal,
            Orientation::Coronal => &mut self.coronal,
            Orientation::Axial => &mut self.axial,
        }
    }
}

/// Per-orientation seed derived from a master seed.
pub fn seed_for(master: u64, o: Orientation) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(o.axis() as u64 + 1).rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig { depth: 2, base_width: 2, head: Head::Softmax, input_channels: 3 }
    }

    #[test]
    fn widths_follow_vgg_shape() {
        let c = NetworkConfig { depth: 4, base_width: 8, ..Default::default() };
        assert_eq!(c.widths(), vec![8, 16, 32, 64, 64]);
        assert_eq!(c.padded_shape([91, 109]), [96, 112]);
    }

    #[test]
    fn shape_preserved_and_softmax_normalized() {
        let net = UNet::<f64>::new(NetworkConfig::default(), 1).unwrap();
        let x = Array4::from_shape_fn((2, 3, 64, 64), |(a, b, c, d)| ((a + b + c * d) % 7) as f64 / 7.0);
        let p = net.forward(&x).unwrap();
        assert_eq!(p.dim(), (2, 2, 64, 64));
        for lane in p.lanes(Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = UNet::<f32>::new(NetworkConfig::default(), 1).unwrap();
        let err = net.forward(&Array4::zeros((1, 3, 60, 60))).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn zero_head_gives_half() {
        let mut net = UNet::<f32>::new(tiny(), 4).unwrap();
        net.head_mut().weight.value.iter_mut().for_each(|w| *w = 0.0);
        let p = net.forward(&Array4::from_elem((1, 3, 8, 8), 0.3)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sigmoid_head_in_unit_interval() {
        let cfg = NetworkConfig { head: Head::Sigmoid, ..tiny() };
        let net = UNet::<f32>::new(cfg, 2).unwrap();
        let p = net.forward(&Array4::from_elem((1, 3, 12, 8), 0.7)).unwrap();
        assert_eq!(p.dim(), (1, 1, 12, 8));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn predict_slice_odd_sizes() {
        let net = UNet::<f32>::new(NetworkConfig::default(), 3).unwrap();
        let slice = Array3::<f32>::zeros((3, 91, 109));
        let out = net.predict_slice(slice.view()).unwrap();
        assert_eq!(out.dim(), (91, 109));
        assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ensemble_members_differ() {
        let e = NetworkEnsemble::new(tiny(), 9).unwrap();
        let mut a = e.sagittal.clone();
        let mut b = e.coronal.clone();
        assert_ne!(a.state_mut()[0], b.state_mut()[0]);
    }
}
