//! Deterministic synthetic head phantoms: an ellipsoidal "brain" with
//! ventricles, small bright distractors and two curved capsule-shaped target
//! structures placed symmetrically about the midsagittal plane. Resected
//! cohorts drop one structure and leave a bright, dark-rimmed cavity in
//! its place.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{normalize_in_place, LabelMask, Volume};

pub const MIN_EXTENT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cohort {
    Control,
    Atrophy,
    ResectedLeft,
    ResectedRight,
}

impl Cohort {
    pub fn name(self) -> &'static str {
        match self {
            Cohort::Control => "control",
            Cohort::Atrophy => "atrophy",
            Cohort::ResectedLeft => "resected-left",
            Cohort::ResectedRight => "resected-right",
        }
    }

    pub fn is_resected(self) -> bool {
        matches!(self, Cohort::ResectedLeft | Cohort::ResectedRight)
    }

    /// Number of target structures a phantom of this cohort carries.
    pub fn structure_count(self) -> usize {
        if self.is_resected() {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "control" => Ok(Cohort::Control),
            "atrophy" => Ok(Cohort::Atrophy),
            "resected-left" => Ok(Cohort::ResectedLeft),
            "resected-right" => Ok(Cohort::ResectedRight),
            other => Err(Error::InvalidArgument(format!("unknown cohort '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shape: [usize; 3],
    pub cohort: Cohort,
    /// Standard deviation of additive tissue noise, before normalization.
    pub noise_sigma: f64,
    pub count: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { seed: 0, shape: [64, 64, 64], cohort: Cohort::Control, noise_sigma: 0.03, count: 1 }
    }
}

/// One generated subject. `brain` is the ellipsoid the structures live in.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub id: String,
    pub cohort: Cohort,
    pub volume: Volume,
    pub mask: LabelMask,
    pub brain: LabelMask,
}

const TISSUE: f64 = 0.50;
const TARGET: f64 = 0.80;
const VENTRICLE: f64 = 0.25;
const RIM: f64 = 0.28;

/// A capsule bent along a parabola: centerline runs anterior-posterior and
/// sags inferiorly in the middle.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    center: [f64; 3],
    half_length: f64,
    bend: f64,
    /// Lateral tilt of the long axis, radians.
    tilt: f64,
    radius: f64,
}

impl Capsule {
    fn centerline(&self, t: f64) -> [f64; 3] {
        let y = t * self.half_length;
        [
            self.center[0] + y * self.tilt.sin(),
            self.center[1] + y * self.tilt.cos(),
            self.center[2] - self.bend * (1.0 - t * t),
        ]
    }

    /// Distance from `p` to the sampled centerline.
    fn distance(&self, p: [f64; 3]) -> f64 {
        const SAMPLES: usize = 48;
        let mut best = f64::INFINITY;
        for i in 0..=SAMPLES {
            let t = -1.0 + 2.0 * i as f64 / SAMPLES as f64;
            let c = self.centerline(t);
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            best = best.min(d);
        }
        best.sqrt()
    }

    fn bounds(&self, margin: f64, shape: [usize; 3]) -> [(usize, usize); 3] {
        let reach = self.half_length + self.radius + self.bend + margin + 1.0;
        [0, 1, 2].map(|a| {
            let lo = (self.center[a] - reach).floor().max(0.0) as usize;
            let hi = ((self.center[a] + reach).ceil() as usize + 1).min(shape[a]);
            (lo, hi)
        })
    }
}

fn ellipsoid(p: [f64; 3], center: [f64; 3], semi: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>()
}

/// Generates `spec.count` phantoms. Each phantom draws from its own
/// generator seeded by `(spec.seed, index)`, so any one can be regenerated
/// alone.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<Phantom>> {
    if spec.shape.iter().any(|&n| n < MIN_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "phantom shape {:?} is too small: every extent must be at least {MIN_EXTENT}",
            spec.shape
        )));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
    }
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}

pub fn phantom_seed(master: u64, cohort: Cohort, index: usize) -> u64 {
    let tag = cohort as u64 + 1;
    master
        .wrapping_mul(0xA24B_AED4_963E_E407)
        .wrapping_add(tag.wrapping_mul(0x9FB2_1C65_1E98_DF25))
        .wrapping_add(index as u64)
}

fn generate_one(spec: &PhantomSpec, index: usize) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(phantom_seed(spec.seed, spec.cohort, index));
    let shape = spec.shape;
    let s = shape.map(|n| n as f64);
    let mid = s.map(|n| (n - 1.0) / 2.0);

    let brain_center = [mid[0], mid[1] + rng.gen_range(-1.0..1.0), mid[2] + rng.gen_range(-1.0..1.0)];
    let brain_semi = [
        s[0] * rng.gen_range(0.40..0.44),
        s[1] * rng.gen_range(0.42..0.46),
        s[2] * rng.gen_range(0.38..0.42),
    ];
    // Low-frequency tissue shading.
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|_| rng.gen_range(0.05..0.2));
            (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.01..0.03))
        })
        .collect();
    let ventricles = {
        let dx = s[0] * rng.gen_range(0.06..0.08);
        let semi = [s[0] * 0.035, s[1] * rng.gen_range(0.12..0.15), s[2] * rng.gen_range(0.06..0.08)];
        let cz = mid[2] + s[2] * 0.08;
        [([mid[0] - dx, mid[1], cz], semi), ([mid[0] + dx, mid[1], cz], semi)]
    };

    let scale = if spec.cohort == Cohort::Atrophy { 0.82 } else { 1.0 };
    let offset = s[0] * rng.gen_range(0.20..0.23);
    let base = Capsule {
        center: [0.0, mid[1] - s[1] * 0.05 + rng.gen_range(-1.5..1.5), mid[2] - s[2] * 0.12 + rng.gen_range(-1.5..1.5)],
        half_length: s[1] * rng.gen_range(0.11..0.14) * scale,
        bend: s[2] * rng.gen_range(0.02..0.05),
        tilt: rng.gen_range(0.15..0.30),
        radius: s[0] * rng.gen_range(0.036..0.045) * scale.sqrt(),
    };
    // Left is the low-index half of axis 0.
    let mut left = base;
    left.center[0] = mid[0] - offset + rng.gen_range(-0.7..0.7);
    left.tilt = -base.tilt;
    let mut right = base;
    right.center[0] = mid[0] + offset + rng.gen_range(-0.7..0.7);
    right.radius *= rng.gen_range(0.95..1.05);
    right.half_length *= rng.gen_range(0.95..1.05);

    let (kept, removed): (Vec<Capsule>, Option<Capsule>) = match spec.cohort {
        Cohort::ResectedLeft => (vec![right], Some(left)),
        Cohort::ResectedRight => (vec![left], Some(right)),
        _ => (vec![left, right], None),
    };

    let distractors: Vec<([f64; 3], f64)> = (0..2)
        .map(|_| {
            let center = [
                mid[0] + rng.gen_range(-0.5..0.5) * brain_semi[0],
                mid[1] + rng.gen_range(0.3..0.6) * brain_semi[1],
                mid[2] + rng.gen_range(-0.2..0.5) * brain_semi[2],
            ];
            (center, s[0] * rng.gen_range(0.022..0.03))
        })
        .collect();

    let mut data = Array3::<f64>::zeros(shape);
    let mut brain = Array3::<u8>::zeros(shape);
    for ((i, j, k), v) in data.indexed_iter_mut() {
        let p = [i as f64, j as f64, k as f64];
        let e = ellipsoid(p, brain_center, brain_semi);
        if e > 1.0 {
            continue;
        }
        brain[[i, j, k]] = 1;
        let shade: f64 = waves.iter().map(|(kv, phase, amp)| amp * (kv[0] * p[0] + kv[1] * p[1] + kv[2] * p[2] + phase).sin()).sum();
        // Slightly darker cortical rim.
        let cortex = if e > 0.8 { -0.06 } else { 0.0 };
        let mut value = TISSUE + shade + cortex;
        for (c, semi) in &ventricles {
            if ellipsoid(p, *c, *semi) <= 1.0 {
                value = VENTRICLE;
            }
        }
        for (c, r) in &distractors {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            value += (TARGET - value) * (r + 0.5 - d).clamp(0.0, 1.0);
        }
        *v = value;
    }

    let mut mask = Array3::<u8>::zeros(shape);
    for cap in &kept {
        let [(x0, x1), (y0, y1), (z0, z1)] = cap.bounds(1.0, shape);
        for i in x0..x1 {
            for j in y0..y1 {
                for k in z0..z1 {
                    if brain[[i, j, k]] == 0 {
                        continue;
                    }
                    let d = cap.distance([i as f64, j as f64, k as f64]);
                    let occupancy = (cap.radius + 0.5 - d).clamp(0.0, 1.0);
                    if occupancy > 0.0 {
                        let v = &mut data[[i, j, k]];
                        *v += (TARGET - *v) * occupancy;
                    }
                    if d <= cap.radius {
                        mask[[i, j, k]] = 1;
                    }
                }
            }
        }
    }

    if let Some(cap) = removed {
        // Cavity: the old structure slightly enlarged, bright and speckled
        // inside, wrapped in a dark rim.
        let mut cavity = cap;
        cavity.radius *= rng.gen_range(1.0..1.15);
        let speckle = Normal::new(0.0, 0.05).expect("valid std");
        let rim_width = rng.gen_range(0.8..1.3);
        let [(x0, x1), (y0, y1), (z0, z1)] = cavity.bounds(rim_width + 1.0, shape);
        for i in x0..x1 {
            for j in y0..y1 {
                for k in z0..z1 {
                    if brain[[i, j, k]] == 0 {
                        continue;
                    }
                    let d = cavity.distance([i as f64, j as f64, k as f64]);
                    let v = &mut data[[i, j, k]];
                    if d <= cavity.radius {
                        *v = TARGET * rng.gen_range(0.9..1.0) + speckle.sample(&mut rng);
                    } else if d <= cavity.radius + rim_width {
                        *v = RIM;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid std");
    for ((i, j, k), v) in data.indexed_iter_mut() {
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        // Magnitude-style background: noise stays non-negative outside the head.
        *v = if brain[[i, j, k]] == 1 { *v + n } else { (0.5 * n).abs() };
    }

    let mut volume_data = data.mapv(|v| v as f32);
    normalize_in_place(&mut volume_data);
    let volume = Volume::canonical(volume_data)?;
    Ok(Phantom {
        id: format!("{}-{:03}", spec.cohort.name(), index),
        cohort: spec.cohort,
        volume,
        mask: LabelMask::new(mask)?,
        brain: LabelMask::new(brain)?,
    })
}

/// Three disjoint subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Cohort-stratified holdout split of item indices. `cohort_of(i)` gives
/// the stratum of item `i`. Sizes are apportioned over the whole dataset
/// first (largest remainder), then distributed over strata.
pub fn split_holdout<F>(n: usize, cohort_of: F, fractions: (f64, f64, f64), seed: u64) -> Result<Split<usize>>
where
    F: Fn(usize) -> Cohort,
{
    let (ft, fv, fs) = fractions;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let totals = apportion(n, [ft, fv, fs]);
    for (total, name) in totals.iter().zip(["train", "val", "test"]) {
        if *total == 0 {
            return Err(Error::EmptySubset(name));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: std::collections::BTreeMap<Cohort, Vec<usize>> = Default::default();
    for i in 0..n {
        strata.entry(cohort_of(i)).or_default().push(i);
    }
    for items in strata.values_mut() {
        shuffle(items, &mut rng);
    }

    // Deal items round-robin across strata into one interleaved order, then
    // cut that order into consecutive runs: each subset gets a near-equal
    // share of every stratum.
    let mut queues: Vec<std::collections::VecDeque<usize>> = strata.into_values().map(Into::into).collect();
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        for q in queues.iter_mut() {
            if let Some(i) = q.pop_front() {
                order.push(i);
            }
        }
    }
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    // Test and validation draw from the interleaved order first so small
    // subsets still alternate cohorts.
    let (test, rest) = order.split_at(totals[2]);
    let (val, train) = rest.split_at(totals[1]);
    split.test = test.to_vec();
    split.val = val.to_vec();
    split.train = train.to_vec();
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Largest-remainder apportionment of `n` items to fractions.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * n as f64);
    let mut out = raw.map(|r| (r + 1e-9).floor() as usize);
    let mut left = n - out.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - out[b] as f64).total_cmp(&(raw[a] - out[a] as f64)).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::{label_components, Connectivity};

    fn spec(cohort: Cohort, count: usize) -> PhantomSpec {
        PhantomSpec { seed: 1, cohort, count, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate(&spec(Cohort::Control, 2)).unwrap();
        let b = generate(&spec(Cohort::Control, 2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume.data, y.volume.data);
            assert_eq!(x.mask, y.mask);
        }
        assert_ne!(a[0].volume.data, a[1].volume.data);
    }

    #[test]
    fn component_counts_and_sizes() {
        for cohort in [Cohort::Control, Cohort::Atrophy, Cohort::ResectedLeft, Cohort::ResectedRight] {
            for p in generate(&spec(cohort, 3)).unwrap() {
                let c = label_components(&p.mask, Connectivity::TwentySix);
                assert_eq!(c.count(), cohort.structure_count(), "{cohort}");
                for &size in &c.sizes {
                    assert!((150..=600).contains(&size), "{cohort} structure of {size} voxels");
                }
            }
        }
    }

    #[test]
    fn resected_left_has_empty_left_half() {
        for p in generate(&spec(Cohort::ResectedLeft, 3)).unwrap() {
            let half = p.mask.shape()[0] / 2;
            assert!(p.mask.data().slice(ndarray::s![..half, .., ..]).iter().all(|&v| v == 0));
            assert!(p.mask.data().slice(ndarray::s![half.., .., ..]).iter().any(|&v| v == 1));
        }
    }

    #[test]
    fn mask_inside_brain_and_separated() {
        for p in generate(&spec(Cohort::Control, 3)).unwrap() {
            for (idx, &m) in p.mask.data().indexed_iter() {
                if m == 1 {
                    assert_eq!(p.brain.data()[idx], 1);
                }
            }
            let half = p.mask.shape()[0] / 2;
            let xs: Vec<usize> = p.mask.data().indexed_iter().filter(|(_, &v)| v == 1).map(|((i, _, _), _)| i).collect();
            let left_max = xs.iter().filter(|&&x| x < half).max().unwrap();
            let right_min = xs.iter().filter(|&&x| x >= half).min().unwrap();
            assert!(right_min - left_max >= 3, "gap of {} voxels", right_min - left_max - 1);
        }
    }

    #[test]
    fn small_shape_rejected() {
        let s = PhantomSpec { shape: [16, 16, 16], ..Default::default() };
        assert!(generate(&s).is_err());
    }

    #[test]
    fn normalized_volume() {
        let p = &generate(&spec(Cohort::Atrophy, 1)).unwrap()[0];
        let max = p.volume.data.iter().cloned().fold(f32::MIN, f32::max);
        let min = p.volume.data.iter().cloned().fold(f32::MAX, f32::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn holdout_sizes() {
        let s = split_holdout(10, |_| Cohort::Control, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split_holdout(10, |_| Cohort::Control, (0.8, 0.1, 0.1), 3).unwrap());
    }

    #[test]
    fn holdout_stratified() {
        let cohort = |i: usize| if i % 2 == 0 { Cohort::Control } else { Cohort::ResectedLeft };
        for seed in 0..20 {
            let s = split_holdout(20, cohort, (0.7, 0.1, 0.2), seed).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 2, 4));
            for subset in [&s.train, &s.val, &s.test] {
                let controls = subset.iter().filter(|&&i| cohort(i) == Cohort::Control).count() as isize;
                let others = subset.len() as isize - controls;
                assert!((controls - others).abs() <= 1, "{subset:?}");
            }
        }
    }

    #[test]
    fn holdout_errors() {
        assert!(matches!(split_holdout(3, |_| Cohort::Control, (0.8, 0.1, 0.1), 0), Err(Error::EmptySubset(_))));
        assert!(split_holdout(0, |_| Cohort::Control, (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_holdout(10, |_| Cohort::Control, (0.8, 0.1, 0.2), 0).is_err());
    }
}
