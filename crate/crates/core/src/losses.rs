//! Overlap and surface losses with analytic gradients with respect to the
//! predicted probabilities.
//!
//! Every loss sums over all voxels it is given. During training that is the
//! whole batch, so patches with an empty target still contribute through
//! the denominators.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array2, ArrayView, ArrayView2, Axis, Dimension, RemoveAxis, Zip};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer for absent-class weights in the generalized Dice loss.
pub const GDL_EPSILON: f64 = 1e-6;

fn check_shapes<T, D: Dimension>(p: &ArrayView<'_, T, D>, g: &ArrayView<'_, T, D>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(g.shape(), p.shape()));
    }
    Ok(())
}

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("float cast")
}

/// `2 Σ p g / (Σ p² + Σ g²)`; two all-zero inputs score 1.
pub fn dice_coefficient<T: Float, D: Dimension>(p: ArrayView<'_, T, D>, g: ArrayView<'_, T, D>) -> Result<T> {
    check_shapes(&p, &g)?;
    let (inter, union) = dice_sums(&p, &g);
    Ok(if union == T::zero() { T::one() } else { (inter + inter) / union })
}

fn dice_sums<T: Float, D: Dimension>(p: &ArrayView<'_, T, D>, g: &ArrayView<'_, T, D>) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    Zip::from(p).and(g).for_each(|&p, &g| {
        inter = inter + p * g;
        union = union + p * p + g * g;
    });
    (inter, union)
}

pub fn dice_loss<T: Float, D: Dimension>(p: ArrayView<'_, T, D>, g: ArrayView<'_, T, D>) -> Result<T> {
    Ok(T::one() - dice_coefficient(p, g)?)
}

/// Dice loss and its gradient with respect to `p`.
pub fn dice_loss_grad<T: Float, D: Dimension>(
    p: ArrayView<'_, T, D>,
    g: ArrayView<'_, T, D>,
) -> Result<(T, Array<T, D>)> {
    check_shapes(&p, &g)?;
    let (inter, union) = dice_sums(&p, &g);
    if union == T::zero() {
        return Ok((T::zero(), Array::zeros(p.raw_dim())));
    }
    let two = cast::<T>(2.0);
    let loss = T::one() - two * inter / union;
    let u2 = union * union;
    let mut grad = Array::zeros(p.raw_dim());
    Zip::from(&mut grad).and(&p).and(&g).for_each(|d, &p, &g| {
        *d = -(two * g / union - two * inter * two * p / u2);
    });
    Ok((loss, grad))
}

fn check_one_hot<T: Float, D: RemoveAxis>(g: &ArrayView<'_, T, D>) -> Result<()> {
    if g.ndim() < 1 || g.shape()[0] < 2 {
        return Err(Error::InvalidArgument("generalized Dice needs at least two class channels on axis 0".into()));
    }
    let classes: Vec<_> = g.axis_iter(Axis(0)).collect();
    let n = classes[0].len();
    let flat: Vec<Vec<T>> = classes.iter().map(|c| c.iter().copied().collect()).collect();
    for i in 0..n {
        let mut sum = T::zero();
        for c in &flat {
            let v = c[i];
            if v != T::zero() && v != T::one() {
                return Err(Error::InvalidArgument("target is not one-hot: non-binary value".into()));
            }
            sum = sum + v;
        }
        if sum != T::one() {
            return Err(Error::InvalidArgument("target is not one-hot: classes do not sum to 1".into()));
        }
    }
    Ok(())
}

struct GdlParts<T> {
    weights: Vec<T>,
    num: T,
    den: T,
}

fn gdl_parts<T: Float, D: RemoveAxis>(p: &ArrayView<'_, T, D>, g: &ArrayView<'_, T, D>) -> GdlParts<T> {
    let eps = cast::<T>(GDL_EPSILON);
    let mut weights = Vec::new();
    let mut num = T::zero();
    let mut den = T::zero();
    for (pc, gc) in p.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))) {
        let volume = gc.iter().fold(T::zero(), |a, &v| a + v) + eps;
        let w = T::one() / (volume * volume);
        let mut inter = T::zero();
        let mut union = T::zero();
        Zip::from(&pc).and(&gc).for_each(|&p, &g| {
            inter = inter + p * g;
            union = union + p + g;
        });
        num = num + w * inter;
        den = den + w * union;
        weights.push(w);
    }
    GdlParts { weights, num, den }
}

/// Generalized Dice loss over class axis 0:
/// `1 − 2 Σ_l w_l Σ_i p g / Σ_l w_l Σ_i (p + g)` with `w_l = 1 / (Σ_i g + ε)²`.
pub fn generalized_dice_loss<T: Float, D: RemoveAxis>(p: ArrayView<'_, T, D>, g: ArrayView<'_, T, D>) -> Result<T> {
    check_shapes(&p, &g)?;
    check_one_hot(&g)?;
    let parts = gdl_parts(&p, &g);
    Ok(T::one() - cast::<T>(2.0) * parts.num / parts.den)
}

pub fn generalized_dice_loss_grad<T: Float, D: RemoveAxis>(
    p: ArrayView<'_, T, D>,
    g: ArrayView<'_, T, D>,
) -> Result<(T, Array<T, D>)> {
    check_shapes(&p, &g)?;
    check_one_hot(&g)?;
    let GdlParts { weights, num, den } = gdl_parts(&p, &g);
    let two = cast::<T>(2.0);
    let loss = T::one() - two * num / den;
    let mut grad = Array::zeros(p.raw_dim());
    for (l, (mut dc, gc)) in grad.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))).enumerate() {
        let w = weights[l];
        Zip::from(&mut dc).and(&gc).for_each(|d, &g| {
            *d = -two * w * (g * den - num) / (den * den);
        });
    }
    Ok((loss, grad))
}

/// Signed Euclidean distance to a 2D target's boundary, in pixels.
///
/// The boundary is the set of foreground pixels with a background pixel
/// among their 4 in-patch neighbours; phi is the distance to the nearest of
/// them, negated inside the target. A full-foreground patch has no boundary
/// and is measured from just outside the patch (all phi ≤ 0). A target with
/// no foreground likewise gets the distance to the nearest pixel outside the
/// patch (always ≥ 1), and `empty_target` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub phi: Array2<f64>,
    pub empty_target: bool,
}

/// Exact squared Euclidean distance transform of a 1D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest pixel where `site` holds.
fn squared_edt(site: &Array2<bool>) -> Array2<f64> {
    let (h, w) = site.dim();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut buf = vec![0f64; n];
    let mut tmp = Array2::<f64>::zeros((h, w));
    for j in 0..w {
        let f: Vec<f64> = (0..h).map(|i| if site[[i, j]] { 0.0 } else { f64::INFINITY }).collect();
        edt_1d(&f, &mut buf[..h], &mut v, &mut z);
        for i in 0..h {
            tmp[[i, j]] = buf[i];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        let f: Vec<f64> = tmp.row(i).to_vec();
        edt_1d(&f, &mut buf[..w], &mut v, &mut z);
        for j in 0..w {
            out[[i, j]] = buf[j];
        }
    }
    out
}

pub fn signed_distance_map<T: Copy + PartialEq + Default>(g: ArrayView2<'_, T>) -> DistanceMap {
    let zero = T::default();
    let inside = g.mapv(|v| v != zero);
    let (h, w) = inside.dim();
    if !inside.iter().any(|&b| b) {
        let phi = Array2::from_shape_fn((h, w), |(i, j)| {
            let d = (i + 1).min(j + 1).min(h - i).min(w - j);
            d as f64
        });
        return DistanceMap { phi, empty_target: true };
    }
    let boundary = Array2::from_shape_fn((h, w), |(i, j)| {
        inside[[i, j]]
            && ((i > 0 && !inside[[i - 1, j]])
                || (i + 1 < h && !inside[[i + 1, j]])
                || (j > 0 && !inside[[i, j - 1]])
                || (j + 1 < w && !inside[[i, j + 1]]))
    });
    let phi = if boundary.iter().any(|&b| b) {
        let d = squared_edt(&boundary);
        Array2::from_shape_fn((h, w), |(i, j)| {
            let r = d[[i, j]].sqrt();
            if inside[[i, j]] { -r } else { r }
        })
    } else {
        Array2::from_shape_fn((h, w), |(i, j)| 1.0 - ((i + 1).min(j + 1).min(h - i).min(w - j)) as f64)
    };
    DistanceMap { phi, empty_target: false }
}

/// Mean over pixels of `phi · p`, with `p` the foreground probability.
pub fn surface_term<T: Float, D: Dimension>(p_fg: ArrayView<'_, T, D>, phi: ArrayView<'_, f64, D>) -> Result<T> {
    if p_fg.shape() != phi.shape() {
        return Err(Error::shape(phi.shape(), p_fg.shape()));
    }
    let n = cast::<T>(p_fg.len() as f64);
    let mut acc = T::zero();
    Zip::from(&p_fg).and(&phi).for_each(|&p, &d| acc = acc + p * cast::<T>(d));
    Ok(acc / n)
}

pub fn surface_term_grad<T: Float, D: Dimension>(
    p_fg: ArrayView<'_, T, D>,
    phi: ArrayView<'_, f64, D>,
) -> Result<(T, Array<T, D>)> {
    let value = surface_term(p_fg.view(), phi.view())?;
    let n = cast::<T>(p_fg.len() as f64);
    Ok((value, phi.mapv(|d| cast::<T>(d) / n)))
}

/// Weight of the regional term, moving linearly from 1 at the first epoch
/// to 0 at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySchedule {
    pub epoch: usize,
    pub max_epochs: usize,
}

impl BoundarySchedule {
    pub fn new(epoch: usize, max_epochs: usize) -> Self {
        BoundarySchedule { epoch, max_epochs }
    }

    pub fn alpha(&self) -> f64 {
        if self.max_epochs <= 1 {
            return 1.0;
        }
        (1.0 - self.epoch as f64 / (self.max_epochs - 1) as f64).clamp(0.0, 1.0)
    }
}

/// `α · GDL(p, g) + (1 − α) · S(p, g)`. `p` and `g` carry classes on axis
/// 0 with foreground at index 1; `phi` matches one class channel.
pub fn boundary_loss<T: Float, D: RemoveAxis>(
    p: ArrayView<'_, T, D>,
    g: ArrayView<'_, T, D>,
    phi: ArrayView<'_, f64, D::Smaller>,
    schedule: BoundarySchedule,
) -> Result<T> {
    let regional = generalized_dice_loss(p.view(), g.view())?;
    let surface = surface_term(p.index_axis(Axis(0), 1), phi)?;
    Ok(blend(regional, surface, schedule.alpha()))
}

fn blend<T: Float>(regional: T, surface: T, alpha: f64) -> T {
    // The endpoints return one term untouched so they match it bit for bit.
    if alpha == 1.0 {
        regional
    } else if alpha == 0.0 {
        surface
    } else {
        let a = cast::<T>(alpha);
        a * regional + (T::one() - a) * surface
    }
}

pub fn boundary_loss_grad<T: Float, D: RemoveAxis>(
    p: ArrayView<'_, T, D>,
    g: ArrayView<'_, T, D>,
    phi: ArrayView<'_, f64, D::Smaller>,
    schedule: BoundarySchedule,
) -> Result<(T, Array<T, D>)> {
    let alpha = schedule.alpha();
    let (regional, mut grad) = generalized_dice_loss_grad(p.view(), g.view())?;
    let (surface, surface_grad) = surface_term_grad(p.index_axis(Axis(0), 1), phi)?;
    let a = cast::<T>(alpha);
    grad.mapv_inplace(|v| v * a);
    let mut fg = grad.index_axis_mut(Axis(0), 1);
    Zip::from(&mut fg).and(&surface_grad).for_each(|d, &s| *d = *d + (T::one() - a) * s);
    Ok((blend(regional, surface, alpha), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    Gdl,
    Boundary,
}

impl LossKind {
    /// GDL and boundary losses need background and foreground channels.
    pub fn needs_two_channels(self) -> bool {
        !matches!(self, LossKind::Dice)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Dice => "Dice Loss",
            LossKind::Gdl => "GDL",
            LossKind::Boundary => "Boundary",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Dice => "dice",
            LossKind::Gdl => "gdl",
            LossKind::Boundary => "boundary",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(LossKind::Dice),
            "gdl" => Ok(LossKind::Gdl),
            "boundary" => Ok(LossKind::Boundary),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn dice_examples() {
        let g = arr2(&[[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(dice_coefficient(g.view(), g.view()).unwrap(), 1.0);
        let disjoint = arr2(&[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(dice_coefficient(disjoint.view(), g.view()).unwrap(), 0.0);
        assert_eq!(dice_loss(disjoint.view(), g.view()).unwrap(), 1.0);
        assert_eq!(dice_loss(g.view(), g.view()).unwrap(), 0.0);
        // p has 4 voxels, 2 shared with g, g has 2 more.
        let p = arr2(&[[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]]);
        let g = arr2(&[[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(dice_coefficient(p.view(), g.view()).unwrap(), 0.5);
        assert_eq!(dice_loss(p.view(), g.view()).unwrap(), 0.5);
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(dice_coefficient(z.view(), z.view()).unwrap(), 1.0);
        assert!(dice_coefficient(z.view(), g.view()).is_err());
    }

    #[test]
    fn gdl_perfect_and_symmetric() {
        let mut g = Array3::<f64>::zeros((2, 2, 2));
        g[[1, 0, 0]] = 1.0;
        g[[0, 0, 1]] = 1.0;
        g[[0, 1, 0]] = 1.0;
        g[[0, 1, 1]] = 1.0;
        assert!(generalized_dice_loss(g.view(), g.view()).unwrap().abs() < 1e-12);

        let p = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| [0.3, 0.6, 0.2, 0.9][i * 2 + j] * if c == 0 { 1.0 } else { -1.0 } + if c == 0 { 0.0 } else { 1.0 });
        let mut ps = p.clone();
        ps.invert_axis(Axis(0));
        let mut gs = g.clone();
        gs.invert_axis(Axis(0));
        let a = generalized_dice_loss(p.view(), g.view()).unwrap();
        let b = generalized_dice_loss(ps.view(), gs.view()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gdl_uniform_prediction_all_background() {
        // Independent scalar evaluation: 4 pixels, p = 0.5 everywhere.
        let p = Array3::from_elem((2, 2, 2), 0.5f64);
        let mut g = Array3::<f64>::zeros((2, 2, 2));
        g.index_axis_mut(Axis(0), 0).fill(1.0);
        let w_bg = 1.0 / (4.0f64 + 1e-6).powi(2);
        let w_fg = 1.0 / (1e-6f64).powi(2);
        let num = w_bg * (4.0 * 0.5) + w_fg * 0.0;
        let den = w_bg * (4.0 * 0.5 + 4.0) + w_fg * (4.0 * 0.5);
        let expected = 1.0 - 2.0 * num / den;
        let got = generalized_dice_loss(p.view(), g.view()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn gdl_rejects_non_one_hot() {
        let p = Array3::from_elem((2, 2, 2), 0.5f64);
        let g = Array3::from_elem((2, 2, 2), 1.0f64);
        assert!(generalized_dice_loss(p.view(), g.view()).is_err());
    }

    #[test]
    fn distance_single_pixel() {
        let mut g = Array2::<u8>::zeros((5, 5));
        g[[2, 2]] = 1;
        let d = signed_distance_map(g.view());
        assert!(!d.empty_target);
        assert_eq!(d.phi[[2, 2]], 0.0);
        for (i, j) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(d.phi[[i, j]], 1.0);
        }
        assert_eq!(d.phi[[0, 0]], 8f64.sqrt());
    }

    #[test]
    fn distance_inside_is_to_nearest_boundary_pixel() {
        let mut g = Array2::<u8>::zeros((9, 9));
        g.slice_mut(ndarray::s![1..8, 1..8]).fill(1);
        let d = signed_distance_map(g.view());
        assert_eq!(d.phi[[4, 4]], -3.0);
        assert_eq!(d.phi[[2, 2]], -1.0);
        assert_eq!(d.phi[[1, 1]], 0.0);
        assert_eq!(d.phi[[0, 0]], 2f64.sqrt());
    }

    #[test]
    fn distance_full_and_empty() {
        let full = Array2::<u8>::ones((4, 6));
        assert!(signed_distance_map(full.view()).phi.iter().all(|&v| v <= 0.0));
        let empty = Array2::<u8>::zeros((4, 6));
        let d = signed_distance_map(empty.view());
        assert!(d.empty_target);
        assert!(d.phi.iter().all(|&v| v >= 1.0));
        assert_eq!(d.phi[[1, 2]], 2.0);
    }

    #[test]
    fn schedule_alpha() {
        assert_eq!(BoundarySchedule::new(0, 11).alpha(), 1.0);
        assert_eq!(BoundarySchedule::new(10, 11).alpha(), 0.0);
        assert_eq!(BoundarySchedule::new(5, 11).alpha(), 0.5);
        assert_eq!(BoundarySchedule::new(50, 11).alpha(), 0.0);
        assert_eq!(BoundarySchedule::new(0, 1).alpha(), 1.0);
    }

    #[test]
    fn loss_kind_parse() {
        assert_eq!("Boundary".parse::<LossKind>().unwrap(), LossKind::Boundary);
        assert!("focal".parse::<LossKind>().is_err());
        assert!(LossKind::Gdl.needs_two_channels());
        assert!(!LossKind::Dice.needs_two_channels());
    }
}
