//! 3D connected-component labeling and removal of all but the largest
//! components.

use std::collections::VecDeque;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::volumes::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 6 or 26, got '{s}'"))),
        }
    }
}

/// Labeled components of a binary mask. Labels run 1..=K in raster order of
/// each component's first voxel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    pub labels: Array3<u32>,
    /// `sizes[l - 1]` is the voxel count of label `l`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl ComponentSet {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Labels ordered by size descending, ties by label ascending.
    pub fn labels_by_size(&self) -> Vec<u32> {
        let mut order: Vec<u32> = (1..=self.sizes.len() as u32).collect();
        order.sort_by(|&a, &b| self.sizes[b as usize - 1].cmp(&self.sizes[a as usize - 1]).then(a.cmp(&b)));
        order
    }
}

pub fn label_components(mask: &LabelMask, connectivity: Connectivity) -> ComponentSet {
    let data = mask.data();
    let (nx, ny, nz) = data.dim();
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut sizes = Vec::new();
    let offsets = connectivity.offsets();
    let mut queue = VecDeque::new();
    for (idx, &v) in data.indexed_iter() {
        if v == 0 || labels[idx] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[idx] = label;
        queue.push_back([idx.0, idx.1, idx.2]);
        while let Some(p) = queue.pop_front() {
            size += 1;
            for off in &offsets {
                let q = [p[0] as isize + off[0], p[1] as isize + off[1], p[2] as isize + off[2]];
                if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx as isize || q[1] >= ny as isize || q[2] >= nz as isize {
                    continue;
                }
                let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                if data[q] == 1 && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    ComponentSet { labels, sizes, connectivity }
}

/// Keeps the `n_max` largest components (fewer if fewer exist). Equal sizes
/// keep the lower label.
pub fn keep_largest(components: &ComponentSet, n_max: usize) -> LabelMask {
    let kept: Vec<u32> = components.labels_by_size().into_iter().take(n_max).collect();
    let mut keep = vec![false; components.sizes.len() + 1];
    for l in kept {
        keep[l as usize] = true;
    }
    let data = components.labels.mapv(|l| u8::from(keep[l as usize]));
    LabelMask::new(data).expect("binary by construction")
}

/// Label, then keep the `n_max` largest components.
pub fn clean_mask(mask: &LabelMask, n_max: usize, connectivity: Connectivity) -> LabelMask {
    keep_largest(&label_components(mask, connectivity), n_max)
}
