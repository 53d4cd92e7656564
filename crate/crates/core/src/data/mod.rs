//! Procedural shapes world: layouts, rendering, edges and batching.

mod batch;
mod canny;
pub mod export;
mod render;

use std::collections::BTreeMap;

use edgesynth_tensor::{Real, Tensor};

pub use batch::{Batch, BatchIterator, DatasetSpec};
pub use canny::{canny_edges, CannyParams};
pub use render::{generate_scene, render_layout, CLASS_ANCHORS, CLASS_NAMES};

use crate::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const BACKGROUND: u8 = 0;
pub const RECTANGLE: u8 = 1;
pub const CIRCLE: u8 = 2;
pub const TRIANGLE: u8 = 3;
/// The thin small-object class.
pub const POLE: u8 = 4;

/// Strides of the label pyramid used by the multi-scale losses.
pub const PYRAMID_STRIDES: [usize; 4] = [1, 4, 8, 16];

/// Semantic layout stored as per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl Layout {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if num_classes < 2 || num_classes > u8::MAX as usize {
            return Err(Error::Invalid(format!("num_classes {num_classes} out of range")));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} layout",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize, class: u8) -> Self {
        Self { height, width, num_classes, labels: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// One-hot encoding as an NHWC tensor `[1, H, W, N]`.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let n = self.num_classes;
        let mut data = vec![T::zero(); self.labels.len() * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * n + l as usize] = T::one();
        }
        Tensor::new(&[1, self.height, self.width, n], data).expect("one-hot shape")
    }

    /// One-hot encoding in channel-first `[N, H, W]` order.
    pub fn one_hot_chw(&self) -> Vec<f32> {
        let hw = self.labels.len();
        let mut data = vec![0.0; hw * self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + i] = 1.0;
        }
        data
    }

    /// Inverse of [`Layout::one_hot`]; rejects anything that is not exactly
    /// one-hot per pixel.
    pub fn from_one_hot<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w, n) = match s {
            [1, h, w, n] | [h, w, n] => (*h, *w, *n),
            _ => return Err(Error::Shape(format!("one-hot layout must be [1,H,W,N], got {s:?}"))),
        };
        let mut labels = Vec::with_capacity(h * w);
        for px in t.data().chunks_exact(n) {
            let mut hot = None;
            for (k, &v) in px.iter().enumerate() {
                if v == T::one() {
                    if hot.is_some() {
                        return Err(Error::Invalid("pixel with two hot channels".into()));
                    }
                    hot = Some(k);
                } else if v != T::zero() {
                    return Err(Error::Invalid(format!("non-binary entry {v:?}")));
                }
            }
            let k = hot.ok_or_else(|| Error::Invalid("pixel with no hot channel".into()))?;
            labels.push(k as u8);
        }
        Self::new(h, w, n, labels)
    }

    /// Relabel every pixel through `perm` (`new = perm[old]`).
    pub fn permuted(&self, perm: &[u8]) -> Self {
        Self {
            labels: self.labels.iter().map(|&l| perm[l as usize]).collect(),
            ..self.clone()
        }
    }
}

/// Majority-vote downsampling; ties go to the smallest class index.
pub fn downsample_layout(layout: &Layout, stride: usize) -> Result<Layout> {
    if !PYRAMID_STRIDES.contains(&stride) && stride != 2 {
        return Err(Error::Invalid(format!("unsupported stride {stride}")));
    }
    downsample_any(layout, stride)
}

pub(crate) fn downsample_any(layout: &Layout, stride: usize) -> Result<Layout> {
    if stride == 0 || layout.height % stride != 0 || layout.width % stride != 0 {
        return Err(Error::Shape(format!(
            "{}x{} layout not divisible by stride {stride}",
            layout.height, layout.width
        )));
    }
    if stride == 1 {
        return Ok(layout.clone());
    }
    let (h, w) = (layout.height / stride, layout.width / stride);
    let mut labels = Vec::with_capacity(h * w);
    let mut counts = vec![0usize; layout.num_classes];
    for by in 0..h {
        for bx in 0..w {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in by * stride..(by + 1) * stride {
                for x in bx * stride..(bx + 1) * stride {
                    counts[layout.get(y, x) as usize] += 1;
                }
            }
            // First maximum wins, which is the smallest index among ties.
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            labels.push(best as u8);
        }
    }
    Layout::new(h, w, layout.num_classes, labels)
}

/// Layout at strides 1, 4, 8 and 16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutPyramid {
    levels: BTreeMap<usize, Layout>,
}

impl LayoutPyramid {
    pub fn build(layout: &Layout) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for s in PYRAMID_STRIDES {
            levels.insert(s, downsample_layout(layout, s)?);
        }
        Ok(Self { levels })
    }

    pub fn level(&self, stride: usize) -> Option<&Layout> {
        self.levels.get(&stride)
    }

    pub fn strides(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.keys().copied()
    }
}

/// RGB image in HWC order with values in `[-1, 1]`. Edge maps use the same
/// type with values in `{-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub type EdgeMap = Image;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.height, self.width, 3],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image shape")
    }

    /// Image `b` of an NHWC `[B, H, W, 3]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 || b >= s[0] {
            return Err(Error::Shape(format!("cannot take image {b} from {s:?}")));
        }
        let n = s[1] * s[2] * 3;
        let data = t.data()[b * n..(b + 1) * n].iter().map(|v| v.f64() as f32).collect();
        Self::new(s[1], s[2], data)
    }

    /// Boolean mask of edge pixels (channel mean above zero).
    pub fn edge_mask(&self) -> Vec<bool> {
        self.data
            .chunks_exact(3)
            .map(|p| p.iter().sum::<f32>() > 0.0)
            .collect()
    }
}

/// One rendered sample with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub layout: Layout,
    pub image: Image,
    pub edge: EdgeMap,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stride_one_is_identity() {
        let l = Layout::new(4, 4, 3, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        assert_eq!(downsample_layout(&l, 1).unwrap(), l);
    }

    #[test]
    fn uniform_layout_stays_uniform() {
        for s in PYRAMID_STRIDES {
            let l = Layout::uniform(32, 32, 5, 3);
            assert_eq!(downsample_layout(&l, s).unwrap(), Layout::uniform(32 / s, 32 / s, 5, 3));
        }
    }

    #[test]
    fn majority_over_block() {
        // 9 pixels of class 2 and 7 of class 1 in one 4x4 block.
        let labels: Vec<u8> = (0..16).map(|i| if i < 9 { 2 } else { 1 }).collect();
        let l = Layout::new(4, 4, 3, labels.clone()).unwrap();
        let counted = |c: u8| labels.iter().filter(|&&v| v == c).count();
        assert_eq!((counted(2), counted(1)), (9, 7));
        let d = downsample_layout(&l, 4).unwrap();
        assert_eq!(d.labels(), &[2]);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let labels: Vec<u8> = (0..16).map(|i| if i < 8 { 3 } else { 1 }).collect();
        let l = Layout::new(4, 4, 4, labels).unwrap();
        assert_eq!(downsample_layout(&l, 4).unwrap().labels(), &[1]);
    }

    #[test]
    fn indivisible_dims_error() {
        let l = Layout::uniform(12, 12, 2, 0);
        assert!(downsample_layout(&l, 8).is_err());
        assert!(downsample_layout(&l, 3).is_err());
    }

    #[test]
    fn one_hot_round_trip_and_validation() {
        let l = Layout::new(2, 3, 4, vec![0, 1, 2, 3, 1, 0]).unwrap();
        let t = l.one_hot::<f32>();
        assert_eq!(t.shape(), &[1, 2, 3, 4]);
        for px in t.data().chunks(4) {
            assert_eq!(px.iter().sum::<f32>(), 1.0);
        }
        assert_eq!(Layout::from_one_hot(&t).unwrap(), l);
        let mut bad = t.clone();
        bad.data_mut()[0] = 0.5;
        assert!(Layout::from_one_hot(&bad).is_err());
        let chw = l.one_hot_chw();
        assert_eq!(chw[6 + 1], 1.0);
    }

    #[test]
    fn pyramid_levels() {
        let l = Layout::uniform(64, 64, 5, 0);
        let p = LayoutPyramid::build(&l).unwrap();
        assert_eq!(p.level(1), Some(&l));
        assert_eq!(p.level(16).unwrap().height(), 4);
        assert_eq!(p.strides().collect::<Vec<_>>(), vec![1, 4, 8, 16]);
    }

    proptest! {
        #[test]
        fn downsample_commutes_with_permutation(labels in proptest::collection::vec(0u8..3, 64)) {
            let l = Layout::new(8, 8, 3, labels).unwrap();
            // Only blocks with a strict majority are compared.
            let perm = [2u8, 0, 1];
            let d = downsample_layout(&l, 4).unwrap();
            let dp = downsample_layout(&l.permuted(&perm), 4).unwrap();
            let strict = (0..2).all(|by| (0..2).all(|bx| {
                let mut c = [0; 3];
                for y in by*4..by*4+4 { for x in bx*4..bx*4+4 { c[l.get(y, x) as usize] += 1; } }
                let mut s = c; s.sort_unstable();
                s[2] > s[1]
            }));
            if strict {
                prop_assert_eq!(dp, d.permuted(&perm));
            }
        }

        #[test]
        fn downsample_is_idempotent_on_uniform(class in 0u8..5, s in prop::sample::select(vec![1usize, 4, 8, 16])) {
            let l = Layout::uniform(16, 16, 5, class);
            let once = downsample_layout(&l, s).unwrap();
            prop_assert_eq!(once.labels().iter().all(|&c| c == class), true);
        }
    }
}
