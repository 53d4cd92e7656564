//! Metrics on generated images: renderer-inverse segmentation, mIoU, pixel
//! accuracy, pole IoU and edge F1.

use std::fmt::Write as _;

use crate::config::Config;
use crate::data::{DatasetSpec, Image, Layout, CLASS_ANCHORS, POLE};
use crate::training::Model;
use crate::{Error, Result};

/// Label every pixel with the class whose anchor colour is nearest.
pub fn oracle_segment(image: &Image, num_classes: usize) -> Result<Layout> {
    if num_classes == 0 || num_classes > CLASS_ANCHORS.len() {
        return Err(Error::Invalid(format!("oracle segmenter knows {} classes", CLASS_ANCHORS.len())));
    }
    let labels = image
        .data()
        .chunks_exact(3)
        .map(|p| {
            let mut best = (0u8, f64::INFINITY);
            for (k, a) in CLASS_ANCHORS.iter().take(num_classes).enumerate() {
                let d: f64 = p.iter().zip(a).map(|(&v, &c)| (v as f64 - c as f64).powi(2)).sum();
                if d < best.1 {
                    best = (k as u8, d);
                }
            }
            best.0
        })
        .collect();
    Layout::new(image.height(), image.width(), num_classes, labels)
}

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &Layout, gt: &Layout) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if pred.num_classes() != self.n || gt.num_classes() != self.n {
            return Err(Error::Shape("class count mismatch".into()));
        }
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// IoU per class, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..self.n).map(|p| self.get(k, p)).sum();
                let pred: u64 = (0..self.n).map(|t| self.get(t, k)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.n).map(|k| self.get(k, k)).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Segmentation scores of a single prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    pub class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub accuracy: f64,
}

pub fn compute_miou(pred: &Layout, gt: &Layout) -> Result<SegmentationScores> {
    let mut c = Confusion::new(gt.num_classes());
    c.add(pred, gt)?;
    Ok(SegmentationScores { class_iou: c.class_iou(), mean_iou: c.mean_iou(), accuracy: c.accuracy() })
}

/// Matched and total edge pixels on both sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCounts {
    pub pred_matched: u64,
    pub pred_total: u64,
    pub gt_matched: u64,
    pub gt_total: u64,
}

impl EdgeCounts {
    pub fn merge(&mut self, o: EdgeCounts) {
        self.pred_matched += o.pred_matched;
        self.pred_total += o.pred_total;
        self.gt_matched += o.gt_matched;
        self.gt_total += o.gt_total;
    }

    pub fn f1(&self) -> f64 {
        match (self.pred_total, self.gt_total) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (p, g) => {
                let precision = self.pred_matched as f64 / p as f64;
                let recall = self.gt_matched as f64 / g as f64;
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            }
        }
    }
}

fn matched(from: &[bool], to: &[bool], h: usize, w: usize, tol: usize) -> u64 {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            let hit = (y.saturating_sub(tol)..=(y + tol).min(h - 1))
                .any(|yy| (x.saturating_sub(tol)..=(x + tol).min(w - 1)).any(|xx| to[yy * w + xx]));
            n += hit as u64;
        }
    }
    n
}

/// Edge pixel matching within a `(2 tol + 1)` square window.
pub fn edge_counts(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> Result<EdgeCounts> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Shape(format!("edge masks of {} and {} pixels for {h}x{w}", pred.len(), gt.len())));
    }
    Ok(EdgeCounts {
        pred_matched: matched(pred, gt, h, w, tol),
        pred_total: pred.iter().filter(|&&b| b).count() as u64,
        gt_matched: matched(gt, pred, h, w, tol),
        gt_total: gt.iter().filter(|&&b| b).count() as u64,
    })
}

pub fn edge_f1(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> Result<f64> {
    Ok(edge_counts(pred, gt, h, w, tol)?.f1())
}

/// Held-out metrics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub accuracy: f64,
    /// IoU of the pole class.
    pub small_object_iou: Option<f64>,
    /// `None` without an edge branch.
    pub edge_f1: Option<f64>,
    pub step: u64,
    pub config_hash: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Invalid(format!("bad number `{s}`")))
    }
}

impl MetricReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let ious: Vec<String> = self.class_iou.iter().map(|&v| opt(v)).collect();
        let mut s = String::new();
        let _ = writeln!(s, "step: {}", self.step);
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        let _ = writeln!(s, "mean_iou: {}", self.mean_iou);
        let _ = writeln!(s, "accuracy: {}", self.accuracy);
        let _ = writeln!(s, "small_object_iou: {}", opt(self.small_object_iou));
        let _ = writeln!(s, "edge_f1: {}", opt(self.edge_f1));
        let _ = writeln!(s, "class_iou: {}", ious.join(","));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = MetricReport {
            class_iou: Vec::new(),
            mean_iou: 0.0,
            accuracy: 0.0,
            small_object_iou: None,
            edge_f1: None,
            step: 0,
            config_hash: String::new(),
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number `{v}`")));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::Invalid(format!("bad report line `{line}`")))?;
            match k {
                "step" => r.step = v.parse().map_err(|_| Error::Invalid(format!("bad step `{v}`")))?,
                "config_hash" => r.config_hash = v.to_string(),
                "mean_iou" => r.mean_iou = num(v)?,
                "accuracy" => r.accuracy = num(v)?,
                "small_object_iou" => r.small_object_iou = parse_opt(v)?,
                "edge_f1" => r.edge_f1 = parse_opt(v)?,
                "class_iou" => r.class_iou = v.split(',').map(parse_opt).collect::<Result<_>>()?,
                _ => return Err(Error::Invalid(format!("unknown report key `{k}`"))),
            }
        }
        Ok(r)
    }

    /// Tab-separated per-class table.
    pub fn class_table(&self) -> String {
        let mut s = String::from("class\tname\tiou\n");
        for (k, v) in self.class_iou.iter().enumerate() {
            let name = crate::data::CLASS_NAMES.get(k).copied().unwrap_or("?");
            let _ = writeln!(s, "{k}\t{name}\t{}", opt(*v));
        }
        s
    }
}

/// Evaluate `model` on the first `cfg.train.eval_scenes` held-out scenes.
pub fn evaluate(model: &Model, cfg: &Config, step: u64) -> Result<MetricReport> {
    let n = cfg.dataset.num_classes;
    let spec = DatasetSpec::heldout(&cfg.dataset, cfg.train.eval_scenes as u64);
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    let mut conf = Confusion::new(n);
    let mut edges = EdgeCounts::default();
    let ids: Vec<u64> = (0..cfg.train.eval_scenes as u64).collect();
    for chunk in ids.chunks(cfg.train.batch_size.max(1)) {
        let scenes = chunk.iter().map(|&i| spec.scene(i)).collect::<Result<Vec<_>>>()?;
        let layouts: Vec<Layout> = scenes.iter().map(|s| s.layout.clone()).collect();
        let out = model.synthesize(cfg, &layouts)?;
        for (b, scene) in scenes.iter().enumerate() {
            let img = Image::from_tensor(&out.final_image, b)?;
            conf.add(&oracle_segment(&img, n)?, &scene.layout)?;
            if let Some(e) = &out.edge {
                let pred = Image::from_tensor(e, b)?.edge_mask();
                edges.merge(edge_counts(&pred, &scene.edge.edge_mask(), h, w, 1)?);
            }
        }
    }
    let class_iou = conf.class_iou();
    Ok(MetricReport {
        small_object_iou: class_iou.get(POLE as usize).copied().flatten(),
        mean_iou: conf.mean_iou(),
        accuracy: conf.accuracy(),
        class_iou,
        edge_f1: cfg.ablation.edge_branch.then(|| edges.f1()),
        step,
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render_layout};
    use proptest::prelude::*;

    fn layout(h: usize, w: usize, labels: &[u8]) -> Layout {
        Layout::new(h, w, 5, labels.to_vec()).unwrap()
    }

    #[test]
    fn trivial_segmentation_cases() {
        let gt = layout(2, 3, &[0, 1, 2, 3, 4, 0]);
        let s = compute_miou(&gt, &gt).unwrap();
        assert_eq!((s.mean_iou, s.accuracy), (1.0, 1.0));
        let pred = layout(2, 3, &[1, 0, 0, 0, 0, 1]);
        assert_eq!(compute_miou(&pred, &gt).unwrap().mean_iou, 0.0);
        assert!(compute_miou(&layout(1, 6, &[0; 6]), &gt).is_err());
    }

    #[test]
    fn one_pixel_overlap_gives_a_third() {
        let gt = layout(1, 4, &[1, 1, 0, 0]);
        let pred = layout(1, 4, &[0, 1, 1, 0]);
        let c = compute_miou(&pred, &gt).unwrap();
        assert!((c.class_iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.class_iou[2], None);
    }

    #[test]
    fn oracle_inverts_flat_render() {
        let cfg = Config::desk();
        let s = generate_scene(5, &cfg.dataset).unwrap();
        let flat = render_layout(&s.layout, 5, 0.0);
        assert_eq!(oracle_segment(&flat, 5).unwrap(), s.layout);
        let bg = Image::filled(4, 4, CLASS_ANCHORS[0]);
        assert!(oracle_segment(&bg, 5).unwrap().labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn edge_f1_cases() {
        let (h, w) = (8, 8);
        let gt: Vec<bool> = (0..h * w).map(|i| i % w == 3).collect();
        assert_eq!(edge_f1(&gt, &gt, h, w, 1).unwrap(), 1.0);
        assert_eq!(edge_f1(&vec![false; h * w], &gt, h, w, 1).unwrap(), 0.0);
        let shifted: Vec<bool> = (0..h * w).map(|i| i % w == 4).collect();
        assert_eq!(edge_f1(&shifted, &gt, h, w, 1).unwrap(), 1.0);
        assert_eq!(edge_f1(&shifted, &gt, h, w, 0).unwrap(), 0.0);
    }

    #[test]
    fn report_round_trips() {
        let r = MetricReport {
            class_iou: vec![Some(0.1 + 0.2), None, Some(1.0 / 3.0), Some(0.0), Some(1e-17)],
            mean_iou: 0.7071067811865476,
            accuracy: 0.99,
            small_object_iou: Some(1e-17),
            edge_f1: None,
            step: 2000,
            config_hash: "abc123".into(),
        };
        assert_eq!(MetricReport::from_text(&r.to_text()).unwrap(), r);
        assert!(r.class_table().lines().count() == 6);
    }

    proptest! {
        #[test]
        fn miou_invariant_under_class_permutation(
            labels in prop::collection::vec((0u8..5, 0u8..5), 1..40),
            perm in Just([0u8, 1, 2, 3, 4]).prop_shuffle(),
        ) {
            let (p, t): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let n = p.len();
            let a = compute_miou(&layout(1, n, &p), &layout(1, n, &t)).unwrap();
            let pp: Vec<u8> = p.iter().map(|&l| perm[l as usize]).collect();
            let tp: Vec<u8> = t.iter().map(|&l| perm[l as usize]).collect();
            let b = compute_miou(&layout(1, n, &pp), &layout(1, n, &tp)).unwrap();
            prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.mean_iou));
            prop_assert_eq!(a.accuracy, b.accuracy);
        }

        #[test]
        fn edge_f1_is_bounded_and_symmetric(
            a in prop::collection::vec(any::<bool>(), 36),
            b in prop::collection::vec(any::<bool>(), 36),
            tol in 0usize..3,
        ) {
            let f = edge_f1(&a, &b, 6, 6, tol).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((f - edge_f1(&b, &a, 6, 6, tol).unwrap()).abs() < 1e-12);
        }
    }
}
