//! Proxy label generator, pairwise similarity maps and the similarity loss.

use std::path::PathBuf;
use std::process::Command;

use edgesynth_tensor::{ConvGeom, Graph, Real, Tensor, Var};
use rand::Rng;

use crate::data::{export, Image, Layout};
use crate::nn::{conv, conv_act, Bound, ParamStore};
use crate::{Error, Result};

/// Largest `M = h * w` accepted by [`similarity_map`].
pub const MAX_SIMILARITY_PIXELS: usize = 1024;
/// Prediction clamp used by [`similarity_loss`].
pub const BCE_EPS: f64 = 1e-7;

pub const PROXY_LAYERS: usize = 4;

pub fn init_proxy<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    channels: usize,
    num_classes: usize,
    std: f64,
) {
    for i in 0..PROXY_LAYERS {
        let cin = if i == 0 { 3 } else { channels };
        let cout = if i + 1 == PROXY_LAYERS { num_classes } else { channels };
        store.init_conv(rng, &format!("proxy.{i}"), 3, cin, cout, std);
    }
}

/// Per-pixel class logits of the proxy segmenter.
pub fn proxy_logits<T: Real>(g: &mut Graph<T>, p: &Bound, image: Var, slope: f64) -> Result<Var> {
    let mut x = image;
    for i in 0..PROXY_LAYERS - 1 {
        x = conv_act(g, p, &format!("proxy.{i}"), x, slope)?;
    }
    conv(g, p, &format!("proxy.{}", PROXY_LAYERS - 1), x, ConvGeom::same3())
}

/// Soft label `[B, H, W, N]` with unit channel sums.
pub fn proxy_segment<T: Real>(g: &mut Graph<T>, p: &Bound, image: Var, slope: f64) -> Result<Var> {
    let logits = proxy_logits(g, p, image, slope)?;
    Ok(g.softmax_last(logits))
}

/// Mean per-pixel cross-entropy against a one-hot target.
pub fn proxy_cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, one_hot: Var) -> Result<Var> {
    let logp = g.log_softmax_last(logits);
    let picked = g.mul(logp, one_hot)?;
    let total = g.sum_all(picked);
    let shape = g.shape(logits);
    let pixels = shape.iter().product::<usize>() / shape[shape.len() - 1];
    Ok(g.scale(total, -1.0 / pixels as f64))
}

/// Average soft labels over `stride x stride` blocks; channel sums stay 1.
pub fn reduce_labels<T: Real>(g: &mut Graph<T>, soft: Var, stride: usize) -> Result<Var> {
    Ok(g.avg_pool(soft, stride)?)
}

fn check_pixels(m: usize) -> Result<()> {
    if m > MAX_SIMILARITY_PIXELS {
        return Err(Error::Invalid(format!(
            "similarity map over {m} pixels exceeds {MAX_SIMILARITY_PIXELS}; downsample labels to at most 32x32 first"
        )));
    }
    Ok(())
}

/// `A = S S^T` for one label map `[1, h, w, N]` (or `[h, w, N]`), giving `[M, M]`.
pub fn similarity_map<T: Real>(g: &mut Graph<T>, label: Var) -> Result<Var> {
    let s = g.shape(label).to_vec();
    let (m, n) = match s.as_slice() {
        [1, h, w, n] | [h, w, n] => (h * w, *n),
        _ => return Err(Error::Shape(format!("similarity_map expects one label map, got {s:?}"))),
    };
    check_pixels(m)?;
    let flat = g.reshape(label, &[m, n])?;
    Ok(g.matmul(flat, flat, false, true)?)
}

/// Binary similarity map of a hard layout, computed directly.
pub fn layout_similarity<T: Real>(layout: &Layout) -> Result<Tensor<T>> {
    let labels = layout.labels();
    let m = labels.len();
    check_pixels(m)?;
    let mut data = vec![T::zero(); m * m];
    for j in 0..m {
        for i in 0..m {
            if labels[j] == labels[i] {
                data[j * m + i] = T::one();
            }
        }
    }
    Ok(Tensor::new(&[m, m], data)?)
}

/// Mean binary cross-entropy between a target map and a clamped prediction.
pub fn similarity_loss<T: Real>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var> {
    if g.shape(target) != g.shape(pred) {
        return Err(Error::Shape(format!(
            "similarity_loss: target {:?} vs prediction {:?}",
            g.shape(target),
            g.shape(pred)
        )));
    }
    let p = g.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let logp = g.log(p);
    let negp = g.neg(p);
    let q = g.add_scalar(negp, 1.0);
    let logq = g.log(q);
    let negt = g.neg(target);
    let t_neg = g.add_scalar(negt, 1.0);
    let a = g.mul(target, logp)?;
    let b = g.mul(t_neg, logq)?;
    let sum = g.add(a, b)?;
    let mean = g.mean_all(sum);
    Ok(g.neg(mean))
}

/// Similarity loss averaged over a batch: `soft` is `[B, h, w, N]` and
/// `targets` holds one hard layout per batch entry at the same resolution.
pub fn batch_similarity_loss<T: Real>(g: &mut Graph<T>, soft: Var, targets: &[Layout]) -> Result<Var> {
    let b = g.shape(soft)[0];
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for a batch of {b}", targets.len())));
    }
    let mut terms = Vec::with_capacity(b);
    for (i, layout) in targets.iter().enumerate() {
        let one = g.slice(soft, 0, i, 1)?;
        let pred = similarity_map(g, one)?;
        let target = g.constant(layout_similarity(layout)?);
        terms.push(similarity_loss(g, target, pred)?);
    }
    let total = g.sum_of(&terms)?;
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Segmenter run as a child process: it receives an input PNG path and an
/// output path, and must write `H * W` bytes of row-major class indices.
#[derive(Clone, Debug)]
pub struct ExternalSegmenter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalSegmenter {
    pub fn segment(&self, image: &Image, num_classes: usize) -> Result<Layout> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("image.png");
        let output = dir.path().join("labels.u8");
        export::write_image(image, &input)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::Segmenter(format!("cannot run {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Segmenter(format!("{} exited with {status}", self.program.display())));
        }
        export::read_layout(&output, image.height(), image.width(), num_classes)
            .map_err(|e| Error::Segmenter(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim_of(layout: &Layout) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let l = g.constant(layout.one_hot());
        let a = similarity_map(&mut g, l).unwrap();
        g.value(a).clone()
    }

    fn bce(target: &[f64], pred: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let m = (target.len() as f64).sqrt() as usize;
        let t = g.constant(Tensor::new(&[m, m], target.to_vec()).unwrap());
        let p = g.constant(Tensor::new(&[m, m], pred.to_vec()).unwrap());
        let l = similarity_loss(&mut g, t, p).unwrap();
        g.scalar(l)
    }

    #[test]
    fn small_maps() {
        let same = Layout::new(1, 2, 2, vec![0, 0]).unwrap();
        assert_eq!(sim_of(&same).data(), &[1.0, 1.0, 1.0, 1.0]);
        let diff = Layout::new(1, 2, 2, vec![0, 1]).unwrap();
        assert_eq!(sim_of(&diff).data(), &[1.0, 0.0, 0.0, 1.0]);
        let checker = Layout::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let expect = [1., 0., 0., 1., 0., 1., 1., 0., 0., 1., 1., 0., 1., 0., 0., 1.];
        assert_eq!(sim_of(&checker).data(), &expect);
        assert_eq!(layout_similarity::<f64>(&checker).unwrap().data(), &expect);
    }

    #[test]
    fn oversized_map_is_rejected() {
        let big = Layout::uniform(64, 64, 2, 0);
        let mut g = Graph::<f64>::new();
        let l = g.constant(big.one_hot());
        let err = similarity_map(&mut g, l).unwrap_err().to_string();
        assert!(err.contains("downsample"));
        assert!(layout_similarity::<f64>(&big).is_err());
    }

    #[test]
    fn closed_form_losses() {
        let t = vec![1.0, 0.0, 0.0, 1.0];
        assert!(bce(&t, &t) <= 1e-6);
        assert!((bce(&[1.0; 4], &[0.5; 4]) - std::f64::consts::LN_2).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(similarity_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn proxy_output_is_a_distribution() {
        let mut store = ParamStore::<f64>::new();
        init_proxy(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 6, 5, 0.3);
        let mut g = Graph::<f64>::new();
        let p = Bound::bind(&mut g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::new(&[2, 8, 8, 3], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = g.constant(img);
        let s = proxy_segment(&mut g, &p, x, 0.2).unwrap();
        assert_eq!(g.shape(s), &[2, 8, 8, 5]);
        for px in g.value(s).data().chunks(5) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let r = reduce_labels(&mut g, s, 4).unwrap();
        for px in g.value(r).data().chunks(5) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn external_segmenter_contract() {
        let seg = ExternalSegmenter {
            program: "sh".into(),
            args: vec!["-c".into(), "head -c 16 /dev/zero > \"$2\"".into(), "seg".into()],
        };
        let l = seg.segment(&Image::filled(4, 4, [0.0; 3]), 5).unwrap();
        assert_eq!(l, Layout::uniform(4, 4, 5, 0));
        let failing = ExternalSegmenter { program: "false".into(), args: vec![] };
        assert!(failing.segment(&Image::filled(4, 4, [0.0; 3]), 5).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn map_is_symmetric(v in proptest::collection::vec(0.0f64..1.0, 36)) {
                let mut g = Graph::<f64>::new();
                let l = g.constant(Tensor::new(&[1, 3, 4, 3], v).unwrap());
                let a = similarity_map(&mut g, l).unwrap();
                let a = g.value(a);
                let m = a.dim(0);
                for i in 0..m {
                    for j in 0..m {
                        prop_assert!((a.data()[i * m + j] - a.data()[j * m + i]).abs() <= 1e-12);
                    }
                }
            }

            #[test]
            fn map_ignores_class_relabelling(labels in proptest::collection::vec(0u8..4, 16), shift in 1u8..4) {
                let layout = Layout::new(4, 4, 4, labels).unwrap();
                let perm: Vec<u8> = (0..4).map(|k| (k + shift) % 4).collect();
                prop_assert_eq!(sim_of(&layout), sim_of(&layout.permuted(&perm)));
            }

            #[test]
            fn loss_is_non_negative(
                t in proptest::collection::vec(prop::bool::ANY, 9),
                p in proptest::collection::vec(0.0f64..=1.0, 9),
            ) {
                let t: Vec<f64> = t.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                prop_assert!(bce(&t, &p) >= 0.0);
            }
        }
    }
}
