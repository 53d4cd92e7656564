//! Pixel embeddings, cross-layout sampling and the contrastive losses, plus
//! class-specific pixel generation.

use edgesynth_tensor::{ConvGeom, Graph, Real, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::data::Layout;
use crate::nn::{conv, Bound, ParamStore};
use crate::{Error, Result};

pub fn init_projection<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: usize, dim: usize, std: f64) {
    store.init_conv(rng, "proj", 1, channels, dim, std);
}

pub fn init_class_decoder<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, dim: usize, hidden: usize, std: f64) {
    store.init_conv(rng, "dec.0", 1, dim, hidden, std);
    store.init_conv(rng, "dec.1", 1, hidden, 3, std);
}

/// Average-pool by `stride`, project with the shared 1x1 head and
/// unit-normalise every pixel, giving `[B, H/s, W/s, D]`.
pub fn project_embeddings<T: Real>(g: &mut Graph<T>, p: &Bound, features: Var, stride: usize) -> Result<Var> {
    let pooled = g.avg_pool(features, stride)?;
    let z = conv(g, p, "proj", pooled, ConvGeom::pointwise())?;
    let shape = g.shape(z).to_vec();
    let rows = g.reshape(z, &[shape[0] * shape[1] * shape[2], shape[3]])?;
    let unit = g.l2_normalize_rows(rows);
    Ok(g.reshape(unit, &shape)?)
}

/// Sampled pixel positions at one stride. `rows[k]` indexes the flattened
/// `[B * h * w]` embedding map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingBank {
    pub stride: usize,
    pub rows: Vec<usize>,
    pub classes: Vec<u8>,
    pub layout_ids: Vec<usize>,
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Up to `cap` positions per class present anywhere in `layouts`, drawn
/// uniformly without replacement.
pub fn sample_bank<R: Rng>(layouts: &[&Layout], stride: usize, cap: usize, rng: &mut R) -> Result<EmbeddingBank> {
    let first = layouts.first().ok_or_else(|| Error::Invalid("no layouts to sample".into()))?;
    let (hw, n) = (first.height() * first.width(), first.num_classes());
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (b, l) in layouts.iter().enumerate() {
        if l.height() * l.width() != hw || l.num_classes() != n {
            return Err(Error::Shape("layouts in a bank must share one size".into()));
        }
        for (p, &c) in l.labels().iter().enumerate() {
            by_class[c as usize].push((b, p));
        }
    }
    let mut bank = EmbeddingBank { stride, rows: Vec::new(), classes: Vec::new(), layout_ids: Vec::new() };
    for (c, cands) in by_class.iter().enumerate() {
        if cands.is_empty() {
            continue;
        }
        for i in sample(rng, cands.len(), cap.min(cands.len())) {
            let (b, p) = cands[i];
            bank.rows.push(b * hw + p);
            bank.classes.push(c as u8);
            bank.layout_ids.push(b);
        }
    }
    Ok(bank)
}

/// Sampled embeddings of one stride inside a graph.
#[derive(Clone, Debug)]
pub struct ScaleEmbeddings {
    pub stride: usize,
    /// `[K, D]` unit rows.
    pub emb: Var,
    pub classes: Vec<u8>,
}

pub fn gather_bank<T: Real>(g: &mut Graph<T>, projected: Var, bank: &EmbeddingBank) -> Result<ScaleEmbeddings> {
    let emb = g.gather_rows(projected, &bank.rows)?;
    Ok(ScaleEmbeddings { stride: bank.stride, emb, classes: bank.classes.clone() })
}

fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised InfoNCE of one anchor: the mean over positives of
/// `-log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}))`.
pub fn info_nce(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Invalid("info_nce needs at least one positive".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let neg: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    let mx = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = if mx == f64::NEG_INFINITY {
        mx
    } else {
        mx + neg.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    let total: f64 = positives.iter().map(|p| softplus(lse - dot(anchor, p) / tau)).sum();
    Ok(total / positives.len() as f64)
}

fn cap_negatives<R: Rng>(mask: &mut [bool], cols: usize, cap: usize, rng: &mut R) {
    for row in mask.chunks_exact_mut(cols) {
        let idx: Vec<usize> = (0..cols).filter(|&j| row[j]).collect();
        if idx.len() > cap {
            row.iter_mut().for_each(|m| *m = false);
            for k in sample(rng, idx.len(), cap) {
                row[idx[k]] = true;
            }
        }
    }
}

/// Batched InfoNCE over a logit matrix `[Ka, Kc]`: mean over anchors that
/// have a positive of their mean over positives. `None` when no anchor has
/// a positive.
pub fn info_nce_from_logits<T: Real>(g: &mut Graph<T>, logits: Var, pos: &[bool], neg: &[bool]) -> Result<Option<Var>> {
    let s = g.shape(logits).to_vec();
    let (ka, kc) = (s[0], s[1]);
    let valid: Vec<bool> = pos.chunks_exact(kc).map(|r| r.iter().any(|&b| b)).collect();
    if !valid.iter().any(|&v| v) {
        return Ok(None);
    }
    let lse = g.masked_logsumexp_rows(logits, neg)?;
    let diff = g.sub_row_broadcast(logits, lse)?;
    let flipped = g.neg(diff);
    let term = g.softplus(flipped);
    let per_anchor = g.masked_row_mean(term, pos)?;
    let row = g.reshape(per_anchor, &[1, ka])?;
    Ok(Some(g.masked_row_mean(row, &valid)?))
}

fn contrast<T: Real, R: Rng>(
    g: &mut Graph<T>,
    anchors: &ScaleEmbeddings,
    cands: &ScaleEmbeddings,
    same_set: bool,
    tau: f64,
    neg_cap: usize,
    rng: &mut R,
) -> Result<Option<Var>> {
    let (ka, kc) = (anchors.classes.len(), cands.classes.len());
    if ka == 0 || kc == 0 {
        return Ok(None);
    }
    let dots = g.matmul(anchors.emb, cands.emb, false, true)?;
    let logits = g.scale(dots, 1.0 / tau);
    let mut pos = vec![false; ka * kc];
    let mut neg = vec![false; ka * kc];
    for i in 0..ka {
        for j in 0..kc {
            if anchors.classes[i] == cands.classes[j] {
                pos[i * kc + j] = !(same_set && i == j);
            } else {
                neg[i * kc + j] = true;
            }
        }
    }
    cap_negatives(&mut neg, kc, neg_cap, rng);
    info_nce_from_logits(g, logits, &pos, &neg)
}

/// Pixel-wise loss within one stride: every sampled pixel is an anchor
/// against all other sampled pixels of that stride.
pub fn pixel_contrastive_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    scale: &ScaleEmbeddings,
    tau: f64,
    neg_cap: usize,
    rng: &mut R,
) -> Result<Option<Var>> {
    contrast(g, scale, scale, true, tau, neg_cap, rng)
}

/// `sum_s w_s L^s`. Strides without a valid anchor contribute nothing;
/// it is an error if no weighted stride has one.
pub fn multiscale_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    scales: &[ScaleEmbeddings],
    weights: &[f64],
    tau: f64,
    neg_cap: usize,
    rng: &mut R,
) -> Result<Var> {
    if scales.len() != weights.len() {
        return Err(Error::Shape(format!("{} scales for {} weights", scales.len(), weights.len())));
    }
    let mut terms = Vec::new();
    for (s, &w) in scales.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if let Some(l) = pixel_contrastive_loss(g, s, tau, neg_cap, rng)? {
            terms.push(g.scale(l, w));
        }
    }
    if terms.is_empty() {
        return Err(Error::Invalid("no stride has an anchor with a positive".into()));
    }
    Ok(g.sum_of(&terms)?)
}

/// `sum_(p,q) w_pq L^{p,q}` with anchors from the finer stride of each pair
/// and candidates from the coarser one.
pub fn crossscale_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    scales: &[ScaleEmbeddings],
    pairs: &[(usize, usize)],
    weights: &[f64],
    tau: f64,
    neg_cap: usize,
    rng: &mut R,
) -> Result<Var> {
    if pairs.len() != weights.len() {
        return Err(Error::Shape(format!("{} pairs for {} weights", pairs.len(), weights.len())));
    }
    let mut terms = Vec::new();
    for (&(a, b), &w) in pairs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let (fine, coarse) = (a.min(b), a.max(b));
        let find = |s: usize| scales.iter().find(|e| e.stride == s);
        let (Some(fa), Some(co)) = (find(fine), find(coarse)) else {
            log::warn!("cross-scale pair ({a}, {b}) skipped: stride missing");
            continue;
        };
        if let Some(l) = contrast(g, fa, co, false, tau, neg_cap, rng)? {
            terms.push(g.scale(l, w));
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1])));
    }
    Ok(g.sum_of(&terms)?)
}

/// Region masks `[N * B, H, W, C]`, class-major, for `C` channels.
pub fn class_masks<T: Real>(layouts: &[&Layout], num_classes: usize, channels: usize) -> Result<Tensor<T>> {
    let first = layouts.first().ok_or_else(|| Error::Invalid("no layouts".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(num_classes * layouts.len() * h * w * channels);
    for k in 0..num_classes {
        for l in layouts {
            if l.height() != h || l.width() != w {
                return Err(Error::Shape("layouts must share one size".into()));
            }
            for &c in l.labels() {
                let v = if c as usize == k { T::one() } else { T::zero() };
                data.extend(std::iter::repeat(v).take(channels));
            }
        }
    }
    Ok(Tensor::new(&[num_classes * layouts.len(), h, w, channels], data)?)
}

#[derive(Clone, Copy, Debug)]
pub struct ClassSpecific {
    /// Masked per-class images `[N * B, H, W, 3]`, class-major.
    pub per_class: Var,
    /// Sum of the per-class images, `[B, H, W, 3]`.
    pub composed: Var,
}

/// Decode each class's masked embedding map with the shared decoder and
/// compose the masked outputs by addition.
pub fn class_specific_generate<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    embeddings: Var,
    layouts: &[&Layout],
    num_classes: usize,
    slope: f64,
) -> Result<ClassSpecific> {
    let d = g.shape(embeddings)[3];
    let tiled = g.repeat_batch(embeddings, num_classes)?;
    let emb_mask = g.constant(class_masks(layouts, num_classes, d)?);
    let masked = g.mul(tiled, emb_mask)?;
    let hidden = conv(g, p, "dec.0", masked, ConvGeom::pointwise())?;
    let hidden = g.leaky_relu(hidden, slope);
    let out = conv(g, p, "dec.1", hidden, ConvGeom::pointwise())?;
    let out = g.tanh(out);
    let img_mask = g.constant(class_masks(layouts, num_classes, 3)?);
    let per_class = g.mul(out, img_mask)?;
    let composed = g.sum_batch_groups(per_class, num_classes)?;
    Ok(ClassSpecific { per_class, composed })
}

/// `sum_k mean_{region k} |I - I_k|`, over classes present in the batch.
pub fn l1_class_loss<T: Real>(
    g: &mut Graph<T>,
    per_class: Var,
    image: Var,
    layouts: &[&Layout],
    num_classes: usize,
) -> Result<Var> {
    let mask = class_masks::<T>(layouts, num_classes, 3)?;
    if g.shape(per_class) != mask.shape() {
        return Err(Error::Shape(format!(
            "per-class images {:?} vs masks {:?}",
            g.shape(per_class),
            mask.shape()
        )));
    }
    let group = mask.numel() / num_classes;
    let mut weights = mask.clone();
    for chunk in weights.data_mut().chunks_exact_mut(group) {
        let count = chunk.iter().filter(|&&v| v > T::zero()).count();
        if count > 0 {
            let inv = T::one() / T::of(count as f64);
            chunk.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    let tiled = g.repeat_batch(image, num_classes)?;
    let mask = g.constant(mask);
    let target = g.mul(tiled, mask)?;
    let diff = g.sub(per_class, target)?;
    let abs = g.abs(diff);
    let weights = g.constant(weights);
    let weighted = g.mul(abs, weights)?;
    Ok(g.sum_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct(anchor: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
        let negsum: f64 = neg.iter().map(|n| (dot(anchor, n) / tau).exp()).sum();
        pos.iter()
            .map(|p| {
                let e = (dot(anchor, p) / tau).exp();
                -(e / (e + negsum)).ln()
            })
            .sum::<f64>()
            / pos.len() as f64
    }

    #[test]
    fn info_nce_closed_forms() {
        assert_eq!(info_nce(&[1.0, 0.0], &[vec![1.0, 0.0]], &[], 0.07).unwrap(), 0.0);
        let l = info_nce(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![1.0, 0.0]], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (a, p, n) = (vec![1.0, 0.0], vec![vec![0.0, 1.0]], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert!((info_nce(&a, &p, &n, 0.5).unwrap() - direct(&a, &p, &n, 0.5)).abs() < 1e-12);
        assert!(info_nce(&a, &[], &n, 0.5).is_err());
    }

    #[test]
    fn bank_respects_cap_and_labels() {
        let l = Layout::new(2, 5, 3, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let layouts: Vec<&Layout> = vec![&l; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = sample_bank(&layouts, 1, 2, &mut rng).unwrap();
        assert_eq!(bank.classes, vec![0, 0, 1, 1]);
        for (r, c) in bank.rows.iter().zip(&bank.classes) {
            assert_eq!(l.labels()[r % 10], *c);
            assert_eq!(bank.layout_ids[bank.rows.iter().position(|x| x == r).unwrap()], r / 10);
        }
        let again = sample_bank(&layouts, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(bank, again);
    }

    #[test]
    fn empty_weighted_scales_error() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = ScaleEmbeddings { stride: 1, emb: e, classes: vec![0, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(multiscale_loss(&mut g, &[s.clone()], &[1.0], 0.1, 512, &mut rng).is_err());
        let zero = crossscale_loss(&mut g, &[s], &[(4, 8)], &[0.1], 0.1, 512, &mut rng).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
    }

    #[test]
    fn class_generation_partitions_frame() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_class_decoder(&mut store, &mut rng, 4, 6, 0.5);
        let l = Layout::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let mut g = Graph::<f64>::new();
        let p = Bound::bind(&mut g, &store, false);
        let emb = Tensor::new(&[1, 2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e = g.constant(emb);
        let out = class_specific_generate(&mut g, &p, e, &[&l], 3, 0.2).unwrap();
        let per = g.value(out.per_class).clone();
        let comp = g.value(out.composed).clone();
        for px in 0..6 {
            let k = l.labels()[px] as usize;
            for c in 0..3 {
                let nonzero = (0..3).filter(|&j| per.data()[(j * 6 + px) * 3 + c] != 0.0).count();
                assert!(nonzero <= 1);
                assert_eq!(comp.data()[px * 3 + c], per.data()[(k * 6 + px) * 3 + c]);
            }
        }
    }

    #[test]
    fn l1_offset_counts_present_classes() {
        let l = Layout::new(2, 2, 3, vec![0, 0, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mask = class_masks::<f64>(&[&l], 3, 3).unwrap();
        let per: Vec<f64> = (0..36).map(|i| if mask.data()[i] > 0.0 { img[i % 12] + 0.2 } else { 0.0 }).collect();
        let mut g = Graph::<f64>::new();
        let pc = g.constant(Tensor::new(&[3, 2, 2, 3], per).unwrap());
        let im = g.constant(Tensor::new(&[1, 2, 2, 3], img).unwrap());
        let loss = l1_class_loss(&mut g, pc, im, &[&l], 3).unwrap();
        assert!((g.scalar(loss) - 0.4).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use nalgebra::{DMatrix, DVector};
        use proptest::prelude::*;

        fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), n)
        }

        proptest! {
            #[test]
            fn loss_falls_as_positive_aligns(a in vecs(1), p in vecs(1), n in vecs(4), t in 0.1f64..2.0) {
                let anchor = &a[0];
                let shifted = |s: f64| vec![p[0].iter().zip(anchor).map(|(x, y)| x + s * y).collect::<Vec<f64>>()];
                prop_assume!(dot(anchor, anchor) > 1e-3);
                let before = info_nce(anchor, &shifted(0.0), &n, 0.5).unwrap();
                let after = info_nce(anchor, &shifted(t), &n, 0.5).unwrap();
                prop_assert!(after < before);
            }

            #[test]
            fn loss_is_rotation_invariant(a in vecs(1), p in vecs(2), n in vecs(3), m in proptest::collection::vec(-1.0f64..1.0, 9)) {
                let q = DMatrix::from_row_slice(3, 3, &m).qr().q();
                let rot = |v: &Vec<f64>| (&q * DVector::from_column_slice(v)).as_slice().to_vec();
                let rp: Vec<Vec<f64>> = p.iter().map(rot).collect();
                let rn: Vec<Vec<f64>> = n.iter().map(rot).collect();
                let plain = info_nce(&a[0], &p, &n, 0.3).unwrap();
                let rotated = info_nce(&rot(&a[0]), &rp, &rn, 0.3).unwrap();
                prop_assert!((plain - rotated).abs() <= 1e-6);
            }
        }
    }
}
