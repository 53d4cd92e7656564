use edgesynth_tensor::{ConvGeom, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, random_tensor, Check};
use crate::config::{Config, DatasetConfig, LossWeights, ShapeProbabilities};
use crate::contrastive::{
    class_specific_generate, crossscale_loss, info_nce, info_nce_from_logits, init_class_decoder, init_projection,
    l1_class_loss, multiscale_loss, pixel_contrastive_loss, project_embeddings, sample_bank, ScaleEmbeddings,
};
use crate::data::{
    downsample_layout, generate_scene, render_layout, Batch, BatchIterator, DatasetSpec, Layout, LayoutPyramid, CIRCLE,
    NUM_CLASSES,
};
use crate::discriminator::{
    d_loss_edge, d_loss_image, discriminate, feature_matching_loss, g_adv_loss, init_discriminator,
    init_perceptual, perceptual_loss,
};
use crate::eval::{compute_miou, edge_f1, oracle_segment};
use crate::generator::{
    content_transfer, edge_branch, encode, feature_transfer, image_branch, init_generator, GeneratorShape,
};
use crate::nn::{Bound, ParamStore};
use crate::semantic::{build_concat, class_gate, gate_channels, init_semantic, refine_to_image};
use crate::similarity::{layout_similarity, proxy_segment, similarity_loss, similarity_map};
use crate::training::losses::{combine_terms, Term};
use crate::training::{pretrain_proxy, train_step, TrainState};
use crate::Result;

const LOOP_TOL: f64 = 1e-7;
const LOGIT_TOL: f64 = 1e-6;
const SLOPE: f64 = 0.2;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        SLOPE * x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn graph_value(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

/// Direct convolution over NHWC input with weights `[k*k*cin, cout]`.
fn conv_loop(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let s = x.shape();
    let (n, h, wd, cin) = (s[0], s[1], s[2], s[3]);
    let cout = w.dim(1);
    let (k, st, pad) = (geom.kernel as isize, geom.stride as isize, geom.pad as isize);
    let ho = ((h as isize + 2 * pad - k) / st + 1) as usize;
    let wo = ((wd as isize + 2 * pad - k) / st + 1) as usize;
    let mut out = vec![0.0; n * ho * wo * cout];
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize * st + ky - pad;
                            let ix = ox as isize * st + kx - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xi = x.data()[((bi * h + iy as usize) * wd + ix as usize) * cin + ci];
                                let wi = w.data()[((ky * k + kx) as usize * cin + ci) * cout + co];
                                acc += xi * wi;
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, cout], out).expect("conv output")
}

fn shape_small() -> GeneratorShape {
    GeneratorShape { num_classes: NUM_CLASSES, channels: 6, stages: 3, encoder_layers: 4, slope: SLOPE }
}

fn generator_params(seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_generator(&mut s, &mut rng, &shape_small(), 0.4);
    init_semantic(&mut s, &mut rng, 6, NUM_CLASSES, 0.4);
    init_projection(&mut s, &mut rng, 6, 4, 0.4);
    s
}

fn small_layout(seed: u64, h: usize, w: usize) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Layout::new(h, w, NUM_CLASSES, (0..h * w).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect()).expect("layout")
}

fn data_checks(out: &mut Vec<Check>) -> Result<()> {
    let cfg = DatasetConfig::default();
    let a = generate_scene(7, &cfg)?;
    let b = generate_scene(7, &cfg)?;
    let same = a.layout == b.layout
        && a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.edge.data().iter().zip(b.edge.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    out.push(Check::holds("scene generation is bit-reproducible", same));

    let circles = DatasetConfig {
        shape_probabilities: ShapeProbabilities { circle: 1.0, ..ShapeProbabilities::none() },
        ..DatasetConfig::default()
    };
    let mut worst = 1.0f64;
    for seed in 0..10 {
        let s = generate_scene(seed, &circles)?;
        let (h, w) = (circles.height, circles.width);
        let inside: Vec<usize> = (0..h * w).filter(|&i| s.layout.labels()[i] == CIRCLE).collect();
        if inside.is_empty() {
            continue;
        }
        let n = inside.len() as f64;
        let cy = inside.iter().map(|&i| (i / w) as f64 + 0.5).sum::<f64>() / n;
        let cx = inside.iter().map(|&i| (i % w) as f64 + 0.5).sum::<f64>() / n;
        let r = (n / std::f64::consts::PI).sqrt();
        let mask = s.edge.edge_mask();
        let edges: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
        let near = edges
            .iter()
            .filter(|&&i| (((i / w) as f64 + 0.5 - cy).hypot((i % w) as f64 + 0.5 - cx) - r).abs() <= 2.0)
            .count();
        worst = worst.min(if edges.is_empty() { 0.0 } else { near as f64 / edges.len() as f64 });
    }
    out.push(Check::at_least("circle edges within 2 px of the boundary", worst, 0.9));

    let mut labels = vec![1u8; 16];
    for i in [0, 2, 3, 5, 6, 9, 10, 12, 15] {
        labels[i] = 2;
    }
    let block = Layout::new(4, 4, NUM_CLASSES, labels)?;
    out.push(Check::holds("4x4 majority block downsamples to class 2", downsample_layout(&block, 4)?.labels() == [2]));

    let spec = DatasetSpec::train(&cfg);
    let first = |seed| BatchIterator::new(spec.clone(), 8, seed).map(|mut it| it.next_ids());
    out.push(Check::holds("batch order depends on the seed", first(1)? != first(2)?));
    Ok(())
}

fn generator_checks(out: &mut Vec<Check>) -> Result<()> {
    let params = generator_params(11);
    let shape = shape_small();
    let layout_a = small_layout(1, 4, 4);
    let mut labels = layout_a.labels().to_vec();
    labels[5] = (labels[5] + 1) % NUM_CLASSES as u8;
    let layout_b = Layout::new(4, 4, NUM_CLASSES, labels)?;
    let features = |l: &Layout| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &params, false);
        let s = g.constant(l.one_hot());
        let f = encode(&mut g, &p, s, &shape)?;
        Ok(graph_value(&g, f))
    };
    out.push(Check::at_least(
        "encoder output moves with a one-pixel layout change",
        max_abs_diff(&features(&layout_a)?, &features(&layout_b)?),
        1e-9,
    ));

    let edges = || -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &params, false);
        let s = g.constant(layout_a.one_hot());
        let f = encode(&mut g, &p, s, &shape)?;
        let (feats, e) = edge_branch(&mut g, &p, f, &shape)?;
        let mut v = graph_value(&g, e);
        for x in feats {
            v.extend(graph_value(&g, x));
        }
        Ok(v)
    };
    out.push(Check::holds("edge branch is bit-reproducible", edges()? == edges()?));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random_tensor(&mut rng, &[1, 2, 2, 2], -3.0, 3.0);
    let x = random_tensor(&mut rng, &[1, 2, 2, 2], -3.0, 3.0);
    let mut g = Graph::new();
    let (ev, xv) = (g.constant(e.clone()), g.constant(x.clone()));
    let ft = feature_transfer(&mut g, ev, xv)?;
    let want: Vec<f64> = e.data().iter().zip(x.data()).map(|(&a, &b)| sigmoid(a) * b + b).collect();
    out.push(Check::at_most("feature transfer matches loop", max_abs_diff(&graph_value(&g, ft), &want), LOOP_TOL));

    let e = random_tensor(&mut rng, &[1, 2, 2, 3], -3.0, 3.0);
    let x = random_tensor(&mut rng, &[1, 2, 2, 3], -1.0, 1.0);
    let (ev, xv) = (g.constant(e.clone()), g.constant(x.clone()));
    let ct = content_transfer(&mut g, ev, xv)?;
    let want: Vec<f64> =
        e.data().iter().zip(x.data()).map(|(&a, &b)| (sigmoid(a) * b + b).clamp(-1.0, 1.0)).collect();
    out.push(Check::at_most("content transfer matches loop", max_abs_diff(&graph_value(&g, ct), &want), LOOP_TOL));

    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &params, false);
    let s = g.constant(layout_a.one_hot());
    let f = encode(&mut g, &p, s, &shape)?;
    let closed: Vec<Var> = (0..shape.stages).map(|_| g.constant(Tensor::full(&[1, 4, 4, 6], -1e6))).collect();
    let (_, gated) = image_branch(&mut g, &p, f, Some(&closed), &shape)?;
    let (_, plain) = image_branch(&mut g, &p, f, None, &shape)?;
    out.push(Check::at_most(
        "closed transfer gates reproduce the plain stack",
        max_abs_diff(&graph_value(&g, gated), &graph_value(&g, plain)),
        1e-6,
    ));
    Ok(())
}

fn semantic_checks(out: &mut Vec<Check>) -> Result<()> {
    let params = generator_params(12);
    let layout = small_layout(2, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let f = g.constant(random_tensor(&mut rng, &[1, 4, 4, 6], -1.0, 1.0));
    let s = g.constant(layout.one_hot());
    let e = g.constant(random_tensor(&mut rng, &[1, 4, 4, 3], -1.0, 1.0));
    let i = g.constant(random_tensor(&mut rng, &[1, 4, 4, 3], -1.0, 1.0));
    let concat = build_concat(&mut g, f, s, e, i)?;
    let slice = g.slice(concat, 3, 6, NUM_CLASSES)?;
    out.push(Check::holds("concat slice recovers the layout", g.value(slice) == g.value(s)));

    let fc = random_tensor(&mut rng, &[1, 2, 2, 3], -2.0, 2.0);
    let fv = g.constant(fc.clone());
    let (gamma, gated) = gate_channels(&mut g, fv)?;
    let mut want_gamma = vec![0.0; 3];
    for (k, slot) in want_gamma.iter_mut().enumerate() {
        let mean = (0..4).map(|px| fc.data()[px * 3 + k]).sum::<f64>() / 4.0;
        *slot = sigmoid(mean);
    }
    let want_gated: Vec<f64> = (0..12).map(|j| fc.data()[j] * want_gamma[j % 3] + fc.data()[j]).collect();
    let err = max_abs_diff(&graph_value(&g, gamma), &want_gamma).max(max_abs_diff(&graph_value(&g, gated), &want_gated));
    out.push(Check::at_most("class gate matches pool/sigmoid/affine loop", err, LOOP_TOL));

    let refine = || -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &params, false);
        let f = g.constant(Tensor::full(&[1, 4, 4, 6], 0.3));
        let s = g.constant(layout.one_hot());
        let z = g.constant(Tensor::full(&[1, 4, 4, 3], -0.2));
        let c = build_concat(&mut g, f, s, z, z)?;
        let gate = class_gate(&mut g, &p, c)?;
        let y = refine_to_image(&mut g, &p, &gate, SLOPE)?;
        Ok(graph_value(&g, y))
    };
    out.push(Check::holds("refinement is bit-reproducible", refine()? == refine()?));
    Ok(())
}

fn argmax_layout(t: &Tensor<f32>, b: usize) -> Result<Layout> {
    let s = t.shape();
    let (h, w, n) = (s[1], s[2], s[3]);
    let px = &t.data()[b * h * w * n..(b + 1) * h * w * n];
    let labels = px
        .chunks_exact(n)
        .map(|p| {
            let mut best = 0;
            for k in 1..n {
                if p[k] > p[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Layout::new(h, w, n, labels)
}

fn similarity_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut cfg = Config::desk();
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.train.seed = 5;
    let proxy = pretrain_proxy(&cfg, 600, 5e-3)?;
    let spec = DatasetSpec::heldout(&cfg.dataset, 8);
    let mut worst = 1.0f64;
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &proxy, false);
    for id in 0..8 {
        let scene = spec.scene(id)?;
        let img = g.constant(scene.image.to_tensor());
        let soft = proxy_segment(&mut g, &p, img, cfg.model.leaky_slope)?;
        let pred = argmax_layout(g.value(soft), 0)?;
        worst = worst.min(compute_miou(&pred, &scene.layout)?.mean_iou);
    }
    out.push(Check::at_least("pretrained proxy segments held-out scenes (mIoU)", worst, 0.95));

    let checker = Layout::new(2, 2, NUM_CLASSES, vec![0, 1, 1, 0])?;
    let mut g = Graph::<f64>::new();
    let s = g.constant(checker.one_hot());
    let a = similarity_map(&mut g, s)?;
    let mut want = vec![0.0; 16];
    for j in 0..4 {
        for i in 0..4 {
            want[j * 4 + i] = if checker.labels()[j] == checker.labels()[i] { 1.0 } else { 0.0 };
        }
    }
    let literal = [1., 0., 0., 1., 0., 1., 1., 0., 0., 1., 1., 0., 1., 0., 0., 1.];
    let ok = graph_value(&g, a) == want && want == literal && layout_similarity::<f64>(&checker)?.data() == want.as_slice();
    out.push(Check::holds("checkerboard similarity map", ok));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = random_tensor(&mut rng, &[16, 16], 0.0, 1.0);
    let target: Vec<f64> = (0..256).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let tv = g.constant(Tensor::new(&[16, 16], target.clone())?);
    let pv = g.constant(pred.clone());
    let l = similarity_loss(&mut g, tv, pv)?;
    let mut acc = 0.0;
    for m in 0..256 {
        let q = pred.data()[m].clamp(1e-7, 1.0 - 1e-7);
        acc -= target[m] * q.ln() + (1.0 - target[m]) * (1.0 - q).ln();
    }
    out.push(Check::at_most("similarity BCE matches loop", (g.scalar(l) - acc / 256.0).abs(), LOOP_TOL));
    Ok(())
}

/// Supervised InfoNCE evaluated straight from its definition.
fn info_nce_loop(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], tau: f64) -> f64 {
    let negsum: f64 = neg.iter().map(|n| (dot(anchor, n) / tau).exp()).sum();
    let mut acc = 0.0;
    for p in pos {
        let e = (dot(anchor, p) / tau).exp();
        acc += -(e / (e + negsum)).ln();
    }
    acc / pos.len() as f64
}

/// Mean over anchors with a positive of the per-anchor loss, where
/// candidates come from `cands` and `same` excludes the anchor itself.
fn contrast_loop(anchors: &[Vec<f64>], ac: &[u8], cands: &[Vec<f64>], cc: &[u8], same: bool, tau: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (i, a) in anchors.iter().enumerate() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, c) in cands.iter().enumerate() {
            if same && i == j {
                continue;
            }
            if cc[j] == ac[i] {
                pos.push(c.as_slice());
            } else {
                neg.push(c.as_slice());
            }
        }
        if !pos.is_empty() {
            total += info_nce_loop(a, &pos, &neg, tau);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn unit_rows<R: Rng>(rng: &mut R, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).expect("rows")
}

fn contrastive_checks(out: &mut Vec<Check>) -> Result<()> {
    let params = generator_params(13);
    let project = || -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &params, false);
        let f = g.constant(Tensor::full(&[1, 4, 4, 6], 0.25));
        let e = project_embeddings(&mut g, &p, f, 1)?;
        Ok(graph_value(&g, e))
    };
    out.push(Check::holds("projection is bit-reproducible", project()? == project()?));

    let cfg = DatasetConfig::default();
    let layouts = (0..8).map(|i| generate_scene(100 + i, &cfg).map(|s| s.layout)).collect::<Result<Vec<_>>>()?;
    let pyramids = layouts.iter().map(LayoutPyramid::build).collect::<Result<Vec<_>>>()?;
    let mut mismatched = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for stride in [1, 4, 8, 16] {
        let levels: Vec<&Layout> = pyramids.iter().map(|p| p.level(stride).expect("pyramid level")).collect();
        let bank = sample_bank(&levels, stride, 64, &mut rng)?;
        let hw = levels[0].height() * levels[0].width();
        for (r, &c) in bank.rows.iter().zip(&bank.classes) {
            mismatched += (levels[r / hw].labels()[r % hw] != c) as usize;
        }
    }
    out.push(Check::holds("bank anchors carry their pyramid label", mismatched == 0));

    let anchor = [1.0, 0.0];
    let positives = [[0.0, 1.0]];
    let negatives = [[-1.0, 0.0], [0.0, -1.0]];
    let want = info_nce_loop(&anchor, &[&positives[0]], &[&negatives[0], &negatives[1]], 0.5);
    let plain = info_nce(&anchor, &[positives[0].to_vec()], &negatives.iter().map(|n| n.to_vec()).collect::<Vec<_>>(), 0.5)?;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::new(&[1, 3], vec![0.0, -2.0, 0.0])?);
    let batched = info_nce_from_logits(&mut g, logits, &[true, false, false], &[false, true, true])?.expect("valid anchor");
    let err = (plain - want).abs().max((g.scalar(batched) - want).abs());
    out.push(Check::at_most("InfoNCE 2-D example matches loop", err, LOOP_TOL));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (ra, rb) = (unit_rows(&mut rng, 9, 4), unit_rows(&mut rng, 7, 4));
    let ca: Vec<u8> = (0..9).map(|i| (i % 3) as u8).collect();
    let cb: Vec<u8> = (0..7).map(|i| (i % 2) as u8).collect();
    let a = contrast_loop(&ra, &ca, &ra, &ca, true, 0.2).expect("positives");
    let b = contrast_loop(&rb, &cb, &rb, &cb, true, 0.2).expect("positives");
    let mut g = Graph::<f64>::new();
    let scales = [
        ScaleEmbeddings { stride: 1, emb: g.constant(rows_tensor(&ra)), classes: ca.clone() },
        ScaleEmbeddings { stride: 4, emb: g.constant(rows_tensor(&rb)), classes: cb.clone() },
        ScaleEmbeddings { stride: 8, emb: g.constant(rows_tensor(&rb)), classes: cb.clone() },
        ScaleEmbeddings { stride: 16, emb: g.constant(rows_tensor(&ra)), classes: ca.clone() },
    ];
    let ms = multiscale_loss(&mut g, &scales, &[0.5, 0.5, 0.0, 0.0], 0.2, 512, &mut rng)?;
    out.push(Check::at_most("multi-scale loss composes per-scale losses", (g.scalar(ms) - 0.5 * (a + b)).abs(), LOOP_TOL));

    let (fine, coarse) = (unit_rows(&mut rng, 4, 3), unit_rows(&mut rng, 4, 3));
    let classes = vec![0u8, 0, 1, 1];
    let mut exhaustive = 0.0;
    for i in 0..4 {
        let mut acc = 0.0;
        let mut npos = 0;
        for j in 0..4 {
            if classes[j] != classes[i] {
                continue;
            }
            let e = (dot(&fine[i], &coarse[j]) / 0.3).exp();
            let mut denom = e;
            for k in 0..4 {
                if classes[k] != classes[i] {
                    denom += (dot(&fine[i], &coarse[k]) / 0.3).exp();
                }
            }
            acc += -(e / denom).ln();
            npos += 1;
        }
        exhaustive += acc / npos as f64;
    }
    let exhaustive = 0.1 * exhaustive / 4.0;
    let mut g = Graph::<f64>::new();
    let scales = [
        ScaleEmbeddings { stride: 4, emb: g.constant(rows_tensor(&fine)), classes: classes.clone() },
        ScaleEmbeddings { stride: 8, emb: g.constant(rows_tensor(&coarse)), classes: classes.clone() },
    ];
    let cs = crossscale_loss(&mut g, &scales, &[(4, 8)], &[0.1], 0.3, 512, &mut rng)?;
    out.push(Check::at_most("cross-scale loss matches exhaustive loop", (g.scalar(cs) - exhaustive).abs(), LOOP_TOL));

    let mut store = ParamStore::<f64>::new();
    init_class_decoder(&mut store, &mut rng, 4, 5, 0.5);
    let layouts = [small_layout(20, 3, 3), small_layout(21, 3, 3)];
    let refs: Vec<&Layout> = layouts.iter().collect();
    let emb = random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let image = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let p = Bound::bind(&mut g, &store, false);
    let ev = g.constant(emb);
    let iv = g.constant(image.clone());
    let cls = class_specific_generate(&mut g, &p, ev, &refs, NUM_CLASSES, SLOPE)?;
    let per = graph_value(&g, cls.per_class);
    let plane = 2 * 9 * 3;
    let mut composed = vec![0.0; plane];
    for k in 0..NUM_CLASSES {
        for (j, slot) in composed.iter_mut().enumerate() {
            *slot += per[k * plane + j];
        }
    }
    out.push(Check::at_most(
        "class composition matches loop",
        max_abs_diff(&graph_value(&g, cls.composed), &composed),
        LOOP_TOL,
    ));

    let l1 = l1_class_loss(&mut g, cls.per_class, iv, &refs, NUM_CLASSES)?;
    let mut want = 0.0;
    for k in 0..NUM_CLASSES {
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, l) in layouts.iter().enumerate() {
            for px in 0..9 {
                if l.labels()[px] as usize != k {
                    continue;
                }
                for c in 0..3 {
                    let idx = (b * 9 + px) * 3 + c;
                    sum += (image.data()[idx] - per[k * plane + idx]).abs();
                    count += 1;
                }
            }
        }
        if count > 0 {
            want += sum / count as f64;
        }
    }
    out.push(Check::at_most("class L1 loss matches loop", (g.scalar(l1) - want).abs(), LOOP_TOL));
    Ok(())
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).exp().ln_1p())
}

fn mean(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64
}

fn discriminator_checks(out: &mut Vec<Check>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    init_discriminator(&mut store, &mut rng, NUM_CLASSES + 3, 4, 0.3);
    let layout = small_layout(3, 16, 16);
    let x = random_tensor(&mut rng, &[1, 16, 16, 3], -1.0, 1.0);
    let run = || -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &store, false);
        let s = g.constant(layout.one_hot());
        let xv = g.constant(x.clone());
        let o = discriminate(&mut g, &p, s, xv, SLOPE)?;
        let mut v = graph_value(&g, o.logits);
        for f in o.features {
            v.extend(graph_value(&g, f));
        }
        Ok(v)
    };
    out.push(Check::holds("discriminator is bit-reproducible", run()? == run()?));

    let logits: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[2, 2, 2, 1], -5.0, 5.0)).collect();
    let d: Vec<Vec<f64>> = logits.iter().map(|t| t.data().to_vec()).collect();
    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = logits.iter().map(|t| g.constant(t.clone())).collect();
    let edge = d_loss_edge(&mut g, v[0], v[1])?;
    let want = mean(&d[0], |z| sigmoid(z).ln()) + mean(&d[1], |z| (1.0 - sigmoid(z)).ln());
    out.push(Check::at_most("edge adversarial objective matches loop", (g.scalar(edge) - want).abs(), LOGIT_TOL));

    let image = d_loss_image(&mut g, v[0], v[1], Some(v[2]), 2.0)?;
    let want = 3.0 * mean(&d[0], |z| sigmoid(z).ln())
        + mean(&d[1], |z| (1.0 - sigmoid(z)).ln())
        + 2.0 * mean(&d[2], |z| (1.0 - sigmoid(z)).ln());
    out.push(Check::at_most("image adversarial objective matches loop", (g.scalar(image) - want).abs(), LOGIT_TOL));

    let adv = g_adv_loss(&mut g, Some(v[0]), v[1], Some(v[2]), 2.0)?;
    let want = -mean(&d[0], log_sigmoid) - mean(&d[1], log_sigmoid) - 2.0 * mean(&d[2], log_sigmoid);
    out.push(Check::at_most("generator adversarial loss matches loop", (g.scalar(adv) - want).abs(), LOGIT_TOL));

    let shapes = [[1, 3, 3, 2], [1, 2, 2, 4], [1, 1, 1, 3]];
    let real: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
    let fake: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
    let rv: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
    let fv: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
    let fm = feature_matching_loss(&mut g, &rv, &fv)?;
    let want = real
        .iter()
        .zip(&fake)
        .map(|(a, b)| max_mean_abs(a.data(), b.data()))
        .sum::<f64>()
        / 3.0;
    out.push(Check::at_most("feature matching matches loop", (g.scalar(fm) - want).abs(), LOOP_TOL));

    let perc = init_perceptual::<f64>([3, 4, 5], 17);
    let x = random_tensor(&mut rng, &[1, 16, 16, 3], -1.0, 1.0);
    let y = random_tensor(&mut rng, &[1, 16, 16, 3], -1.0, 1.0);
    let p = Bound::bind(&mut g, &perc, false);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let pl = perceptual_loss(&mut g, &p, xv, yv, SLOPE)?;
    let (mut hx, mut hy) = (x, y);
    let mut want = 0.0;
    for i in 0..3 {
        let w = perc.get(&format!("perc.{i}.w"))?;
        let b = perc.get(&format!("perc.{i}.b"))?;
        hx = conv_loop(&hx, w, b, ConvGeom::down4()).map(leaky);
        hy = conv_loop(&hy, w, b, ConvGeom::down4()).map(leaky);
        want += max_mean_abs(hx.data(), hy.data());
    }
    out.push(Check::at_most("perceptual loss matches conv loop", (g.scalar(pl) - want / 3.0).abs(), LOOP_TOL));
    Ok(())
}

fn max_mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Weight of each term, written out independently of the objective code.
fn hand_weight(t: Term, w: &LossWeights) -> f64 {
    let refined = matches!(t, Term::AdvDprime | Term::FmDprime | Term::PercDprime);
    let base = match t.name().split('_').next().unwrap_or("") {
        "adv" => w.lambda_c,
        "sim" => w.lambda_s,
        "contrast" | "l1" => w.lambda_l,
        "fm" => w.lambda_f,
        "perc" => w.lambda_p,
        _ => f64::NAN,
    };
    if refined {
        base * w.lambda
    } else {
        base
    }
}

fn training_checks(out: &mut Vec<Check>) -> Result<()> {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::<f64>::new();
    let values: Vec<f64> = Term::ALL.iter().map(|_| rng.gen_range(0.0..3.0)).collect();
    let terms: Vec<(Term, Var)> =
        Term::ALL.iter().zip(&values).map(|(&t, &v)| (t, g.constant(Tensor::scalar(v)))).collect();
    let (_, breakdown) = combine_terms(&mut g, &terms, &w)?;
    let want: f64 = Term::ALL.iter().zip(&values).map(|(&t, &v)| hand_weight(t, &w) * v).sum();
    out.push(Check::at_most("objective is the weighted sum of its terms", (breakdown.total - want).abs(), 1e-9));

    Ok(())
}

fn eval_checks(out: &mut Vec<Check>) -> Result<()> {
    let cfg = DatasetConfig::default();
    let mut worst = 1.0f64;
    for seed in 0..100 {
        let s = generate_scene(seed, &cfg)?;
        worst = worst.min(compute_miou(&oracle_segment(&s.image, NUM_CLASSES)?, &s.layout)?.mean_iou);
    }
    out.push(Check::at_least("oracle segmenter inverts textured renders (min mIoU)", worst, 0.99));
    let flat = generate_scene(3, &cfg)?;
    let exact = oracle_segment(&render_layout(&flat.layout, 3, 0.0), NUM_CLASSES)? == flat.layout;
    out.push(Check::holds("oracle segmenter inverts flat renders exactly", exact));

    let gt = Layout::new(1, 4, NUM_CLASSES, vec![1, 1, 0, 0])?;
    let pred = Layout::new(1, 4, NUM_CLASSES, vec![0, 1, 1, 0])?;
    let iou = compute_miou(&pred, &gt)?.class_iou[1].unwrap_or(f64::NAN);
    out.push(Check::at_most("one-pixel overlap gives IoU 1/3", (iou - 1.0 / 3.0).abs(), 1e-12));

    let s = generate_scene(11, &cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let gt = s.edge.edge_mask();
    let shifted: Vec<bool> = (0..h * w).map(|i| i % w > 0 && gt[i - 1]).collect();
    out.push(Check::at_least("one-pixel edge shift keeps F1 at tolerance 1", edge_f1(&shifted, &gt, h, w, 1)?, 0.99));
    Ok(())
}

/// Independent re-computations of every operation, compared against the library.
pub fn oracle_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    data_checks(&mut out)?;
    generator_checks(&mut out)?;
    semantic_checks(&mut out)?;
    similarity_checks(&mut out)?;
    contrastive_checks(&mut out)?;
    discriminator_checks(&mut out)?;
    training_checks(&mut out)?;
    eval_checks(&mut out)?;
    out.push(fixed_batch_check(&fixed_batch_config())?);
    Ok(out)
}

/// Desk model on 32x32 scenes, batch 4.
pub fn fixed_batch_config() -> Config {
    let mut cfg = Config::desk();
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.train.batch_size = 4;
    cfg
}

/// Trains `cfg` on one repeated batch and compares the generator objective
/// after 200 steps with the first step.
pub fn fixed_batch_check(cfg: &Config) -> Result<Check> {
    let mut state = TrainState::new(cfg.clone())?;
    let spec = DatasetSpec::train(&cfg.dataset);
    let n = cfg.train.batch_size as u64;
    let batch = Batch::from_scenes((0..n).collect(), (0..n).map(|i| spec.scene(i)).collect::<Result<Vec<_>>>()?)?;
    let first = train_step(&mut state, &batch)?.generator.total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut state, &batch)?.generator.total;
    }
    Ok(Check::at_most(format!("fixed batch: loss at step 200 below step 1 ({first:.2})"), last - first, 0.0))
}

/// Loss values known in closed form.
pub fn closed_form_suite() -> Result<Vec<Check>> {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[4, 4], 1.0));
    let half = g.constant(Tensor::full(&[4, 4], 0.5));
    let sim = similarity_loss(&mut g, ones, half)?;
    out.push(Check::at_most("similarity loss, all-ones vs one-half = ln 2", (g.scalar(sim) - ln2).abs(), 1e-12));

    let nce = info_nce(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![1.0, 0.0]], 1.0)?;
    out.push(Check::at_most("InfoNCE, equal positive and negative = ln 2", (nce - ln2).abs(), 1e-12));

    let zeros: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(&[2, 2, 2, 1]))).collect();
    let d = d_loss_image(&mut g, zeros[0], zeros[1], Some(zeros[2]), 2.0)?;
    out.push(Check::at_most("image adversarial objective at zero logits = -4.1589", (g.scalar(d) + 4.1589).abs(), 1e-4));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rows = unit_rows(&mut rng, 10, 4);
    let classes: Vec<u8> = (0..10).map(|i| (i % 3) as u8).collect();
    let other = unit_rows(&mut rng, 6, 4);
    let scales = [
        ScaleEmbeddings { stride: 1, emb: g.constant(rows_tensor(&rows)), classes: classes.clone() },
        ScaleEmbeddings { stride: 4, emb: g.constant(rows_tensor(&other)), classes: classes[..6].to_vec() },
        ScaleEmbeddings { stride: 8, emb: g.constant(rows_tensor(&other)), classes: classes[..6].to_vec() },
        ScaleEmbeddings { stride: 16, emb: g.constant(rows_tensor(&other)), classes: classes[..6].to_vec() },
    ];
    let ms = multiscale_loss(&mut g, &scales, &[1.0, 0.0, 0.0, 0.0], 0.07, 512, &mut ChaCha8Rng::seed_from_u64(0))?;
    let single = pixel_contrastive_loss(&mut g, &scales[0], 0.07, 512, &mut ChaCha8Rng::seed_from_u64(0))?
        .expect("positives");
    out.push(Check::at_most(
        "multi-scale loss with one weight equals pixel-wise loss",
        (g.scalar(ms) - g.scalar(single)).abs(),
        0.0,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_loop_agrees_with_graph_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, &[2, 5, 6, 3], -1.0, 1.0);
        for geom in [ConvGeom::same3(), ConvGeom::down4(), ConvGeom::pointwise()] {
            let w = random_tensor(&mut rng, &[geom.kernel * geom.kernel * 3, 4], -1.0, 1.0);
            let b = random_tensor(&mut rng, &[4], -1.0, 1.0);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
            let want = conv_loop(&x, &w, &b, geom);
            assert_eq!(g.shape(y), want.shape());
            assert!(max_abs_diff(g.value(y).data(), want.data()) < 1e-12);
        }
    }

    #[test]
    fn closed_forms_hold() {
        for c in closed_form_suite().unwrap() {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn loop_oracles_agree_with_small_cases() {
        let mut out = Vec::new();
        generator_checks(&mut out).unwrap();
        semantic_checks(&mut out).unwrap();
        discriminator_checks(&mut out).unwrap();
        eval_checks(&mut out).unwrap();
        for c in out {
            assert!(c.passed(), "{c}");
        }
    }
}
