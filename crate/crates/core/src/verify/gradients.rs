use edgesynth_tensor::{check_gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_tensor, Check};
use crate::config::{AblationFlags, Config};
use crate::contrastive::{
    class_specific_generate, crossscale_loss, init_class_decoder, l1_class_loss, multiscale_loss,
    pixel_contrastive_loss, ScaleEmbeddings,
};
use crate::data::{Layout, LayoutPyramid, NUM_CLASSES};
use crate::discriminator::{
    d_loss_edge, d_loss_image, feature_matching_loss, g_adv_loss, init_perceptual, normalized_weights,
    perceptual_loss,
};
use crate::generator::{content_transfer, feature_transfer};
use crate::nn::{Bound, ParamStore};
use crate::similarity::{layout_similarity, proxy_cross_entropy, reduce_labels, similarity_loss, similarity_map};
use crate::training::losses::{combine_terms, generator_terms, TermInputs};
use crate::training::model::{stack_layouts, synthesize_graph, Model};
use crate::Result;

/// Largest accepted norm-wise relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

/// Step for smooth maps.
const SMOOTH_STEP: f64 = 1e-3;
/// Step for piecewise-linear losses, small enough that a random point is
/// almost surely not within one step of a kink.
const KINK_STEP: f64 = 1e-6;

type Case = fn(u64) -> Result<f64>;

fn random_layout<R: Rng>(rng: &mut R, h: usize, w: usize, n: usize) -> Layout {
    Layout::new(h, w, n, (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect()).expect("layout")
}

/// Random linear functional of `x`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let w = g.constant(random_tensor(&mut rng, g.shape(x), -1.0, 1.0));
    let y = g.mul(x, w)?;
    Ok(g.sum_all(y))
}

fn feature_transfer_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_tensor(&mut rng, &[2, 3, 3, 2], -2.0, 2.0);
    let x = random_tensor(&mut rng, &[2, 3, 3, 2], -2.0, 2.0);
    let r = check_gradients::<_, crate::Error>(&[e, x], SMOOTH_STEP, |g, v| {
        let y = feature_transfer(g, v[0], v[1])?;
        Ok(project(g, y, seed)?)
    })?;
    Ok(r.max_rel_err)
}

fn content_transfer_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = random_tensor(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
    // |sigmoid(e) x + x| < 2 |x| stays clear of the clamp at 1.
    let x = random_tensor(&mut rng, &[2, 3, 3, 3], -0.45, 0.45);
    let r = check_gradients::<_, crate::Error>(&[e, x], SMOOTH_STEP, |g, v| {
        let y = content_transfer(g, v[0], v[1])?;
        Ok(project(g, y, seed)?)
    })?;
    Ok(r.max_rel_err)
}

fn similarity_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&mut rng, &[1, 6, 6, NUM_CLASSES], -2.0, 2.0);
    let target = layout_similarity::<f64>(&random_layout(&mut rng, 3, 3, NUM_CLASSES))?;
    let r = check_gradients::<_, crate::Error>(&[logits], KINK_STEP, |g, v| {
        let soft = g.softmax_last(v[0]);
        let reduced = reduce_labels(g, soft, 2)?;
        let pred = similarity_map(g, reduced)?;
        let t = g.constant(target.clone());
        similarity_loss(g, t, pred)
    })?;
    Ok(r.max_rel_err)
}

fn proxy_ce_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&mut rng, &[2, 3, 3, NUM_CLASSES], -2.0, 2.0);
    let target: Tensor<f64> = stack_layouts(&[random_layout(&mut rng, 3, 3, 5), random_layout(&mut rng, 3, 3, 5)])?;
    let r = check_gradients::<_, crate::Error>(&[logits], SMOOTH_STEP, |g, v| {
        let t = g.constant(target.clone());
        proxy_cross_entropy(g, v[0], t)
    })?;
    Ok(r.max_rel_err)
}

fn unit_scale(g: &mut Graph<f64>, raw: Var, stride: usize, classes: &[u8]) -> ScaleEmbeddings {
    ScaleEmbeddings { stride, emb: g.l2_normalize_rows(raw), classes: classes.to_vec() }
}

fn classes<R: Rng>(rng: &mut R, k: usize, n: u8) -> Vec<u8> {
    let mut c: Vec<u8> = (0..k).map(|_| rng.gen_range(0..n)).collect();
    // Every class appears at least twice so each anchor has a positive.
    for (i, slot) in c.iter_mut().take(2 * n as usize).enumerate() {
        *slot = (i / 2) as u8;
    }
    c
}

fn pixel_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = random_tensor(&mut rng, &[12, 4], -1.0, 1.0);
    let cls = classes(&mut rng, 12, 3);
    let r = check_gradients::<_, crate::Error>(&[raw], KINK_STEP, |g, v| {
        let s = unit_scale(g, v[0], 1, &cls);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(pixel_contrastive_loss(g, &s, 0.5, 512, &mut rng)?.expect("anchors with positives"))
    })?;
    Ok(r.max_rel_err)
}

fn multiscale_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, &[10, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[8, 4], -1.0, 1.0);
    let (ca, cb) = (classes(&mut rng, 10, 3), classes(&mut rng, 8, 3));
    let r = check_gradients::<_, crate::Error>(&[a, b], KINK_STEP, |g, v| {
        let s = [unit_scale(g, v[0], 1, &ca), unit_scale(g, v[1], 4, &cb)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        multiscale_loss(g, &s, &[1.0, 0.7], 0.3, 512, &mut rng)
    })?;
    Ok(r.max_rel_err)
}

fn crossscale_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, &[8, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let c = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let (ca, cb, cc) = (classes(&mut rng, 8, 3), classes(&mut rng, 6, 3), classes(&mut rng, 6, 3));
    let r = check_gradients::<_, crate::Error>(&[a, b, c], KINK_STEP, |g, v| {
        let s = [unit_scale(g, v[0], 4, &ca), unit_scale(g, v[1], 8, &cb), unit_scale(g, v[2], 16, &cc)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crossscale_loss(g, &s, &[(4, 8), (4, 16)], &[0.1, 0.1], 0.3, 512, &mut rng)
    })?;
    Ok(r.max_rel_err)
}

fn class_l1_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    init_class_decoder(&mut store, &mut rng, 4, 6, 0.5);
    let layouts = [random_layout(&mut rng, 3, 3, 3), random_layout(&mut rng, 3, 3, 3)];
    let emb = random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let image = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let r = check_gradients::<_, crate::Error>(&[emb, image], KINK_STEP, |g, v| {
        let p = Bound::bind(g, &store, false);
        let refs: Vec<&Layout> = layouts.iter().collect();
        let out = class_specific_generate(g, &p, v[0], &refs, 3, 0.2)?;
        l1_class_loss(g, out.per_class, v[1], &refs, 3)
    })?;
    Ok(r.max_rel_err)
}

fn edge_adversarial_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = random_tensor(&mut rng, &[2, 2, 2, 1], -4.0, 4.0);
    let fake = random_tensor(&mut rng, &[2, 2, 2, 1], -4.0, 4.0);
    let r = check_gradients::<_, crate::Error>(&[real, fake], SMOOTH_STEP, |g, v| d_loss_edge(g, v[0], v[1]))?;
    Ok(r.max_rel_err)
}

fn image_adversarial_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[2, 2, 2, 1], -4.0, 4.0)).collect();
    let r = check_gradients::<_, crate::Error>(&x, SMOOTH_STEP, |g, v| d_loss_image(g, v[0], v[1], Some(v[2]), 2.0))?;
    Ok(r.max_rel_err)
}

fn generator_adversarial_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[2, 2, 2, 1], -4.0, 4.0)).collect();
    let r = check_gradients::<_, crate::Error>(&x, SMOOTH_STEP, |g, v| g_adv_loss(g, Some(v[0]), v[1], Some(v[2]), 2.0))?;
    Ok(r.max_rel_err)
}

fn feature_matching_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [[1, 4, 4, 3], [1, 2, 2, 5]];
    let mut x = Vec::new();
    for _ in 0..2 {
        for s in &shapes {
            x.push(random_tensor(&mut rng, s, -1.0, 1.0));
        }
    }
    let r = check_gradients::<_, crate::Error>(&x, KINK_STEP, |g, v| feature_matching_loss(g, &v[..2], &v[2..]))?;
    Ok(r.max_rel_err)
}

fn perceptual_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = init_perceptual::<f64>([3, 4, 4], seed);
    let x = random_tensor(&mut rng, &[1, 8, 8, 3], -1.0, 1.0);
    let y = random_tensor(&mut rng, &[1, 8, 8, 3], -1.0, 1.0);
    let r = check_gradients::<_, crate::Error>(&[x, y], KINK_STEP, |g, v| {
        let p = Bound::bind(g, &store, false);
        perceptual_loss(g, &p, v[0], v[1], 0.2)
    })?;
    Ok(r.max_rel_err)
}

/// Smallest configuration that exercises every generator term.
pub(crate) fn tiny_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.dataset.height = 16;
    cfg.dataset.width = 16;
    cfg.model.channels = 4;
    cfg.model.disc_channels = 4;
    cfg.model.proxy_channels = 4;
    cfg.model.decoder_hidden = 4;
    cfg.model.perceptual_channels = [3, 4, 4];
    cfg.model.similarity_resolution = 4;
    cfg.model.init_std = 0.3;
    cfg.contrastive.embed_dim = 4;
    cfg.contrastive.anchors_per_class = 6;
    cfg.contrastive.tau = 0.5;
    cfg.train.batch_size = 2;
    cfg.train.seed = seed;
    cfg.ablation = AblationFlags::all();
    cfg
}

/// Parameters whose gradient reaches every term of the objective.
const OBJECTIVE_INPUTS: [&str; 6] = ["enc.0.b", "edge.head.b", "img.head.b", "sem.out.b", "proj.b", "dec.1.b"];

fn objective_case(seed: u64) -> Result<f64> {
    let cfg = tiny_config(seed);
    let model = Model::init(&cfg)?;
    let gen: ParamStore<f64> = model.gen.cast();
    let disc: ParamStore<f64> = model.disc.cast();
    let spectral: ParamStore<f64> = model.spectral.cast();
    let proxy: ParamStore<f64> = model.proxy.cast();
    let perceptual: ParamStore<f64> = model.perceptual.cast();
    let scenes = (0..2)
        .map(|i| crate::data::generate_scene(seed * 2 + i, &cfg.dataset))
        .collect::<Result<Vec<_>>>()?;
    let layouts: Vec<Layout> = scenes.iter().map(|s| s.layout.clone()).collect();
    let pyramids = layouts.iter().map(LayoutPyramid::build).collect::<Result<Vec<_>>>()?;
    let real_image = Tensor::stack_batch(&scenes.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
    let real_edge = Tensor::stack_batch(&scenes.iter().map(|s| s.edge.to_tensor()).collect::<Vec<_>>())?;
    let inputs: Vec<Tensor<f64>> = OBJECTIVE_INPUTS.iter().map(|n| gen.get(n).cloned()).collect::<Result<_>>()?;
    let r = check_gradients::<_, crate::Error>(&inputs, KINK_STEP, |g, v| {
        let mut p = Bound::bind(g, &gen, false);
        for (name, &var) in OBJECTIVE_INPUTS.iter().zip(v) {
            p.set(*name, var);
        }
        let raw = Bound::bind(g, &disc, false);
        let d = normalized_weights(g, &raw, &spectral)?;
        let pr = Bound::bind(g, &proxy, false);
        let pe = Bound::bind(g, &perceptual, false);
        let s = g.constant(stack_layouts(&layouts)?);
        let refs: Vec<&Layout> = layouts.iter().collect();
        let syn = synthesize_graph(g, &p, s, &refs, &cfg, true)?;
        let ri = g.constant(real_image.clone());
        let re = g.constant(real_edge.clone());
        let inp = TermInputs {
            cfg: &cfg,
            layout: s,
            real_image: ri,
            real_edge: re,
            gen: &p,
            disc: &d,
            proxy: &pr,
            perceptual: &pe,
            layouts: &refs,
            pyramids: &pyramids,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms = generator_terms(g, &syn, &inp, &mut rng)?;
        Ok(combine_terms(g, &terms, &cfg.loss)?.0)
    })?;
    Ok(r.max_rel_err)
}

const CASES: [(&str, Case); 14] = [
    ("feature transfer", feature_transfer_case),
    ("content transfer", content_transfer_case),
    ("similarity loss", similarity_case),
    ("proxy cross-entropy", proxy_ce_case),
    ("pixel-wise contrastive loss", pixel_case),
    ("multi-scale contrastive loss", multiscale_case),
    ("cross-scale contrastive loss", crossscale_case),
    ("class-specific L1 loss", class_l1_case),
    ("edge adversarial objective", edge_adversarial_case),
    ("image adversarial objective", image_adversarial_case),
    ("generator adversarial loss", generator_adversarial_case),
    ("feature matching loss", feature_matching_case),
    ("perceptual loss", perceptual_case),
    ("full generator objective", objective_case),
];

/// Worst relative error of every loss over `seeds` random draws.
pub fn gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (name, case) in CASES {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let e = case(seed)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        out.push(Check::at_most(format!("gradient: {name}"), worst, GRADIENT_TOLERANCE));
    }
    Ok(out)
}
