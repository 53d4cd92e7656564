use std::fmt;

use edgesynth_tensor::{Graph, Real, Var};
use rand::Rng;

use super::model::SynthesisGraph;
use crate::config::{Config, LossWeights};
use crate::contrastive::{crossscale_loss, gather_bank, l1_class_loss, multiscale_loss, project_embeddings, sample_bank};
use crate::data::{downsample_any, Layout, LayoutPyramid};
use crate::discriminator::{discriminate, feature_matching_loss, g_adv_term, perceptual_loss};
use crate::nn::Bound;
use crate::similarity::{batch_similarity_loss, proxy_segment, reduce_labels};
use crate::{Error, Result};

/// Named terms of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    AdvEdge,
    AdvPrime,
    AdvDprime,
    SimPrime,
    SimDprime,
    ContrastMultiscale,
    ContrastCrossscale,
    L1Class,
    FmEdge,
    FmPrime,
    FmDprime,
    PercEdge,
    PercPrime,
    PercDprime,
}

impl Term {
    pub const ALL: [Term; 14] = [
        Term::AdvEdge,
        Term::AdvPrime,
        Term::AdvDprime,
        Term::SimPrime,
        Term::SimDprime,
        Term::ContrastMultiscale,
        Term::ContrastCrossscale,
        Term::L1Class,
        Term::FmEdge,
        Term::FmPrime,
        Term::FmDprime,
        Term::PercEdge,
        Term::PercPrime,
        Term::PercDprime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::AdvEdge => "adv_edge",
            Term::AdvPrime => "adv_prime",
            Term::AdvDprime => "adv_dprime",
            Term::SimPrime => "sim_prime",
            Term::SimDprime => "sim_dprime",
            Term::ContrastMultiscale => "contrast_ms",
            Term::ContrastCrossscale => "contrast_cs",
            Term::L1Class => "l1_class",
            Term::FmEdge => "fm_edge",
            Term::FmPrime => "fm_prime",
            Term::FmDprime => "fm_dprime",
            Term::PercEdge => "perc_edge",
            Term::PercPrime => "perc_prime",
            Term::PercDprime => "perc_dprime",
        }
    }

    /// Weight of the term in the total objective.
    pub fn coefficient(self, w: &LossWeights) -> f64 {
        match self {
            Term::AdvEdge | Term::AdvPrime => w.lambda_c,
            Term::AdvDprime => w.lambda_c * w.lambda,
            Term::SimPrime | Term::SimDprime => w.lambda_s,
            Term::ContrastMultiscale | Term::ContrastCrossscale | Term::L1Class => w.lambda_l,
            Term::FmEdge | Term::FmPrime => w.lambda_f,
            Term::FmDprime => w.lambda_f * w.lambda,
            Term::PercEdge | Term::PercPrime => w.lambda_p,
            Term::PercDprime => w.lambda_p * w.lambda,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-term values and their weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<(Term, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == t).map(|&(_, v)| v)
    }
}

/// Weighted sum of term values.
pub fn weighted_total(terms: &[(Term, f64)], w: &LossWeights) -> f64 {
    terms.iter().map(|&(t, v)| t.coefficient(w) * v).sum()
}

/// Combine term nodes into the total loss; a non-finite term aborts with
/// its name.
pub fn combine_terms<T: Real>(g: &mut Graph<T>, terms: &[(Term, Var)], w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut values = Vec::with_capacity(terms.len());
    let mut scaled = Vec::with_capacity(terms.len());
    for &(t, v) in terms {
        let x = g.scalar(v).f64();
        if !x.is_finite() {
            return Err(Error::NonFinite(t.name().into()));
        }
        values.push((t, x));
        scaled.push(g.scale(v, t.coefficient(w)));
    }
    let total = g.sum_of(&scaled)?;
    let breakdown = LossBreakdown { total: g.scalar(total).f64(), terms: values };
    Ok((total, breakdown))
}

/// Everything the generator objective reads besides the generator itself.
pub struct TermInputs<'a> {
    pub cfg: &'a Config,
    pub layout: Var,
    pub real_image: Var,
    pub real_edge: Var,
    /// Generator-side parameters, for the projection head.
    pub gen: &'a Bound,
    /// Spectrally normalised discriminator weights, frozen.
    pub disc: &'a Bound,
    pub proxy: &'a Bound,
    pub perceptual: &'a Bound,
    pub layouts: &'a [&'a Layout],
    pub pyramids: &'a [LayoutPyramid],
}

/// Every term enabled by the ablation flags.
pub fn generator_terms<T: Real, R: Rng>(
    g: &mut Graph<T>,
    syn: &SynthesisGraph,
    inp: &TermInputs<'_>,
    rng: &mut R,
) -> Result<Vec<(Term, Var)>> {
    let cfg = inp.cfg;
    let flags = &cfg.ablation;
    let slope = cfg.model.leaky_slope;
    let mut terms = Vec::new();

    let real_img = discriminate(g, inp.disc, inp.layout, inp.real_image, slope)?;
    let prime = discriminate(g, inp.disc, inp.layout, syn.acts.image_prime, slope)?;
    terms.push((Term::AdvPrime, g_adv_term(g, prime.logits)));
    terms.push((Term::FmPrime, feature_matching_loss(g, &real_img.features, &prime.features)?));
    terms.push((Term::PercPrime, perceptual_loss(g, inp.perceptual, inp.real_image, syn.acts.image_prime, slope)?));

    if let Some(edge) = syn.acts.edge {
        let real_e = discriminate(g, inp.disc, inp.layout, inp.real_edge, slope)?;
        let fake_e = discriminate(g, inp.disc, inp.layout, edge, slope)?;
        terms.push((Term::AdvEdge, g_adv_term(g, fake_e.logits)));
        terms.push((Term::FmEdge, feature_matching_loss(g, &real_e.features, &fake_e.features)?));
        terms.push((Term::PercEdge, perceptual_loss(g, inp.perceptual, inp.real_edge, edge, slope)?));
    }

    if let Some(dp) = syn.dprime {
        let fake = discriminate(g, inp.disc, inp.layout, dp, slope)?;
        terms.push((Term::AdvDprime, g_adv_term(g, fake.logits)));
        terms.push((Term::FmDprime, feature_matching_loss(g, &real_img.features, &fake.features)?));
        terms.push((Term::PercDprime, perceptual_loss(g, inp.perceptual, inp.real_image, dp, slope)?));
    }

    if flags.similarity_loss {
        let stride = cfg.dataset.height / cfg.model.similarity_resolution;
        let targets = inp
            .layouts
            .iter()
            .map(|l| downsample_any(l, stride))
            .collect::<Result<Vec<_>>>()?;
        let sim = |g: &mut Graph<T>, img: Var| -> Result<Var> {
            let soft = proxy_segment(g, inp.proxy, img, slope)?;
            let reduced = reduce_labels(g, soft, stride)?;
            batch_similarity_loss(g, reduced, &targets)
        };
        terms.push((Term::SimPrime, sim(g, syn.acts.image_prime)?));
        if let Some(dp) = syn.dprime {
            terms.push((Term::SimDprime, sim(g, dp)?));
        }
    }

    if flags.pixel_contrastive {
        terms.extend(contrastive_terms(g, syn, inp, rng)?);
    }
    Ok(terms)
}

/// Stride weights in use: every configured stride with multi-scale
/// learning, otherwise the stride-1 pixel-wise loss alone.
pub fn active_scale_weights(cfg: &Config) -> Vec<(usize, f64)> {
    let c = &cfg.contrastive;
    if cfg.ablation.multiscale {
        c.strides.iter().copied().zip(c.scale_weights).collect()
    } else {
        vec![(1, c.scale_weights[0])]
    }
}

fn contrastive_terms<T: Real, R: Rng>(
    g: &mut Graph<T>,
    syn: &SynthesisGraph,
    inp: &TermInputs<'_>,
    rng: &mut R,
) -> Result<Vec<(Term, Var)>> {
    let cfg = inp.cfg;
    let c = &cfg.contrastive;
    let scale_weights = active_scale_weights(cfg);
    let pairs: Vec<(usize, usize)> = if cfg.ablation.crossscale { c.cross_pairs.clone() } else { Vec::new() };
    let mut strides: Vec<usize> = scale_weights.iter().map(|&(s, _)| s).collect();
    for &(a, b) in &pairs {
        strides.extend([a, b]);
    }
    strides.sort_unstable();
    strides.dedup();

    let trunk = syn.trunk();
    let mut scales = Vec::with_capacity(strides.len());
    for &s in &strides {
        let proj = match (s, syn.embeddings) {
            (1, Some(e)) => e,
            _ => project_embeddings(g, inp.gen, trunk, s)?,
        };
        let shape = g.shape(proj).to_vec();
        let rows = g.reshape(proj, &[shape[0] * shape[1] * shape[2], shape[3]])?;
        let levels: Vec<Layout> = inp
            .pyramids
            .iter()
            .zip(inp.layouts)
            .map(|(p, l)| p.level(s).cloned().map_or_else(|| downsample_any(l, s), Ok))
            .collect::<Result<_>>()?;
        let refs: Vec<&Layout> = levels.iter().collect();
        let bank = sample_bank(&refs, s, c.anchors_per_class, rng)?;
        scales.push(gather_bank(g, rows, &bank)?);
    }

    let mut out = Vec::new();
    let weighted: Vec<_> = scale_weights
        .iter()
        .map(|&(s, _)| scales.iter().find(|e| e.stride == s).cloned().expect("sampled stride"))
        .collect();
    let weights: Vec<f64> = scale_weights.iter().map(|&(_, w)| w).collect();
    out.push((Term::ContrastMultiscale, multiscale_loss(g, &weighted, &weights, c.tau, c.negatives_cap, rng)?));
    if cfg.ablation.crossscale {
        let cs = crossscale_loss(g, &scales, &pairs, &c.cross_weights, c.tau, c.negatives_cap, rng)?;
        out.push((Term::ContrastCrossscale, cs));
    }
    if let Some(cls) = &syn.class_specific {
        let l1 = l1_class_loss(g, cls.per_class, inp.real_image, inp.layouts, cfg.dataset.num_classes)?;
        out.push((Term::L1Class, l1));
    }
    Ok(out)
}
