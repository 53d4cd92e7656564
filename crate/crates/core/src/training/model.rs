use edgesynth_tensor::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::contrastive::{class_specific_generate, init_class_decoder, init_projection, project_embeddings, ClassSpecific};
use crate::data::Layout;
use crate::discriminator::{init_discriminator, init_perceptual, init_spectral_state};
use crate::generator::{generate, init_generator, GeneratorActivations, GeneratorShape};
use crate::nn::{Bound, ParamStore};
use crate::semantic::{build_concat, class_gate, init_semantic, refine_to_image, ClassGate};
use crate::similarity::init_proxy;
use crate::{Error, Result};

const PERCEPTUAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Every parameter set of the system.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// Encoder, both branches, semantic module, projection head and
    /// class-specific decoder.
    pub gen: ParamStore<f32>,
    pub disc: ParamStore<f32>,
    /// Power-iteration vectors of the discriminator weights.
    pub spectral: ParamStore<f32>,
    pub proxy: ParamStore<f32>,
    /// Frozen perceptual extractor.
    pub perceptual: ParamStore<f32>,
}

impl Model {
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let n = cfg.dataset.num_classes;
        let std = m.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut gen = ParamStore::new();
        init_generator(&mut gen, &mut rng, &GeneratorShape::new(m, n), std);
        init_semantic(&mut gen, &mut rng, m.channels, n, std);
        init_projection(&mut gen, &mut rng, m.channels, cfg.contrastive.embed_dim, std);
        init_class_decoder(&mut gen, &mut rng, cfg.contrastive.embed_dim, m.decoder_hidden, std);
        let mut disc = ParamStore::new();
        init_discriminator(&mut disc, &mut rng, n + 3, m.disc_channels, std);
        let spectral = init_spectral_state(&disc, &mut rng)?;
        let mut proxy = ParamStore::new();
        init_proxy(&mut proxy, &mut rng, m.proxy_channels, n, std);
        let perceptual = init_perceptual(m.perceptual_channels, cfg.train.seed ^ PERCEPTUAL_SALT);
        Ok(Self { gen, disc, spectral, proxy, perceptual })
    }

    /// Run the generator on `layouts` without recording gradients.
    pub fn synthesize(&self, cfg: &Config, layouts: &[Layout]) -> Result<Synthesis> {
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &self.gen, false);
        let s = g.constant(stack_layouts(layouts)?);
        let refs: Vec<&Layout> = layouts.iter().collect();
        let out = synthesize_graph(&mut g, &p, s, &refs, cfg, true)?;
        let take = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(Synthesis {
            edge: take(out.acts.edge),
            attention: take(out.acts.edge).map(|t| t.map(sigmoid)),
            image_prime: g.value(out.acts.image_prime).clone(),
            image_dprime: take(out.dprime),
            class_image: take(out.class_specific.map(|c| c.composed)),
            class_map: take(out.gate.map(|c| c.gated)),
            final_image: g.value(out.final_image).clone(),
        })
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Generator outputs as plain tensors, batch-major NHWC.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub edge: Option<Tensor<f32>>,
    /// `sigmoid` of the edge map, the content-transfer attention.
    pub attention: Option<Tensor<f32>>,
    pub image_prime: Tensor<f32>,
    pub image_dprime: Option<Tensor<f32>>,
    pub class_image: Option<Tensor<f32>>,
    pub class_map: Option<Tensor<f32>>,
    pub final_image: Tensor<f32>,
}

pub fn stack_layouts<T: Real>(layouts: &[Layout]) -> Result<Tensor<T>> {
    if layouts.is_empty() {
        return Err(Error::Invalid("no layouts".into()));
    }
    Ok(Tensor::stack_batch(&layouts.iter().map(Layout::one_hot).collect::<Vec<_>>())?)
}

/// Graph handles of the full generator side.
#[derive(Clone, Debug)]
pub struct SynthesisGraph {
    pub acts: GeneratorActivations,
    pub gate: Option<ClassGate>,
    pub dprime: Option<Var>,
    /// Stride-1 unit embeddings `[B, H, W, D]`.
    pub embeddings: Option<Var>,
    pub class_specific: Option<ClassSpecific>,
    pub final_image: Var,
}

impl SynthesisGraph {
    /// Trunk features the projection head reads.
    pub fn trunk(&self) -> Var {
        *self.acts.image_features.last().unwrap_or(&self.acts.features)
    }
}

/// Generator, semantic module and class-specific generation as enabled by
/// `cfg.ablation`. `class_specific` also requires pixel contrastive learning.
pub fn synthesize_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: Var,
    layouts: &[&Layout],
    cfg: &Config,
    class_specific: bool,
) -> Result<SynthesisGraph> {
    let flags = &cfg.ablation;
    let n = cfg.dataset.num_classes;
    let shape = GeneratorShape::new(&cfg.model, n);
    let acts = generate(g, p, layout, &shape, flags)?;
    let (gate, dprime) = if flags.semantic_preserving {
        let edge = match acts.edge {
            Some(e) => e,
            None => {
                let s = g.shape(acts.image_prime).to_vec();
                g.constant(Tensor::zeros(&s))
            }
        };
        let concat = build_concat(g, acts.features, layout, edge, acts.image_prime)?;
        let gate = class_gate(g, p, concat)?;
        let out = refine_to_image(g, p, &gate, shape.slope)?;
        (Some(gate), Some(out))
    } else {
        (None, None)
    };
    let trunk = *acts.image_features.last().unwrap_or(&acts.features);
    let (embeddings, class_out) = if flags.pixel_contrastive {
        let e = project_embeddings(g, p, trunk, 1)?;
        let c = if class_specific {
            Some(class_specific_generate(g, p, e, layouts, n, shape.slope)?)
        } else {
            None
        };
        (Some(e), c)
    } else {
        (None, None)
    };
    let mut final_image = dprime.unwrap_or(acts.image_prime);
    if cfg.train.fuse_ig {
        if let Some(c) = &class_out {
            let sum = g.add(final_image, c.composed)?;
            final_image = g.scale(sum, 0.5);
        }
    }
    Ok(SynthesisGraph { acts, gate, dprime, embeddings, class_specific: class_out, final_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;
    use crate::verify::tiny_config;

    fn layouts(cfg: &Config) -> Vec<Layout> {
        (0..2).map(|i| generate_scene(i, &cfg.dataset).unwrap().layout).collect()
    }

    #[test]
    fn synthesis_is_deterministic_and_keeps_resolution() {
        let cfg = tiny_config(5);
        let model = Model::init(&cfg).unwrap();
        let l = layouts(&cfg);
        let a = model.synthesize(&cfg, &l).unwrap();
        let b = model.synthesize(&cfg, &l).unwrap();
        assert_eq!(a.final_image, b.final_image);
        assert_eq!(a.edge, b.edge);
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        for t in [Some(&a.final_image), a.edge.as_ref(), a.attention.as_ref(), a.image_dprime.as_ref(), a.class_image.as_ref()] {
            assert_eq!(t.unwrap().shape(), &[2, h, w, 3]);
        }
        assert_eq!(Some(&a.final_image), a.image_dprime.as_ref());
    }

    #[test]
    fn fused_output_averages_refined_and_class_images() {
        let mut cfg = tiny_config(6);
        let model = Model::init(&cfg).unwrap();
        let l = layouts(&cfg);
        let plain = model.synthesize(&cfg, &l).unwrap();
        cfg.train.fuse_ig = true;
        let fused = model.synthesize(&cfg, &l).unwrap();
        let (d, c) = (plain.image_dprime.unwrap(), plain.class_image.unwrap());
        for ((f, x), y) in fused.final_image.data().iter().zip(d.data()).zip(c.data()) {
            assert!((f - 0.5 * (x + y)).abs() < 1e-6);
        }
    }
}
