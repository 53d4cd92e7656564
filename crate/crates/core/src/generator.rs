//! Shared encoder, edge branch, image branch and attention-guided transfer.

use edgesynth_tensor::{ConvGeom, Graph, Real, Var};
use rand::Rng;

use crate::config::{AblationFlags, ModelConfig};
use crate::nn::{conv, conv_act, Bound, ParamStore};
use crate::{Error, Result};

/// Graph handles of one generator forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorActivations {
    /// Encoder output.
    pub features: Var,
    /// Edge-branch stage outputs; empty without the edge branch.
    pub edge_features: Vec<Var>,
    pub image_features: Vec<Var>,
    /// Generated edge map in `[-1, 1]`.
    pub edge: Option<Var>,
    /// Image-branch output before content transfer.
    pub image_raw: Var,
    /// Image after content transfer (equal to `image_raw` when disabled).
    pub image_prime: Var,
}

/// Layer sizes of the generator trunk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorShape {
    pub num_classes: usize,
    pub channels: usize,
    pub stages: usize,
    pub encoder_layers: usize,
    pub slope: f64,
}

impl GeneratorShape {
    pub fn new(model: &ModelConfig, num_classes: usize) -> Self {
        Self {
            num_classes,
            channels: model.channels,
            stages: model.stages,
            encoder_layers: model.encoder_layers,
            slope: model.leaky_slope,
        }
    }
}

pub fn init_generator<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, s: &GeneratorShape, std: f64) {
    let c = s.channels;
    for i in 0..s.encoder_layers {
        store.init_conv(rng, &format!("enc.{i}"), 3, if i == 0 { s.num_classes } else { c }, c, std);
    }
    for j in 0..s.stages {
        store.init_conv(rng, &format!("edge.{j}"), 3, c, c, std);
    }
    store.init_conv(rng, "edge.head", 3, c, 3, std);
    for j in 0..s.stages {
        store.init_conv(rng, &format!("img.{j}"), 3, c, c, std);
    }
    store.init_conv(rng, "img.head", 3, c, 3, std);
}

/// `sigmoid(edge) * image + image`, elementwise.
pub fn feature_transfer<T: Real>(g: &mut Graph<T>, edge: Var, image: Var) -> Result<Var> {
    if g.shape(edge) != g.shape(image) {
        return Err(Error::Shape(format!(
            "feature_transfer: {:?} vs {:?}",
            g.shape(edge),
            g.shape(image)
        )));
    }
    let gate = g.sigmoid(edge);
    let gated = g.mul(gate, image)?;
    Ok(g.add(gated, image)?)
}

/// Content-level transfer: [`feature_transfer`] on the output maps, clamped
/// back into the image range.
pub fn content_transfer<T: Real>(g: &mut Graph<T>, edge: Var, image_raw: Var) -> Result<Var> {
    let y = feature_transfer(g, edge, image_raw)?;
    Ok(g.clamp(y, -1.0, 1.0))
}

/// Encoder: stacked size-preserving convolutions over the one-hot layout.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, layout: Var, s: &GeneratorShape) -> Result<Var> {
    let shape = g.shape(layout);
    if shape.len() != 4 || shape[3] != s.num_classes {
        return Err(Error::Shape(format!(
            "layout {shape:?} does not have {} class channels",
            s.num_classes
        )));
    }
    let mut x = layout;
    for i in 0..s.encoder_layers {
        x = conv_act(g, p, &format!("enc.{i}"), x, s.slope)?;
    }
    Ok(x)
}

/// Edge generator: `stages` feature maps and a tanh edge head.
pub fn edge_branch<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    features: Var,
    s: &GeneratorShape,
) -> Result<(Vec<Var>, Var)> {
    let mut x = features;
    let mut feats = Vec::with_capacity(s.stages);
    for j in 0..s.stages {
        x = conv_act(g, p, &format!("edge.{j}"), x, s.slope)?;
        feats.push(x);
    }
    let head = conv(g, p, "edge.head", x, ConvGeom::same3())?;
    Ok((feats, g.tanh(head)))
}

/// Image generator. With `edge_features`, every stage output is gated by the
/// matching edge-stage output.
pub fn image_branch<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    features: Var,
    edge_features: Option<&[Var]>,
    s: &GeneratorShape,
) -> Result<(Vec<Var>, Var)> {
    if let Some(ef) = edge_features {
        if ef.len() != s.stages {
            return Err(Error::Invalid(format!(
                "{} edge stages for {} image stages",
                ef.len(),
                s.stages
            )));
        }
    }
    let mut x = features;
    let mut feats = Vec::with_capacity(s.stages);
    for j in 0..s.stages {
        x = conv_act(g, p, &format!("img.{j}"), x, s.slope)?;
        if let Some(ef) = edge_features {
            x = feature_transfer(g, ef[j], x)?;
        }
        feats.push(x);
    }
    let head = conv(g, p, "img.head", x, ConvGeom::same3())?;
    Ok((feats, g.tanh(head)))
}

/// Full generator pass from a one-hot layout `[B, H, W, N]`.
pub fn generate<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: Var,
    s: &GeneratorShape,
    flags: &AblationFlags,
) -> Result<GeneratorActivations> {
    let features = encode(g, p, layout, s)?;
    let (edge_features, edge) = if flags.edge_branch {
        let (f, e) = edge_branch(g, p, features, s)?;
        (f, Some(e))
    } else {
        (Vec::new(), None)
    };
    let transfer = flags.edge_transfer && edge.is_some();
    let (image_features, image_raw) =
        image_branch(g, p, features, transfer.then_some(edge_features.as_slice()), s)?;
    let image_prime = match edge {
        Some(e) if transfer => content_transfer(g, e, image_raw)?,
        _ => image_raw,
    };
    Ok(GeneratorActivations { features, edge_features, image_features, edge, image_raw, image_prime })
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgesynth_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> GeneratorShape {
        GeneratorShape { num_classes: 5, channels: 8, stages: 3, encoder_layers: 4, slope: 0.2 }
    }

    fn params(seed: u64, std: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_generator(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), &shape(), std);
        s
    }

    fn layout(labels: &[u8]) -> Tensor<f64> {
        crate::data::Layout::new(4, 4, 5, labels.to_vec()).unwrap().one_hot()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn transfer_at_zero_and_saturation() {
        let mut g = Graph::<f64>::new();
        let img = g.constant(rand_tensor(&[1, 2, 2, 2], 0));
        let zero = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let out = feature_transfer(&mut g, zero, img).unwrap();
        for (o, i) in g.value(out).data().iter().zip(g.value(img).data()) {
            assert!((o - 1.5 * i).abs() < 1e-15);
        }
        let low = g.constant(Tensor::full(&[1, 2, 2, 2], -1e6));
        let out = feature_transfer(&mut g, low, img).unwrap();
        for (o, i) in g.value(out).data().iter().zip(g.value(img).data()) {
            assert!((o - i).abs() < 1e-6);
        }
        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(feature_transfer(&mut g, bad, img).is_err());
        assert!(content_transfer(&mut g, bad, img).is_err());
    }

    #[test]
    fn content_transfer_zero_image_and_clamp() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(rand_tensor(&[1, 3, 3, 3], 1));
        let z = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let out = content_transfer(&mut g, e, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let raw = g.constant(Tensor::full(&[1, 3, 3, 3], 0.9));
        let ze = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let out = content_transfer(&mut g, ze, raw).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shapes_and_ranges() {
        let s = params(0, 0.5);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let l = g.constant(layout(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0]));
        let a = generate(&mut g, &p, l, &shape(), &AblationFlags::all()).unwrap();
        assert_eq!(g.shape(a.features), &[1, 4, 4, 8]);
        assert_eq!((a.edge_features.len(), a.image_features.len()), (3, 3));
        for v in [a.edge.unwrap(), a.image_raw, a.image_prime] {
            assert_eq!(g.shape(v), &[1, 4, 4, 3]);
            assert!(g.value(v).data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        let wrong = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(encode(&mut g, &p, wrong, &shape()).is_err());
        assert!(image_branch(&mut g, &p, a.features, Some(&a.edge_features[..2]), &shape()).is_err());
    }

    #[test]
    fn encoder_sees_single_pixel_change() {
        let s = params(2, 0.5);
        let eval = |labels: &[u8]| {
            let mut g = Graph::new();
            let p = Bound::bind(&mut g, &s, false);
            let l = g.constant(layout(labels));
            let f = encode(&mut g, &p, l, &shape()).unwrap();
            g.value(f).clone()
        };
        let a = [0u8; 16];
        let mut b = a;
        b[5] = 3;
        assert_eq!(eval(&a), eval(&a));
        assert_ne!(eval(&a), eval(&b));
    }

    #[test]
    fn zero_head_gives_zero_edges() {
        let mut s = params(3, 0.5);
        for name in ["edge.head.w", "edge.head.b"] {
            s.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let f = g.constant(Tensor::zeros(&[1, 4, 4, 8]));
        let (feats, e) = edge_branch(&mut g, &p, f, &shape()).unwrap();
        assert_eq!(feats.len(), 3);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gate_matches_plain_stack() {
        let s = params(4, 0.5);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &s, false);
        let f = g.constant(rand_tensor(&[1, 4, 4, 8], 5));
        let off: Vec<Var> = (0..3).map(|_| g.constant(Tensor::full(&[1, 4, 4, 8], -1e6))).collect();
        let (_, gated) = image_branch(&mut g, &p, f, Some(&off), &shape()).unwrap();
        let (_, plain) = image_branch(&mut g, &p, f, None, &shape()).unwrap();
        for (a, b) in g.value(gated).data().iter().zip(g.value(plain).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
