//! Conditional patch discriminator shared by edges and images, its
//! adversarial objectives, feature matching and the perceptual loss.

use edgesynth_tensor::{ConvGeom, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{conv, Bound, ParamStore};
use crate::{Error, Result};

/// Number of discriminator layers, and of returned feature maps.
pub const DISC_DEPTH: usize = 4;

fn disc_geom(i: usize) -> ConvGeom {
    if i + 1 < DISC_DEPTH {
        ConvGeom::down4()
    } else {
        ConvGeom::same3()
    }
}

pub fn init_discriminator<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    in_channels: usize,
    base: usize,
    std: f64,
) {
    let widths = [in_channels, base, 2 * base, 4 * base, 1];
    for i in 0..DISC_DEPTH {
        store.init_conv(rng, &format!("disc.{i}"), disc_geom(i).kernel, widths[i], widths[i + 1], std);
    }
}

fn unit<T: Real>(v: Vec<T>) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// Random unit power-iteration vectors `disc.{i}.u` (`[cout]`) and
/// `disc.{i}.v` (`[fan_in]`) for every discriminator weight.
pub fn init_spectral_state<T: Real, R: Rng>(params: &ParamStore<T>, rng: &mut R) -> Result<ParamStore<T>> {
    let mut state = ParamStore::new();
    for i in 0..DISC_DEPTH {
        let w = params.get(&format!("disc.{i}.w"))?;
        let (fan_in, cout) = (w.dim(0), w.dim(1));
        let u: Vec<T> = (0..cout).map(|_| T::of(StandardNormal.sample(rng))).collect();
        state.insert(format!("disc.{i}.u"), Tensor::new(&[cout], unit(u))?);
        state.insert(format!("disc.{i}.v"), Tensor::zeros(&[fan_in]));
    }
    power_iteration(params, &mut state)?;
    Ok(state)
}

/// One power-iteration step per weight `W [fan_in, cout]`:
/// `v <- W u / |W u|`, `u <- W^T v / |W^T v|`.
pub fn power_iteration<T: Real>(params: &ParamStore<T>, state: &mut ParamStore<T>) -> Result<()> {
    for i in 0..DISC_DEPTH {
        let w = params.get(&format!("disc.{i}.w"))?;
        let (fan_in, cout) = (w.dim(0), w.dim(1));
        let wd = w.data();
        let u = state.get(&format!("disc.{i}.u"))?.data().to_vec();
        let v: Vec<T> = (0..fan_in)
            .map(|r| (0..cout).map(|c| wd[r * cout + c] * u[c]).sum())
            .collect();
        let v = unit(v);
        let u: Vec<T> = (0..cout)
            .map(|c| (0..fan_in).map(|r| wd[r * cout + c] * v[r]).sum())
            .collect();
        let u = unit(u);
        state.get_mut(&format!("disc.{i}.v"))?.data_mut().copy_from_slice(&v);
        state.get_mut(&format!("disc.{i}.u"))?.data_mut().copy_from_slice(&u);
    }
    Ok(())
}

/// Spectral-norm estimate `v^T W u`.
pub fn spectral_sigma<T: Real>(w: &Tensor<T>, u: &Tensor<T>, v: &Tensor<T>) -> T {
    let cout = w.dim(1);
    let wd = w.data();
    v.data()
        .iter()
        .enumerate()
        .map(|(r, &vr)| vr * (0..cout).map(|c| wd[r * cout + c] * u.data()[c]).sum::<T>())
        .sum()
}

/// `W / sigma` for every weight, with `sigma` built in the graph from the
/// persistent vectors so that its gradient flows to `W`.
pub fn normalized_weights<T: Real>(g: &mut Graph<T>, raw: &Bound, state: &ParamStore<T>) -> Result<Bound> {
    let mut out = raw.clone();
    for i in 0..DISC_DEPTH {
        let w = raw.get(&format!("disc.{i}.w"))?;
        let u = state.get(&format!("disc.{i}.u"))?;
        let v = state.get(&format!("disc.{i}.v"))?;
        let u = g.constant(u.clone().reshape(&[u.numel(), 1])?);
        let v = g.constant(v.clone().reshape(&[1, v.numel()])?);
        let vw = g.matmul(v, w, false, false)?;
        let sigma = g.matmul(vw, u, false, false)?;
        out.set(format!("disc.{i}.w"), g.div_scalar(w, sigma)?);
    }
    Ok(out)
}

/// Patch logits at `H/8 x W/8` and every layer's output.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

/// Discriminate `x` conditioned on `layout`; `p` should hold spectrally
/// normalised weights.
pub fn discriminate<T: Real>(g: &mut Graph<T>, p: &Bound, layout: Var, x: Var, slope: f64) -> Result<DiscriminatorOutput> {
    let (ls, xs) = (g.shape(layout).to_vec(), g.shape(x).to_vec());
    if ls.len() != 4 || xs.len() != 4 || ls[..3] != xs[..3] || xs[3] != 3 {
        return Err(Error::Shape(format!("discriminate: layout {ls:?} vs input {xs:?}")));
    }
    let mut h = g.concat(&[layout, x], 3)?;
    let mut features = Vec::with_capacity(DISC_DEPTH);
    for i in 0..DISC_DEPTH {
        h = conv(g, p, &format!("disc.{i}"), h, disc_geom(i))?;
        if i + 1 < DISC_DEPTH {
            h = g.leaky_relu(h, slope);
        }
        features.push(h);
    }
    Ok(DiscriminatorOutput { logits: h, features })
}

/// Mean of `log sigmoid(x)`.
pub fn mean_log_sigmoid<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.neg(x);
    let sp = g.softplus(n);
    let m = g.mean_all(sp);
    g.neg(m)
}

/// Mean of `log(1 - sigmoid(x))`.
pub fn mean_log_one_minus_sigmoid<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let sp = g.softplus(x);
    let m = g.mean_all(sp);
    g.neg(m)
}

/// Edge objective to maximise: `E log D(real) + E log(1 - D(fake))`.
pub fn d_loss_edge<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let a = mean_log_sigmoid(g, real);
    let b = mean_log_one_minus_sigmoid(g, fake);
    Ok(g.add(a, b)?)
}

/// Image objective to maximise:
/// `(l + 1) E log D(I) + E log(1 - D(I')) + l E log(1 - D(I''))`.
/// Without a refined image the `l` terms are absent.
pub fn d_loss_image<T: Real>(
    g: &mut Graph<T>,
    real: Var,
    prime: Var,
    dprime: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let r = mean_log_sigmoid(g, real);
    let f1 = mean_log_one_minus_sigmoid(g, prime);
    let mut parts = vec![f1];
    let real_weight = match dprime {
        Some(d) => {
            let f2 = mean_log_one_minus_sigmoid(g, d);
            parts.push(g.scale(f2, lambda));
            lambda + 1.0
        }
        None => 1.0,
    };
    parts.push(g.scale(r, real_weight));
    Ok(g.sum_of(&parts)?)
}

/// Non-saturating generator term `-E log D(fake)`.
pub fn g_adv_term<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let l = mean_log_sigmoid(g, fake);
    g.neg(l)
}

/// `-E log D(edge) - E log D(I') - l E log D(I'')` over the fakes given.
pub fn g_adv_loss<T: Real>(
    g: &mut Graph<T>,
    edge: Option<Var>,
    prime: Var,
    dprime: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let mut parts = vec![g_adv_term(g, prime)];
    if let Some(e) = edge {
        parts.push(g_adv_term(g, e));
    }
    if let Some(d) = dprime {
        let t = g_adv_term(g, d);
        parts.push(g.scale(t, lambda));
    }
    Ok(g.sum_of(&parts)?)
}

/// Mean absolute difference per layer, averaged over layers.
pub fn feature_matching_loss<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    mean_abs_over_layers(g, real, fake)
}

fn mean_abs_over_layers<T: Real>(g: &mut Graph<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} vs {} feature maps", a.len(), b.len())));
    }
    let mut parts = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = g.sub(x, y)?;
        let d = g.abs(d);
        parts.push(g.mean_all(d));
    }
    let total = g.sum_of(&parts)?;
    Ok(g.scale(total, 1.0 / a.len() as f64))
}

pub const PERCEPTUAL_DEPTH: usize = 3;

/// Frozen random feature extractor: three stride-2 convolutions with
/// He-scaled weights drawn from `seed`.
pub fn init_perceptual<T: Real>(channels: [usize; PERCEPTUAL_DEPTH], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cin = 3;
    for (i, &c) in channels.iter().enumerate() {
        let std = (2.0 / (16 * cin) as f64).sqrt();
        store.init_conv(&mut rng, &format!("perc.{i}"), 4, cin, c, std);
        cin = c;
    }
    store
}

pub fn perceptual_features<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var, slope: f64) -> Result<Vec<Var>> {
    let mut h = x;
    let mut out = Vec::with_capacity(PERCEPTUAL_DEPTH);
    for i in 0..PERCEPTUAL_DEPTH {
        h = conv(g, p, &format!("perc.{i}"), h, ConvGeom::down4())?;
        h = g.leaky_relu(h, slope);
        out.push(h);
    }
    Ok(out)
}

/// Mean absolute difference of extractor features, averaged over depths.
pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var, y: Var, slope: f64) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::Shape(format!("perceptual_loss: {:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    let fx = perceptual_features(g, p, x, slope)?;
    let fy = perceptual_features(g, p, y, slope)?;
    mean_abs_over_layers(g, &fx, &fy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new(&[1, 1, v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn closed_forms_at_zero() {
        let mut g = Graph::<f64>::new();
        let z = logits(&mut g, &[0.0; 4]);
        let half = 0.5f64.ln();
        let e = d_loss_edge(&mut g, z, z).unwrap();
        assert!((g.scalar(e) - 2.0 * half).abs() < 1e-12);
        let i = d_loss_image(&mut g, z, z, Some(z), 2.0).unwrap();
        assert!((g.scalar(i) - 6.0 * half).abs() < 1e-12);
        assert!((g.scalar(i) + 4.1589).abs() < 1e-4);
        let i0 = d_loss_image(&mut g, z, z, Some(z), 0.0).unwrap();
        assert!((g.scalar(i0) - 2.0 * half).abs() < 1e-12);
        let a = g_adv_loss(&mut g, Some(z), z, Some(z), 2.0).unwrap();
        assert!((g.scalar(a) + 4.0 * half).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_and_extremes_stay_finite() {
        let mut g = Graph::<f64>::new();
        let r = logits(&mut g, &[50.0, 800.0]);
        let f = logits(&mut g, &[-50.0, -800.0]);
        let e = d_loss_edge(&mut g, r, f).unwrap();
        assert!(g.scalar(e) <= 0.0 && g.scalar(e) > -1e-20);
        let bad = d_loss_edge(&mut g, f, r).unwrap();
        assert!(g.scalar(bad).is_finite());
        let a = g_adv_loss(&mut g, None, r, None, 2.0).unwrap();
        assert!(g.scalar(a).is_finite());
    }

    #[test]
    fn generator_loss_falls_as_fakes_rise() {
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let mut g = Graph::<f64>::new();
            let f = logits(&mut g, &[k as f64 - 2.0, k as f64 * 0.5]);
            let l = g_adv_loss(&mut g, Some(f), f, Some(f), 2.0).unwrap();
            assert!(g.scalar(l) < prev);
            prev = g.scalar(l);
        }
    }

    #[test]
    fn feature_matching_offsets() {
        let mut g = Graph::<f64>::new();
        let a = logits(&mut g, &[0.1, -0.4, 2.0]);
        let b = g.add_scalar(a, 0.3);
        let c = logits(&mut g, &[1.0, 2.0]);
        let d = g.add_scalar(c, 0.3);
        let same = feature_matching_loss(&mut g, &[a, c], &[a, c]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let off = feature_matching_loss(&mut g, &[a, c], &[b, d]).unwrap();
        assert!((g.scalar(off) - 0.3).abs() < 1e-12);
        assert!(feature_matching_loss(&mut g, &[a], &[a, c]).is_err());
    }

    #[test]
    fn discriminator_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_discriminator(&mut store, &mut rng, 8, 4, 0.02);
        let state = init_spectral_state(&store, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let raw = Bound::bind(&mut g, &store, true);
        let p = normalized_weights(&mut g, &raw, &state).unwrap();
        let l = g.constant(Tensor::zeros(&[2, 16, 16, 5]));
        let x = g.constant(Tensor::full(&[2, 16, 16, 3], 0.3));
        let out = discriminate(&mut g, &p, l, x, 0.2).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 2, 2, 1]);
        assert_eq!(out.features.len(), DISC_DEPTH);
        let y = g.constant(Tensor::zeros(&[2, 8, 8, 3]));
        assert!(discriminate(&mut g, &p, l, y, 0.2).is_err());
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let store = init_perceptual::<f64>([4, 6, 8], 1);
        let mut g = Graph::<f64>::new();
        let p = Bound::bind(&mut g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut img = || Tensor::new(&[1, 8, 8, 3], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = g.constant(img());
        let y = g.constant(img());
        let same = perceptual_loss(&mut g, &p, x, x, 0.2).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let xy = perceptual_loss(&mut g, &p, x, y, 0.2).unwrap();
        let yx = perceptual_loss(&mut g, &p, y, x, 0.2).unwrap();
        assert_eq!(g.scalar(xy), g.scalar(yx));
        assert!(g.scalar(xy) > 0.0);
    }

    #[test]
    fn normalized_weights_have_unit_spectral_norm() {
        use nalgebra::DMatrix;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamStore::<f64>::new();
        init_discriminator(&mut params, &mut rng, 4, 3, 0.5);
        let mut state = init_spectral_state(&params, &mut rng).unwrap();
        for _ in 0..30 {
            power_iteration(&params, &mut state).unwrap();
        }
        let mut g = Graph::<f64>::new();
        let raw = Bound::bind(&mut g, &params, false);
        let norm = normalized_weights(&mut g, &raw, &state).unwrap();
        for i in 0..DISC_DEPTH {
            let w = g.value(norm.get(&format!("disc.{i}.w")).unwrap());
            let m = DMatrix::from_row_slice(w.dim(0), w.dim(1), w.data());
            let top = m.singular_values().max();
            assert!((top - 1.0).abs() <= 0.05, "layer {i}: {top}");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn adversarial_losses_are_finite(
                a in proptest::collection::vec(-1e4f64..1e4, 4),
                b in proptest::collection::vec(-1e4f64..1e4, 4),
                c in proptest::collection::vec(-1e4f64..1e4, 4),
            ) {
                let mut g = Graph::<f64>::new();
                let (ra, fb, fc) = (g.param(Tensor::new(&[1, 1, 4, 1], a).unwrap()), logits(&mut g, &b), logits(&mut g, &c));
                let e = d_loss_edge(&mut g, ra, fb).unwrap();
                let i = d_loss_image(&mut g, ra, fb, Some(fc), 2.0).unwrap();
                let adv = g_adv_loss(&mut g, Some(fb), fc, Some(ra), 2.0).unwrap();
                let sum = g.add(e, i).unwrap();
                let total = g.add(sum, adv).unwrap();
                prop_assert!(g.scalar(total).is_finite());
                let grads = g.backward(total).unwrap();
                prop_assert!(grads.get(ra).unwrap().data().iter().all(|v| v.is_finite()));
            }
        }
    }
}
