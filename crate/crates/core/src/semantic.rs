//! Semantic preserving module: class-channel gating and refinement into the
//! final image.

use std::path::{Path, PathBuf};

use edgesynth_tensor::{ConvGeom, Graph, Real, Tensor, Var};
use rand::Rng;

use crate::data::export::write_gray;
use crate::nn::{conv, Bound, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ClassGate {
    /// Class-channel map `[B, H, W, N]`.
    pub class_map: Var,
    /// Per-class scaling factors `[B, N]` in `(0, 1)`.
    pub gamma: Var,
    pub gated: Var,
}

pub fn concat_channels(features: usize, num_classes: usize) -> usize {
    features + num_classes + 6
}

pub fn init_semantic<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    features: usize,
    num_classes: usize,
    std: f64,
) {
    let wide = concat_channels(features, num_classes);
    store.init_conv(rng, "sem.class", 3, wide, num_classes, std);
    store.init_conv(rng, "sem.expand", 3, num_classes, wide, std);
    store.init_conv(rng, "sem.out", 3, wide, 3, std);
}

/// Channel concatenation in the order features, layout, edge, image.
pub fn build_concat<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    layout: Var,
    edge: Var,
    image: Var,
) -> Result<Var> {
    let parts = [features, layout, edge, image];
    let spatial = |g: &Graph<T>, v: Var| g.shape(v)[..3].to_vec();
    let reference = spatial(g, features);
    for &v in &parts {
        if g.shape(v).len() != 4 || spatial(g, v) != reference {
            return Err(Error::Shape(format!(
                "build_concat: {:?} does not match {:?}",
                g.shape(v),
                g.shape(features)
            )));
        }
    }
    Ok(g.concat(&parts, 3)?)
}

/// `gamma = sigmoid(global_avg_pool(F_c))`, `F_c * gamma + F_c`.
pub fn gate_channels<T: Real>(g: &mut Graph<T>, class_map: Var) -> Result<(Var, Var)> {
    let pooled = g.mean_spatial(class_map)?;
    let gamma = g.sigmoid(pooled);
    let scaled = g.channel_gate(class_map, gamma)?;
    let gated = g.add(scaled, class_map)?;
    Ok((gamma, gated))
}

pub fn class_gate<T: Real>(g: &mut Graph<T>, p: &Bound, concat: Var) -> Result<ClassGate> {
    let class_map = conv(g, p, "sem.class", concat, ConvGeom::same3())?;
    let (gamma, gated) = gate_channels(g, class_map)?;
    Ok(ClassGate { class_map, gamma, gated })
}

/// Expand the gated class map back to the concat width, then a tanh head.
pub fn refine_to_image<T: Real>(g: &mut Graph<T>, p: &Bound, gate: &ClassGate, slope: f64) -> Result<Var> {
    let wide = conv(g, p, "sem.expand", gate.gated, ConvGeom::same3())?;
    let wide = g.leaky_relu(wide, slope);
    let out = conv(g, p, "sem.out", wide, ConvGeom::same3())?;
    Ok(g.tanh(out))
}

/// Write every class channel of a `[1, H, W, N]` map as a grayscale PNG.
pub fn dump_class_channels<T: Real>(map: &Tensor<T>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let s = map.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("class map must be [1,H,W,N], got {s:?}")));
    }
    std::fs::create_dir_all(dir)?;
    let (h, w, n) = (s[1], s[2], s[3]);
    let mut paths = Vec::with_capacity(n);
    for k in 0..n {
        let chan: Vec<f32> = map.data().iter().skip(k).step_by(n).map(|v| v.f64() as f32).collect();
        let path = dir.join(format!("{stem}_class{k}.png"));
        write_gray(&chan, h, w, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn concat_layout_and_slices() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_tensor(&[1, 4, 4, 64], 0));
        let s = g.constant(rand_tensor(&[1, 4, 4, 5], 1));
        let e = g.constant(rand_tensor(&[1, 4, 4, 3], 2));
        let i = g.constant(rand_tensor(&[1, 4, 4, 3], 3));
        let c = build_concat(&mut g, f, s, e, i).unwrap();
        assert_eq!(g.shape(c), &[1, 4, 4, 75]);
        let back = g.slice(c, 3, 64, 5).unwrap();
        assert_eq!(g.value(back), g.value(s));
        let small = g.constant(rand_tensor(&[1, 2, 2, 3], 4));
        assert!(build_concat(&mut g, f, s, e, small).is_err());
    }

    #[test]
    fn zero_and_saturated_gates() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 3, 3, 4]));
        let (gamma, gated) = gate_channels(&mut g, z).unwrap();
        assert!(g.value(gamma).data().iter().all(|&v| v == 0.5));
        assert!(g.value(gated).data().iter().all(|&v| v == 0.0));
        let big = g.constant(Tensor::full(&[1, 3, 3, 4], 10.0));
        let (gamma, gated) = gate_channels(&mut g, big).unwrap();
        assert!(g.value(gamma).data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
        assert!(g.value(gated).data().iter().all(|&v| (v - 20.0).abs() < 1e-3));
    }

    #[test]
    fn gamma_ignores_spatial_order() {
        let t = rand_tensor(&[1, 2, 3, 4], 7);
        let mut rev = t.clone();
        let px: Vec<Vec<f64>> = t.data().chunks(4).rev().map(<[f64]>::to_vec).collect();
        rev.data_mut().copy_from_slice(&px.concat());
        let mut g = Graph::<f64>::new();
        let a = g.constant(t);
        let b = g.constant(rev);
        let (ga, _) = gate_channels(&mut g, a).unwrap();
        let (gb, _) = gate_channels(&mut g, b).unwrap();
        for (x, y) in g.value(ga).data().iter().zip(g.value(gb).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_output_contract() {
        let mut store = ParamStore::<f64>::new();
        init_semantic(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 8, 5, 0.3);
        let run = || {
            let mut g = Graph::<f64>::new();
            let p = Bound::bind(&mut g, &store, false);
            let x = g.constant(rand_tensor(&[2, 4, 4, 19], 9));
            let gate = class_gate(&mut g, &p, x).unwrap();
            let y = refine_to_image(&mut g, &p, &gate, 0.2).unwrap();
            g.value(y).clone()
        };
        let y = run();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(y, run());
    }

    #[test]
    fn channel_dump_writes_one_file_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_class_channels(&rand_tensor(&[1, 4, 4, 5], 3), dir.path(), "g").unwrap();
        assert_eq!(paths.len(), 5);
        assert!(paths.iter().all(|p| p.exists()));
    }
}
