use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{canny_edges, CannyParams, Image, Layout, Scene, CIRCLE, POLE, RECTANGLE, TRIANGLE};
use crate::config::DatasetConfig;
use crate::Result;

pub const CLASS_NAMES: [&str; super::NUM_CLASSES] =
    ["background", "rectangle", "circle", "triangle", "pole"];

/// Base RGB colour of every class.
pub const CLASS_ANCHORS: [[f32; 3]; super::NUM_CLASSES] = [
    [-0.6, -0.6, -0.6],
    [0.8, -0.5, -0.5],
    [-0.5, 0.8, -0.5],
    [-0.5, -0.5, 0.8],
    [0.8, 0.8, 0.2],
];

const NOISE_SALT: u64 = 0x7e57_0000;

/// Render a layout, then extract its Canny edges.
pub fn generate_scene(seed: u64, cfg: &DatasetConfig) -> Result<Scene> {
    cfg.validate()?;
    let layout = sample_layout(seed, cfg);
    let image = render_layout(&layout, seed, cfg.texture_amplitude as f32);
    let edge = canny_edges(&image, &CannyParams::from_config(cfg))?;
    Ok(Scene { seed, layout, image, edge })
}

fn sample_layout(seed: u64, cfg: &DatasetConfig) -> Layout {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout::uniform(h, w, cfg.num_classes, super::BACKGROUND);
    let p = &cfg.shape_probabilities;
    let unit = h.min(w) as f64 / 64.0;

    let mut order = [RECTANGLE, CIRCLE, TRIANGLE];
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for class in order {
        let prob = match class {
            RECTANGLE => p.rectangle,
            CIRCLE => p.circle,
            _ => p.triangle,
        };
        if !rng.gen_bool(prob) {
            continue;
        }
        let size = rng.gen_range(8.0 * unit..18.0 * unit);
        let cy = rng.gen_range(size + 1.0..h as f64 - size - 1.0);
        let cx = rng.gen_range(size + 1.0..w as f64 - size - 1.0);
        match class {
            RECTANGLE => {
                let hh = size * rng.gen_range(0.5..1.0);
                let hw = size * rng.gen_range(0.5..1.0);
                fill(&mut layout, class, |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw);
            }
            CIRCLE => {
                let r = size * 0.8;
                fill(&mut layout, class, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
            }
            _ => {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let t = a + k as f64 * std::f64::consts::TAU / 3.0;
                        (cy + size * t.sin(), cx + size * t.cos())
                    })
                    .collect();
                fill(&mut layout, class, |y, x| in_triangle(&verts, y, x));
            }
        }
    }

    if rng.gen_bool(p.pole) {
        let thickness = rng.gen_range(1..=2usize);
        let max_area = ((h * w) as f64 * 0.02).floor() as usize;
        let vertical = rng.gen_bool(0.5);
        let span = if vertical { h } else { w };
        let max_len = (max_area / thickness).min(span);
        let min_len = (4usize.div_ceil(thickness)).max((6.0 * unit) as usize).min(max_len);
        let len = rng.gen_range(min_len..=max_len);
        let (along, across) = if vertical { (h, w) } else { (w, h) };
        let start = rng.gen_range(0..=along - len);
        let offset = rng.gen_range(0..=across - thickness);
        for a in start..start + len {
            for b in offset..offset + thickness {
                let (y, x) = if vertical { (a, b) } else { (b, a) };
                layout.set(y, x, POLE);
            }
        }
    }
    layout
}

fn fill(layout: &mut Layout, class: u8, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..layout.height() {
        for x in 0..layout.width() {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                layout.set(y, x, class);
            }
        }
    }
}

fn in_triangle(v: &[(f64, f64)], y: f64, x: f64) -> bool {
    let cross = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
    let d = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
    d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
}

/// Paint a layout with its class anchors plus a per-class texture: a linear
/// gradient (40% of `amplitude`) and seeded uniform noise (60%).
pub fn render_layout(layout: &Layout, seed: u64, amplitude: f32) -> Image {
    let (h, w) = (layout.height(), layout.width());
    let n = layout.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    let dirs: Vec<(f32, f32)> = (0..n)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            (a.sin(), a.cos())
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let k = layout.get(y, x) as usize;
            let anchor = CLASS_ANCHORS[k.min(CLASS_ANCHORS.len() - 1)];
            let (dy, dx) = dirs[k];
            let ramp = dy * (2.0 * (y as f32 + 0.5) / h as f32 - 1.0)
                + dx * (2.0 * (x as f32 + 0.5) / w as f32 - 1.0);
            let ramp = (ramp / std::f32::consts::SQRT_2).clamp(-1.0, 1.0);
            for a in anchor {
                let v = if amplitude > 0.0 {
                    let noise: f32 = rng.gen_range(-1.0..=1.0);
                    a + amplitude * (0.4 * ramp + 0.6 * noise)
                } else {
                    a
                };
                data.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    Image::new(h, w, data).expect("rendered image shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ShapeProbabilities;
    use crate::data::{BACKGROUND, NUM_CLASSES};

    #[test]
    fn empty_scene_is_background() {
        let cfg = DatasetConfig {
            shape_probabilities: ShapeProbabilities::none(),
            texture_amplitude: 0.0,
            ..DatasetConfig::default()
        };
        let s = generate_scene(0, &cfg).unwrap();
        assert!(s.layout.labels().iter().all(|&l| l == BACKGROUND));
        assert!(s.image.data().chunks(3).all(|p| p == CLASS_ANCHORS[0]));
        assert!(s.edge.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn scenes_are_reproducible() {
        let cfg = DatasetConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap().layout, generate_scene(8, &cfg).unwrap().layout);
    }

    #[test]
    fn class_colours_and_pole_area() {
        let cfg = DatasetConfig::default();
        let hw = cfg.height * cfg.width;
        let mut poles = 0;
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for k in 0..NUM_CLASSES {
                let px: Vec<usize> = (0..hw).filter(|&i| s.layout.labels()[i] as usize == k).collect();
                if px.is_empty() {
                    continue;
                }
                for c in 0..3 {
                    let mean = px.iter().map(|&i| s.image.data()[i * 3 + c]).sum::<f32>() / px.len() as f32;
                    assert!((mean - CLASS_ANCHORS[k][c]).abs() <= 0.1);
                }
            }
            let pole = s.layout.class_count(POLE);
            if pole > 0 {
                poles += 1;
                assert!(pole >= 4 && pole as f64 <= 0.02 * hw as f64, "pole area {pole}");
            }
        }
        assert!(poles > 100);
    }

    #[test]
    fn bad_dims_rejected() {
        let cfg = DatasetConfig { height: 40, ..DatasetConfig::default() };
        assert!(generate_scene(0, &cfg).is_err());
        let cfg = DatasetConfig { width: 0, ..DatasetConfig::default() };
        assert!(generate_scene(0, &cfg).is_err());
    }
}
