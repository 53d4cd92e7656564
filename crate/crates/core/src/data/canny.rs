use super::{EdgeMap, Image};
use crate::config::DatasetConfig;
use crate::{Error, Result};

/// Thresholds are fractions of the largest possible gradient, which is a
/// full-range (-1 to 1) step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { low: 0.1, high: 0.2, sigma: 1.0 }
    }
}

impl CannyParams {
    pub fn from_config(cfg: &DatasetConfig) -> Self {
        Self { low: cfg.canny_low, high: cfg.canny_high, sigma: cfg.canny_sigma }
    }
}

/// Sobel response to a unit step, times the width of the value range.
const GRADIENT_SCALE: f64 = 4.0 * 2.0;

/// Gaussian smoothing, Sobel gradients, non-maximum suppression and
/// hysteresis. Returns the mask as a 3-channel map in `{-1, +1}`.
pub fn canny_edges(image: &Image, params: &CannyParams) -> Result<EdgeMap> {
    let CannyParams { low, high, sigma } = *params;
    if !(low > 0.0 && low < high && high <= 1.0) || !(sigma > 0.0) {
        return Err(Error::Invalid(format!(
            "canny parameters need 0 < low < high <= 1 and sigma > 0, got {params:?}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let kernel = gaussian_kernel(sigma);
    let mut mag = vec![0.0f64; h * w];
    let mut gy = vec![0.0f64; h * w];
    let mut gx = vec![0.0f64; h * w];
    for c in 0..3 {
        let chan: Vec<f64> = image.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let smooth = blur(&chan, h, w, &kernel);
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            smooth[y * w + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let dx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y, x - 1)
                    - at(y + 1, x - 1);
                let dy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y - 1, x)
                    - at(y - 1, x + 1);
                let m = dx.hypot(dy) / GRADIENT_SCALE;
                let i = y as usize * w + x as usize;
                if m > mag[i] {
                    mag[i] = m;
                    gx[i] = dx;
                    gy[i] = dy;
                }
            }
        }
    }

    let mut thin = vec![0.0f64; h * w];
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (oy, ox) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            let before = get(yi - oy, xi - ox);
            let after = get(yi + oy, xi + ox);
            // Plateaus of width two keep exactly one pixel.
            if m > before && m >= after {
                thin[i] = m;
            }
        }
    }

    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }

    let data = edge
        .iter()
        .flat_map(|&e| [if e { 1.0 } else { -1.0 }; 3])
        .collect();
    Image::new(h, w, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * src[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ShapeProbabilities;
    use crate::data::generate_scene;

    fn step_image(h: usize, w: usize, col: usize) -> Image {
        let data = (0..h * w)
            .flat_map(|i| [if i % w < col { -0.8 } else { 0.6 }; 3])
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = canny_edges(&Image::filled(16, 16, [0.3, -0.2, 0.9]), &CannyParams::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn vertical_step_gives_one_column() {
        let e = canny_edges(&step_image(20, 24, 10), &CannyParams::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 1.0 || v == -1.0));
        let mask = e.edge_mask();
        let cols: std::collections::BTreeSet<usize> =
            (0..mask.len()).filter(|&i| mask[i]).map(|i| i % 24).collect();
        assert_eq!(cols.len(), 1);
        let c = *cols.iter().next().unwrap();
        assert!(c == 9 || c == 10);
        for y in 0..20 {
            assert!(mask[y * 24 + c]);
        }
    }

    #[test]
    fn circle_edges_hug_boundary() {
        let cfg = DatasetConfig {
            shape_probabilities: ShapeProbabilities { circle: 1.0, ..ShapeProbabilities::none() },
            ..DatasetConfig::default()
        };
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            let (h, w) = (cfg.height, cfg.width);
            let inside: Vec<bool> = s.layout.labels().iter().map(|&l| l == crate::data::CIRCLE).collect();
            let n = inside.iter().filter(|&&b| b).count() as f64;
            let (mut cy, mut cx) = (0.0, 0.0);
            for i in 0..h * w {
                if inside[i] {
                    cy += (i / w) as f64 + 0.5;
                    cx += (i % w) as f64 + 0.5;
                }
            }
            let (cy, cx) = (cy / n, cx / n);
            let r = (n / std::f64::consts::PI).sqrt();
            let mask = s.edge.edge_mask();
            let edges: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
            assert!(!edges.is_empty());
            let near = edges
                .iter()
                .filter(|&&i| {
                    let d = (((i / w) as f64 + 0.5 - cy).hypot((i % w) as f64 + 0.5 - cx) - r).abs();
                    d <= 2.0
                })
                .count();
            assert!(near as f64 >= 0.9 * edges.len() as f64, "seed {seed}: {near}/{}", edges.len());
        }
    }

    #[test]
    fn invalid_thresholds() {
        let img = Image::filled(4, 4, [0.0; 3]);
        for p in [
            CannyParams { low: 0.3, high: 0.2, sigma: 1.0 },
            CannyParams { low: 0.0, high: 0.2, sigma: 1.0 },
            CannyParams { low: 0.1, high: 1.2, sigma: 1.0 },
            CannyParams { low: 0.1, high: 0.2, sigma: 0.0 },
        ] {
            assert!(canny_edges(&img, &p).is_err());
        }
    }
}
