//! Layered fronto-parallel synthetic stereo scenes.
//!
//! A textured background plane and `n_layers` textured rectangles, each
//! with an integer disparity. Surfaces with larger disparity occlude those
//! behind them (later layers win ties). Textures live in left-image
//! coordinates, so a left pixel and its match in the right image sample the
//! same texel and agree exactly. Intensities are multiples of 1/255 so PNG
//! round trips are lossless.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::types::{DisparityMap, Image, StereoSample, ValidityMask};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream};

struct Surface {
    disparity: usize,
    /// `(y0, x0, y1, x1)` in left coordinates, exclusive ends; `None` for
    /// the unbounded background.
    rect: Option<(usize, usize, usize, usize)>,
    /// `H × (W + d_max) × 3`.
    texture: Vec<f64>,
}

impl Surface {
    fn covers_left(&self, y: usize, x: usize) -> bool {
        match self.rect {
            None => true,
            Some((y0, x0, y1, x1)) => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn texture(rng: &mut ChaCha8Rng, h: usize, tw: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let gx = rng.random_range(-0.15..0.15);
    let gy = rng.random_range(-0.15..0.15);
    let amp = if rng.random_bool(0.25) {
        rng.random_range(0.0..0.03)
    } else {
        rng.random_range(0.08..0.35)
    };
    let cell = rng.random_range(1..=3usize);
    let cw = tw.div_ceil(cell);
    let noise: Vec<f64> = (0..h.div_ceil(cell) * cw)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let mut out = Vec::with_capacity(h * tw * 3);
    for y in 0..h {
        for x in 0..tw {
            let n = noise[(y / cell) * cw + x / cell];
            for c in 0..3 {
                let v = base[c]
                    + gx * x as f64 / tw as f64
                    + gy * y as f64 / h as f64
                    + amp * tint[c] * n;
                out.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    out
}

/// `count` scenes whose seeds are drawn from the `data` stream of `seed`.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    d_max: usize,
    n_layers: usize,
) -> Result<Vec<StereoSample>> {
    (0..count)
        .map(|i| {
            let scene_seed: u64 = indexed_substream(seed, "data", i as u64).random();
            synth_scene(scene_seed, h, w, d_max, n_layers)
        })
        .collect()
}

/// Generates a deterministic synthetic stereo sample.
pub fn synth_scene(
    seed: u64,
    h: usize,
    w: usize,
    d_max: usize,
    n_layers: usize,
) -> Result<StereoSample> {
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("scene {h}×{w} smaller than 16×16")));
    }
    if d_max < 2 || d_max > w / 2 {
        return Err(Error::invalid(format!(
            "d_max {d_max} outside [2, {}]",
            w / 2
        )));
    }
    let mut rng = substream(seed, "synth_scene");
    let tw = w + d_max;
    let mut surfaces = vec![Surface {
        disparity: rng.random_range(0..=(d_max - 1) / 3),
        rect: None,
        texture: texture(&mut rng, h, tw),
    }];
    for _ in 0..n_layers {
        let rh = rng.random_range(h / 6..=h / 2);
        let rw = rng.random_range(w / 6..=w / 2);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        surfaces.push(Surface {
            disparity: rng.random_range(0..d_max),
            rect: Some((y0, x0, y0 + rh, x0 + rw)),
            texture: texture(&mut rng, h, tw),
        });
    }
    // front to back: larger disparity first, later layer first on ties
    let mut order: Vec<usize> = (0..surfaces.len()).collect();
    order.sort_by(|&a, &b| {
        surfaces[b]
            .disparity
            .cmp(&surfaces[a].disparity)
            .then(b.cmp(&a))
    });

    let visible_left = |y: usize, x: usize| -> usize {
        *order
            .iter()
            .find(|&&s| surfaces[s].covers_left(y, x))
            .expect("background covers everything")
    };
    let visible_right = |y: usize, xr: usize| -> usize {
        *order
            .iter()
            .find(|&&s| surfaces[s].covers_left(y, xr + surfaces[s].disparity))
            .expect("background covers everything")
    };

    let mut left = Vec::with_capacity(h * w * 3);
    let mut right = Vec::with_capacity(h * w * 3);
    let mut gt = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s = visible_left(y, x);
            let surf = &surfaces[s];
            let t = (y * tw + x) * 3;
            left.extend_from_slice(&surf.texture[t..t + 3]);
            gt.push(surf.disparity as f64);
            valid.push(x >= surf.disparity && visible_right(y, x - surf.disparity) == s);

            let sr = visible_right(y, x);
            let sr_surf = &surfaces[sr];
            let t = (y * tw + x + sr_surf.disparity) * 3;
            right.extend_from_slice(&sr_surf.texture[t..t + 3]);
        }
    }
    Ok(StereoSample {
        left: Image::new(h, w, 3, left)?,
        right: Image::new(h, w, 3, right)?,
        gt_disparity: DisparityMap::new(h, w, gt)?,
        gt_valid: ValidityMask {
            height: h,
            width: w,
            data: valid,
        },
        d_max,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_scene(5, 32, 40, 6, 3).unwrap();
        let b = synth_scene(5, 32, 40, 6, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_scene(6, 32, 40, 6, 3).unwrap());
    }

    #[test]
    fn no_layers_means_constant_disparity() {
        let s = synth_scene(2, 16, 32, 8, 0).unwrap();
        let d0 = s.gt_disparity.data[0];
        assert!(s.gt_disparity.data.iter().all(|&d| d == d0));
    }

    #[test]
    fn valid_pixels_match_exactly() {
        for seed in 0..5 {
            let s = synth_scene(seed, 40, 48, 8, 4).unwrap();
            s.validate().unwrap();
            for y in 0..40 {
                for x in 0..48 {
                    if s.gt_valid.data[y * 48 + x] {
                        let d = s.gt_disparity.at(y, x) as usize;
                        assert_eq!(s.left.pixel(y, x), s.right.pixel(y, x - d));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_scene(0, 8, 32, 4, 1).is_err());
        assert!(synth_scene(0, 32, 32, 17, 1).is_err());
        assert!(synth_scene(0, 32, 32, 1, 1).is_err());
    }
}
