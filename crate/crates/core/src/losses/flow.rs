//! Optical-flow adapters.
//!
//! [`LucasKanadeFlow`] is a dense, fully differentiable brightness-constancy
//! estimator: per pixel it solves the 2x2 windowed least-squares system
//! `(S + eps I) u = -b` built from spatial and temporal derivatives.

use std::any::Any;

use crate::error::{Result, VncaError};
use crate::image::{Image, LUMA};

pub struct FlowTape {
    /// `H x W x 2`, displacement in pixels along `(row, col)`.
    pub flow: Image,
    input_channels: usize,
    cache: Box<dyn Any + Send + Sync>,
}

impl FlowTape {
    pub fn new(flow: Image, input_channels: usize, cache: Box<dyn Any + Send + Sync>) -> Self {
        FlowTape {
            flow,
            input_channels,
            cache,
        }
    }

    pub fn cache<T: 'static>(&self) -> Option<&T> {
        self.cache.downcast_ref()
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }
}

/// A frozen two-frame motion estimator.
pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, prev: &Image, next: &Image) -> Result<FlowTape>;

    /// Gradients with respect to `(prev, next)`.
    fn backward(&self, tape: &FlowTape, grad_flow: &Image) -> Result<(Image, Image)>;
}

#[derive(Clone, Debug)]
pub struct LucasKanadeFlow {
    /// Half-width of the square aggregation window.
    pub window_radius: usize,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f32,
}

impl Default for LucasKanadeFlow {
    fn default() -> Self {
        LucasKanadeFlow {
            window_radius: 2,
            regularization: 1e-3,
        }
    }
}

struct LkCache {
    h: usize,
    w: usize,
    ix: Vec<f32>,
    iy: Vec<f32>,
    it: Vec<f32>,
    /// Windowed sums `[xx, xy, yy, xt, yt]` per pixel.
    sums: Vec<[f32; 5]>,
}

fn to_gray(img: &Image) -> Result<Vec<f32>> {
    match img.channels {
        1 => Ok(img.data.clone()),
        3 => Ok(img.luminance().data),
        n => Err(VncaError::InvalidArgument(format!("flow input must have 1 or 3 channels, got {n}"))),
    }
}

/// Separable box sum with zero padding; self-adjoint.
fn box_sum(src: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            tmp[r * w + c] = src[r * w + lo..=r * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            out[r * w + c] = (lo..=hi).map(|rr| tmp[rr * w + c]).sum();
        }
    }
    out
}

impl LucasKanadeFlow {
    fn solve(&self, s: &[f32; 5]) -> ([f32; 2], f32) {
        let eps = self.regularization;
        let a = s[0] + eps;
        let b = s[1];
        let d = s[2] + eps;
        let det = a * d - b * b;
        let u0 = -(d * s[3] - b * s[4]) / det;
        let u1 = -(-b * s[3] + a * s[4]) / det;
        ([u0, u1], det)
    }
}

impl FlowEstimator for LucasKanadeFlow {
    fn name(&self) -> &str {
        "lucas-kanade"
    }

    fn forward(&self, prev: &Image, next: &Image) -> Result<FlowTape> {
        if !prev.same_shape(next) {
            return Err(VncaError::shape("flow inputs", prev.shape_string(), next.shape_string()));
        }
        if self.regularization <= 0.0 {
            return Err(VncaError::InvalidArgument("flow regularization must be positive".into()));
        }
        let (h, w) = (prev.height, prev.width);
        let p = to_gray(prev)?;
        let n = to_gray(next)?;
        let avg: Vec<f32> = p.iter().zip(&n).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut ix = vec![0.0f32; h * w];
        let mut iy = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
                let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
                ix[r * w + c] = 0.5 * (avg[rd * w + c] - avg[ru * w + c]);
                iy[r * w + c] = 0.5 * (avg[r * w + cr] - avg[r * w + cl]);
            }
        }
        let it: Vec<f32> = n.iter().zip(&p).map(|(a, b)| a - b).collect();
        let products: [Vec<f32>; 5] = [
            ix.iter().map(|x| x * x).collect(),
            ix.iter().zip(&iy).map(|(x, y)| x * y).collect(),
            iy.iter().map(|y| y * y).collect(),
            ix.iter().zip(&it).map(|(x, t)| x * t).collect(),
            iy.iter().zip(&it).map(|(y, t)| y * t).collect(),
        ];
        let summed: Vec<Vec<f32>> = products.iter().map(|p| box_sum(p, h, w, self.window_radius)).collect();
        let sums: Vec<[f32; 5]> = (0..h * w)
            .map(|i| [summed[0][i], summed[1][i], summed[2][i], summed[3][i], summed[4][i]])
            .collect();
        let mut flow = Image::zeros(h, w, 2);
        for (dst, s) in flow.data.chunks_exact_mut(2).zip(&sums) {
            let (u, _) = self.solve(s);
            dst.copy_from_slice(&u);
        }
        Ok(FlowTape::new(
            flow,
            prev.channels,
            Box::new(LkCache { h, w, ix, iy, it, sums }),
        ))
    }

    fn backward(&self, tape: &FlowTape, grad_flow: &Image) -> Result<(Image, Image)> {
        let cache: &LkCache = tape.cache().ok_or_else(|| VncaError::Adapter {
            adapter: self.name().into(),
            layer: "tape".into(),
            reason: "tape was not produced by this estimator".into(),
        })?;
        let (h, w) = (cache.h, cache.w);
        if !grad_flow.same_shape(&tape.flow) {
            return Err(VncaError::shape("flow gradient", tape.flow.shape_string(), grad_flow.shape_string()));
        }
        let eps = self.regularization;
        let mut g_sums: [Vec<f32>; 5] = std::array::from_fn(|_| vec![0.0f32; h * w]);
        for i in 0..h * w {
            let s = &cache.sums[i];
            let (u, det) = self.solve(s);
            let g = &grad_flow.data[2 * i..2 * i + 2];
            // lambda = -A^{-1} g, with A symmetric
            let a = s[0] + eps;
            let b = s[1];
            let d = s[2] + eps;
            let l0 = -(d * g[0] - b * g[1]) / det;
            let l1 = -(-b * g[0] + a * g[1]) / det;
            g_sums[0][i] = l0 * u[0];
            g_sums[1][i] = l0 * u[1] + l1 * u[0];
            g_sums[2][i] = l1 * u[1];
            g_sums[3][i] = l0;
            g_sums[4][i] = l1;
        }
        let g_prod: Vec<Vec<f32>> = g_sums.iter().map(|g| box_sum(g, h, w, self.window_radius)).collect();
        let (ix, iy, it) = (&cache.ix, &cache.iy, &cache.it);
        let mut g_avg = vec![0.0f32; h * w];
        let mut g_it = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let g_ix = 2.0 * ix[i] * g_prod[0][i] + iy[i] * g_prod[1][i] + it[i] * g_prod[3][i];
                let g_iy = ix[i] * g_prod[1][i] + 2.0 * iy[i] * g_prod[2][i] + it[i] * g_prod[4][i];
                g_it[i] = ix[i] * g_prod[3][i] + iy[i] * g_prod[4][i];
                let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
                let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
                g_avg[rd * w + c] += 0.5 * g_ix;
                g_avg[ru * w + c] -= 0.5 * g_ix;
                g_avg[r * w + cr] += 0.5 * g_iy;
                g_avg[r * w + cl] -= 0.5 * g_iy;
            }
        }
        let g_prev: Vec<f32> = g_avg.iter().zip(&g_it).map(|(a, t)| 0.5 * a - t).collect();
        let g_next: Vec<f32> = g_avg.iter().zip(&g_it).map(|(a, t)| 0.5 * a + t).collect();
        let expand = |g: Vec<f32>| -> Image {
            match tape.input_channels() {
                1 => Image::from_vec(h, w, 1, g).expect("shape"),
                _ => Image::from_fn(h, w, 3, |r, c, ch| LUMA[ch] * g[r * w + c]),
            }
        };
        Ok((expand(g_prev), expand(g_next)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, dr: f32, dc: f32) -> Image {
        Image::from_fn(h, w, 1, |r, c, _| {
            let (r, c) = (r as f32 - dr, c as f32 - dc);
            0.5 + 0.25 * (0.45 * r).sin() * (0.3 * c).cos() + 0.15 * (0.2 * r + 0.35 * c).sin()
        })
    }

    #[test]
    fn recovers_small_translation() {
        let lk = LucasKanadeFlow::default();
        let prev = pattern(24, 24, 0.0, 0.0);
        let next = pattern(24, 24, 0.3, -0.2);
        let tape = lk.forward(&prev, &next).unwrap();
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for r in 4..20 {
            for c in 4..20 {
                let u = tape.flow.pixel(r, c);
                sr += u[0];
                sc += u[1];
                n += 1.0;
            }
        }
        assert!((sr / n - 0.3).abs() < 0.05, "row flow {}", sr / n);
        assert!((sc / n + 0.2).abs() < 0.05, "col flow {}", sc / n);
    }

    #[test]
    fn static_images_have_zero_flow() {
        let lk = LucasKanadeFlow::default();
        let img = pattern(10, 12, 0.0, 0.0);
        let tape = lk.forward(&img, &img).unwrap();
        assert!(tape.flow.data.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lk = LucasKanadeFlow::default();
        let prev = pattern(12, 10, 0.0, 0.0).to_rgb();
        let next = pattern(12, 10, 0.4, 0.1).to_rgb();
        let weights = Image::from_fn(12, 10, 2, |r, c, ch| ((r * 3 + c * 7 + ch * 5) % 11) as f32 / 11.0 - 0.5);
        let loss = |p: &Image, n: &Image| -> f64 {
            let t = lk.forward(p, n).unwrap();
            t.flow.data.iter().zip(&weights.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let tape = lk.forward(&prev, &next).unwrap();
        let (gp, gn) = lk.backward(&tape, &weights).unwrap();
        let eps = 1e-3;
        for idx in [0usize, 37, 151, 299] {
            for which in 0..2 {
                let (mut p, mut m) = if which == 0 { (prev.clone(), prev.clone()) } else { (next.clone(), next.clone()) };
                p.data[idx] += eps;
                m.data[idx] -= eps;
                let fd = if which == 0 {
                    (loss(&p, &next) - loss(&m, &next)) / (2.0 * eps as f64)
                } else {
                    (loss(&prev, &p) - loss(&prev, &m)) / (2.0 * eps as f64)
                };
                let an = if which == 0 { gp.data[idx] } else { gn.data[idx] } as f64;
                assert!((fd - an).abs() < 2e-2 * fd.abs().max(1.0), "input {which} idx {idx}: fd {fd} an {an}");
            }
        }
    }
}
