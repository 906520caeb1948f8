//! Orthographic emission-absorption volume rendering.
//!
//! A camera is realised by trilinearly resampling the volume into camera
//! space, after which every ray runs along the resampled `k` axis. Along a
//! ray the effective density is `max(d * (1 + dd), 0)` and the transmittance
//! of a sample only counts the samples strictly in front of it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::grid::{DensityField, Dims, Grid, VelocityField};
use crate::image::Image;
use crate::nca::Readout;

/// Absorption constant for 64-voxel-deep volumes; scale with `64 / D`.
pub const REFERENCE_GAMMA: f32 = 0.05;

pub fn default_gamma(depth: usize) -> f32 {
    REFERENCE_GAMMA * 64.0 / depth as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Rotation about the vertical `j` axis, radians.
    pub azimuth: f32,
    /// Rotation about the `i` axis, radians.
    #[serde(default)]
    pub elevation: f32,
    /// Rendered image size `(rows, cols)`; defaults to the volume's `(H, W)`.
    #[serde(default)]
    pub image_size: Option<(usize, usize)>,
}

impl CameraPose {
    pub fn new(azimuth: f32) -> Self {
        CameraPose {
            azimuth,
            elevation: 0.0,
            image_size: None,
        }
    }

    pub fn front() -> Self {
        Self::new(0.0)
    }

    pub fn with_elevation(mut self, elevation: f32) -> Self {
        self.elevation = elevation;
        self
    }

    pub fn with_image_size(mut self, rows: usize, cols: usize) -> Self {
        self.image_size = Some((rows, cols));
        self
    }

    /// `count` azimuths evenly spaced over the full circle, elevation 0.
    pub fn ring(count: usize) -> Vec<CameraPose> {
        (0..count)
            .map(|v| CameraPose::new(v as f32 * std::f32::consts::TAU / count as f32))
            .collect()
    }

    /// Maps camera-space offsets to grid-space offsets.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let snap = |v: f64| if v.abs() < 1e-6 { 0.0 } else { v };
        let (sa, ca) = (self.azimuth as f64).sin_cos();
        let (se, ce) = (self.elevation as f64).sin_cos();
        let (sa, ca, se, ce) = (snap(sa), snap(ca), snap(se), snap(ce));
        // R = Ry(azimuth) * Rx(elevation); Ry mixes (i, k), Rx mixes (j, k)
        [
            [ca, -sa * se, sa * ce],
            [0.0, ce, se],
            [-sa, -ca * se, ca * ce],
        ]
    }

    pub fn output_dims(&self, volume: Dims) -> Dims {
        let (h, w) = self.image_size.unwrap_or((volume.h, volume.w));
        Dims::new(h, w, volume.d)
    }

    fn validate(&self) -> Result<()> {
        if !self.azimuth.is_finite() || !self.elevation.is_finite() {
            return Err(VncaError::InvalidArgument("camera angles must be finite".into()));
        }
        if let Some((h, w)) = self.image_size {
            if h == 0 || w == 0 {
                return Err(VncaError::InvalidArgument("image size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Precomputed trilinear taps from camera space back into the grid.
#[derive(Clone, Debug)]
pub struct Resampler {
    input: Dims,
    output: Dims,
    taps: Vec<[(u32, f32); 8]>,
    identity: bool,
}

impl Resampler {
    pub fn new(input: Dims, pose: &CameraPose) -> Result<Self> {
        input.validate()?;
        pose.validate()?;
        let output = pose.output_dims(input);
        let r = pose.rotation();
        let identity = output == input && r == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (hi, wi, di) = (input.h as f64, input.w as f64, input.d as f64);
        let scale = [hi / output.h as f64, wi / output.w as f64, 1.0];
        let half_in = [hi / 2.0, wi / 2.0, di / 2.0];
        let mut taps = Vec::with_capacity(output.cells());
        for cell in 0..output.cells() {
            let (a, b, c) = output.coords(cell);
            let p = [
                (a as f64 + 0.5) * scale[0] - half_in[0],
                (b as f64 + 0.5) * scale[1] - half_in[1],
                (c as f64 + 0.5) * scale[2] - half_in[2],
            ];
            let mut x = [0.0f64; 3];
            for (axis, xa) in x.iter_mut().enumerate() {
                *xa = r[axis][0] * p[0] + r[axis][1] * p[1] + r[axis][2] * p[2] + half_in[axis] - 0.5;
            }
            taps.push(trilinear_taps(input, x));
        }
        Ok(Resampler {
            input,
            output,
            taps,
            identity,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn output_dims(&self) -> Dims {
        self.output
    }

    pub fn apply(&self, grid: &Grid) -> Result<Grid> {
        if grid.dims() != self.input {
            return Err(VncaError::shape("resample input", self.input, grid.dims()));
        }
        if self.identity {
            return Ok(grid.clone());
        }
        let c = grid.channels();
        let mut out = Grid::zeros(self.output, c);
        let src = grid.data();
        out.data_mut()
            .par_chunks_mut(c)
            .zip(self.taps.par_iter())
            .for_each(|(dst, taps)| {
                for &(idx, w) in taps {
                    if w != 0.0 {
                        let s = &src[idx as usize * c..(idx as usize + 1) * c];
                        for (o, v) in dst.iter_mut().zip(s) {
                            *o += w * v;
                        }
                    }
                }
            });
        Ok(out)
    }

    /// Transpose of [`Resampler::apply`].
    pub fn adjoint(&self, grad_out: &Grid) -> Result<Grid> {
        if grad_out.dims() != self.output {
            return Err(VncaError::shape("resample adjoint", self.output, grad_out.dims()));
        }
        if self.identity {
            return Ok(grad_out.clone());
        }
        let c = grad_out.channels();
        let mut grad = Grid::zeros(self.input, c);
        let g = grad.data_mut();
        for (src, taps) in grad_out.data().chunks_exact(c).zip(&self.taps) {
            for &(idx, w) in taps {
                if w != 0.0 {
                    for (o, v) in g[idx as usize * c..(idx as usize + 1) * c].iter_mut().zip(src) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn trilinear_taps(dims: Dims, x: [f64; 3]) -> [(u32, f32); 8] {
    let n = dims.as_array();
    let mut axis_taps = [[(0usize, 0.0f64); 2]; 3];
    for a in 0..3 {
        let x0 = x[a].floor();
        let f = x[a] - x0;
        for (t, (offset, w)) in [(0.0, 1.0 - f), (1.0, f)].into_iter().enumerate() {
            let xi = x0 + offset;
            axis_taps[a][t] = if xi >= 0.0 && xi <= (n[a] - 1) as f64 {
                (xi as usize, w)
            } else {
                (0, 0.0)
            };
        }
    }
    let mut out = [(0u32, 0.0f32); 8];
    for (t, slot) in out.iter_mut().enumerate() {
        let (i, wi) = axis_taps[0][t >> 2];
        let (j, wj) = axis_taps[1][(t >> 1) & 1];
        let (k, wk) = axis_taps[2][t & 1];
        let w = wi * wj * wk;
        *slot = if w == 0.0 { (0, 0.0) } else { (dims.index(i, j, k) as u32, w as f32) };
    }
    out
}

/// Resamples any volume so that the camera's viewing axis becomes the grid's `k` axis.
/// Samples falling outside the volume are zero.
pub fn resample_to_camera(volume: &Grid, pose: &CameraPose) -> Result<Grid> {
    Resampler::new(volume.dims(), pose)?.apply(volume)
}

/// An image produced by the renderer, with the pose it was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub pixels: Image,
    pub pose: CameraPose,
}

/// Camera bound to a volume shape and absorption constant.
#[derive(Clone, Debug)]
pub struct Renderer {
    pose: CameraPose,
    gamma: f32,
    resampler: Resampler,
}

impl Renderer {
    pub fn new(dims: Dims, pose: CameraPose, gamma: f32) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(VncaError::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Renderer {
            pose,
            gamma,
            resampler: Resampler::new(dims, &pose)?,
        })
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    fn check(&self, density: &DensityField, others: &[(&str, &Grid, usize)]) -> Result<()> {
        let dims = self.resampler.input_dims();
        if density.dims() != dims {
            return Err(VncaError::shape("render density", dims, density.dims()));
        }
        for (name, g, c) in others {
            g.expect_shape(name, dims, *c)?;
        }
        Ok(())
    }

    /// Per-ray composite of `emission(k) * d~(k) * tau(k)`.
    fn composite(&self, density: &Grid, delta_d: &Grid, emission: Option<&Grid>) -> Image {
        let out = self.resampler.output_dims();
        let channels = emission.map_or(1, |e| e.channels());
        let gamma = self.gamma;
        let mut img = Image::zeros(out.h, out.w, channels);
        img.data
            .par_chunks_mut(channels)
            .enumerate()
            .for_each(|(pixel, dst)| {
                let base = pixel * out.d;
                let mut optical_depth = 0.0f32;
                for k in 0..out.d {
                    let cell = base + k;
                    let eff = (density.data()[cell] * (1.0 + delta_d.data()[cell])).max(0.0);
                    let weight = eff * (-gamma * optical_depth).exp();
                    match emission {
                        Some(e) => {
                            for (o, c) in dst.iter_mut().zip(e.cell(cell)) {
                                *o += c * weight;
                            }
                        }
                        None => dst[0] += weight,
                    }
                    optical_depth += eff;
                }
            });
        img
    }

    /// Adjoint of [`Renderer::composite`] with respect to emission and residual density.
    fn composite_adjoint(
        &self,
        density: &Grid,
        delta_d: &Grid,
        emission: Option<&Grid>,
        grad: &Image,
    ) -> (Option<Grid>, Grid) {
        let out = self.resampler.output_dims();
        let channels = grad.channels;
        let gamma = self.gamma;
        let mut g_emission = emission.map(|e| Grid::zeros(out, e.channels()));
        let mut g_delta = Grid::zeros(out, 1);
        let mut eff = vec![0.0f32; out.d];
        let mut tau = vec![0.0f32; out.d];
        for pixel in 0..out.h * out.w {
            let base = pixel * out.d;
            let g = &grad.data[pixel * channels..(pixel + 1) * channels];
            let mut optical_depth = 0.0f32;
            for k in 0..out.d {
                let cell = base + k;
                eff[k] = (density.data()[cell] * (1.0 + delta_d.data()[cell])).max(0.0);
                tau[k] = (-gamma * optical_depth).exp();
                optical_depth += eff[k];
            }
            // suffix sum of (g . c) * d~ * tau over samples behind k
            let mut behind = 0.0f32;
            for k in (0..out.d).rev() {
                let cell = base + k;
                let gc = match emission {
                    Some(e) => e.cell(cell).iter().zip(g).map(|(c, gv)| c * gv).sum::<f32>(),
                    None => g[0],
                };
                let g_eff = gc * tau[k] - gamma * behind;
                behind += gc * eff[k] * tau[k];
                if let (Some(ge), Some(_)) = (g_emission.as_mut(), emission) {
                    for (o, gv) in ge.cell_mut(cell).iter_mut().zip(g) {
                        *o = gv * eff[k] * tau[k];
                    }
                }
                let d = density.data()[cell];
                if d * (1.0 + delta_d.data()[cell]) > 0.0 {
                    g_delta.data_mut()[cell] = g_eff * d;
                }
            }
        }
        (g_emission, g_delta)
    }

    pub fn render_color(&self, density: &DensityField, rgb: &Grid, delta_d: &Grid) -> Result<RenderedView> {
        self.check(density, &[("render rgb", rgb, 3), ("render delta_d", delta_d, 1)])?;
        let d = self.resampler.apply(density.grid())?;
        let c = self.resampler.apply(rgb)?;
        let dd = self.resampler.apply(delta_d)?;
        Ok(RenderedView {
            pixels: self.composite(&d, &dd, Some(&c)),
            pose: self.pose,
        })
    }

    pub fn render_gray(&self, density: &DensityField, delta_d: &Grid) -> Result<RenderedView> {
        self.check(density, &[("render delta_d", delta_d, 1)])?;
        let d = self.resampler.apply(density.grid())?;
        let dd = self.resampler.apply(delta_d)?;
        Ok(RenderedView {
            pixels: self.composite(&d, &dd, None),
            pose: self.pose,
        })
    }

    pub fn render_readout(&self, density: &DensityField, readout: &Readout) -> Result<(RenderedView, RenderedView)> {
        Ok((
            self.render_color(density, &readout.rgb, &readout.delta_d)?,
            self.render_gray(density, &readout.delta_d)?,
        ))
    }

    fn check_grad(&self, grad: &Image, channels: usize) -> Result<()> {
        let out = self.resampler.output_dims();
        if grad.height != out.h || grad.width != out.w || grad.channels != channels {
            return Err(VncaError::shape(
                "render gradient",
                format!("{}x{}x{channels}", out.h, out.w),
                grad.shape_string(),
            ));
        }
        Ok(())
    }

    /// Returns `(d pixels / d rgb, d pixels / d delta_d)` contracted with `grad`.
    pub fn color_backward(&self, density: &DensityField, rgb: &Grid, delta_d: &Grid, grad: &Image) -> Result<(Grid, Grid)> {
        self.check(density, &[("render rgb", rgb, 3), ("render delta_d", delta_d, 1)])?;
        self.check_grad(grad, 3)?;
        let d = self.resampler.apply(density.grid())?;
        let c = self.resampler.apply(rgb)?;
        let dd = self.resampler.apply(delta_d)?;
        let (g_c, g_dd) = self.composite_adjoint(&d, &dd, Some(&c), grad);
        Ok((
            self.resampler.adjoint(&g_c.expect("emission gradient"))?,
            self.resampler.adjoint(&g_dd)?,
        ))
    }

    pub fn gray_backward(&self, density: &DensityField, delta_d: &Grid, grad: &Image) -> Result<Grid> {
        self.check(density, &[("render delta_d", delta_d, 1)])?;
        self.check_grad(grad, 1)?;
        let d = self.resampler.apply(density.grid())?;
        let dd = self.resampler.apply(delta_d)?;
        let (_, g_dd) = self.composite_adjoint(&d, &dd, None, grad);
        self.resampler.adjoint(&g_dd)
    }

    /// Density-weighted projection of the velocity field onto the image plane,
    /// in pixels per frame. Components are `(row, col)`, i.e. camera `(i, j)`.
    pub fn project_velocity(&self, density: &DensityField, velocity: &VelocityField) -> Result<Image> {
        self.check(density, &[("project velocity", velocity.grid(), 3)])?;
        let d = self.resampler.apply(density.grid())?;
        let v = self.resampler.apply(velocity.grid())?;
        let r = self.pose.rotation();
        let input = self.resampler.input_dims();
        let out = self.resampler.output_dims();
        let px_scale = [out.h as f32 / input.h as f32, out.w as f32 / input.w as f32];
        let gamma = self.gamma;
        let mut flow = Image::zeros(out.h, out.w, 2);
        flow.data.par_chunks_mut(2).enumerate().for_each(|(pixel, dst)| {
            let base = pixel * out.d;
            let mut optical_depth = 0.0f32;
            let mut acc = [0.0f64; 2];
            let mut total = 0.0f64;
            for k in 0..out.d {
                let cell = base + k;
                let dk = d.data()[cell].max(0.0);
                let w = (dk * (-gamma * optical_depth).exp()) as f64;
                optical_depth += dk;
                if w == 0.0 {
                    continue;
                }
                let vg = v.cell(cell);
                // camera = R^T * grid
                for (a, slot) in acc.iter_mut().enumerate() {
                    let vc = r[0][a] * vg[0] as f64 + r[1][a] * vg[1] as f64 + r[2][a] * vg[2] as f64;
                    *slot += w * vc;
                }
                total += w;
            }
            if total > 0.0 {
                dst[0] = (acc[0] / total) as f32 * px_scale[0];
                dst[1] = (acc[1] / total) as f32 * px_scale[1];
            }
        });
        Ok(flow)
    }
}

pub fn render_color(
    density: &DensityField,
    rgb: &Grid,
    delta_d: &Grid,
    pose: &CameraPose,
    gamma: f32,
) -> Result<RenderedView> {
    Renderer::new(density.dims(), *pose, gamma)?.render_color(density, rgb, delta_d)
}

pub fn render_gray(density: &DensityField, delta_d: &Grid, pose: &CameraPose, gamma: f32) -> Result<RenderedView> {
    Renderer::new(density.dims(), *pose, gamma)?.render_gray(density, delta_d)
}

pub fn project_velocity(
    density: &DensityField,
    velocity: &VelocityField,
    pose: &CameraPose,
    gamma: f32,
) -> Result<Image> {
    Renderer::new(density.dims(), *pose, gamma)?.project_velocity(density, velocity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f32::consts::{FRAC_PI_2, PI};

    fn random_grid(dims: Dims, c: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(dims, c, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_at_zero_azimuth() {
        let g = random_grid(Dims::new(5, 6, 7), 2, 1);
        assert_eq!(resample_to_camera(&g, &CameraPose::front()).unwrap(), g);
    }

    #[test]
    fn half_turn_mirrors_transverse_axes() {
        let n = 8;
        let g = random_grid(Dims::cube(n), 1, 2);
        let out = resample_to_camera(&g, &CameraPose::new(PI)).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    assert!((out.at(i, j, k, 0) - g.at(n - 1 - i, j, n - 1 - k, 0)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_axes() {
        let n = 6;
        let g = random_grid(Dims::cube(n), 1, 3);
        let out = resample_to_camera(&g, &CameraPose::new(FRAC_PI_2)).unwrap();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    assert!((out.at(a, b, c, 0) - g.at(c, b, n - 1 - a, 0)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn outside_samples_are_zero() {
        let g = Grid::from_fn(Dims::new(4, 4, 12), 1, |_, _, _, _| 1.0);
        let out = resample_to_camera(&g, &CameraPose::new(FRAC_PI_2)).unwrap();
        // the 4-wide i extent maps to depth, so most camera columns fall outside
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert!(out.data().iter().any(|&v| v > 0.99));
    }

    #[test]
    fn resample_adjoint_is_transpose() {
        let dims = Dims::new(5, 4, 6);
        let pose = CameraPose::new(0.7).with_elevation(0.3).with_image_size(7, 3);
        let rs = Resampler::new(dims, &pose).unwrap();
        let x = random_grid(dims, 2, 4);
        let y = random_grid(rs.output_dims(), 2, 5);
        let ax = rs.apply(&x).unwrap();
        let aty = rs.adjoint(&y).unwrap();
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn empty_density_is_black() {
        let dims = Dims::cube(4);
        let d = DensityField::zeros(dims, 0);
        let rgb = random_grid(dims, 3, 1);
        let dd = Grid::zeros(dims, 1);
        let img = render_color(&d, &rgb, &dd, &CameraPose::new(0.4), 0.1).unwrap();
        assert!(img.pixels.data.iter().all(|&v| v == 0.0));
        let gray = render_gray(&d, &dd, &CameraPose::front(), 0.1).unwrap();
        assert!(gray.pixels.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_and_stacked_voxels() {
        let dims = Dims::new(1, 1, 2);
        let dd = Grid::zeros(dims, 1);
        let single = DensityField::from_fn(dims, 0, |_, _, k| if k == 0 { 1.0 } else { 0.0 }).unwrap();
        let rgb = Grid::from_vec(dims, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let img = render_color(&single, &rgb, &dd, &CameraPose::front(), 1.0).unwrap();
        assert_eq!(img.pixels.data, vec![1.0, 0.0, 0.0]);

        let both = DensityField::from_fn(dims, 0, |_, _, _| 1.0).unwrap();
        let img = render_color(&both, &rgb, &dd, &CameraPose::front(), 1.0).unwrap();
        let expected = [1.0, (-1.0f32).exp(), 0.0];
        for (a, b) in img.pixels.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        let dims = Dims::cube(2);
        let d = DensityField::zeros(dims, 0);
        assert!(render_gray(&d, &Grid::zeros(dims, 1), &CameraPose::front(), 0.0).is_err());
        assert!(render_gray(&d, &Grid::zeros(dims, 1), &CameraPose::front(), -1.0).is_err());
    }

    #[test]
    fn negative_residual_dims_the_render() {
        let dims = Dims::cube(4);
        let d = DensityField::from_fn(dims, 0, |_, _, _| 0.8).unwrap();
        let base = render_gray(&d, &Grid::zeros(dims, 1), &CameraPose::front(), 0.2).unwrap();
        let dimmed = render_gray(
            &d,
            &Grid::from_fn(dims, 1, |_, _, _, _| -0.5),
            &CameraPose::front(),
            0.2,
        )
        .unwrap();
        for (a, b) in dimmed.pixels.data.iter().zip(&base.pixels.data) {
            assert!(a < b);
        }
    }

    #[test]
    fn velocity_projection_cases() {
        let dims = Dims::cube(6);
        let d = DensityField::from_fn(dims, 0, |i, _, _| if i >= 2 { 0.5 } else { 0.0 }).unwrap();
        let zero = VelocityField::uniform(dims, 0, [0.0; 3]);
        let flow = project_velocity(&d, &zero, &CameraPose::front(), 0.1).unwrap();
        assert!(flow.data.iter().all(|&v| v == 0.0));

        let vx = VelocityField::uniform(dims, 0, [1.0, 0.0, 0.0]);
        let flow = project_velocity(&d, &vx, &CameraPose::front(), 0.1).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let p = flow.pixel(r, c);
                if r >= 2 {
                    assert!((p[0] - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6);
                } else {
                    assert_eq!(p, &[0.0, 0.0]);
                }
            }
        }

        let side = project_velocity(&d, &vx, &CameraPose::new(FRAC_PI_2), 0.1).unwrap();
        assert!(side.data.iter().all(|v| v.abs() < 1e-6));
    }
}
