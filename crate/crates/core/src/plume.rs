//! Analytic smoke data and a procedural style exemplar for tests and demos.
//!
//! The plume is a Gaussian puff rising along `j`, swirling about its own
//! vertical axis and expanding. Its velocity field is known in closed form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::grid::{DensityField, Dims, VelocityField};
use crate::image::Image;
use crate::vnv;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlumeSpec {
    pub size: usize,
    /// Puff centre at frame 0, as fractions of the grid extent.
    pub emitter: [f32; 3],
    /// Voxels per frame along `j`.
    pub rise: f32,
    /// Angular speed about the puff's vertical axis, radians per frame.
    pub swirl: f32,
    /// Relative growth of the puff radius per frame.
    pub expansion: f32,
    /// Radius at frame 0, as a fraction of the grid extent.
    pub radius: f32,
    pub peak: f32,
    /// Uniform background smoke density added everywhere.
    pub ambient: f32,
}

impl Default for PlumeSpec {
    fn default() -> Self {
        PlumeSpec {
            size: 32,
            emitter: [0.5, 0.3, 0.5],
            rise: 0.25,
            swirl: 0.08,
            expansion: 0.01,
            radius: 0.25,
            peak: 1.0,
            ambient: 0.5,
        }
    }
}

impl PlumeSpec {
    pub fn dims(&self) -> Dims {
        Dims::cube(self.size)
    }

    fn centre(&self, frame: u32) -> [f32; 3] {
        let n = self.size as f32;
        [
            self.emitter[0] * n - 0.5,
            self.emitter[1] * n - 0.5 + self.rise * frame as f32,
            self.emitter[2] * n - 0.5,
        ]
    }

    fn sigma(&self, frame: u32) -> f32 {
        self.radius * self.size as f32 * (1.0 + self.expansion * frame as f32)
    }

    pub fn density(&self, frame: u32) -> Result<DensityField> {
        let c = self.centre(frame);
        let s = self.sigma(frame);
        // slightly elongated along the rise direction, with a soft swirl-aligned lobe
        let angle = self.swirl * frame as f32;
        DensityField::from_fn(self.dims(), frame, |i, j, k| {
            let (x, y, z) = (i as f32 - c[0], j as f32 - c[1], k as f32 - c[2]);
            let r2 = x * x + (y * y) / 1.5 + z * z;
            let theta = z.atan2(x) - angle;
            let lobe = 1.0 + 0.35 * (2.0 * theta).cos() * (x * x + z * z).sqrt() / s.max(1e-6);
            self.ambient + (self.peak * (-r2 / (2.0 * s * s)).exp() * lobe.max(0.0)).min(self.peak * 2.0)
        })
    }

    pub fn velocity(&self, frame: u32) -> Result<VelocityField> {
        let c = self.centre(frame);
        let grow = self.expansion / (1.0 + self.expansion * frame as f32);
        VelocityField::from_fn(self.dims(), frame, |i, j, k| {
            let (x, y, z) = (i as f32 - c[0], j as f32 - c[1], k as f32 - c[2]);
            [
                -self.swirl * z + grow * x,
                self.rise + grow * y,
                self.swirl * x + grow * z,
            ]
        })
    }

    pub fn frame(&self, frame: u32) -> Result<(DensityField, VelocityField)> {
        Ok((self.density(frame)?, self.velocity(frame)?))
    }

    /// Writes `density_%04d.vnv` and `velocity_%04d.vnv` for `frames`.
    pub fn write_sequence(&self, dir: &Path, frames: std::ops::Range<u32>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| VncaError::io(dir, e))?;
        for f in frames {
            let (d, v) = self.frame(f)?;
            vnv::write(dir.join(density_name(f)), d.grid())?;
            vnv::write(dir.join(velocity_name(f)), v.grid())?;
        }
        Ok(())
    }
}

pub fn density_name(frame: u32) -> String {
    format!("density_{frame:04}.vnv")
}

pub fn velocity_name(frame: u32) -> String {
    format!("velocity_{frame:04}.vnv")
}

/// Warm two-tone cellular texture with diagonal banding, `size x size` RGB.
pub fn exemplar(size: usize) -> Image {
    let tau = std::f32::consts::TAU;
    let n = size as f32;
    Image::from_fn(size, size, 3, |r, c, ch| {
        let (y, x) = (r as f32 / n, c as f32 / n);
        let cells = ((x * 8.0 * tau).sin() * (y * 8.0 * tau).sin()).abs().powf(0.5);
        let band = 0.5 + 0.5 * ((x + y) * 5.0 * tau).sin();
        let t = (0.65 * cells + 0.35 * band).clamp(0.0, 1.0);
        let dark = [0.35, 0.08, 0.05];
        let light = [1.0, 0.78, 0.3];
        dark[ch] + (light[ch] - dark[ch]) * t
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn puff_peaks_at_centre_and_rises() {
        let spec = PlumeSpec::default();
        let d0 = spec.density(0).unwrap();
        let d20 = spec.density(20).unwrap();
        let mass_height = |d: &DensityField| {
            let dims = d.dims();
            let (mut m, mut mj) = (0.0f64, 0.0f64);
            for cell in 0..dims.cells() {
                let (_, j, _) = dims.coords(cell);
                let puff = (d.values()[cell] - spec.ambient) as f64;
                m += puff;
                mj += puff * j as f64;
            }
            mj / m
        };
        assert!(mass_height(&d20) > mass_height(&d0) + 3.0);
        assert!(d0.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn velocity_has_rise_and_swirl() {
        let spec = PlumeSpec::default();
        let v = spec.velocity(0).unwrap();
        let c = spec.centre(0);
        let i = (c[0] + 5.5) as usize;
        let (j, k) = (c[1].round() as usize, c[2].round() as usize);
        let g = v.grid();
        assert!(g.at(i, j, k, 2) > 0.3);
        assert!((g.at(i, j, k, 1) - spec.rise).abs() < 0.05);
    }

    #[test]
    fn sequence_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlumeSpec {
            size: 6,
            ..PlumeSpec::default()
        };
        spec.write_sequence(dir.path(), 2..4).unwrap();
        let back = vnv::read(dir.path().join("density_0003.vnv")).unwrap();
        assert_eq!(&back, spec.density(3).unwrap().grid());
        assert!(dir.path().join("velocity_0002.vnv").exists());
    }

    #[test]
    fn exemplar_in_range() {
        let img = exemplar(64);
        assert_eq!(img.shape_string(), "64x64x3");
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
