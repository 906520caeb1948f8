//! Frozen 3D perception stencils and the prior encodings fed to the update rule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::grid::{CellGrid, DensityField, Dims, Grid, VelocityField};

/// Boundary handling for every stencil.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Replicate,
    Circular,
}

/// Derivative direction. `X`, `Y`, `Z` run along the grid's `i`, `j`, `k` axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A 3x3x3 kernel indexed by offset `(di, dj, dk)` in `-1..=1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub weights: [f32; 27],
    /// Integer numerators of `weights`; `weights[t] = numerators[t] / denominator`.
    pub numerators: [i32; 27],
    pub denominator: i32,
}

#[inline]
const fn tap(di: i32, dj: i32, dk: i32) -> usize {
    ((di + 1) * 9 + (dj + 1) * 3 + (dk + 1)) as usize
}

const OFFSETS: [[i32; 3]; 27] = {
    let mut out = [[0; 3]; 27];
    let mut t = 0;
    while t < 27 {
        out[t] = [(t / 9) as i32 - 1, ((t / 3) % 3) as i32 - 1, (t % 3) as i32 - 1];
        t += 1;
    }
    out
};

impl Stencil {
    /// 3D Sobel: central difference along `axis`, `[1, 2, 1]` smoothing on the
    /// two transverse axes, scaled by 1/32 so a unit ramp has unit slope.
    pub fn sobel(axis: Axis) -> Self {
        let smooth = |o: i32| if o == 0 { 2 } else { 1 };
        let mut numerators = [0i32; 27];
        for (t, [di, dj, dk]) in OFFSETS.iter().copied().enumerate() {
            let (deriv, a, b) = match axis {
                Axis::X => (di, dj, dk),
                Axis::Y => (dj, di, dk),
                Axis::Z => (dk, di, dj),
            };
            numerators[t] = deriv * smooth(a) * smooth(b);
        }
        Self::from_numerators(numerators, 32)
    }

    /// Compact 27-point Laplacian: corners 2, edges 3, faces 6, centre -88, over 26.
    pub fn laplacian27() -> Self {
        let mut numerators = [0i32; 27];
        for (t, off) in OFFSETS.iter().enumerate() {
            numerators[t] = match off.iter().filter(|&&o| o != 0).count() {
                0 => -88,
                1 => 6,
                2 => 3,
                _ => 2,
            };
        }
        Self::from_numerators(numerators, 26)
    }

    fn from_numerators(numerators: [i32; 27], denominator: i32) -> Self {
        Stencil {
            weights: numerators.map(|n| n as f32 / denominator as f32),
            numerators,
            denominator,
        }
    }

    pub fn at(&self, di: i32, dj: i32, dk: i32) -> f32 {
        self.weights[tap(di, dj, dk)]
    }
}

/// Neighbour lookup tables for one grid shape and padding mode.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    dims: Dims,
    // [axis][offset + 1][coordinate] -> neighbour coordinate
    tables: [[Vec<usize>; 3]; 3],
}

impl Neighborhood {
    pub fn new(dims: Dims, padding: Padding) -> Self {
        let axis_table = |n: usize| -> [Vec<usize>; 3] {
            let shift = |o: isize| -> Vec<usize> {
                (0..n as isize)
                    .map(|x| {
                        let y = x + o;
                        match padding {
                            Padding::Replicate => y.clamp(0, n as isize - 1) as usize,
                            Padding::Circular => y.rem_euclid(n as isize) as usize,
                        }
                    })
                    .collect()
            };
            [shift(-1), shift(0), shift(1)]
        };
        Neighborhood {
            dims,
            tables: [axis_table(dims.h), axis_table(dims.w), axis_table(dims.d)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Cell indices of the 27 neighbours of `cell`, ordered like `Stencil::weights`.
    #[inline]
    pub fn neighbors(&self, cell: usize) -> [usize; 27] {
        let (i, j, k) = self.dims.coords(cell);
        let mut out = [0usize; 27];
        for (t, [di, dj, dk]) in OFFSETS.iter().copied().enumerate() {
            let ni = self.tables[0][(di + 1) as usize][i];
            let nj = self.tables[1][(dj + 1) as usize][j];
            let nk = self.tables[2][(dk + 1) as usize][k];
            out[t] = self.dims.index(ni, nj, nk);
        }
        out
    }
}

fn apply_stencil(grid: &Grid, stencil: &Stencil, padding: Padding) -> Result<Grid> {
    grid.ensure_finite("stencil input")?;
    let dims = grid.dims();
    let c = grid.channels();
    let hood = Neighborhood::new(dims, padding);
    let mut out = Grid::zeros(dims, c);
    let src = grid.data();
    let denom = stencil.denominator as f64;
    let mut acc = vec![0.0f64; c];
    for (cell, dst) in out.data_mut().chunks_exact_mut(c).enumerate() {
        acc.fill(0.0);
        for (t, &n) in hood.neighbors(cell).iter().enumerate() {
            let w = stencil.numerators[t];
            if w == 0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&src[n * c..(n + 1) * c]) {
                *a += w as f64 * v as f64;
            }
        }
        for (o, a) in dst.iter_mut().zip(&acc) {
            *o = (a / denom) as f32;
        }
    }
    Ok(out)
}

/// Per-channel 3D Sobel derivative along `axis`.
pub fn sobel3d(grid: &Grid, axis: Axis, padding: Padding) -> Result<Grid> {
    apply_stencil(grid, &Stencil::sobel(axis), padding)
}

/// Per-channel 27-point Laplacian.
pub fn laplacian27(grid: &Grid, padding: Padding) -> Result<Grid> {
    apply_stencil(grid, &Stencil::laplacian27(), padding)
}

/// Normalised cell-centre coordinates in `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    grid: Grid,
}

impl PositionalEncoding {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }
}

pub fn positional_encoding(dims: Dims) -> Result<PositionalEncoding> {
    dims.validate()?;
    let coord = |x: usize, n: usize| (2 * x + 1) as f32 / n as f32 - 1.0;
    let grid = Grid::from_fn(dims, 3, |i, j, k, c| match c {
        0 => coord(i, dims.h),
        1 => coord(j, dims.w),
        _ => coord(k, dims.d),
    });
    Ok(PositionalEncoding { grid })
}

/// Which priors are appended to the perception vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub density: bool,
    pub velocity: bool,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for Encoding {
    fn default() -> Self {
        Encoding {
            density: true,
            velocity: true,
            padding: Padding::Replicate,
        }
    }
}

impl Encoding {
    /// `5C` stencil channels, 3 positional, then the optional priors.
    pub fn perception_width(&self, channels: usize) -> usize {
        5 * channels + 3 + usize::from(self.density) + if self.velocity { 3 } else { 0 }
    }
}

/// The conditioning inputs shared by every cell during one step.
#[derive(Clone, Copy, Debug)]
pub struct Priors<'a> {
    pub positional: &'a PositionalEncoding,
    pub density: &'a DensityField,
    pub velocity: Option<&'a VelocityField>,
}

impl<'a> Priors<'a> {
    pub fn new(
        positional: &'a PositionalEncoding,
        density: &'a DensityField,
        velocity: Option<&'a VelocityField>,
    ) -> Self {
        Priors {
            positional,
            density,
            velocity,
        }
    }

    pub(crate) fn check(&self, dims: Dims, encoding: &Encoding) -> Result<()> {
        if self.positional.dims() != dims {
            return Err(VncaError::shape("positional encoding", dims, self.positional.dims()));
        }
        if self.density.dims() != dims {
            return Err(VncaError::shape("density prior", dims, self.density.dims()));
        }
        match (encoding.velocity, self.velocity) {
            (true, None) => Err(VncaError::InvalidArgument(
                "velocity encoding enabled but no velocity field supplied".into(),
            )),
            (_, Some(v)) if v.dims() != dims => Err(VncaError::shape("velocity prior", dims, v.dims())),
            _ => Ok(()),
        }
    }
}

/// Writes the perception vector of `cell` into `out`.
///
/// `out.len()` must equal `encoding.perception_width(C)`.
#[inline]
pub(crate) fn perceive_cell(
    state: &Grid,
    hood: &Neighborhood,
    kernels: &PerceptionKernels,
    priors: &Priors<'_>,
    encoding: &Encoding,
    cell: usize,
    out: &mut [f32],
) {
    let c = state.channels();
    let src = state.data();
    out.fill(0.0);
    out[..c].copy_from_slice(state.cell(cell));
    let (head, tail) = out.split_at_mut(5 * c);
    let (_, stencil_part) = head.split_at_mut(c);
    for (t, &n) in hood.neighbors(cell).iter().enumerate() {
        let w = kernels.taps[t];
        let v = &src[n * c..(n + 1) * c];
        for ch in 0..c {
            let x = v[ch];
            stencil_part[ch] += w[0] * x;
            stencil_part[c + ch] += w[1] * x;
            stencil_part[2 * c + ch] += w[2] * x;
            stencil_part[3 * c + ch] += w[3] * x;
        }
    }
    tail[..3].copy_from_slice(priors.positional.grid.cell(cell));
    let mut at = 3;
    if encoding.density {
        tail[at] = priors.density.values()[cell];
        at += 1;
    }
    if encoding.velocity {
        if let Some(v) = priors.velocity {
            tail[at..at + 3].copy_from_slice(v.grid().cell(cell));
        }
    }
}

/// Scatters the stencil part of a perception gradient back onto the state gradient.
///
/// This is the adjoint of the `5C` stencil block of [`perceive_cell`].
#[inline]
pub(crate) fn perceive_cell_adjoint(
    grad_state: &mut [f32],
    channels: usize,
    hood: &Neighborhood,
    kernels: &PerceptionKernels,
    cell: usize,
    grad_perception: &[f32],
) {
    let c = channels;
    for (dst, g) in grad_state[cell * c..(cell + 1) * c].iter_mut().zip(&grad_perception[..c]) {
        *dst += g;
    }
    let gs = &grad_perception[c..5 * c];
    for (t, &n) in hood.neighbors(cell).iter().enumerate() {
        let w = kernels.taps[t];
        let dst = &mut grad_state[n * c..(n + 1) * c];
        for ch in 0..c {
            dst[ch] += w[0] * gs[ch] + w[1] * gs[c + ch] + w[2] * gs[2 * c + ch] + w[3] * gs[3 * c + ch];
        }
    }
}

/// The four frozen kernels interleaved per tap: `[sobel_x, sobel_y, sobel_z, laplacian]`.
#[derive(Clone, Debug)]
pub(crate) struct PerceptionKernels {
    taps: [[f32; 4]; 27],
}

impl PerceptionKernels {
    pub(crate) fn new() -> Self {
        let sx = Stencil::sobel(Axis::X);
        let sy = Stencil::sobel(Axis::Y);
        let sz = Stencil::sobel(Axis::Z);
        let lap = Stencil::laplacian27();
        let mut taps = [[0.0; 4]; 27];
        for (t, tap) in taps.iter_mut().enumerate() {
            *tap = [sx.weights[t], sy.weights[t], sz.weights[t], lap.weights[t]];
        }
        PerceptionKernels { taps }
    }
}

/// Full per-cell perception tensor `state | dx | dy | dz | lap | P | D | V`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionVolume {
    grid: Grid,
}

impl PerceptionVolume {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }
}

pub fn build_perception(cells: &CellGrid, priors: &Priors<'_>, encoding: &Encoding) -> Result<PerceptionVolume> {
    let dims = cells.dims();
    priors.check(dims, encoding)?;
    cells.grid().ensure_finite("cell state")?;
    let width = encoding.perception_width(cells.channels());
    let hood = Neighborhood::new(dims, encoding.padding);
    let kernels = PerceptionKernels::new();
    let mut grid = Grid::zeros(dims, width);
    for (cell, out) in grid.data_mut().chunks_exact_mut(width).enumerate() {
        perceive_cell(cells.grid(), &hood, &kernels, priors, encoding, cell, out);
    }
    Ok(PerceptionVolume { grid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(dims: Dims, f: impl Fn(usize, usize, usize) -> f32) -> Grid {
        Grid::from_fn(dims, 1, |i, j, k, _| f(i, j, k))
    }

    fn interior(dims: Dims) -> impl Iterator<Item = (usize, usize, usize)> {
        (1..dims.h - 1).flat_map(move |i| (1..dims.w - 1).flat_map(move |j| (1..dims.d - 1).map(move |k| (i, j, k))))
    }

    #[test]
    fn sobel_kernel_weights() {
        let s = Stencil::sobel(Axis::X);
        assert_eq!(s.at(1, 0, 0), 4.0 / 32.0);
        assert_eq!(s.at(-1, 1, 1), -1.0 / 32.0);
        assert_eq!(s.at(0, 1, -1), 0.0);
        let total: f32 = s.weights.iter().sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn laplacian_weights_sum_to_zero() {
        let l = Stencil::laplacian27();
        let sum: f64 = l.weights.iter().map(|&w| w as f64).sum();
        assert!(sum.abs() < 1e-6);
        assert_eq!(l.at(0, 0, 0), -88.0 / 26.0);
        assert_eq!(l.at(1, 1, 1), 2.0 / 26.0);
    }

    #[test]
    fn constant_field_maps_to_zero() {
        let dims = Dims::new(5, 4, 6);
        let g = Grid::from_fn(dims, 2, |_, _, _, c| 3.5 + c as f32);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let out = sobel3d(&g, axis, Padding::Replicate).unwrap();
            assert!(out.data().iter().all(|&v| v.abs() < 1e-6));
        }
        let lap = laplacian27(&g, Padding::Circular).unwrap();
        assert!(lap.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn ramps_and_quadratics() {
        let dims = Dims::cube(6);
        let ramp_i = scalar(dims, |i, _, _| i as f32);
        let ramp_j = scalar(dims, |_, j, _| j as f32);
        let dx = sobel3d(&ramp_i, Axis::X, Padding::Replicate).unwrap();
        let dx_of_j = sobel3d(&ramp_j, Axis::X, Padding::Replicate).unwrap();
        let quad = scalar(dims, |i, j, k| (i * i + j * j + k * k) as f32);
        let lap = laplacian27(&quad, Padding::Replicate).unwrap();
        let lap_lin = laplacian27(&ramp_i, Padding::Replicate).unwrap();
        for (i, j, k) in interior(dims) {
            assert_eq!(dx.at(i, j, k, 0), 1.0);
            assert_eq!(dx_of_j.at(i, j, k, 0), 0.0);
            assert!((lap.at(i, j, k, 0) - 6.0).abs() < 1e-5, "{}", lap.at(i, j, k, 0));
            assert!(lap_lin.at(i, j, k, 0).abs() < 1e-5);
        }
    }

    #[test]
    fn replicate_boundary_halves_edge_slope() {
        let dims = Dims::cube(4);
        let ramp = scalar(dims, |i, _, _| i as f32);
        let dx = sobel3d(&ramp, Axis::X, Padding::Replicate).unwrap();
        // one-sided difference (1 - 0) over the 2-cell stencil span
        assert_eq!(dx.at(0, 1, 1, 0), 0.5);
        let circ = sobel3d(&ramp, Axis::X, Padding::Circular).unwrap();
        assert_eq!(circ.at(0, 1, 1, 0), (1.0 - 3.0) / 2.0);
    }

    #[test]
    fn rejects_non_finite() {
        let mut g = Grid::zeros(Dims::cube(3), 1);
        g.data_mut()[4] = f32::INFINITY;
        assert!(sobel3d(&g, Axis::Y, Padding::Replicate).is_err());
        assert!(laplacian27(&g, Padding::Replicate).is_err());
    }

    #[test]
    fn positional_values() {
        let p = positional_encoding(Dims::cube(1)).unwrap();
        assert_eq!(p.grid().cell(0), &[0.0, 0.0, 0.0]);
        let p = positional_encoding(Dims::new(2, 1, 1)).unwrap();
        assert_eq!(p.grid().at(0, 0, 0, 0), -0.5);
        assert_eq!(p.grid().at(1, 0, 0, 0), 0.5);
        let p = positional_encoding(Dims::new(4, 3, 5)).unwrap();
        assert_eq!(p.grid().at(3, 0, 0, 0), 0.75);
        assert!(positional_encoding(Dims::new(2, 0, 2)).is_err());
    }

    #[test]
    fn perception_layout() {
        let dims = Dims::cube(3);
        let pos = positional_encoding(dims).unwrap();
        let density = DensityField::from_fn(dims, 0, |i, j, k| (i + j + k) as f32 * 0.1).unwrap();
        let velocity = VelocityField::uniform(dims, 0, [0.5, -1.0, 2.0]);
        let cells = CellGrid::zeros(dims, 12);

        let enc = Encoding::default();
        let with_v = build_perception(&cells, &Priors::new(&pos, &density, Some(&velocity)), &enc).unwrap();
        assert_eq!(with_v.channels(), 67);
        let cell = dims.index(1, 2, 0);
        let z = with_v.grid().cell(cell);
        assert!(z[..60].iter().all(|&v| v == 0.0));
        assert_eq!(&z[60..63], pos.grid().cell(cell));
        assert_eq!(z[63], density.values()[cell]);
        assert_eq!(&z[64..67], &[0.5, -1.0, 2.0]);

        let no_v = Encoding {
            velocity: false,
            ..enc
        };
        let without = build_perception(&cells, &Priors::new(&pos, &density, None), &no_v).unwrap();
        assert_eq!(without.channels(), 64);

        let bad = DensityField::zeros(Dims::cube(2), 0);
        assert!(build_perception(&cells, &Priors::new(&pos, &bad, None), &no_v).is_err());
    }

    #[test]
    fn perception_matches_separate_stencils() {
        let dims = Dims::new(4, 3, 5);
        let state = Grid::from_fn(dims, 4, |i, j, k, c| ((i * 7 + j * 3 + k * 5 + c * 11) % 13) as f32 * 0.1);
        let cells = CellGrid::from_grid(state.clone()).unwrap();
        let pos = positional_encoding(dims).unwrap();
        let density = DensityField::zeros(dims, 0);
        let enc = Encoding {
            density: true,
            velocity: false,
            padding: Padding::Replicate,
        };
        let z = build_perception(&cells, &Priors::new(&pos, &density, None), &enc).unwrap();
        let parts = [
            state.clone(),
            sobel3d(&state, Axis::X, enc.padding).unwrap(),
            sobel3d(&state, Axis::Y, enc.padding).unwrap(),
            sobel3d(&state, Axis::Z, enc.padding).unwrap(),
            laplacian27(&state, enc.padding).unwrap(),
        ];
        for cell in 0..dims.cells() {
            let zc = z.grid().cell(cell);
            for (b, part) in parts.iter().enumerate() {
                for c in 0..4 {
                    assert!((zc[b * 4 + c] - part.cell(cell)[c]).abs() < 1e-6);
                }
            }
        }
    }
}
