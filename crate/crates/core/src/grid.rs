//! Dense voxel tensors and the domain types built on them.
//!
//! Every volume is stored row-major as `[i][j][k][c]`: the channel index is
//! fastest, then `k`, `j` and `i`. This is also the on-disk VNV1 order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};

/// Spatial extent of a volume, `H x W x D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Dims { h, w, d }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { h: n, w: n, d: n }
    }

    pub const fn cells(&self) -> usize {
        self.h * self.w * self.d
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }

    #[inline]
    pub const fn coords(&self, cell: usize) -> (usize, usize, usize) {
        let k = cell % self.d;
        let j = (cell / self.d) % self.w;
        let i = cell / (self.d * self.w);
        (i, j, k)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(VncaError::InvalidArgument(format!(
                "grid dimensions must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// A dense `H x W x D x C` tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Grid {
            dims,
            channels,
            data: vec![0.0; dims.cells() * channels],
        }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = dims.cells() * channels;
        if data.len() != expected {
            return Err(VncaError::shape(
                "Grid::from_vec",
                format!("{expected} values for {dims}x{channels}"),
                data.len(),
            ));
        }
        Ok(Grid {
            dims,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(i, j, k, c)` at every element.
    pub fn from_fn(dims: Dims, channels: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.cells() * channels);
        for i in 0..dims.h {
            for j in 0..dims.w {
                for k in 0..dims.d {
                    for c in 0..channels {
                        data.push(f(i, j, k, c));
                    }
                }
            }
        }
        Grid {
            dims,
            channels,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn cell(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f32] {
        &mut self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize, c: usize) -> f32 {
        self.data[self.dims.index(i, j, k) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, c: usize, value: f32) {
        let idx = self.dims.index(i, j, k) * self.channels + c;
        self.data[idx] = value;
    }

    /// Copies channel range `range` into a new grid.
    pub fn channel_slice(&self, range: std::ops::Range<usize>) -> Grid {
        assert!(range.end <= self.channels);
        let width = range.len();
        let mut data = Vec::with_capacity(self.dims.cells() * width);
        for cell in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&cell[range.clone()]);
        }
        Grid {
            dims: self.dims,
            channels: width,
            data,
        }
    }

    /// Concatenates grids of equal spatial shape along the channel axis.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| VncaError::InvalidArgument("concat of zero grids".into()))?;
        let dims = first.dims;
        for p in parts {
            if p.dims != dims {
                return Err(VncaError::shape("Grid::concat_channels", dims, p.dims));
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(dims.cells() * channels);
        for cell in 0..dims.cells() {
            for p in parts {
                data.extend_from_slice(p.cell(cell));
            }
        }
        Ok(Grid {
            dims,
            channels,
            data,
        })
    }

    pub fn ensure_finite(&self, term: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(VncaError::NonFinite {
                term: term.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub(crate) fn expect_shape(&self, context: &str, dims: Dims, channels: usize) -> Result<()> {
        if self.dims != dims || self.channels != channels {
            return Err(VncaError::shape(
                context,
                format!("{dims}x{channels}"),
                format!("{}x{}", self.dims, self.channels),
            ));
        }
        Ok(())
    }
}

/// Scalar smoke occupancy of one simulation frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    grid: Grid,
    pub frame_index: u32,
}

impl DensityField {
    pub fn new(grid: Grid, frame_index: u32) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(VncaError::shape("DensityField", "1 channel", grid.channels()));
        }
        grid.ensure_finite("density")?;
        if let Some(index) = grid.data().iter().position(|&v| v < 0.0) {
            return Err(VncaError::InvalidArgument(format!(
                "density must be non-negative, element {index} is {}",
                grid.data()[index]
            )));
        }
        Ok(DensityField { grid, frame_index })
    }

    pub fn from_fn(dims: Dims, frame_index: u32, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        Self::new(Grid::from_fn(dims, 1, |i, j, k, _| f(i, j, k)), frame_index)
    }

    pub fn zeros(dims: Dims, frame_index: u32) -> Self {
        DensityField {
            grid: Grid::zeros(dims, 1),
            frame_index,
        }
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        self.grid.data()
    }
}

/// Per-voxel velocity in grid units per simulation frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    grid: Grid,
    pub frame_index: u32,
}

impl VelocityField {
    pub fn new(grid: Grid, frame_index: u32) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(VncaError::shape("VelocityField", "3 channels", grid.channels()));
        }
        grid.ensure_finite("velocity")?;
        Ok(VelocityField { grid, frame_index })
    }

    pub fn from_fn(dims: Dims, frame_index: u32, mut f: impl FnMut(usize, usize, usize) -> [f32; 3]) -> Result<Self> {
        Self::new(Grid::from_fn(dims, 3, |i, j, k, c| f(i, j, k)[c]), frame_index)
    }

    pub fn uniform(dims: Dims, frame_index: u32, v: [f32; 3]) -> Self {
        VelocityField {
            grid: Grid::from_fn(dims, 3, |_, _, _, c| v[c]),
            frame_index,
        }
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

pub const DEFAULT_CHANNELS: usize = 12;
/// Channels `0..3` hold RGB.
pub const RGB_CHANNELS: std::ops::Range<usize> = 0..3;
pub const DELTA_D_CHANNEL: usize = 3;
/// RGB plus the residual density channel; the rest are hidden.
pub const MIN_CHANNELS: usize = 4;

/// The evolving NCA cell states.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    state: Grid,
}

impl CellGrid {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        assert!(channels >= MIN_CHANNELS, "cell grids need at least {MIN_CHANNELS} channels");
        CellGrid {
            state: Grid::zeros(dims, channels),
        }
    }

    pub fn from_grid(state: Grid) -> Result<Self> {
        if state.channels() < MIN_CHANNELS {
            return Err(VncaError::shape(
                "CellGrid",
                format!(">= {MIN_CHANNELS} channels"),
                state.channels(),
            ));
        }
        Ok(CellGrid { state })
    }

    pub fn dims(&self) -> Dims {
        self.state.dims()
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }

    pub fn grid(&self) -> &Grid {
        &self.state
    }

    pub fn grid_mut(&mut self) -> &mut Grid {
        &mut self.state
    }

    pub fn into_grid(self) -> Grid {
        self.state
    }

    pub fn is_finite(&self) -> bool {
        self.state.data().iter().all(|v| v.is_finite())
    }
}
