pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod image;
mod linalg;
pub mod losses;
pub mod nca;
pub mod optim;
pub mod plume;
pub mod render;
pub mod seeds;
pub mod stylizer;
pub mod trainer;
pub mod volume;
pub mod vnv;

pub use error::{Result, VncaError};
pub use grid::{CellGrid, DensityField, Dims, Grid, VelocityField};
