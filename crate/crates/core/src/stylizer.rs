//! Feed-forward stylization of density/velocity sequences and export.
//!
//! Cell state persists across frames: frame `i` is conditioned on its own
//! density and velocity, advanced `N` steps from frame `i - 1`'s state, and
//! read out. The first frame is preceded by a burn-in from the zero state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, VncaError};
use crate::grid::{CellGrid, DensityField, Dims, Grid, VelocityField};
use crate::image::save_png;
use crate::nca::{readout, rollout, UpdateRule};
use crate::plume::{density_name, velocity_name};
use crate::render::{CameraPose, Renderer};
use crate::seeds::derive_seed;
use crate::trainer::{frame_priors, tone_map};
use crate::volume::{positional_encoding, PositionalEncoding};
use crate::vnv;

pub const DEFAULT_BURN_IN: usize = 96;

/// Where one frame's volumes come from.
#[derive(Clone, Debug)]
pub enum FrameSource {
    Memory(DensityField, VelocityField),
    Files {
        index: u32,
        density: PathBuf,
        velocity: PathBuf,
    },
}

impl FrameSource {
    pub fn index(&self) -> u32 {
        match self {
            FrameSource::Memory(d, _) => d.frame_index,
            FrameSource::Files { index, .. } => *index,
        }
    }

    fn load(&self) -> Result<(DensityField, VelocityField)> {
        match self {
            FrameSource::Memory(d, v) => Ok((d.clone(), v.clone())),
            FrameSource::Files {
                index,
                density,
                velocity,
            } => {
                let d = DensityField::new(vnv::read(density)?, *index).map_err(|e| with_path(e, density))?;
                let v = VelocityField::new(vnv::read(velocity)?, *index).map_err(|e| with_path(e, velocity))?;
                Ok((d, v))
            }
        }
    }
}

fn with_path(e: VncaError, path: &Path) -> VncaError {
    VncaError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Ordered frames of one simulation. Volumes are loaded lazily.
#[derive(Clone, Debug)]
pub struct SequenceSpec {
    frames: Vec<FrameSource>,
    pub frame_rate: f32,
}

impl SequenceSpec {
    pub fn new(frames: Vec<FrameSource>, frame_rate: f32) -> Result<Self> {
        if frames.is_empty() {
            return Err(VncaError::EmptySet("sequence frames"));
        }
        for pair in frames.windows(2) {
            if pair[1].index() <= pair[0].index() {
                return Err(VncaError::InvalidArgument(format!(
                    "frame indices must increase strictly, got {} after {}",
                    pair[1].index(),
                    pair[0].index()
                )));
            }
        }
        Ok(SequenceSpec { frames, frame_rate })
    }

    pub fn from_memory(frames: Vec<(DensityField, VelocityField)>) -> Result<Self> {
        Self::new(frames.into_iter().map(|(d, v)| FrameSource::Memory(d, v)).collect(), 30.0)
    }

    /// `density_%04d.vnv` / `velocity_%04d.vnv` for each index in `frames`.
    pub fn from_dirs(density_dir: &Path, velocity_dir: &Path, frames: impl IntoIterator<Item = u32>) -> Result<Self> {
        let sources = frames
            .into_iter()
            .map(|index| {
                let density = density_dir.join(density_name(index));
                let velocity = velocity_dir.join(velocity_name(index));
                for p in [&density, &velocity] {
                    if !p.is_file() {
                        return Err(VncaError::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "frame file not found"),
                        ));
                    }
                }
                Ok(FrameSource::Files {
                    index,
                    density,
                    velocity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sources, 30.0)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.frames.iter().map(FrameSource::index).collect()
    }

    /// Loads and checks the first frame's dimensions.
    pub fn dims(&self) -> Result<Dims> {
        let (d, v) = self.frames[0].load()?;
        if v.dims() != d.dims() {
            return Err(VncaError::shape("velocity volume", d.dims(), v.dims()));
        }
        Ok(d.dims())
    }
}

/// Readout of one stylized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StylizedFrame {
    pub frame_index: u32,
    pub rgb: Grid,
    pub delta_d: Grid,
    /// `max(d (1 + delta_d), 0)`.
    pub effective_density: DensityField,
    /// Input density the frame was conditioned on.
    pub density: DensityField,
}

impl StylizedFrame {
    /// `rgb | delta_d` as one 4-channel grid.
    pub fn volume(&self) -> Grid {
        Grid::concat_channels(&[&self.rgb, &self.delta_d]).expect("readout grids share dims")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizeOptions {
    pub steps_per_frame: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub fire_rate_override: Option<f32>,
}

impl Default for StylizeOptions {
    fn default() -> Self {
        StylizeOptions {
            steps_per_frame: 24,
            burn_in: DEFAULT_BURN_IN,
            seed: 0,
            fire_rate_override: None,
        }
    }
}

impl StylizeOptions {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        StylizeOptions {
            steps_per_frame: ck.config.train.steps_per_frame,
            ..Self::default()
        }
    }
}

/// Stateful frame-by-frame stylizer. Holds one cell grid; no gradient state.
pub struct Stylizer {
    rule: UpdateRule,
    dims: Dims,
    positional: PositionalEncoding,
    state: CellGrid,
    options: StylizeOptions,
    emitted: u64,
}

impl Stylizer {
    pub fn new(rule: &UpdateRule, dims: Dims, options: StylizeOptions) -> Result<Self> {
        dims.validate()?;
        if options.steps_per_frame == 0 {
            return Err(VncaError::InvalidArgument("steps per frame must be at least 1".into()));
        }
        let mut rule = rule.clone();
        if let Some(rate) = options.fire_rate_override {
            if !(0.0..=1.0).contains(&rate) {
                return Err(VncaError::InvalidArgument(format!("fire rate override {rate} outside [0, 1]")));
            }
            rule.fire_rate = rate;
        }
        Ok(Stylizer {
            dims,
            positional: positional_encoding(dims)?,
            state: CellGrid::zeros(dims, rule.channels),
            rule,
            options,
            emitted: 0,
        })
    }

    pub fn state(&self) -> &CellGrid {
        &self.state
    }

    /// Conditions on one frame, advances the state and reads it out.
    pub fn advance(&mut self, density: &DensityField, velocity: &VelocityField) -> Result<StylizedFrame> {
        if density.dims() != self.dims {
            return Err(VncaError::shape("density volume", self.dims, density.dims()));
        }
        if velocity.dims() != self.dims {
            return Err(VncaError::shape("velocity volume", self.dims, velocity.dims()));
        }
        let priors = frame_priors(&self.positional, density, velocity, &self.rule.encoding);
        let frame = density.frame_index;
        let nan = |e: VncaError| match e {
            VncaError::NonFinite { term, index } => VncaError::NonFinite {
                term: format!("{term} while stylizing frame {frame}"),
                index,
            },
            other => other,
        };
        if self.emitted == 0 && self.options.burn_in > 0 {
            let seed = derive_seed(self.options.seed, u64::MAX);
            self.state = rollout(&self.state, &self.rule, &priors, self.options.burn_in, seed).map_err(nan)?;
        }
        let seed = derive_seed(self.options.seed, self.emitted);
        self.state = rollout(&self.state, &self.rule, &priors, self.options.steps_per_frame, seed).map_err(nan)?;
        self.emitted += 1;
        let r = readout(&self.state).map_err(nan)?;
        let effective = density
            .values()
            .iter()
            .zip(r.delta_d.data())
            .map(|(d, dd)| (d * (1.0 + dd)).max(0.0))
            .collect();
        Ok(StylizedFrame {
            frame_index: frame,
            effective_density: DensityField::new(Grid::from_vec(self.dims, 1, effective)?, frame)?,
            density: density.clone(),
            rgb: r.rgb,
            delta_d: r.delta_d,
        })
    }
}

/// Iterator over the stylized frames of a sequence.
pub struct FrameStream<'a> {
    stylizer: Stylizer,
    sources: std::slice::Iter<'a, FrameSource>,
    failed: bool,
}

impl Iterator for FrameStream<'_> {
    type Item = Result<StylizedFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let source = self.sources.next()?;
        let out = source
            .load()
            .and_then(|(d, v)| self.stylizer.advance(&d, &v));
        self.failed = out.is_err();
        Some(out)
    }
}

fn check_dims(ck: &Checkpoint, dims: Dims) -> Result<()> {
    let [h, w, d] = ck.provenance.volume_dims;
    if [h, w, d] != [0, 0, 0] && Dims::new(h, w, d) != dims {
        return Err(VncaError::shape("sequence volume (checkpoint was trained on)", Dims::new(h, w, d), dims));
    }
    Ok(())
}

/// Streams stylized frames of `seq`; cell state carries from frame to frame.
pub fn stylize_sequence<'a>(ck: &Checkpoint, seq: &'a SequenceSpec, options: StylizeOptions) -> Result<FrameStream<'a>> {
    let dims = seq.dims()?;
    check_dims(ck, dims)?;
    Ok(FrameStream {
        stylizer: Stylizer::new(&ck.rule, dims, options)?,
        sources: seq.frames.iter(),
        failed: false,
    })
}

/// Like [`stylize_sequence`] for data absent from training, whose volume
/// size may differ from the training volume.
pub fn stylize_unseen<'a>(ck: &Checkpoint, seq: &'a SequenceSpec, options: StylizeOptions) -> Result<FrameStream<'a>> {
    let dims = seq.dims()?;
    Ok(FrameStream {
        stylizer: Stylizer::new(&ck.rule, dims, options)?,
        sources: seq.frames.iter(),
        failed: false,
    })
}

pub fn frame_png_name(frame: u32, view: usize) -> String {
    format!("frame_{frame:04}_view_{view:02}.png")
}

pub fn volume_name(frame: u32) -> String {
    format!("stylized_{frame:04}.vnv")
}

#[derive(Clone, Debug)]
pub struct ExportOptions {
    pub poses: Vec<CameraPose>,
    pub gamma: f32,
    pub exposure: f32,
    pub write_volumes: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportSummary {
    pub frames: usize,
    pub images: Vec<PathBuf>,
    pub volumes: Vec<PathBuf>,
}

/// Renders each frame from each pose to PNG and optionally dumps `rgb | delta_d` as VNV1.
pub fn export_frames(
    frames: impl IntoIterator<Item = Result<StylizedFrame>>,
    options: &ExportOptions,
    out_dir: &Path,
) -> Result<ExportSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| VncaError::io(out_dir, e))?;
    let mut summary = ExportSummary::default();
    let mut renderers: Option<(Dims, Vec<Renderer>)> = None;
    for frame in frames {
        let frame = frame?;
        let dims = frame.density.dims();
        if renderers.as_ref().map_or(true, |(d, _)| *d != dims) {
            let rs = options
                .poses
                .iter()
                .map(|p| Renderer::new(dims, *p, options.gamma))
                .collect::<Result<Vec<_>>>()?;
            renderers = Some((dims, rs));
        }
        let (_, rs) = renderers.as_ref().expect("renderers built above");
        for (view, r) in rs.iter().enumerate() {
            let img = r.render_color(&frame.density, &frame.rgb, &frame.delta_d)?.pixels;
            let path = out_dir.join(frame_png_name(frame.frame_index, view));
            save_png(&tone_map(&img, options.exposure), &path)?;
            summary.images.push(path);
        }
        if options.write_volumes {
            let path = out_dir.join(volume_name(frame.frame_index));
            vnv::write(&path, &frame.volume())?;
            summary.volumes.push(path);
        }
        summary.frames += 1;
    }
    Ok(summary)
}
