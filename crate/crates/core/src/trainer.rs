//! Single-frame training loop.
//!
//! Each epoch picks a camera pose and a pooled cell state, renders it
//! (`P_b`), rolls the rule forward `n` steps, renders again (`P_f`), and
//! takes one optimizer step on
//! `lambda_app * l_app + lambda_motion * l_motion + lambda_overflow * l_overflow`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::RunConfig;
use crate::error::{Result, VncaError};
use crate::grid::{CellGrid, DensityField, Dims, Grid, VelocityField};
use crate::image::Image;
use crate::linalg::l2_norm;
use crate::losses::{
    appearance_terms, motion_loss, AppearanceLoss, FeatureExtractor, FlowEstimator, LossReport, LucasKanadeFlow,
    MotionLoss, StyleTarget,
};
use crate::nca::{readout, readout_backward, rollout, rollout_backward, rollout_traced, UpdateRule};
use crate::optim::Adam;
use crate::render::{CameraPose, Renderer};
use crate::seeds::derive_seed;
use crate::volume::{positional_encoding, Encoding, PositionalEncoding, Priors};

/// Consecutive non-finite epochs after which training gives up.
pub const MAX_SKIPPED_EPOCHS: usize = 8;

#[derive(Clone, Copy, Debug)]
struct EpochPlan {
    epoch: usize,
    epoch_seed: u64,
    pose_index: usize,
    pool_index: usize,
    force_reseed: bool,
    n: usize,
    rollout_seed: u64,
}

/// Evolved cell states reused across epochs.
#[derive(Clone, Debug)]
pub struct StatePool {
    entries: Vec<CellGrid>,
    ages: Vec<u64>,
    dims: Dims,
    channels: usize,
}

impl StatePool {
    pub fn new(size: usize, dims: Dims, channels: usize) -> Result<Self> {
        if size == 0 {
            return Err(VncaError::InvalidArgument("state pool size must be at least 1".into()));
        }
        Ok(StatePool {
            entries: vec![CellGrid::zeros(dims, channels); size],
            ages: vec![0; size],
            dims,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &CellGrid {
        &self.entries[index]
    }

    /// Epochs each entry has been evolved since it was last reset.
    pub fn ages(&self) -> &[u64] {
        &self.ages
    }

    pub fn reseed(&mut self, index: usize) {
        self.entries[index] = CellGrid::zeros(self.dims, self.channels);
        self.ages[index] = 0;
    }

    /// The entry at `index`, reset to zeros first if it holds non-finite values.
    /// Returns the state and whether it was reset.
    pub fn draw(&mut self, index: usize, force_reseed: bool) -> (CellGrid, bool) {
        let bad = !self.entries[index].is_finite();
        if force_reseed || bad {
            self.reseed(index);
        }
        (self.entries[index].clone(), force_reseed || bad)
    }

    pub fn put(&mut self, index: usize, state: CellGrid) -> Result<()> {
        state.grid().expect_shape("pool entry", self.dims, self.channels)?;
        if state.is_finite() {
            self.entries[index] = state;
            self.ages[index] += 1;
        } else {
            self.reseed(index);
        }
        Ok(())
    }
}

/// Mean of `|x - clamp(x, -1, 1)|` over all state entries, and its gradient.
pub fn overflow_penalty(cells: &CellGrid) -> (f32, Grid) {
    let data = cells.grid().data();
    let scale = 1.0 / data.len().max(1) as f32;
    let mut grad = Grid::zeros(cells.dims(), cells.channels());
    let mut sum = 0.0f64;
    for (g, &x) in grad.data_mut().iter_mut().zip(data) {
        let excess = x.abs() - 1.0;
        if excess > 0.0 {
            sum += excess as f64;
            *g = x.signum() * scale;
        }
    }
    ((sum * scale as f64) as f32, grad)
}

/// Scales a render by `exposure` and clamps it to `[0, 1]`.
pub fn tone_map(raw: &Image, exposure: f32) -> Image {
    let mut out = raw.clone();
    out.data.iter_mut().for_each(|v| *v = (*v * exposure).clamp(0.0, 1.0));
    out
}

fn tone_map_backward(raw: &Image, exposure: f32, grad: &Image) -> Image {
    let mut out = grad.clone();
    for (g, r) in out.data.iter_mut().zip(&raw.data) {
        let v = r * exposure;
        *g = if (0.0..=1.0).contains(&v) { *g * exposure } else { 0.0 };
    }
    out
}

/// `1 / max` over `poses` of the grey render of `density` without residuals.
pub fn auto_exposure(density: &DensityField, poses: &[CameraPose], gamma: f32) -> Result<f32> {
    let zero = Grid::zeros(density.dims(), 1);
    let mut peak = 0.0f32;
    for pose in poses {
        let view = Renderer::new(density.dims(), *pose, gamma)?.render_gray(density, &zero)?;
        peak = view.pixels.data.iter().fold(peak, |m, v| m.max(*v));
    }
    Ok(if peak > 0.0 { 1.0 / peak } else { 1.0 })
}

/// Priors for one frame under `encoding`.
pub fn frame_priors<'a>(
    positional: &'a PositionalEncoding,
    density: &'a DensityField,
    velocity: &'a VelocityField,
    encoding: &Encoding,
) -> Priors<'a> {
    Priors::new(
        positional,
        density,
        if encoding.velocity { Some(velocity) } else { None },
    )
}

/// Camera-space losses of a rendered state, for evaluation outside training.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEval {
    pub appearance: AppearanceLoss,
    pub color: Image,
    pub gray: Image,
}

pub struct Trainer {
    pub rule: UpdateRule,
    pub adam: Adam,
    pub pool: StatePool,
    /// Epochs completed.
    pub epoch: usize,
    config: RunConfig,
    density: DensityField,
    velocity: VelocityField,
    positional: PositionalEncoding,
    renderers: Vec<Renderer>,
    target: StyleTarget,
    extractor: Box<dyn FeatureExtractor>,
    flow: Box<dyn FlowEstimator>,
    exposure: f32,
    gamma: f32,
    provenance: Provenance,
}

/// Azimuths used to calibrate exposure and to evaluate trained rules.
pub const EVAL_VIEWS: usize = 8;

impl Trainer {
    /// A fresh rule for `config`, trained on one `(density, velocity)` frame.
    pub fn new(
        config: RunConfig,
        density: DensityField,
        velocity: VelocityField,
        style: &Image,
        style_sha256: String,
        extractor: Box<dyn FeatureExtractor>,
    ) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let t = &config.train;
        let encoding = Encoding {
            density: t.density_encoding,
            velocity: t.velocity_encoding,
            padding: m.padding,
        };
        let rule = UpdateRule::new(m.channels, m.hidden_dim, m.fire_rate, encoding, derive_seed(t.seed, u64::MAX))?;
        let gamma = t.gamma_for(density.dims().d);
        let exposure = auto_exposure(&density, &Self::eval_poses(&config), gamma)?;
        let provenance = Provenance {
            style_sha256,
            frame_index: density.frame_index,
            seed: t.seed,
            volume_dims: density.dims().as_array(),
        };
        let ck = Checkpoint::new(rule, config, provenance, exposure, gamma);
        Self::from_checkpoint(ck, density, velocity, style, extractor)
    }

    /// Resumes from `ck`. The state pool is not stored and restarts from zeros.
    pub fn from_checkpoint(
        ck: Checkpoint,
        density: DensityField,
        velocity: VelocityField,
        style: &Image,
        extractor: Box<dyn FeatureExtractor>,
    ) -> Result<Self> {
        let dims = density.dims();
        if velocity.dims() != dims {
            return Err(VncaError::shape("training velocity", dims, velocity.dims()));
        }
        let [h, w, d] = ck.provenance.volume_dims;
        if ck.epoch > 0 && Dims::new(h, w, d) != dims {
            return Err(VncaError::shape("training volume", Dims::new(h, w, d), dims));
        }
        let config = ck.config;
        let positional = positional_encoding(dims)?;
        let renderers = config
            .train
            .pose_set()
            .into_iter()
            .map(|p| Renderer::new(dims, p, ck.gamma))
            .collect::<Result<Vec<_>>>()?;
        let target = StyleTarget::new(style, extractor.as_ref())?;
        let adam = ck.optimizer.unwrap_or_else(|| Adam::new(&ck.rule.params));
        let pool = StatePool::new(config.train.pool_size, dims, ck.rule.channels)?;
        Ok(Trainer {
            rule: ck.rule,
            adam,
            pool,
            epoch: ck.epoch,
            config,
            density,
            velocity,
            positional,
            renderers,
            target,
            extractor,
            flow: Box::new(LucasKanadeFlow::default()),
            exposure: ck.exposure,
            gamma: ck.gamma,
            provenance: ck.provenance,
        })
    }

    fn eval_poses(config: &RunConfig) -> Vec<CameraPose> {
        let s = config.train.render_size;
        CameraPose::ring(EVAL_VIEWS)
            .into_iter()
            .map(|p| p.with_image_size(s, s))
            .collect()
    }

    pub fn set_flow_estimator(&mut self, flow: Box<dyn FlowEstimator>) {
        self.flow = flow;
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn exposure(&self) -> f32 {
        self.exposure
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    pub fn density(&self) -> &DensityField {
        &self.density
    }

    pub fn velocity(&self) -> &VelocityField {
        &self.velocity
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            optimizer: Some(self.adam.clone()),
            epoch: self.epoch,
            ..Checkpoint::new(
                self.rule.clone(),
                self.config.clone(),
                self.provenance.clone(),
                self.exposure,
                self.gamma,
            )
        }
    }

    fn priors(&self) -> Priors<'_> {
        frame_priors(&self.positional, &self.density, &self.velocity, &self.rule.encoding)
    }

        /// Runs one epoch and updates rule, optimizer and pool.
    ///
    /// A non-finite state or loss aborts only this epoch: the pool entry is
    /// reset, the epoch counter advances and the error names the epoch seeds.
    pub fn train_epoch(&mut self) -> Result<LossReport> {
        let t = &self.config.train;
        let epoch = self.epoch;
        let epoch_seed = derive_seed(t.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let plan = EpochPlan {
            epoch,
            epoch_seed,
            pose_index: rng.gen_range(0..self.renderers.len()),
            pool_index: rng.gen_range(0..self.pool.len()),
            force_reseed: rng.gen::<f32>() < t.pool_reseed_prob,
            n: rng.gen_range(t.n_range[0]..=t.n_range[1]),
            rollout_seed: derive_seed(epoch_seed, 1),
        };
        match self.run_epoch(&plan) {
            Err(VncaError::NonFinite { term, index }) => {
                self.pool.reseed(plan.pool_index);
                self.epoch += 1;
                Err(VncaError::NonFinite {
                    term: format!(
                        "{term} (epoch {epoch}, epoch seed {epoch_seed}, rollout seed {}, pool entry {}, n {})",
                        plan.rollout_seed, plan.pool_index, plan.n
                    ),
                    index,
                })
            }
            other => other,
        }
    }

    fn run_epoch(&mut self, plan: &EpochPlan) -> Result<LossReport> {
        let t = self.config.train.clone();
        let EpochPlan {
            epoch,
            epoch_seed,
            pose_index,
            pool_index,
            force_reseed,
            n,
            rollout_seed,
        } = *plan;

        let (start, reseeded) = self.pool.draw(pool_index, force_reseed);
        let renderer = &self.renderers[pose_index];
        let before = readout(&start)?;
        let raw_b = renderer.render_color(&self.density, &before.rgb, &before.delta_d)?.pixels;
        let p_b = tone_map(&raw_b, self.exposure);

        let priors = self.priors();
        let trace = rollout_traced(&start, &self.rule, &priors, n, rollout_seed)?;
        let last = trace.final_state();
        let after = readout(last)?;
        let raw_color = renderer.render_color(&self.density, &after.rgb, &after.delta_d)?.pixels;
        let raw_gray = renderer.render_gray(&self.density, &after.delta_d)?.pixels;
        let p_f = tone_map(&raw_color, self.exposure);
        let g_f = tone_map(&raw_gray, self.exposure);

        let (app, app_grad) = appearance_terms(&p_f, &g_f, &self.target, self.extractor.as_ref(), true)?;
        let app_grad = app_grad.expect("gradient requested");
        let mut grad_color = app_grad.color;
        let mut grad_gray = app_grad.gray;
        grad_color.data.iter_mut().for_each(|g| *g *= t.lambda_app);
        grad_gray.data.iter_mut().for_each(|g| *g *= t.lambda_app);

        let motion = if t.lambda_motion > 0.0 {
            let tape = self.flow.forward(&p_b, &p_f)?;
            let target = renderer.project_velocity(&self.density, &self.velocity)?;
            let m = motion_loss(&tape.flow, &target, n, t.steps_per_frame, t.motion_weights())?;
            let mut scaled = m.grad_pred.clone();
            scaled.data.iter_mut().for_each(|g| *g *= t.lambda_motion);
            let (_, g_next) = self.flow.backward(&tape, &scaled)?;
            if !g_next.same_shape(&grad_color) {
                return Err(VncaError::shape("flow input gradient", grad_color.shape_string(), g_next.shape_string()));
            }
            for (a, b) in grad_color.data.iter_mut().zip(&g_next.data) {
                *a += b;
            }
            Some(m)
        } else {
            None
        };
        let (l_dir, l_mag, l_motion) = motion.as_ref().map_or((0.0, 0.0, 0.0), |m| (m.l_dir, m.l_mag, m.l_motion));
        let (l_overflow, grad_overflow) = overflow_penalty(last);

        let mut report = LossReport {
            epoch,
            seed: epoch_seed,
            azimuth: renderer.pose().azimuth,
            elevation: renderer.pose().elevation,
            n_steps: n,
            pool_index,
            reseeded,
            l_style: app.l_style,
            l_moment: app.l_moment,
            l_app: app.l_app,
            l_dir,
            l_mag,
            l_motion,
            l_overflow,
            lambda_app: t.lambda_app,
            lambda_motion: t.lambda_motion,
            lambda_overflow: t.lambda_overflow,
            total: 0.0,
            layers: app.layers,
            degenerate_features: app.degenerate,
            grad_norm: 0.0,
            tone_mapping: format!("clamp(x * {:e}, 0, 1)", self.exposure),
        };
        report.total = report.compose_total();
        if !report.is_finite() {
            return Err(VncaError::NonFinite {
                term: format!(
                    "loss at epoch {epoch}; report {}",
                    serde_json::to_string(&report).unwrap_or_default()
                ),
                index: epoch,
            });
        }

        let grad_color = tone_map_backward(&raw_color, self.exposure, &grad_color);
        let grad_gray = tone_map_backward(&raw_gray, self.exposure, &grad_gray);
        let (g_rgb, mut g_dd) = renderer.color_backward(&self.density, &after.rgb, &after.delta_d, &grad_color)?;
        let g_dd_gray = renderer.gray_backward(&self.density, &after.delta_d, &grad_gray)?;
        for (a, b) in g_dd.data_mut().iter_mut().zip(g_dd_gray.data()) {
            *a += b;
        }
        let mut grad_state = readout_backward(last, &g_rgb, &g_dd)?;
        for (g, o) in grad_state.data_mut().iter_mut().zip(grad_overflow.data()) {
            *g += t.lambda_overflow * o;
        }
        let (mut grads, _) = rollout_backward(&self.rule, &priors, &trace, &grad_state)?;
        report.grad_norm = grads.tensors().iter().map(|(_, g)| l2_norm(g).powi(2)).sum::<f32>().sqrt();

        Adam::normalize(&mut grads);
        let lr = t.lr.rate(epoch, t.epochs);
        self.adam.update(&mut self.rule.params, &grads, lr)?;
        let last = trace.states.into_iter().last().expect("trace holds the final state");
        self.pool.put(pool_index, last)?;
        self.epoch += 1;
        Ok(report)
    }

    /// Trains until `config.train.epochs` epochs are complete.
    ///
    /// Appends one JSON line per epoch to `log` and writes the checkpoint to
    /// `checkpoint` every `checkpoint_every` epochs and at the end.
    pub fn train(
        &mut self,
        log: Option<&Path>,
        checkpoint: Option<&Path>,
        mut on_epoch: impl FnMut(&LossReport),
    ) -> Result<Checkpoint> {
        let mut log_file = match log {
            Some(path) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| VncaError::io(path, e))?,
            ),
            None => None,
        };
        let every = self.config.train.checkpoint_every;
        let mut skipped = 0;
        while self.epoch < self.config.train.epochs {
            let report = match self.train_epoch() {
                Ok(r) => {
                    skipped = 0;
                    r
                }
                Err(e @ VncaError::NonFinite { .. }) => {
                    skipped += 1;
                    if skipped >= MAX_SKIPPED_EPOCHS {
                        return Err(e);
                    }
                    warn!("skipped epoch: {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let (Some(f), Some(path)) = (log_file.as_mut(), log) {
                let line = serde_json::to_string(&report).expect("report serializes");
                writeln!(f, "{line}").map_err(|e| VncaError::io(path, e))?;
            }
            on_epoch(&report);
            if let Some(path) = checkpoint {
                if every > 0 && self.epoch % every == 0 && self.epoch < self.config.train.epochs {
                    self.checkpoint().save(path)?;
                }
            }
        }
        let ck = self.checkpoint();
        if let Some(path) = checkpoint {
            ck.save(path)?;
        }
        Ok(ck)
    }

    /// Rolls a zero state forward `steps` steps on the training frame.
    pub fn settle(&self, steps: usize, seed: u64) -> Result<CellGrid> {
        let start = CellGrid::zeros(self.density.dims(), self.rule.channels);
        rollout(&start, &self.rule, &self.priors(), steps, seed)
    }

    fn renderer_for(&self, pose: CameraPose) -> Result<Renderer> {
        let s = self.config.train.render_size;
        Renderer::new(self.density.dims(), pose.with_image_size(s, s), self.gamma)
    }

    /// Appearance terms of `cells` seen from `pose` on the training frame.
    pub fn evaluate_view(&self, cells: &CellGrid, pose: CameraPose) -> Result<ViewEval> {
        let renderer = self.renderer_for(pose)?;
        let r = readout(cells)?;
        let color = tone_map(&renderer.render_color(&self.density, &r.rgb, &r.delta_d)?.pixels, self.exposure);
        let gray = tone_map(&renderer.render_gray(&self.density, &r.delta_d)?.pixels, self.exposure);
        let (appearance, _) = appearance_terms(&color, &gray, &self.target, self.extractor.as_ref(), false)?;
        Ok(ViewEval { appearance, color, gray })
    }

    /// Motion terms of an `n`-step rollout from `cells`, seen from `pose`.
    pub fn evaluate_motion(&self, cells: &CellGrid, pose: CameraPose, n: usize, seed: u64) -> Result<MotionLoss> {
        let renderer = self.renderer_for(pose)?;
        let b = readout(cells)?;
        let p_b = tone_map(&renderer.render_color(&self.density, &b.rgb, &b.delta_d)?.pixels, self.exposure);
        let next = rollout(cells, &self.rule, &self.priors(), n, seed)?;
        let f = readout(&next)?;
        let p_f = tone_map(&renderer.render_color(&self.density, &f.rgb, &f.delta_d)?.pixels, self.exposure);
        let tape = self.flow.forward(&p_b, &p_f)?;
        let target = renderer.project_velocity(&self.density, &self.velocity)?;
        let t = &self.config.train;
        motion_loss(&tape.flow, &target, n, t.steps_per_frame, t.motion_weights())
    }

    /// Poses used for exposure calibration and evaluation.
    pub fn evaluation_poses(&self) -> Vec<CameraPose> {
        Self::eval_poses(&self.config)
    }
}

/// Paths written by a training run in `out_dir`.
pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("run_log.jsonl"), out_dir.join("checkpoint.json"))
}
