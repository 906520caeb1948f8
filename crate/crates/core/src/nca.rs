//! The trainable cell update rule, its stochastic firing mask, and readout.
//!
//! One step computes `s <- s + dt * M * f(z)` where `z` is the perception
//! vector of each cell, `f` a two-layer ReLU MLP shared by all cells and `M`
//! a per-cell Bernoulli mask. Only fired cells are evaluated; the others keep
//! their state and contribute nothing to the parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::grid::{CellGrid, Dims, Grid, DELTA_D_CHANNEL, MIN_CHANNELS};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Acc};
use crate::seeds::derive_seed;
use crate::volume::{perceive_cell, perceive_cell_adjoint, Encoding, Neighborhood, PerceptionKernels, Priors};

pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_FIRE_RATE: f32 = 0.5;

/// Cells processed per matrix multiply.
const CHUNK: usize = 2048;

/// Weights of the two-layer MLP. Also used to hold their gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    /// `input_dim x hidden_dim`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `hidden_dim x channels`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl RuleParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, channels: usize) -> Self {
        RuleParams {
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * channels],
            b2: vec![0.0; channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        RuleParams {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f32]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f32>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn add_assign(&mut self, other: &RuleParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub channels: usize,
    pub hidden_dim: usize,
    pub fire_rate: f32,
    pub step_size: f32,
    pub encoding: Encoding,
    pub params: RuleParams,
}

impl UpdateRule {
    /// Random first layer, zero output layer: the new rule is the identity map.
    pub fn new(channels: usize, hidden_dim: usize, fire_rate: f32, encoding: Encoding, seed: u64) -> Result<Self> {
        if channels < MIN_CHANNELS {
            return Err(VncaError::InvalidArgument(format!(
                "need at least {MIN_CHANNELS} channels, got {channels}"
            )));
        }
        if hidden_dim == 0 {
            return Err(VncaError::InvalidArgument("hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&fire_rate) {
            return Err(VncaError::InvalidArgument(format!("fire_rate {fire_rate} outside [0, 1]")));
        }
        let input_dim = encoding.perception_width(channels);
        let mut params = RuleParams::zeros(input_dim, hidden_dim, channels);
        let bound = 1.0 / (input_dim as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in params.w1.iter_mut().chain(params.b1.iter_mut()) {
            *w = rng.gen_range(-bound..bound);
        }
        Ok(UpdateRule {
            channels,
            hidden_dim,
            fire_rate,
            step_size: 1.0,
            encoding,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.perception_width(self.channels)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> RuleParams {
        self.params.zeros_like()
    }

    fn validate(&self) -> Result<()> {
        let (p, h, c) = (self.input_dim(), self.hidden_dim, self.channels);
        let ok = self.params.w1.len() == p * h
            && self.params.b1.len() == h
            && self.params.w2.len() == h * c
            && self.params.b2.len() == c;
        if !ok {
            return Err(VncaError::InvalidArgument(format!(
                "parameter tensors do not match input {p}, hidden {h}, channels {c}"
            )));
        }
        for (name, t) in self.params.tensors() {
            if let Some(index) = t.iter().position(|v| !v.is_finite()) {
                return Err(VncaError::NonFinite {
                    term: format!("rule parameter {name}"),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// Per-cell Bernoulli firing decisions for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMask {
    fired: Vec<bool>,
    pub seed: u64,
}

impl StepMask {
    pub fn sample(dims: Dims, fire_rate: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fired = (0..dims.cells()).map(|_| rng.gen::<f32>() < fire_rate).collect();
        StepMask { fired, seed }
    }

    pub fn all(dims: Dims) -> Self {
        StepMask {
            fired: vec![true; dims.cells()],
            seed: 0,
        }
    }

    pub fn fired(&self) -> &[bool] {
        &self.fired
    }

    pub fn density(&self) -> f64 {
        self.fired.iter().filter(|&&f| f).count() as f64 / self.fired.len().max(1) as f64
    }

    fn fired_indices(&self) -> Vec<usize> {
        self.fired
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

/// Seed of the mask used at step `t` of a rollout seeded with `seed`.
pub fn step_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, t as u64)
}

struct Workspace<'a> {
    rule: &'a UpdateRule,
    priors: &'a Priors<'a>,
    hood: Neighborhood,
    kernels: PerceptionKernels,
}

impl<'a> Workspace<'a> {
    fn new(cells: &CellGrid, rule: &'a UpdateRule, priors: &'a Priors<'a>) -> Result<Self> {
        rule.validate()?;
        if cells.channels() != rule.channels {
            return Err(VncaError::shape("cell channels", rule.channels, cells.channels()));
        }
        priors.check(cells.dims(), &rule.encoding)?;
        Ok(Workspace {
            rule,
            priors,
            hood: Neighborhood::new(cells.dims(), rule.encoding.padding),
            kernels: PerceptionKernels::new(),
        })
    }

    /// Perception rows and pre-activations for a chunk of cells.
    fn forward_chunk(&self, state: &Grid, cells: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let p = self.rule.input_dim();
        let h = self.rule.hidden_dim;
        let mut z = vec![0.0f32; cells.len() * p];
        for (row, &cell) in z.chunks_exact_mut(p).zip(cells) {
            perceive_cell(state, &self.hood, &self.kernels, self.priors, &self.rule.encoding, cell, row);
        }
        let mut pre = vec![0.0f32; cells.len() * h];
        for row in pre.chunks_exact_mut(h) {
            row.copy_from_slice(&self.rule.params.b1);
        }
        matmul(&z, &self.rule.params.w1, &mut pre, cells.len(), p, h, Acc::Add);
        (z, pre)
    }

    fn update_chunk(&self, state: &Grid, cells: &[usize]) -> Result<Vec<f32>> {
        let h = self.rule.hidden_dim;
        let c = self.rule.channels;
        let (_, mut hidden) = self.forward_chunk(state, cells);
        if let Some(index) = hidden.iter().position(|v| !v.is_finite()) {
            return Err(VncaError::NonFinite {
                term: "hidden pre-activation".into(),
                index,
            });
        }
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let mut delta = vec![0.0f32; cells.len() * c];
        for row in delta.chunks_exact_mut(c) {
            row.copy_from_slice(&self.rule.params.b2);
        }
        matmul(&hidden, &self.rule.params.w2, &mut delta, cells.len(), h, c, Acc::Add);
        if let Some(index) = delta.iter().position(|v| !v.is_finite()) {
            return Err(VncaError::NonFinite {
                term: "state update".into(),
                index,
            });
        }
        Ok(delta)
    }
}

/// Hidden-layer pre-activations for every cell, `cells x hidden_dim`, row-major.
pub fn hidden_preactivations(cells: &CellGrid, rule: &UpdateRule, priors: &Priors<'_>) -> Result<Vec<f32>> {
    let ws = Workspace::new(cells, rule, priors)?;
    let all: Vec<usize> = (0..cells.dims().cells()).collect();
    Ok(ws.forward_chunk(cells.grid(), &all).1)
}

/// One synchronous update with an explicit mask.
pub fn step_with_mask(cells: &CellGrid, rule: &UpdateRule, priors: &Priors<'_>, mask: &StepMask) -> Result<CellGrid> {
    let ws = Workspace::new(cells, rule, priors)?;
    if mask.fired.len() != cells.dims().cells() {
        return Err(VncaError::shape("step mask", cells.dims().cells(), mask.fired.len()));
    }
    cells.grid().ensure_finite("cell state")?;
    let fired = mask.fired_indices();
    let state = cells.grid();
    let deltas: Vec<Vec<f32>> = fired
        .par_chunks(CHUNK)
        .map(|chunk| ws.update_chunk(state, chunk))
        .collect::<Result<_>>()?;
    let c = rule.channels;
    let dt = rule.step_size;
    let mut next = cells.clone();
    let out = next.grid_mut();
    for (chunk, delta) in fired.chunks(CHUNK).zip(&deltas) {
        for (&cell, d) in chunk.iter().zip(delta.chunks_exact(c)) {
            for (s, v) in out.cell_mut(cell).iter_mut().zip(d) {
                *s += dt * v;
            }
        }
    }
    Ok(next)
}

/// One synchronous update whose mask is drawn from `mask_seed`.
pub fn step(cells: &CellGrid, rule: &UpdateRule, priors: &Priors<'_>, mask_seed: u64) -> Result<CellGrid> {
    let mask = StepMask::sample(cells.dims(), rule.fire_rate, mask_seed);
    step_with_mask(cells, rule, priors, &mask)
}

/// `n_steps` sequential updates; step `t` uses mask seed `step_seed(seed, t)`.
pub fn rollout(cells: &CellGrid, rule: &UpdateRule, priors: &Priors<'_>, n_steps: usize, seed: u64) -> Result<CellGrid> {
    let mut state = cells.clone();
    for t in 0..n_steps {
        state = step(&state, rule, priors, step_seed(seed, t))?;
    }
    Ok(state)
}

/// States and masks recorded by [`rollout_traced`] for backpropagation.
#[derive(Clone, Debug)]
pub struct RolloutTrace {
    /// `states[0]` is the input, `states[n]` the final state.
    pub states: Vec<CellGrid>,
    pub masks: Vec<StepMask>,
}

impl RolloutTrace {
    pub fn final_state(&self) -> &CellGrid {
        self.states.last().expect("trace holds the initial state")
    }

    pub fn steps(&self) -> usize {
        self.masks.len()
    }
}

pub fn rollout_traced(
    cells: &CellGrid,
    rule: &UpdateRule,
    priors: &Priors<'_>,
    n_steps: usize,
    seed: u64,
) -> Result<RolloutTrace> {
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut masks = Vec::with_capacity(n_steps);
    states.push(cells.clone());
    for t in 0..n_steps {
        let mask = StepMask::sample(cells.dims(), rule.fire_rate, step_seed(seed, t));
        let next = step_with_mask(states.last().unwrap(), rule, priors, &mask)?;
        states.push(next);
        masks.push(mask);
    }
    Ok(RolloutTrace { states, masks })
}

/// Gradients produced by backpropagating through one step.
struct ChunkGrads {
    params: RuleParams,
    grad_z: Vec<f32>,
}

impl Workspace<'_> {
    fn backward_chunk(&self, state: &Grid, grad_next: &Grid, cells: &[usize]) -> ChunkGrads {
        let p = self.rule.input_dim();
        let h = self.rule.hidden_dim;
        let c = self.rule.channels;
        let m = cells.len();
        let (z, pre) = self.forward_chunk(state, cells);
        let hidden: Vec<f32> = pre.iter().map(|v| v.max(0.0)).collect();

        let dt = self.rule.step_size;
        let mut g_delta = vec![0.0f32; m * c];
        for (row, &cell) in g_delta.chunks_exact_mut(c).zip(cells) {
            for (g, v) in row.iter_mut().zip(grad_next.cell(cell)) {
                *g = dt * v;
            }
        }

        let mut params = self.rule.params.zeros_like();
        matmul_tn(&hidden, &g_delta, &mut params.w2, h, m, c, Acc::Overwrite);
        for row in g_delta.chunks_exact(c) {
            for (b, g) in params.b2.iter_mut().zip(row) {
                *b += g;
            }
        }

        let mut g_hidden = vec![0.0f32; m * h];
        matmul_nt(&g_delta, &self.rule.params.w2, &mut g_hidden, m, c, h, Acc::Overwrite);
        for (g, &x) in g_hidden.iter_mut().zip(&pre) {
            if x <= 0.0 {
                *g = 0.0;
            }
        }
        matmul_tn(&z, &g_hidden, &mut params.w1, p, m, h, Acc::Overwrite);
        for row in g_hidden.chunks_exact(h) {
            for (b, g) in params.b1.iter_mut().zip(row) {
                *b += g;
            }
        }

        let mut grad_z = vec![0.0f32; m * p];
        matmul_nt(&g_hidden, &self.rule.params.w1, &mut grad_z, m, h, p, Acc::Overwrite);
        ChunkGrads { params, grad_z }
    }
}

/// Backpropagates `grad_final` (d loss / d final state) through the rollout.
///
/// Returns the parameter gradient and d loss / d initial state.
pub fn rollout_backward(
    rule: &UpdateRule,
    priors: &Priors<'_>,
    trace: &RolloutTrace,
    grad_final: &Grid,
) -> Result<(RuleParams, Grid)> {
    let first = &trace.states[0];
    let ws = Workspace::new(first, rule, priors)?;
    grad_final.expect_shape("rollout gradient", first.dims(), rule.channels)?;
    let p = rule.input_dim();
    let c = rule.channels;
    let mut grads = rule.zero_grads();
    let mut grad = grad_final.clone();
    for t in (0..trace.steps()).rev() {
        let state = trace.states[t].grid();
        let fired = trace.masks[t].fired_indices();
        let chunks: Vec<ChunkGrads> = fired
            .par_chunks(CHUNK)
            .map(|chunk| ws.backward_chunk(state, &grad, chunk))
            .collect();
        let mut prev = grad.clone();
        {
            let g = prev.data_mut();
            for (chunk, cg) in fired.chunks(CHUNK).zip(&chunks) {
                grads.add_assign(&cg.params);
                for (&cell, gz) in chunk.iter().zip(cg.grad_z.chunks_exact(p)) {
                    perceive_cell_adjoint(g, c, &ws.hood, &ws.kernels, cell, gz);
                }
            }
        }
        grad = prev;
    }
    Ok((grads, grad))
}

/// Clamped colour and residual density extracted from the cell states.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `H x W x D x 3`, in `[0, 1]`.
    pub rgb: Grid,
    /// `H x W x D x 1`, in `[-0.5, 0.5]`.
    pub delta_d: Grid,
}

pub const DELTA_D_BOUND: f32 = 0.5;

pub fn readout(cells: &CellGrid) -> Result<Readout> {
    cells.grid().ensure_finite("cell state")?;
    let dims = cells.dims();
    let mut rgb = Grid::zeros(dims, 3);
    let mut delta_d = Grid::zeros(dims, 1);
    for cell in 0..dims.cells() {
        let s = cells.grid().cell(cell);
        for (o, &v) in rgb.cell_mut(cell).iter_mut().zip(&s[..3]) {
            *o = v.clamp(0.0, 1.0);
        }
        delta_d.data_mut()[cell] = s[DELTA_D_CHANNEL].clamp(-DELTA_D_BOUND, DELTA_D_BOUND);
    }
    Ok(Readout { rgb, delta_d })
}

/// Adjoint of [`readout`]: gradient passes where the raw value lies inside the
/// closed clamp interval and is zero outside it.
pub fn readout_backward(cells: &CellGrid, grad_rgb: &Grid, grad_delta_d: &Grid) -> Result<Grid> {
    let dims = cells.dims();
    grad_rgb.expect_shape("readout rgb gradient", dims, 3)?;
    grad_delta_d.expect_shape("readout delta_d gradient", dims, 1)?;
    let mut grad = Grid::zeros(dims, cells.channels());
    for cell in 0..dims.cells() {
        let s = cells.grid().cell(cell);
        let g = grad.cell_mut(cell);
        for ch in 0..3 {
            if (0.0..=1.0).contains(&s[ch]) {
                g[ch] = grad_rgb.cell(cell)[ch];
            }
        }
        if (-DELTA_D_BOUND..=DELTA_D_BOUND).contains(&s[DELTA_D_CHANNEL]) {
            g[DELTA_D_CHANNEL] = grad_delta_d.data()[cell];
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DensityField, VelocityField};
    use crate::volume::{positional_encoding, PositionalEncoding};

    struct Fixture {
        pos: PositionalEncoding,
        density: DensityField,
        velocity: VelocityField,
    }

    impl Fixture {
        fn new(dims: Dims) -> Self {
            Fixture {
                pos: positional_encoding(dims).unwrap(),
                density: DensityField::from_fn(dims, 0, |i, j, k| ((i + 2 * j + 3 * k) % 5) as f32 * 0.2).unwrap(),
                velocity: VelocityField::from_fn(dims, 0, |i, j, _| [0.1 * i as f32, -0.2, 0.05 * j as f32]).unwrap(),
            }
        }

        fn priors(&self) -> Priors<'_> {
            Priors::new(&self.pos, &self.density, Some(&self.velocity))
        }
    }

    fn random_cells(dims: Dims, channels: usize, seed: u64) -> CellGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CellGrid::from_grid(Grid::from_fn(dims, channels, |_, _, _, _| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn randomized_rule(channels: usize, hidden: usize, seed: u64) -> UpdateRule {
        let mut rule = UpdateRule::new(channels, hidden, 0.5, Encoding::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for w in rule.params.w2.iter_mut().chain(rule.params.b2.iter_mut()) {
            *w = rng.gen_range(-0.3..0.3);
        }
        rule
    }

    #[test]
    fn fresh_rule_is_identity() {
        let dims = Dims::cube(5);
        let fx = Fixture::new(dims);
        let rule = UpdateRule::new(12, 16, 0.5, Encoding::default(), 3).unwrap();
        assert!(rule.params.w2.iter().all(|&w| w == 0.0));
        assert_eq!(rule.param_count(), 67 * 16 + 16 + 16 * 12 + 12);
        let cells = random_cells(dims, 12, 9);
        let out = step(&cells, &rule, &fx.priors(), 17).unwrap();
        assert_eq!(out, cells);
    }

    #[test]
    fn zero_fire_rate_keeps_state() {
        let dims = Dims::cube(4);
        let fx = Fixture::new(dims);
        let mut rule = randomized_rule(12, 8, 4);
        rule.fire_rate = 0.0;
        let cells = random_cells(dims, 12, 5);
        assert_eq!(step(&cells, &rule, &fx.priors(), 1).unwrap(), cells);
    }

    #[test]
    fn single_cell_matches_hand_computed_mlp() {
        let dims = Dims::cube(1);
        let pos = positional_encoding(dims).unwrap();
        let density = DensityField::from_fn(dims, 0, |_, _, _| 0.5).unwrap();
        let velocity = VelocityField::uniform(dims, 0, [1.0, 2.0, -1.0]);
        let mut rule = UpdateRule::new(4, 1, 1.0, Encoding::default(), 0).unwrap();
        let p = rule.input_dim();
        assert_eq!(p, 27);
        // state (4) | 16 stencil channels (zero on a 1-cell grid) | P(3)=0 | D | V(3)
        rule.params.w1 = vec![0.0; p];
        rule.params.w1[0] = 2.0; // state channel 0
        rule.params.w1[23] = 1.0; // density
        rule.params.w1[24] = 0.5; // velocity x
        rule.params.b1 = vec![-0.25];
        rule.params.w2 = vec![1.0, -1.0, 0.5, 2.0];
        rule.params.b2 = vec![0.1, 0.0, 0.0, 0.0];

        let cells = CellGrid::from_grid(Grid::from_vec(dims, 4, vec![0.3, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        // hidden = relu(2*0.3 + 0.5 + 0.5*1 - 0.25) = 1.35
        let hidden: f32 = 2.0 * 0.3 + 0.5 + 0.5 - 0.25;
        let expected = [0.3 + hidden + 0.1, -hidden, 0.5 * hidden, 2.0 * hidden];
        let out = step(&cells, &rule, &Priors::new(&pos, &density, Some(&velocity)), 0).unwrap();
        for (o, e) in out.grid().data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-6, "{o} vs {e}");
        }

        // a negative pre-activation switches the whole hidden unit off
        rule.params.b1 = vec![-10.0];
        let out = step(&cells, &rule, &Priors::new(&pos, &density, Some(&velocity)), 0).unwrap();
        assert!((out.grid().data()[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn rollout_composes_steps() {
        let dims = Dims::cube(4);
        let fx = Fixture::new(dims);
        let rule = randomized_rule(12, 8, 11);
        let cells = random_cells(dims, 12, 2);
        let priors = fx.priors();
        assert_eq!(rollout(&cells, &rule, &priors, 0, 5).unwrap(), cells);
        let two = rollout(&cells, &rule, &priors, 2, 5).unwrap();
        let manual = step(
            &step(&cells, &rule, &priors, step_seed(5, 0)).unwrap(),
            &rule,
            &priors,
            step_seed(5, 1),
        )
        .unwrap();
        assert_eq!(two, manual);
        let traced = rollout_traced(&cells, &rule, &priors, 2, 5).unwrap();
        assert_eq!(traced.final_state(), &two);
    }

    #[test]
    fn missing_velocity_is_rejected() {
        let dims = Dims::cube(2);
        let fx = Fixture::new(dims);
        let rule = randomized_rule(12, 4, 1);
        let priors = Priors::new(&fx.pos, &fx.density, None);
        assert!(step(&CellGrid::zeros(dims, 12), &rule, &priors, 0).is_err());
    }

    #[test]
    fn non_finite_parameters_abort() {
        let dims = Dims::cube(2);
        let fx = Fixture::new(dims);
        let mut rule = randomized_rule(12, 4, 1);
        rule.params.w2[3] = f32::NAN;
        let err = step(&CellGrid::zeros(dims, 12), &rule, &fx.priors(), 0).unwrap_err();
        assert!(err.to_string().contains("w2"), "{err}");

        let mut rule = randomized_rule(12, 4, 1);
        rule.params.w1[0] = f32::MAX;
        rule.params.w1[1] = f32::MAX;
        let cells = CellGrid::from_grid(Grid::from_fn(dims, 12, |_, _, _, _| 1e30)).unwrap();
        let err = step(&cells, &rule, &fx.priors(), 0).unwrap_err();
        assert!(matches!(err, VncaError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn mask_is_reproducible() {
        let dims = Dims::cube(8);
        assert_eq!(StepMask::sample(dims, 0.5, 3), StepMask::sample(dims, 0.5, 3));
        assert_ne!(StepMask::sample(dims, 0.5, 3), StepMask::sample(dims, 0.5, 4));
        assert_eq!(StepMask::sample(dims, 1.0, 3).density(), 1.0);
        assert_eq!(StepMask::sample(dims, 0.0, 3).density(), 0.0);
    }

    #[test]
    fn readout_clamps() {
        let dims = Dims::cube(1);
        let mut s = vec![0.0f32; 12];
        s[0] = -0.3;
        s[1] = 0.4;
        s[2] = 1.7;
        s[3] = 2.0;
        let cells = CellGrid::from_grid(Grid::from_vec(dims, 12, s).unwrap()).unwrap();
        let r = readout(&cells).unwrap();
        assert_eq!(r.rgb.data(), &[0.0, 0.4, 1.0]);
        assert_eq!(r.delta_d.data(), &[0.5]);

        let zero = readout(&CellGrid::zeros(Dims::cube(2), 12)).unwrap();
        assert!(zero.rgb.data().iter().chain(zero.delta_d.data()).all(|&v| v == 0.0));

        let g = readout_backward(
            &cells,
            &Grid::from_vec(dims, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            &Grid::from_vec(dims, 1, vec![4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(&g.data()[..4], &[0.0, 2.0, 0.0, 0.0]);
    }

    fn loss_sum(cells: &CellGrid, rule: &UpdateRule, priors: &Priors<'_>, mask: &StepMask, weights: &[f32]) -> f64 {
        let out = step_with_mask(cells, rule, priors, mask).unwrap();
        out.grid()
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| (*a as f64) * (*w as f64))
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences_on_state_and_params() {
        let dims = Dims::new(3, 4, 3);
        let fx = Fixture::new(dims);
        let priors = fx.priors();
        let rule = randomized_rule(6, 5, 21);
        let cells = random_cells(dims, 6, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights: Vec<f32> = (0..dims.cells() * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = rollout_traced(&cells, &rule, &priors, 2, 4).unwrap();
        let (g_params, g_state) = rollout_backward(
            &rule,
            &priors,
            &trace,
            &Grid::from_vec(dims, 6, weights.clone()).unwrap(),
        )
        .unwrap();

        let two_step = |cells: &CellGrid, rule: &UpdateRule| -> f64 {
            let mid = step_with_mask(cells, rule, &priors, &trace.masks[0]).unwrap();
            loss_sum(&mid, rule, &priors, &trace.masks[1], &weights)
        };
        let eps = 1e-2f32;
        for idx in [0usize, 7, 31, 70] {
            let mut plus = cells.clone();
            plus.grid_mut().data_mut()[idx] += eps;
            let mut minus = cells.clone();
            minus.grid_mut().data_mut()[idx] -= eps;
            let fd = (two_step(&plus, &rule) - two_step(&minus, &rule)) / (2.0 * eps as f64);
            let an = g_state.data()[idx] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "state[{idx}] fd {fd} analytic {an}");
        }
        for idx in [0usize, 5, 12, 29] {
            let mut plus = rule.clone();
            plus.params.w2[idx] += eps;
            let mut minus = rule.clone();
            minus.params.w2[idx] -= eps;
            let fd = (two_step(&cells, &plus) - two_step(&cells, &minus)) / (2.0 * eps as f64);
            let an = g_params.w2[idx] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "w2[{idx}] fd {fd} analytic {an}");
        }
        for idx in [0usize, 40, 100] {
            let mut plus = rule.clone();
            plus.params.w1[idx] += eps;
            let mut minus = rule.clone();
            minus.params.w1[idx] -= eps;
            let fd = (two_step(&cells, &plus) - two_step(&cells, &minus)) / (2.0 * eps as f64);
            let an = g_params.w1[idx] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "w1[{idx}] fd {fd} analytic {an}");
        }
    }
}
