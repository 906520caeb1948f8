//! Frozen convolutional feature extractor with the VGG16 layout.
//!
//! Weights either come from a safetensors file using torchvision's
//! `features.{n}.weight` / `features.{n}.bias` names, or are drawn from a
//! seeded He-normal distribution. Either way they never change; only the
//! gradient with respect to the input image is computed.

use std::any::Any;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use super::FeatureSet;
use crate::error::{Result, VncaError};
use crate::image::Image;
use crate::linalg::{matmul, matmul_nt, Acc};

/// Forward activations kept for [`FeatureExtractor::backward`].
pub struct FeatureTape {
    pub features: Vec<FeatureSet>,
    input_channels: usize,
    input_hw: (usize, usize),
    cache: Box<dyn Any + Send + Sync>,
}

impl FeatureTape {
    pub fn new(
        features: Vec<FeatureSet>,
        input_channels: usize,
        input_hw: (usize, usize),
        cache: Box<dyn Any + Send + Sync>,
    ) -> Self {
        FeatureTape {
            features,
            input_channels,
            input_hw,
            cache,
        }
    }

    pub fn cache<T: 'static>(&self) -> Option<&T> {
        self.cache.downcast_ref()
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }
}

/// A frozen image network exposing a fixed list of feature layers.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn layer_names(&self) -> Vec<String>;

    /// Features for a 1- or 3-channel image in `[0, 1]`. Grey images are
    /// replicated to three channels.
    fn forward(&self, image: &Image) -> Result<FeatureTape>;

    /// Gradient with respect to the input image given one gradient per layer
    /// (each `rows x cols`, matching `tape.features`).
    fn backward(&self, tape: &FeatureTape, layer_grads: &[Vec<f32>]) -> Result<Image>;
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Convolutions per stage in VGG16.
pub const VGG16_STAGES: [usize; 5] = [2, 2, 3, 3, 3];
pub const VGG16_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Index of each convolution in torchvision's `features` sequential.
const VGG16_TORCH_INDEX: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];

#[derive(Clone, Debug)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    /// `(9 * cin) x cout`, row index `(ky * 3 + kx) * cin + ci`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv3x3 {
    fn im2col(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let cin = self.cin;
        let mut cols = vec![0.0f32; h * w * 9 * cin];
        for r in 0..h {
            for c in 0..w {
                let row = &mut cols[(r * w + c) * 9 * cin..(r * w + c + 1) * 9 * cin];
                for ky in 0..3 {
                    let rr = r as isize + ky as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let cc = c as isize + kx as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let src = (rr as usize * w + cc as usize) * cin;
                        let dst = (ky * 3 + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Vec<f32> {
        let cin = self.cin;
        let mut x = vec![0.0f32; h * w * cin];
        for r in 0..h {
            for c in 0..w {
                let row = &cols[(r * w + c) * 9 * cin..(r * w + c + 1) * 9 * cin];
                for ky in 0..3 {
                    let rr = r as isize + ky as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let cc = c as isize + kx as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let dst = (rr as usize * w + cc as usize) * cin;
                        let src = (ky * 3 + kx) * cin;
                        for (o, v) in x[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
        x
    }

    /// Convolution followed by ReLU.
    fn forward(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let cols = self.im2col(x, h, w);
        let mut y = vec![0.0f32; h * w * self.cout];
        for row in y.chunks_exact_mut(self.cout) {
            row.copy_from_slice(&self.bias);
        }
        matmul(&cols, &self.weight, &mut y, h * w, 9 * self.cin, self.cout, Acc::Add);
        for v in y.iter_mut() {
            *v = v.max(0.0);
        }
        y
    }

    /// Input gradient given the post-ReLU output `y` and its gradient.
    fn backward(&self, y: &[f32], grad_y: &[f32], h: usize, w: usize) -> Vec<f32> {
        let masked: Vec<f32> = grad_y
            .iter()
            .zip(y)
            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
            .collect();
        let mut grad_cols = vec![0.0f32; h * w * 9 * self.cin];
        matmul_nt(&masked, &self.weight, &mut grad_cols, h * w, self.cout, 9 * self.cin, Acc::Overwrite);
        self.col2im(&grad_cols, h, w)
    }
}

fn max_pool2(x: &[f32], h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * r + dr) * w + 2 * col + dc) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = (r * ow + col) * c + ch;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Debug)]
enum Op {
    Conv(usize),
    Pool,
}

/// One entry per op: the op's output and its spatial size.
struct VggCache {
    /// Normalised input, then the output of every op.
    activations: Vec<(Vec<f32>, usize, usize, usize)>,
    pool_args: Vec<Option<Vec<u32>>>,
}

/// VGG16-layout feature network truncated after its deepest tapped layer.
#[derive(Clone, Debug)]
pub struct VggExtractor {
    name: String,
    convs: Vec<Conv3x3>,
    ops: Vec<Op>,
    /// Op indices whose outputs are exported, with their layer names.
    taps: Vec<(usize, String)>,
}

impl VggExtractor {
    /// Seeded He-normal weights; `width_divisor` shrinks every stage's width.
    pub fn random(width_divisor: usize, seed: u64) -> Result<Self> {
        if width_divisor == 0 {
            return Err(VncaError::InvalidArgument("width_divisor must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = VGG16_WIDTHS.map(|w| (w / width_divisor).max(4));
        let mut convs = Vec::new();
        let mut cin = 3;
        for (stage, &n) in VGG16_STAGES.iter().enumerate() {
            for _ in 0..n {
                let cout = widths[stage];
                let std = (2.0 / (9.0 * cin as f32)).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let weight = (0..9 * cin * cout).map(|_| normal.sample(&mut rng)).collect();
                convs.push(Conv3x3 {
                    cin,
                    cout,
                    weight,
                    bias: vec![0.0; cout],
                });
                cin = cout;
            }
        }
        Ok(Self::assemble(format!("vgg16-random/{width_divisor}/{seed}"), convs))
    }

    /// Loads the convolution weights of a torchvision VGG16 checkpoint
    /// converted to safetensors (F32).
    pub fn from_safetensors(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| VncaError::io(path, e))?;
        let fail = |layer: String, reason: String| VncaError::Adapter {
            adapter: format!("vgg16 ({})", path.display()),
            layer,
            reason,
        };
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| fail("header".into(), e.to_string()))?;
        let read = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let view = tensors.tensor(name).map_err(|e| fail(name.into(), e.to_string()))?;
            if view.dtype() != Dtype::F32 {
                return Err(fail(name.into(), format!("expected F32, found {:?}", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((view.shape().to_vec(), data))
        };
        let mut convs = Vec::new();
        let mut expected_cin = 3;
        // conv5_1 is the deepest layer used
        for &idx in &VGG16_TORCH_INDEX[..11] {
            let wname = format!("features.{idx}.weight");
            let (shape, w) = read(&wname)?;
            let (_, bias) = read(&format!("features.{idx}.bias"))?;
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 || shape[1] != expected_cin {
                return Err(fail(wname, format!("unexpected shape {shape:?}")));
            }
            let (cout, cin) = (shape[0], shape[1]);
            if bias.len() != cout {
                return Err(fail(format!("features.{idx}.bias"), format!("expected {cout} values")));
            }
            let mut weight = vec![0.0f32; 9 * cin * cout];
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            weight[((ky * 3 + kx) * cin + ci) * cout + co] = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                }
            }
            convs.push(Conv3x3 { cin, cout, weight, bias });
            expected_cin = cout;
        }
        Ok(Self::assemble(format!("vgg16 ({})", path.display()), convs))
    }

    fn assemble(name: String, convs: Vec<Conv3x3>) -> Self {
        let mut ops = Vec::new();
        let mut taps = Vec::new();
        let mut conv = 0;
        for (stage, &n) in VGG16_STAGES.iter().enumerate() {
            if stage > 0 {
                ops.push(Op::Pool);
            }
            for layer in 0..n {
                ops.push(Op::Conv(conv));
                if layer == 0 {
                    taps.push((ops.len() - 1, format!("conv{}_1", stage + 1)));
                }
                conv += 1;
                if stage == 4 {
                    break;
                }
            }
        }
        VggExtractor {
            name,
            convs: convs.into_iter().take(conv).collect(),
            ops,
            taps,
        }
    }

    pub fn input_channels(&self) -> usize {
        3
    }
}

impl FeatureExtractor for VggExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn layer_names(&self) -> Vec<String> {
        self.taps.iter().map(|(_, n)| n.clone()).collect()
    }

    fn forward(&self, image: &Image) -> Result<FeatureTape> {
        if image.channels != 1 && image.channels != 3 {
            return Err(VncaError::Adapter {
                adapter: self.name.clone(),
                layer: "input".into(),
                reason: format!("expected 1 or 3 channels, got {}", image.channels),
            });
        }
        let (h, w) = (image.height, image.width);
        let mut x = Vec::with_capacity(h * w * 3);
        for p in image.data.chunks_exact(image.channels) {
            for ch in 0..3 {
                let v = p[ch.min(image.channels - 1)];
                x.push((v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch]);
            }
        }
        let mut activations = vec![(x, h, w, 3)];
        let mut pool_args = Vec::new();
        for op in &self.ops {
            let (x, h, w, c) = activations.last().unwrap();
            let (h, w, c) = (*h, *w, *c);
            match op {
                Op::Conv(i) => {
                    let conv = &self.convs[*i];
                    let y = conv.forward(x, h, w);
                    activations.push((y, h, w, conv.cout));
                    pool_args.push(None);
                }
                Op::Pool => {
                    if h < 2 || w < 2 {
                        return Err(VncaError::Adapter {
                            adapter: self.name.clone(),
                            layer: format!("pool after {h}x{w}"),
                            reason: "input too small for the layer stack".into(),
                        });
                    }
                    let (y, arg) = max_pool2(x, h, w, c);
                    activations.push((y, h / 2, w / 2, c));
                    pool_args.push(Some(arg));
                }
            }
        }
        let features = self
            .taps
            .iter()
            .map(|(op, _)| {
                let (y, h, w, c) = &activations[op + 1];
                FeatureSet::from_vec(h * w, *c, y.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        for (f, (_, name)) in features.iter().zip(&self.taps) {
            if let Some(index) = f.data().iter().position(|v| !v.is_finite()) {
                return Err(VncaError::Adapter {
                    adapter: self.name.clone(),
                    layer: name.clone(),
                    reason: format!("non-finite activation at {index}"),
                });
            }
        }
        Ok(FeatureTape::new(
            features,
            image.channels,
            (h, w),
            Box::new(VggCache {
                activations,
                pool_args,
            }),
        ))
    }

    fn backward(&self, tape: &FeatureTape, layer_grads: &[Vec<f32>]) -> Result<Image> {
        let cache: &VggCache = tape.cache().ok_or_else(|| VncaError::Adapter {
            adapter: self.name.clone(),
            layer: "tape".into(),
            reason: "tape was not produced by this extractor".into(),
        })?;
        if layer_grads.len() != self.taps.len() {
            return Err(VncaError::shape("feature gradients", self.taps.len(), layer_grads.len()));
        }
        let n_ops = self.ops.len();
        let (last_y, ..) = &cache.activations[n_ops];
        let mut grad = vec![0.0f32; last_y.len()];
        for op in (0..n_ops).rev() {
            for ((tap_op, name), g) in self.taps.iter().zip(layer_grads) {
                if *tap_op == op {
                    if g.len() != grad.len() {
                        return Err(VncaError::shape(format!("gradient for {name}"), grad.len(), g.len()));
                    }
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let (x, h, w, _) = &cache.activations[op];
            let (y, ..) = &cache.activations[op + 1];
            grad = match &self.ops[op] {
                Op::Conv(i) => self.convs[*i].backward(y, &grad, *h, *w),
                Op::Pool => {
                    let arg = cache.pool_args[op].as_ref().expect("pool argmax");
                    let mut gx = vec![0.0f32; x.len()];
                    for (g, &a) in grad.iter().zip(arg) {
                        gx[a as usize] += g;
                    }
                    gx
                }
            };
        }
        let (h, w) = tape.input_hw();
        let channels = tape.input_channels();
        let mut out = Image::zeros(h, w, channels);
        for (dst, src) in out.data.chunks_exact_mut(channels).zip(grad.chunks_exact(3)) {
            for ch in 0..3 {
                dst[ch.min(channels - 1)] += src[ch] / IMAGENET_STD[ch];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_layout() {
        let vgg = VggExtractor::random(16, 1).unwrap();
        assert_eq!(vgg.layer_names(), ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"]);
        assert_eq!(vgg.convs.len(), 11);
        let img = Image::from_fn(32, 32, 3, |r, c, ch| ((r * 3 + c * 5 + ch) % 7) as f32 / 7.0);
        let tape = vgg.forward(&img).unwrap();
        let rows: Vec<usize> = tape.features.iter().map(|f| f.rows()).collect();
        assert_eq!(rows, [1024, 256, 64, 16, 4]);
        let cols: Vec<usize> = tape.features.iter().map(|f| f.cols()).collect();
        assert_eq!(cols, [4, 8, 16, 32, 32]);
    }

    #[test]
    fn grey_equals_replicated_rgb() {
        let vgg = VggExtractor::random(16, 2).unwrap();
        let gray = Image::from_fn(16, 16, 1, |r, c, _| ((r + c) % 5) as f32 / 5.0);
        let a = vgg.forward(&gray).unwrap();
        let b = vgg.forward(&gray.to_rgb()).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let vgg = VggExtractor::random(16, 3).unwrap();
        let img = Image::from_fn(16, 16, 3, |r, c, ch| 0.5 + 0.4 * ((r * 7 + c * 3 + ch * 11) as f32 * 0.37).sin());
        let tape = vgg.forward(&img).unwrap();
        // loss = sum_l <weights_l, features_l>
        let weights: Vec<Vec<f32>> = tape
            .features
            .iter()
            .enumerate()
            .map(|(l, f)| (0..f.data().len()).map(|i| ((i * 13 + l) % 7) as f32 / 7.0 - 0.4).collect())
            .collect();
        let grad = vgg.backward(&tape, &weights).unwrap();
        let loss = |img: &Image| -> f64 {
            let t = vgg.forward(img).unwrap();
            t.features
                .iter()
                .zip(&weights)
                .map(|(f, w)| f.data().iter().zip(w).map(|(a, b)| (a * b) as f64).sum::<f64>())
                .sum()
        };
        let eps = 1e-3;
        for idx in [0usize, 100, 333, 600] {
            let mut p = img.clone();
            p.data[idx] += eps;
            let mut m = img.clone();
            m.data[idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps as f64);
            let an = grad.data[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * fd.abs().max(1.0), "pixel {idx}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn rejects_tiny_inputs() {
        let vgg = VggExtractor::random(16, 4).unwrap();
        assert!(vgg.forward(&Image::zeros(8, 8, 3)).is_err());
    }
}
