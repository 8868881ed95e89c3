//! A small encoder–decoder segmentation network with hand-derived gradients.
//!
//! The forward pass exposes two outputs: full-resolution per-pixel logits and
//! the penultimate feature map (the input to the classification layer). The
//! backward pass therefore takes two adjoints — one per output — which is
//! exactly the plumbing the feature-consistency loss needs on top of ordinary
//! cross-entropy training.
//!
//! Everything runs in `f64` so analytic gradients can be held to a central
//! finite-difference oracle at 1e-4 relative error.

pub mod checkpoint;
mod layers;

pub use layers::{
    affine, affine_backward, conv2d, conv2d_backward, relu, relu_backward, upsample_bilinear,
    upsample_bilinear_backward,
};

use ndarray::{Array1, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network shape: encoder stages (width + stride each), the feature-head
/// width, and the class count. The total stride is the product of stage
/// strides; logits are upsampled back by that factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    /// The default desk-scale network: three 3×3 stages at strides 1/2/2
    /// (total stride 4) and a 16-wide feature head.
    pub fn reference(in_channels: usize, num_classes: usize) -> Self {
        ArchDescriptor {
            in_channels,
            widths: vec![8, 12, 16],
            strides: vec![1, 2, 2],
            kernel: 3,
            feature_dim: 16,
            num_classes,
        }
    }

    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(Error::InvalidInput(format!(
                "in_channels must be 3 (RGB) or 4 (RGB-NIR), got {}",
                self.in_channels
            )));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::InvalidInput(format!(
                "widths ({}) and strides ({}) must be non-empty and equal length",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("zero-width stage".into()));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::InvalidInput(
                "stage strides must be 1 or 2".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidInput(
                "feature_dim must be positive and num_classes at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub conv: ConvParams,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

/// All learnable tensors, in a fixed named order shared by the optimizer, the
/// checkpoint format, and the finite-difference harness.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub stages: Vec<StageParams>,
    pub head: StageParams,
    pub classifier: ConvParams,
}

fn zero_stage(out: usize, inp: usize, k: usize) -> StageParams {
    StageParams {
        conv: ConvParams {
            weight: Array4::zeros((out, inp, k, k)),
            bias: Array1::zeros(out),
        },
        scale: Array1::ones(out),
        shift: Array1::zeros(out),
    }
}

impl Params {
    /// All-zero parameters (norm scales included) shaped for `arch` — the
    /// gradient/velocity buffer layout.
    pub fn zeros(arch: &ArchDescriptor) -> Params {
        let mut stages = Vec::new();
        let mut inp = arch.in_channels;
        for &w in &arch.widths {
            let mut st = zero_stage(w, inp, arch.kernel);
            st.scale.fill(0.0);
            stages.push(st);
            inp = w;
        }
        let mut head = zero_stage(arch.feature_dim, inp, arch.kernel);
        head.scale.fill(0.0);
        Params {
            stages,
            head,
            classifier: ConvParams {
                weight: Array4::zeros((arch.num_classes, arch.feature_dim, 1, 1)),
                bias: Array1::zeros(arch.num_classes),
            },
        }
    }

    /// Named views over every tensor, in the canonical order.
    pub fn named(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out: Vec<(String, &[f64], Vec<usize>)> = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            out.push((
                format!("stages.{i}.conv.weight"),
                st.conv.weight.as_slice().unwrap(),
                st.conv.weight.shape().to_vec(),
            ));
            out.push((
                format!("stages.{i}.conv.bias"),
                st.conv.bias.as_slice().unwrap(),
                st.conv.bias.shape().to_vec(),
            ));
            out.push((
                format!("stages.{i}.norm.scale"),
                st.scale.as_slice().unwrap(),
                st.scale.shape().to_vec(),
            ));
            out.push((
                format!("stages.{i}.norm.shift"),
                st.shift.as_slice().unwrap(),
                st.shift.shape().to_vec(),
            ));
        }
        out.push((
            "head.conv.weight".into(),
            self.head.conv.weight.as_slice().unwrap(),
            self.head.conv.weight.shape().to_vec(),
        ));
        out.push((
            "head.conv.bias".into(),
            self.head.conv.bias.as_slice().unwrap(),
            self.head.conv.bias.shape().to_vec(),
        ));
        out.push((
            "head.norm.scale".into(),
            self.head.scale.as_slice().unwrap(),
            self.head.scale.shape().to_vec(),
        ));
        out.push((
            "head.norm.shift".into(),
            self.head.shift.as_slice().unwrap(),
            self.head.shift.shape().to_vec(),
        ));
        out.push((
            "classifier.weight".into(),
            self.classifier.weight.as_slice().unwrap(),
            self.classifier.weight.shape().to_vec(),
        ));
        out.push((
            "classifier.bias".into(),
            self.classifier.bias.as_slice().unwrap(),
            self.classifier.bias.shape().to_vec(),
        ));
        out
    }

    /// Mutable flat views in the same canonical order as [`Params::named`].
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for st in self.stages.iter_mut() {
            out.push(st.conv.weight.as_slice_mut().unwrap());
            out.push(st.conv.bias.as_slice_mut().unwrap());
            out.push(st.scale.as_slice_mut().unwrap());
            out.push(st.shift.as_slice_mut().unwrap());
        }
        out.push(self.head.conv.weight.as_slice_mut().unwrap());
        out.push(self.head.conv.bias.as_slice_mut().unwrap());
        out.push(self.head.scale.as_slice_mut().unwrap());
        out.push(self.head.shift.as_slice_mut().unwrap());
        out.push(self.classifier.weight.as_slice_mut().unwrap());
        out.push(self.classifier.bias.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, d, _)| d.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named()
            .iter()
            .flat_map(|(_, d, _)| d.iter().copied())
            .collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for slot in self.flat_mut() {
            slot.copy_from_slice(&flat[offset..offset + slot.len()]);
            offset += slot.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// `self += other * factor`, tensor by tensor (gradient accumulation).
    pub fn add_scaled(&mut self, other: &Params, factor: f64) {
        let others: Vec<Vec<f64>> = other.named().iter().map(|(_, d, _)| d.to_vec()).collect();
        for (slot, src) in self.flat_mut().into_iter().zip(others) {
            for (a, b) in slot.iter_mut().zip(src) {
                *a += factor * b;
            }
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for slot in self.flat_mut() {
            for v in slot.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Cached activations from one [`SegModel::forward`] call, consumed (moved)
/// by [`SegModel::backward`] — the type system enforces single use.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Array3<f64>,
    pub features: Array3<f64>,
    input: Array3<f64>,
    stage_z: Vec<Array3<f64>>,
    stage_n: Vec<Array3<f64>>,
    stage_act: Vec<Array3<f64>>,
    head_z: Array3<f64>,
    head_n: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: ArchDescriptor,
    pub params: Params,
}

impl SegModel {
    /// Seeded Kaiming-style initialization; the classification layer starts
    /// at zero so an untrained model predicts the uniform distribution.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<SegModel> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&arch);
        // Biases get a small random offset rather than zero: with zero biases,
        // zero-padded conv windows over inactive ReLU regions produce
        // pre-activations of exactly 0.0, parking those pixels on the ReLU
        // kink where the gradient is not well defined.
        let bias_normal = Normal::new(0.0, 1e-2).expect("valid std");
        for st in params.stages.iter_mut().chain(std::iter::once(&mut params.head)) {
            let (_, inp, k, _) = st.conv.weight.dim();
            let std = (2.0 / (inp * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for w in st.conv.weight.iter_mut() {
                *w = normal.sample(&mut rng);
            }
            for b in st.conv.bias.iter_mut() {
                *b = bias_normal.sample(&mut rng);
            }
            st.scale.fill(1.0);
        }
        Ok(SegModel { arch, params })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn from_parts(arch: ArchDescriptor, params: Params) -> Result<SegModel> {
        arch.validate()?;
        Ok(SegModel { arch, params })
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.arch.in_channels {
            return Err(Error::InvalidInput(format!(
                "input has {c} channels, model expects {}",
                self.arch.in_channels
            )));
        }
        let s = self.arch.stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} must be a positive multiple of the model stride {s}"
            )));
        }
        Ok(())
    }

    /// Run the network, caching what the backward pass needs. Deterministic:
    /// identical params and input give bit-identical outputs.
    pub fn forward(&self, x: &Array3<f64>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut act = x.clone();
        let mut stage_z = Vec::new();
        let mut stage_n = Vec::new();
        let mut stage_act = Vec::new();
        for (st, &stride) in self.params.stages.iter().zip(&self.arch.strides) {
            let z = conv2d(&act, &st.conv.weight, &st.conv.bias, stride);
            let n = affine(&z, &st.scale, &st.shift);
            act = relu(&n);
            stage_z.push(z);
            stage_n.push(n);
            stage_act.push(act.clone());
        }
        let head_z = conv2d(&act, &self.params.head.conv.weight, &self.params.head.conv.bias, 1);
        let head_n = affine(&head_z, &self.params.head.scale, &self.params.head.shift);
        let features = relu(&head_n);
        let low = conv2d(
            &features,
            &self.params.classifier.weight,
            &self.params.classifier.bias,
            1,
        );
        let logits = upsample_bilinear(&low, self.arch.stride());
        Ok(ForwardTrace {
            logits,
            features,
            input: x.clone(),
            stage_z,
            stage_n,
            stage_act,
            head_z,
            head_n,
        })
    }

    /// Exact gradients of `<logits, d_logits> + <features, d_features>` with
    /// respect to every parameter. Either adjoint may be zero.
    pub fn backward(
        &self,
        trace: ForwardTrace,
        d_logits: &Array3<f64>,
        d_features: &Array3<f64>,
    ) -> Result<Params> {
        if d_logits.dim() != trace.logits.dim() {
            return Err(Error::InvalidInput(format!(
                "d_logits is {:?}, logits are {:?}",
                d_logits.dim(),
                trace.logits.dim()
            )));
        }
        if d_features.dim() != trace.features.dim() {
            return Err(Error::InvalidInput(format!(
                "d_features is {:?}, features are {:?}",
                d_features.dim(),
                trace.features.dim()
            )));
        }
        let mut grads = Params::zeros(&self.arch);

        let d_low = upsample_bilinear_backward(d_logits, self.arch.stride());
        let (d_feat_cls, d_cls_w, d_cls_b) =
            conv2d_backward(&trace.features, &self.params.classifier.weight, 1, &d_low);
        grads.classifier.weight = d_cls_w;
        grads.classifier.bias = d_cls_b;

        let mut d_act = &d_feat_cls + d_features;
        let d_head_n = relu_backward(&trace.head_n, &d_act);
        let (d_head_z, d_head_scale, d_head_shift) =
            affine_backward(&trace.head_z, &self.params.head.scale, &d_head_n);
        let last_act = trace
            .stage_act
            .last()
            .expect("at least one stage");
        let (d_prev, d_head_w, d_head_b) =
            conv2d_backward(last_act, &self.params.head.conv.weight, 1, &d_head_z);
        grads.head.conv.weight = d_head_w;
        grads.head.conv.bias = d_head_b;
        grads.head.scale = d_head_scale;
        grads.head.shift = d_head_shift;
        d_act = d_prev;

        for i in (0..self.params.stages.len()).rev() {
            let st = &self.params.stages[i];
            let d_n = relu_backward(&trace.stage_n[i], &d_act);
            let (d_z, d_scale, d_shift) = affine_backward(&trace.stage_z[i], &st.scale, &d_n);
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.stage_act[i - 1]
            };
            let (d_in, d_w, d_b) =
                conv2d_backward(input, &st.conv.weight, self.arch.strides[i], &d_z);
            grads.stages[i].conv.weight = d_w;
            grads.stages[i].conv.bias = d_b;
            grads.stages[i].scale = d_scale;
            grads.stages[i].shift = d_shift;
            d_act = d_in;
        }
        Ok(grads)
    }

    /// Widen the first conv from 3 to 4 input channels by copying the red
    /// channel's weights into the new NIR slot; every other parameter is
    /// untouched. With a zero NIR plane the widened network reproduces the
    /// original first-layer pre-activations bit-exactly.
    pub fn expand_input_nir(&self) -> Result<SegModel> {
        if self.arch.in_channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expand_input_nir needs a 3-channel model, this one takes {}",
                self.arch.in_channels
            )));
        }
        let mut arch = self.arch.clone();
        arch.in_channels = 4;
        let mut params = self.params.clone();
        let old = &self.params.stages[0].conv.weight;
        let (out, _, k, _) = old.dim();
        let mut wide = Array4::zeros((out, 4, k, k));
        for o in 0..out {
            for i in 0..3 {
                for dy in 0..k {
                    for dx in 0..k {
                        wide[(o, i, dy, dx)] = old[(o, i, dy, dx)];
                    }
                }
            }
            for dy in 0..k {
                for dx in 0..k {
                    wide[(o, 3, dy, dx)] = old[(o, 0, dy, dx)];
                }
            }
        }
        params.stages[0].conv.weight = wide;
        Ok(SegModel { arch, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{GeometricOp, apply_geometric};
    use rand::Rng;

    fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor {
            in_channels: 3,
            widths: vec![2, 3],
            strides: vec![1, 2],
            kernel: 3,
            feature_dim: 4,
            num_classes: 3,
        }
    }

    fn rand_input(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes_follow_the_arch() {
        let arch = ArchDescriptor::reference(4, 4);
        let model = SegModel::init(arch, 1).unwrap();
        let x = rand_input(2, 4, 32, 32);
        let trace = model.forward(&x).unwrap();
        assert_eq!(trace.logits.dim(), (4, 32, 32));
        assert_eq!(trace.features.dim(), (16, 8, 8));
    }

    #[test]
    fn zero_classifier_means_all_zero_logits() {
        let model = SegModel::init(tiny_arch(), 3).unwrap();
        let x = rand_input(4, 3, 8, 8);
        let trace = model.forward(&x).unwrap();
        assert!(trace.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SegModel::init(tiny_arch(), 5).unwrap();
        let x = rand_input(6, 3, 8, 8);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = SegModel::init(tiny_arch(), 5).unwrap();
        assert!(model.forward(&Array3::zeros((4, 8, 8))).is_err());
        assert!(model.forward(&Array3::zeros((3, 5, 8))).is_err());
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let model = SegModel::init(tiny_arch(), 7).unwrap();
        let x = rand_input(8, 3, 8, 8);
        let trace = model.forward(&x).unwrap();
        let d_logits = Array3::zeros(trace.logits.dim());
        let d_features = Array3::zeros(trace.features.dim());
        let grads = model.backward(trace, &d_logits, &d_features).unwrap();
        assert!(grads.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_logits_has_bias_gradient_h_times_w() {
        // d(sum logits)/d(classifier bias_c) collects every upsample weight,
        // which total exactly H*W per class.
        let model = SegModel::init(tiny_arch(), 9).unwrap();
        let x = rand_input(10, 3, 8, 8);
        let trace = model.forward(&x).unwrap();
        let d_logits = Array3::ones(trace.logits.dim());
        let d_features = Array3::zeros(trace.features.dim());
        let grads = model.backward(trace, &d_logits, &d_features).unwrap();
        for c in 0..3 {
            assert!(
                (grads.classifier.bias[c] - 64.0).abs() < 1e-9,
                "bias grad {}",
                grads.classifier.bias[c]
            );
        }
    }

    /// Scalar objective `<logits, gl> + <features, gf>` for the FD harness.
    fn objective(model: &SegModel, x: &Array3<f64>, gl: &Array3<f64>, gf: &Array3<f64>) -> f64 {
        let t = model.forward(x).unwrap();
        let a: f64 = t.logits.iter().zip(gl.iter()).map(|(u, v)| u * v).sum();
        let b: f64 = t.features.iter().zip(gf.iter()).map(|(u, v)| u * v).sum();
        a + b
    }

    #[test]
    fn analytic_gradients_match_finite_differences_everywhere() {
        let arch = tiny_arch();
        let mut model = SegModel::init(arch, 11).unwrap();
        assert!(model.params.param_count() <= 5000);
        let x = rand_input(12, 3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let trace = model.forward(&x).unwrap();
        let gl = Array3::from_shape_fn(trace.logits.dim(), |_| rng.random_range(-1.0..1.0));
        let gf = Array3::from_shape_fn(trace.features.dim(), |_| rng.random_range(-1.0..1.0));
        let grads = model.backward(trace, &gl, &gf).unwrap().to_flat();

        let h = 1e-5;
        let base = model.params.to_flat();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            model.params.load_flat(&plus);
            let up = objective(&model, &x, &gl, &gf);
            let mut minus = base.clone();
            minus[i] -= h;
            model.params.load_flat(&minus);
            let down = objective(&model, &x, &gl, &gf);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "param {i}: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
        }
        model.params.load_flat(&base);
        assert!(worst <= 1e-4);
    }

    #[test]
    fn stride_one_pointwise_network_is_equivariant() {
        // With 1x1 kernels and stride 1 everywhere, each output pixel depends
        // on its own input pixel only, so geometric ops commute bit-exactly
        // with the forward pass.
        let arch = ArchDescriptor {
            in_channels: 3,
            widths: vec![4, 4],
            strides: vec![1, 1],
            kernel: 1,
            feature_dim: 4,
            num_classes: 3,
        };
        let mut model = SegModel::init(arch, 15).unwrap();
        // Zero-init classifier would hide differences; give it real weights.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for w in model.params.classifier.weight.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let x = rand_input(17, 3, 6, 6);
        for ops in [
            vec![GeometricOp::HFlip],
            vec![GeometricOp::Rot90 { k: 1 }],
            vec![GeometricOp::VFlip, GeometricOp::Rot90 { k: 3 }],
        ] {
            let direct = model.forward(&apply_geometric(&x, &ops).unwrap()).unwrap();
            let swapped = apply_geometric(&model.forward(&x).unwrap().logits, &ops).unwrap();
            assert_eq!(direct.logits, swapped, "ops {ops:?}");
        }
    }

    #[test]
    fn nir_expansion_reproduces_rgb_preactivations_on_zero_nir() {
        let model = SegModel::init(tiny_arch(), 19).unwrap();
        let wide = model.expand_input_nir().unwrap();
        assert_eq!(wide.arch().in_channels, 4);
        assert!(wide.expand_input_nir().is_err());

        let extra = {
            let (o, _, k, _) = model.params.stages[0].conv.weight.dim();
            o * k * k
        };
        assert_eq!(
            wide.params.param_count(),
            model.params.param_count() + extra
        );

        let x3 = rand_input(20, 3, 8, 8);
        let mut x4 = Array3::zeros((4, 8, 8));
        for c in 0..3 {
            x4.index_axis_mut(ndarray::Axis(0), c)
                .assign(&x3.index_axis(ndarray::Axis(0), c));
        }
        let t3 = model.forward(&x3).unwrap();
        let t4 = wide.forward(&x4).unwrap();
        assert_eq!(t3.stage_z[0], t4.stage_z[0]);
        // Zero NIR changes nothing anywhere downstream either.
        assert_eq!(t3.logits, t4.logits);
        assert_eq!(t3.features, t4.features);
    }

    #[test]
    fn nir_equal_to_red_adds_one_red_contribution() {
        let model = SegModel::init(tiny_arch(), 21).unwrap();
        let wide = model.expand_input_nir().unwrap();
        let x3 = rand_input(22, 3, 8, 8);
        let mut x4 = Array3::zeros((4, 8, 8));
        for c in 0..3 {
            x4.index_axis_mut(ndarray::Axis(0), c)
                .assign(&x3.index_axis(ndarray::Axis(0), c));
        }
        x4.index_axis_mut(ndarray::Axis(0), 3)
            .assign(&x3.index_axis(ndarray::Axis(0), 0));

        // Red-only convolution of the red plane, zero bias.
        let w0 = &model.params.stages[0].conv.weight;
        let (o, _, k, _) = w0.dim();
        let mut w_red = Array4::zeros((o, 1, k, k));
        for oi in 0..o {
            for dy in 0..k {
                for dx in 0..k {
                    w_red[(oi, 0, dy, dx)] = w0[(oi, 0, dy, dx)];
                }
            }
        }
        let red = x3.index_axis(ndarray::Axis(0), 0).to_owned().insert_axis(ndarray::Axis(0));
        let red_part = conv2d(&red, &w_red, &Array1::zeros(o), 1);

        let z3 = &model.forward(&x3).unwrap().stage_z[0] + &red_part;
        let z4 = wide.forward(&x4).unwrap().stage_z[0].clone();
        for (a, b) in z3.iter().zip(z4.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
