//! Five-stage 3D U-Net backbone with a main segmentation head (MSH) and one
//! auxiliary task head (ATH) per class.
//!
//! Channel ladder at `base_width = 16`:
//!
//! | stage | encoder convs            | decoder convs        |
//! |-------|--------------------------|----------------------|
//! | 1     | {1,16} {16,16}           | {48,16} {16,16}      |
//! | 2     | {16,16} {16,32}          | {96,32} {32,32}      |
//! | 3     | {32,32} {32,64}          | {192,64} {64,64}     |
//! | 4     | {64,64} {64,128}         | {384,128} {128,128}  |
//! | 5     | {128,128} {128,256}      |                      |
//!
//! Other widths scale every entry by `base_width / 16`. All convolutions are
//! 3×3×3 with padding 1 and are followed by ReLU, except the heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tape, Tensor, Var};

const KERNEL: usize = 3;
const PAD: usize = 1;
const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Training patch size `[z, y, x]`.
    pub patch_size: [usize; 3],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 5,
            base_width: 8,
            patch_size: [32, 32, 32],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 {
            return Err(Error::Config(format!("base_width must be >= 2, got {}", self.base_width)));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        check_spatial(self.patch_size)
    }

    /// Output channels of encoder stages 1..=5.
    pub fn stage_widths(&self) -> [usize; STAGES] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 16 * w]
    }

    /// Every convolution in parameter order: encoder, decoder, MSH, ATHs.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let c = self.stage_widths();
        let mut layers = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| layers.push(ConvSpec { name, cin, cout });
        conv("enc1.conv1".into(), self.in_channels, c[0]);
        conv("enc1.conv2".into(), c[0], c[0]);
        for s in 1..STAGES {
            conv(format!("enc{}.conv1", s + 1), c[s - 1], c[s - 1]);
            conv(format!("enc{}.conv2", s + 1), c[s - 1], c[s]);
        }
        for s in (0..STAGES - 1).rev() {
            conv(format!("dec{}.conv1", s + 1), c[s] + c[s + 1], c[s]);
            conv(format!("dec{}.conv2", s + 1), c[s], c[s]);
        }
        conv("msh".into(), c[0], self.num_classes + 1);
        for j in 1..=self.num_classes {
            conv(format!("ath{j}"), c[0], 2);
        }
        layers
    }

    /// Number of layers belonging to the backbone plus MSH (the inference model).
    fn inference_layers(&self) -> usize {
        2 * STAGES + 2 * (STAGES - 1) + 1
    }
}

fn check_spatial(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::Config(format!(
            "spatial dims {dims:?} must be positive multiples of 16"
        )));
    }
    Ok(())
}

/// Initial background logit of each head, `ln 100`: foreground channels
/// start near 1% probability. Starting at uniform probabilities lets Dice
/// losses on small structures drive every foreground channel into
/// saturation within a few steps.
pub const HEAD_BACKGROUND_BIAS: f64 = 4.605_170_185_988_092;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 5] {
        [self.cout, self.cin, KERNEL, KERNEL, KERNEL]
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * KERNEL.pow(3) + self.cout
    }
}

/// Logits produced by one training forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<H> {
    /// `[B, N+1, Z, Y, X]`, channel 0 is background.
    pub msh_logits: H,
    /// One `[B, 2, Z, Y, X]` tensor per class (channel 1 is foreground).
    /// Empty when the auxiliary heads were not evaluated.
    pub ath_logits: Vec<H>,
}

/// Parameter handles registered on a tape by a forward pass, indexed like
/// [`UNetModel::params`]. `None` means the parameter was never read.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Option<Var>>);

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<T = f32> {
    config: UNetConfig,
    layers: Vec<ConvSpec>,
    /// `(name, tensor)` pairs; layer `i` owns entries `2i` (weight) and `2i + 1` (bias).
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Element> UNetModel<T> {
    /// He (fan-in) normal weights drawn in parameter order from a stream
    /// seeded with `seed`. Biases are zero except the background channel of
    /// every head, which starts at [`HEAD_BACKGROUND_BIAS`].
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * layers.len());
        for layer in &layers {
            let fan_in = (layer.cin * KERNEL.pow(3)) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = layer.weight_shape();
            let w = Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(&mut rng)));
            params.push((format!("{}.weight", layer.name), w));
            let mut bias = Tensor::zeros(&[layer.cout]);
            if layer.name == "msh" || layer.name.starts_with("ath") {
                bias.data_mut()[0] = T::from_f64(HEAD_BACKGROUND_BIAS);
            }
            params.push((format!("{}.bias", layer.name), bias));
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvSpec::param_count).sum()
    }

    /// Parameters used at inference: backbone plus MSH, excluding the ATHs.
    pub fn inference_param_count(&self) -> usize {
        self.layers[..self.config.inference_layers()]
            .iter()
            .map(ConvSpec::param_count)
            .sum()
    }

    /// True if parameter index `i` belongs to an auxiliary head.
    pub fn is_ath_param(&self, i: usize) -> bool {
        i / 2 >= self.config.inference_layers()
    }

    pub fn cast<U: Element>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, z, y, x] = crate::tensor::dims5(shape)?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        check_spatial([z, y, x]).map_err(|_| {
            Error::Shape(format!("input spatial dims {:?} must be multiples of 16", [z, y, x]))
        })
    }

    /// Training forward pass: MSH logits and every ATH's logits, recorded on
    /// `tape` so gradients reach all parameters.
    pub fn forward_full(&self, tape: &mut Tape<T>, input: Var) -> Result<(ModelOutput<Var>, ParamVars)> {
        self.forward_on_tape(tape, input, true)
    }

    /// Like [`Self::forward_full`] but only the MSH is evaluated; the ATH
    /// parameters are never read or registered.
    pub fn forward_main(&self, tape: &mut Tape<T>, input: Var) -> Result<(ModelOutput<Var>, ParamVars)> {
        self.forward_on_tape(tape, input, false)
    }

    /// Training forward pass reading parameter `i` from `params[i]` instead
    /// of registering the model's own tensors.
    pub fn forward_full_with(&self, tape: &mut Tape<T>, input: Var, params: &[Var]) -> Result<ModelOutput<Var>> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        for ((name, t), &v) in self.params.iter().zip(params) {
            if tape.shape(v) != t.shape() {
                return Err(Error::Shape(format!("{name}: handle {:?}, parameter {:?}", tape.shape(v), t.shape())));
            }
        }
        self.check_input(tape.shape(input))?;
        let mut exec = TapeExec {
            model: self,
            tape,
            vars: params.iter().copied().map(Some).collect(),
        };
        self.run(&mut exec, input, true)
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        with_aux: bool,
    ) -> Result<(ModelOutput<Var>, ParamVars)> {
        self.check_input(tape.shape(input))?;
        let mut exec = TapeExec {
            model: self,
            tape,
            vars: vec![None; self.params.len()],
        };
        let out = self.run(&mut exec, input, with_aux)?;
        Ok((out, ParamVars(exec.vars)))
    }

    /// Inference: backbone, MSH and channel softmax, without a tape and
    /// without touching the ATH parameters.
    pub fn forward_inference(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input.shape())?;
        let mut exec = EagerExec { model: self };
        let out = self.run(&mut exec, input.clone(), false)?;
        kernels::softmax_channels_forward(&out.msh_logits)
    }

    fn run<E: Exec<T>>(&self, e: &mut E, input: E::H, with_aux: bool) -> Result<ModelOutput<E::H>> {
        let mut layer = 0;
        let mut conv_relu = |e: &mut E, h: &E::H| -> Result<E::H> {
            let out = e.conv(h, layer)?;
            layer += 1;
            Ok(e.relu(out))
        };
        let mut skips = Vec::with_capacity(STAGES - 1);
        let mut h = input;
        for stage in 0..STAGES {
            if stage > 0 {
                h = e.pool(skips.last().expect("previous stage output"))?;
            }
            let a = conv_relu(e, &h)?;
            let b = conv_relu(e, &a)?;
            if stage + 1 < STAGES {
                skips.push(b);
            } else {
                h = b;
            }
        }
        while let Some(skip) = skips.pop() {
            let up = e.up(&h)?;
            let cat = e.concat(&skip, &up)?;
            let a = conv_relu(e, &cat)?;
            h = conv_relu(e, &a)?;
        }
        let msh_logits = e.conv(&h, layer)?;
        let mut ath_logits = Vec::new();
        if with_aux {
            for j in 0..self.config.num_classes {
                ath_logits.push(e.conv(&h, layer + 1 + j)?);
            }
        }
        Ok(ModelOutput { msh_logits, ath_logits })
    }
}

/// The handful of primitives the network needs, implemented once on a tape
/// and once eagerly.
trait Exec<T: Element> {
    type H;
    fn conv(&mut self, x: &Self::H, layer: usize) -> Result<Self::H>;
    fn relu(&mut self, x: Self::H) -> Self::H;
    fn pool(&mut self, x: &Self::H) -> Result<Self::H>;
    fn up(&mut self, x: &Self::H) -> Result<Self::H>;
    fn concat(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
}

struct TapeExec<'a, T: Element> {
    model: &'a UNetModel<T>,
    tape: &'a mut Tape<T>,
    vars: Vec<Option<Var>>,
}

impl<T: Element> TapeExec<'_, T> {
    fn var(&mut self, index: usize) -> Var {
        if let Some(v) = self.vars[index] {
            return v;
        }
        let v = self.tape.param(self.model.params[index].1.clone());
        self.vars[index] = Some(v);
        v
    }
}

impl<T: Element> Exec<T> for TapeExec<'_, T> {
    type H = Var;

    fn conv(&mut self, x: &Var, layer: usize) -> Result<Var> {
        let w = self.var(2 * layer);
        let b = self.var(2 * layer + 1);
        self.tape.conv3d(*x, w, b, PAD)
    }

    fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }

    fn pool(&mut self, x: &Var) -> Result<Var> {
        self.tape.maxpool3d(*x)
    }

    fn up(&mut self, x: &Var) -> Result<Var> {
        self.tape.upsample_trilinear3d(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(&[*a, *b])
    }
}

struct EagerExec<'a, T: Element> {
    model: &'a UNetModel<T>,
}

impl<T: Element> Exec<T> for EagerExec<'_, T> {
    type H = Tensor<T>;

    fn conv(&mut self, x: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
        let p = &self.model.params;
        kernels::conv3d_forward(x, &p[2 * layer].1, &p[2 * layer + 1].1, PAD)
    }

    fn relu(&mut self, mut x: Tensor<T>) -> Tensor<T> {
        for v in x.data_mut() {
            if *v <= T::zero() {
                *v = T::zero();
            }
        }
        x
    }

    fn pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::maxpool2_forward(x)?.0)
    }

    fn up(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::upsample2_forward(x)
    }

    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, ca, z, y, x] = a.dims5()?;
        let [nb, cb, zb, yb, xb] = b.dims5()?;
        if (n, z, y, x) != (nb, zb, yb, xb) {
            return Err(Error::Shape(format!(
                "concat: {:?} incompatible with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let v = z * y * x;
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        for i in 0..n {
            out.extend_from_slice(&a.data()[i * ca * v..(i + 1) * ca * v]);
            out.extend_from_slice(&b.data()[i * cb * v..(i + 1) * cb * v]);
        }
        Tensor::new(vec![n, ca + cb, z, y, x], out)
    }
}
