//! The multi-domain network: three shared convolutional layers, two shared
//! fully connected layers and one two-way classification branch per domain.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, DropoutMask, Lrn};
use crate::tensor::{sgd_step, Element, ParamGroup, Tensor};

/// Channel counts of the VGG-M convolutional stack and the fc width at full size.
const FULL_CONV_CHANNELS: [usize; 3] = [96, 256, 512];
const FULL_FC_WIDTH: usize = 512;

/// Standard deviation of freshly initialized classification branches.
pub const BRANCH_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MDNetConfig {
    pub input_size: usize,
    pub conv: [ConvSpec; 3],
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub fc_width: usize,
    pub num_domains: usize,
    pub channel_scale: f64,
    pub lrn_enabled: bool,
    pub dropout_rate: f64,
}

impl MDNetConfig {
    /// Builds the VGG-M-shaped stack with every channel count multiplied by
    /// `channel_scale`.
    pub fn scaled(num_domains: usize, channel_scale: f64, lrn_enabled: bool) -> Result<Self> {
        if !(channel_scale > 0.0 && channel_scale <= 1.0) {
            return Err(Error::config(format!(
                "channel scale {channel_scale} outside (0, 1]"
            )));
        }
        let ch = |full: usize| ((full as f64 * channel_scale).round() as usize).max(1);
        let cfg = Self {
            input_size: 107,
            conv: [
                ConvSpec { channels: ch(FULL_CONV_CHANNELS[0]), kernel: 7, stride: 2 },
                ConvSpec { channels: ch(FULL_CONV_CHANNELS[1]), kernel: 5, stride: 2 },
                ConvSpec { channels: ch(FULL_CONV_CHANNELS[2]), kernel: 3, stride: 1 },
            ],
            pool_kernel: 3,
            pool_stride: 2,
            fc_width: ch(FULL_FC_WIDTH),
            num_domains,
            channel_scale,
            lrn_enabled,
            dropout_rate: 0.5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Activation spread that gives the fc5 features of this width the
    /// same energy as the full-width network at unit spread.
    pub fn width_gain(&self) -> f64 {
        (FULL_FC_WIDTH as f64 / self.fc_width as f64).sqrt()
    }

    /// Full-size geometry with local response normalization.
    pub fn paper(num_domains: usize) -> Self {
        Self::scaled(num_domains, 1.0, true).unwrap()
    }

    /// One eighth of the channels (12/32/64, fc width 64), no normalization.
    pub fn desk(num_domains: usize) -> Self {
        Self::scaled(num_domains, 0.125, false).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("at least one domain is required"));
        }
        if self.fc_width < 8 {
            return Err(Error::config(format!(
                "fc width {} below the minimum of 8",
                self.fc_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout rate outside [0, 1)"));
        }
        self.conv3_extent().map(|_| ())
    }

    /// Spatial extent of the conv3 maps.
    pub fn conv3_extent(&self) -> Result<usize> {
        let mut e = self.input_size;
        for (i, c) in self.conv.iter().enumerate() {
            e = ops::out_extent(e, c.kernel, c.stride, 0)?;
            if i < 2 {
                e = ops::out_extent(e, self.pool_kernel, self.pool_stride, 0)?;
            }
        }
        Ok(e)
    }

    /// Shape of one conv3 feature map (channels, height, width).
    pub fn conv3_shape(&self) -> [usize; 3] {
        let e = self.conv3_extent().expect("validated");
        [self.conv[2].channels, e, e]
    }

    pub fn feature_len(&self) -> usize {
        self.conv3_shape().iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Online,
}

/// Layer groups `w1..w6`; `W6` covers every classification branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    W1,
    W2,
    W3,
    W4,
    W5,
    W6,
}

impl LayerId {
    pub const ALL: [LayerId; 6] = [
        LayerId::W1,
        LayerId::W2,
        LayerId::W3,
        LayerId::W4,
        LayerId::W5,
        LayerId::W6,
    ];
    pub const FULLY_CONNECTED: [LayerId; 3] = [LayerId::W4, LayerId::W5, LayerId::W6];
}

/// Where a batch enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// `batch × 3 × input_size × input_size` patches.
    Patches,
    /// `batch × C × 3 × 3` cached conv3 activations.
    Conv3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Conv(usize),
    Relu,
    Lrn,
    Pool,
    Flatten,
    Fc4,
    Fc5,
    Fc6,
    Dropout,
}

#[derive(Debug, Clone)]
pub struct MDNet<T: Element = f32> {
    config: MDNetConfig,
    conv: Vec<ParamGroup<T>>,
    fc4: ParamGroup<T>,
    fc5: ParamGroup<T>,
    branches: Vec<ParamGroup<T>>,
    mode: Mode,
    lrn: Lrn,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Element> MDNet<T> {
    /// Fresh network in pretraining mode with `config.num_domains` branches.
    ///
    /// Shared layers use He-normal weights, branches use N(0, 0.01²); all
    /// biases start at zero.
    pub fn new(config: MDNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::with_capacity(3);
        let mut in_ch = 3;
        for (i, c) in config.conv.iter().enumerate() {
            let fan_in = in_ch * c.kernel * c.kernel;
            conv.push(ParamGroup::gaussian(
                format!("conv{}", i + 1),
                &[c.channels, in_ch, c.kernel, c.kernel],
                he_std(fan_in),
                rng,
            ));
            in_ch = c.channels;
        }
        let feat = config.feature_len();
        let w = config.fc_width;
        let fc4 = ParamGroup::gaussian("fc4", &[w, feat], he_std(feat), rng);
        let fc5 = ParamGroup::gaussian("fc5", &[w, w], he_std(w), rng);
        let branches = (0..config.num_domains)
            .map(|d| ParamGroup::gaussian(format!("fc6_{d}"), &[2, w], BRANCH_INIT_STD, rng))
            .collect();
        Ok(Self {
            config,
            conv,
            fc4,
            fc5,
            branches,
            mode: Mode::Pretrain,
            lrn: Lrn::default(),
        })
    }

    /// Reassembles a network from stored parameter groups.
    pub fn from_parts(
        config: MDNetConfig,
        mode: Mode,
        shared: Vec<ParamGroup<T>>,
        branches: Vec<ParamGroup<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, fc4, fc5]: [ParamGroup<T>; 5] = shared
            .try_into()
            .map_err(|v: Vec<_>| Error::config(format!("expected 5 shared layers, got {}", v.len())))?;
        if branches.is_empty() || (mode == Mode::Online && branches.len() != 1) {
            return Err(Error::config(format!(
                "{} branches is invalid in {mode:?} mode",
                branches.len()
            )));
        }
        let reference = Self::expected_dims(&config);
        for (got, want) in [&c1, &c2, &c3, &fc4, &fc5]
            .into_iter()
            .chain(branches.iter())
            .zip(reference)
        {
            if got.weights.dims() != want.as_slice() {
                return Err(Error::config(format!(
                    "{}: weight dims {:?}, expected {want:?}",
                    got.name,
                    got.weights.dims()
                )));
            }
        }
        Ok(Self {
            config,
            conv: vec![c1, c2, c3],
            fc4,
            fc5,
            branches,
            mode,
            lrn: Lrn::default(),
        })
    }

    /// Expected weight dims in storage order, with the branch shape repeated.
    fn expected_dims(config: &MDNetConfig) -> impl Iterator<Item = Vec<usize>> {
        let c = &config.conv;
        let w = config.fc_width;
        let fixed = vec![
            vec![c[0].channels, 3, c[0].kernel, c[0].kernel],
            vec![c[1].channels, c[0].channels, c[1].kernel, c[1].kernel],
            vec![c[2].channels, c[1].channels, c[2].kernel, c[2].kernel],
            vec![w, config.feature_len()],
            vec![w, w],
        ];
        fixed.into_iter().chain(std::iter::repeat(vec![2, w]))
    }

    pub fn config(&self) -> &MDNetConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branch(&self, index: usize) -> Option<&ParamGroup<T>> {
        self.branches.get(index)
    }

    pub fn branches(&self) -> &[ParamGroup<T>] {
        &self.branches
    }

    /// `conv1, conv2, conv3, fc4, fc5` in order.
    pub fn shared(&self) -> impl Iterator<Item = &ParamGroup<T>> {
        self.conv.iter().chain([&self.fc4, &self.fc5])
    }

    pub fn shared_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup<T>> {
        self.conv.iter_mut().chain([&mut self.fc4, &mut self.fc5])
    }

    /// Every parameter group, shared layers first.
    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup<T>> {
        self.shared().chain(self.branches.iter())
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup<T>> {
        self.conv
            .iter_mut()
            .chain([&mut self.fc4, &mut self.fc5])
            .chain(self.branches.iter_mut())
    }

    pub fn conv_layers(&self) -> &[ParamGroup<T>] {
        &self.conv
    }

    pub fn shared_checksum(&self) -> u64 {
        crate::tensor::combine_fingerprints(self.shared().map(|g| g.checksum()))
    }

    pub fn conv_checksum(&self) -> u64 {
        crate::tensor::combine_fingerprints(self.conv.iter().map(|g| g.checksum()))
    }

    /// Drops every domain branch and installs one freshly initialized fc6.
    pub fn replace_branches(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.mode == Mode::Online {
            return Err(Error::usage("branches were already replaced"));
        }
        let w = self.config.fc_width;
        self.branches = vec![ParamGroup::gaussian("fc6", &[2, w], BRANCH_INIT_STD, rng)];
        self.mode = Mode::Online;
        for g in self.shared_mut() {
            g.reset_momentum();
            g.clear_grad();
        }
        Ok(())
    }

    /// Marks exactly the given layers trainable and freezes the rest.
    pub fn set_trainable(&mut self, layers: &[LayerId]) {
        let on = |l| layers.contains(&l);
        for (g, id) in self.conv.iter_mut().zip([LayerId::W1, LayerId::W2, LayerId::W3]) {
            g.set_trainable(on(id));
        }
        self.fc4.set_trainable(on(LayerId::W4));
        self.fc5.set_trainable(on(LayerId::W5));
        for b in &mut self.branches {
            b.set_trainable(on(LayerId::W6));
        }
    }

    pub fn trainable_layers(&self) -> Vec<LayerId> {
        let flags = [
            self.conv[0].is_trainable(),
            self.conv[1].is_trainable(),
            self.conv[2].is_trainable(),
            self.fc4.is_trainable(),
            self.fc5.is_trainable(),
            self.branches.iter().any(|b| b.is_trainable()),
        ];
        LayerId::ALL
            .into_iter()
            .zip(flags)
            .filter_map(|(l, f)| f.then_some(l))
            .collect()
    }

    /// Sets per-group learning-rate multipliers for the conv layers, fc4–5 and fc6.
    pub fn set_lr_multipliers(&mut self, conv: T, fc45: T, fc6: T) -> Result<()> {
        for g in &mut self.conv {
            g.set_lr_multiplier(conv)?;
        }
        self.fc4.set_lr_multiplier(fc45)?;
        self.fc5.set_lr_multiplier(fc45)?;
        for b in &mut self.branches {
            b.set_lr_multiplier(fc6)?;
        }
        Ok(())
    }

    fn steps(&self, from: Stage) -> Vec<Step> {
        let mut s = Vec::with_capacity(20);
        if from == Stage::Patches {
            for i in 0..3 {
                s.push(Step::Conv(i));
                s.push(Step::Relu);
                if i < 2 {
                    if self.config.lrn_enabled {
                        s.push(Step::Lrn);
                    }
                    s.push(Step::Pool);
                }
            }
        }
        s.extend([
            Step::Flatten,
            Step::Fc4,
            Step::Relu,
            Step::Dropout,
            Step::Fc5,
            Step::Relu,
            Step::Dropout,
            Step::Fc6,
        ]);
        s
    }

    fn check_input(&self, input: &Tensor<T>, stage: Stage) -> Result<()> {
        let want = match stage {
            Stage::Patches => {
                let s = self.config.input_size;
                [3, s, s]
            }
            Stage::Conv3 => self.config.conv3_shape(),
        };
        if input.rank() != 4 || input.dims()[1..] != want {
            return Err(Error::shape(format!(
                "expected batch×{want:?} input, got {:?}",
                input.dims()
            )));
        }
        Ok(())
    }

    fn check_branch(&self, branch: usize) -> Result<()> {
        if branch >= self.branches.len() {
            return Err(Error::usage(format!(
                "branch {branch} out of range ({} branches)",
                self.branches.len()
            )));
        }
        Ok(())
    }

    fn apply(
        &self,
        step: Step,
        x: &Tensor<T>,
        branch: usize,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
        let y = match step {
            Step::Conv(i) => ops::conv2d(x, &self.conv[i], self.config.conv[i].stride, 0)?,
            Step::Relu => ops::relu(x),
            Step::Lrn => self.lrn.forward(x)?,
            Step::Pool => ops::maxpool2d(x, self.config.pool_kernel, self.config.pool_stride)?,
            Step::Flatten => x.clone_without_grad().flatten(),
            Step::Fc4 => ops::linear(x, &self.fc4)?,
            Step::Fc5 => ops::linear(x, &self.fc5)?,
            Step::Fc6 => ops::linear(x, &self.branches[branch])?,
            Step::Dropout => {
                let (y, m) = ops::dropout(x, self.config.dropout_rate, train_mode, rng)?;
                return Ok((y, Some(m)));
            }
        };
        Ok((y, None))
    }

    fn run(
        &self,
        input: &Tensor<T>,
        stage: Stage,
        branch: usize,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        self.check_input(input, stage)?;
        self.check_branch(branch)?;
        let mut x = input.clone_without_grad();
        for step in self.steps(stage) {
            x = self.apply(step, &x, branch, train_mode, rng)?.0;
        }
        Ok(x)
    }

    /// Two-way logits for a batch of patches through the given branch.
    pub fn forward(
        &self,
        patches: &Tensor<T>,
        branch: usize,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        self.run(patches, Stage::Patches, branch, train_mode, rng)
    }

    /// Logits computed from cached conv3 activations.
    pub fn forward_from_conv3(
        &self,
        features: &Tensor<T>,
        branch: usize,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        self.run(features, Stage::Conv3, branch, train_mode, rng)
    }

    /// Output of the shared convolutional stack (after the conv3 ReLU).
    pub fn forward_conv3(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(patches, Stage::Patches)?;
        let mut x = patches.clone_without_grad();
        // conv steps never draw from the rng
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        for step in self.steps(Stage::Patches) {
            if step == Step::Flatten {
                break;
            }
            x = self.apply(step, &x, 0, false, &mut unused)?.0;
        }
        Ok(x)
    }

    /// Eval-mode target probabilities `f+` for a batch.
    pub fn positive_scores(&self, input: &Tensor<T>, stage: Stage, branch: usize) -> Result<Vec<T>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let logits = self.run(input, stage, branch, false, &mut unused)?;
        ops::positive_scores(&logits)
    }

    /// Forward in train mode, softmax cross-entropy against `labels`, and a
    /// backward pass that fills the grads of every layer down to the lowest
    /// trainable one. Only `branch` receives fc6 gradients.
    ///
    /// Returns the minibatch loss.
    pub fn accumulate_gradients(
        &mut self,
        input: &Tensor<T>,
        stage: Stage,
        labels: &[usize],
        branch: usize,
        rng: &mut impl Rng,
    ) -> Result<T> {
        self.check_input(input, stage)?;
        self.check_branch(branch)?;
        let steps = self.steps(stage);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(steps.len() + 1);
        let mut masks = Vec::new();
        acts.push(input.clone_without_grad());
        for &step in &steps {
            let (y, m) = self.apply(step, acts.last().unwrap(), branch, true, rng)?;
            if let Some(m) = m {
                masks.push(m);
            }
            acts.push(y);
        }
        let logits = acts.last_mut().unwrap();
        let loss = ops::softmax_cross_entropy(logits, labels)?;
        ops::softmax_cross_entropy_backward(logits, labels)?;

        // lowest step whose parameters will be updated
        let lowest = steps
            .iter()
            .position(|s| match s {
                Step::Conv(i) => self.conv[*i].is_trainable(),
                Step::Fc4 => self.fc4.is_trainable(),
                Step::Fc5 => self.fc5.is_trainable(),
                Step::Fc6 => self.branches[branch].is_trainable(),
                _ => false,
            })
            .unwrap_or(steps.len());

        for i in (lowest..steps.len()).rev() {
            let (lower, upper) = acts.split_at_mut(i + 1);
            let (x, y) = (&mut lower[i], &upper[0]);
            if i > lowest {
                x.require_grad();
            }
            match steps[i] {
                Step::Conv(c) => {
                    let stride = self.config.conv[c].stride;
                    ops::conv2d_backward(x, &mut self.conv[c], y, stride, 0)?
                }
                Step::Relu => ops::relu_backward(x, y)?,
                Step::Lrn => self.lrn.backward(x, y)?,
                Step::Pool => {
                    ops::maxpool2d_backward(x, y, self.config.pool_kernel, self.config.pool_stride)?
                }
                Step::Flatten => {
                    let (_, gx) = x.data_and_grad_mut();
                    for (g, &d) in gx.iter_mut().zip(y.grad().unwrap()) {
                        *g += d;
                    }
                }
                Step::Fc4 => ops::linear_backward(x, &mut self.fc4, y)?,
                Step::Fc5 => ops::linear_backward(x, &mut self.fc5, y)?,
                Step::Fc6 => ops::linear_backward(x, &mut self.branches[branch], y)?,
                Step::Dropout => ops::dropout_backward(x, y, &masks.pop().unwrap())?,
            }
            // activations above are no longer needed
            upper[0] = Tensor::zeros(&[1]);
        }
        Ok(loss)
    }

    /// Rescales the shared layers, lowest first, so that each layer's
    /// pre-activation output has standard deviation `target_std` on `patches`.
    /// Returns the applied gains (conv1–3, fc4, fc5).
    pub fn calibrate_shared(&mut self, patches: &Tensor<T>, target_std: f64) -> Result<Vec<f64>> {
        self.check_input(patches, Stage::Patches)?;
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let mut x = patches.clone_without_grad();
        let mut gains = Vec::with_capacity(5);
        for step in self.steps(Stage::Patches) {
            if step == Step::Fc6 {
                break;
            }
            let mut y = self.apply(step, &x, 0, false, &mut unused)?.0;
            let group = match step {
                Step::Conv(i) => Some(&mut self.conv[i]),
                Step::Fc4 => Some(&mut self.fc4),
                Step::Fc5 => Some(&mut self.fc5),
                _ => None,
            };
            if let Some(g) = group {
                let n = y.len() as f64;
                let mean = y.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = y.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                if !(var > 0.0) {
                    return Err(Error::NonFinite(format!("{}: zero activation variance", g.name)));
                }
                let gain = T::from_f64(target_std / var.sqrt());
                for v in g.weights.data_mut().iter_mut().chain(g.bias.data_mut()) {
                    *v *= gain;
                }
                for v in y.data_mut() {
                    *v *= gain;
                }
                gains.push(gain.as_f64());
            }
            x = y;
        }
        Ok(gains)
    }

    /// Momentum SGD over the shared layers and one branch.
    pub fn sgd_step(&mut self, branch: usize, base_lr: T, momentum: T, weight_decay: T) -> Result<()> {
        self.check_branch(branch)?;
        let mut groups: Vec<&mut ParamGroup<T>> = self.conv.iter_mut().collect();
        groups.push(&mut self.fc4);
        groups.push(&mut self.fc5);
        groups.push(&mut self.branches[branch]);
        // layers below the lowest trainable one never got gradients
        for g in groups.iter_mut() {
            if !g.is_trainable() {
                g.clear_grad();
            }
        }
        sgd_step(&mut groups, base_lr, momentum, weight_decay)
    }

    /// Casts every parameter to another element type.
    pub fn cast<U: Element>(&self) -> MDNet<U> {
        let cast = |g: &ParamGroup<T>| {
            let mut out = ParamGroup::new(g.name.clone(), g.weights.cast(), g.bias.cast()).unwrap();
            out.set_trainable(g.is_trainable());
            out
        };
        MDNet {
            config: self.config.clone(),
            conv: self.conv.iter().map(cast).collect(),
            fc4: cast(&self.fc4),
            fc5: cast(&self.fc5),
            branches: self.branches.iter().map(cast).collect(),
            mode: self.mode,
            lrn: self.lrn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_patches(n: usize, rng: &mut impl Rng) -> Tensor<f32> {
        let data = (0..n * 3 * 107 * 107).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Tensor::new(&[n, 3, 107, 107], data).unwrap()
    }

    #[test]
    fn desk_config_channels() {
        let c = MDNetConfig::desk(3);
        let ch: Vec<_> = c.conv.iter().map(|s| s.channels).collect();
        assert_eq!(ch, vec![12, 32, 64]);
        assert_eq!(c.fc_width, 64);
        assert_eq!(c.conv3_shape(), [64, 3, 3]);
    }

    #[test]
    fn degenerate_width_rejected() {
        assert!(MDNetConfig::scaled(1, 0.01, false).is_err());
        assert!(MDNetConfig::scaled(1, 0.0, false).is_err());
        assert!(MDNetConfig::scaled(1, 1.5, false).is_err());
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let mut r = rng();
        let net = MDNet::<f32>::new(MDNetConfig::desk(1), &mut r).unwrap();
        let x = Tensor::zeros(&[1, 3, 100, 100]);
        assert!(matches!(net.forward(&x, 0, false, &mut r), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut r = rng();
        let mut net = MDNet::<f32>::new(MDNetConfig::desk(2), &mut r).unwrap();
        for g in net.groups_mut() {
            g.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_patches(2, &mut r);
        let logits = net.forward(&x, 1, false, &mut r).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let s = net.positive_scores(&x, Stage::Patches, 1).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_branches_agree() {
        let mut r = rng();
        let mut net = MDNet::<f32>::new(MDNetConfig::desk(2), &mut r).unwrap();
        net.branches[1].weights = net.branches[0].weights.clone();
        let x = random_patches(3, &mut r);
        let a = net.forward(&x, 0, false, &mut r).unwrap();
        let b = net.forward(&x, 1, false, &mut r).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn conv3_prefix_matches_full_forward() {
        let mut r = rng();
        let net = MDNet::<f32>::new(MDNetConfig::desk(1), &mut r).unwrap();
        let x = random_patches(2, &mut r);
        let f = net.forward_conv3(&x).unwrap();
        assert_eq!(f.dims(), &[2, 64, 3, 3]);
        let a = net.forward(&x, 0, false, &mut r).unwrap();
        let b = net.forward_from_conv3(&f, 0, false, &mut r).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_conv3() {
        let mut r = rng();
        let net = MDNet::<f32>::new(MDNetConfig::desk(1), &mut r).unwrap();
        let f = net.forward_conv3(&Tensor::zeros(&[1, 3, 107, 107])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut r = rng();
        let net = MDNet::<f32>::new(MDNetConfig::desk(1), &mut r).unwrap();
        let x = random_patches(2, &mut r);
        let a = net.forward(&x, 0, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = net.forward(&x, 0, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn replace_branches_once() {
        let mut r = rng();
        let mut net = MDNet::<f32>::new(MDNetConfig::desk(3), &mut r).unwrap();
        let before = net.shared_checksum();
        net.replace_branches(&mut r).unwrap();
        assert_eq!(net.num_branches(), 1);
        assert_eq!(net.mode(), Mode::Online);
        assert_eq!(before, net.shared_checksum());
        assert!(matches!(net.replace_branches(&mut r), Err(Error::Usage(_))));
    }

    #[test]
    fn fresh_branch_init_moments() {
        let mut r = rng();
        let mut samples = Vec::new();
        let mut net = MDNet::<f32>::new(MDNetConfig::scaled(1, 1.0, false).unwrap(), &mut r).unwrap();
        // fc6 at full width is 2×512; 10 fresh branches give 10240 draws
        for _ in 0..10 {
            net.mode = Mode::Pretrain;
            net.replace_branches(&mut r).unwrap();
            samples.extend(net.branches[0].weights.data().iter().map(|&v| v as f64));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(samples.len() >= 10_000);
        assert!(mean.abs() < 0.1 * BRANCH_INIT_STD, "mean {mean}");
        assert!((std / BRANCH_INIT_STD - 1.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn gradients_reach_only_active_branch() {
        let mut r = rng();
        let mut net = MDNet::<f32>::new(MDNetConfig::desk(3), &mut r).unwrap();
        let x = random_patches(4, &mut r);
        net.accumulate_gradients(&x, Stage::Patches, &[0, 1, 0, 1], 1, &mut r)
            .unwrap();
        assert!(!net.branches[0].has_grad());
        assert!(net.branches[1].has_grad());
        assert!(!net.branches[2].has_grad());
        for g in net.shared() {
            assert!(g.weights.grad().unwrap().iter().any(|&v| v != 0.0), "{}", g.name);
        }
    }

    #[test]
    fn frozen_conv_layers_do_not_move() {
        let mut r = rng();
        let mut net = MDNet::<f32>::new(MDNetConfig::desk(1), &mut r).unwrap();
        net.set_trainable(&LayerId::FULLY_CONNECTED);
        assert_eq!(net.trainable_layers(), LayerId::FULLY_CONNECTED.to_vec());
        let before = net.conv_checksum();
        let fc_before = net.fc4.checksum();
        let x = random_patches(4, &mut r);
        for _ in 0..10 {
            net.accumulate_gradients(&x, Stage::Patches, &[0, 1, 1, 0], 0, &mut r)
                .unwrap();
            net.sgd_step(0, 0.01, 0.9, 0.0005).unwrap();
        }
        assert_eq!(before, net.conv_checksum());
        assert_ne!(fc_before, net.fc4.checksum());

        net.set_trainable(&LayerId::ALL);
        let sums: Vec<u64> = net.groups().map(|g| g.checksum()).collect();
        net.accumulate_gradients(&x, Stage::Patches, &[0, 1, 1, 0], 0, &mut r)
            .unwrap();
        net.sgd_step(0, 0.01, 0.9, 0.0005).unwrap();
        for (g, s) in net.groups().zip(sums) {
            assert_ne!(g.checksum(), s, "{}", g.name);
        }
    }
}
