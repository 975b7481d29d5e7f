use rand::Rng;

use super::VapaadConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, conv3d_head, convlstm_sequence, draw_angle, rotate_batch, self_attention,
    AttentionParams, BatchNormParams, BatchStats, ConvLstmParams, HeadParams, Mode,
};
use crate::tensor::Tensor;
use crate::Scalar;

/// One `ConvLSTM → batch norm → self-attention` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub convlstm: ConvLstmParams<T>,
    pub norm: BatchNormParams<T>,
    /// Absent in the attention-free ablation.
    pub attention: Option<AttentionParams<T>>,
}

/// The generator: stacked blocks followed by the Conv3D sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct VapaadModel<T: Scalar> {
    config: VapaadConfig,
    pub blocks: Vec<Block<T>>,
    pub head: HeadParams<T>,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward<'t, T: Scalar> {
    /// `(B, T, 1, H, W)` frame probabilities.
    pub output: Var<'t, T>,
    /// Tape handles of every parameter, in [`VapaadModel::named_params`]
    /// order.
    pub params: Vec<Var<'t, T>>,
    /// One entry per block in train mode, empty in infer mode.
    pub batch_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> VapaadModel<T> {
    /// Glorot-uniform kernels, zero biases, `γ = 1`, `β = 0`, running
    /// statistics mean 0 / variance 1.
    pub fn build(config: VapaadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(config.blocks);
        for (&f, &k) in config.filters.iter().zip(&config.kernels) {
            let convlstm = ConvLstmParams::glorot(c_in, f, k, rng);
            let mut norm = BatchNormParams::new(f);
            norm.init_running_stats();
            let attention = config.attention.then(|| {
                let mut a = AttentionParams::glorot(f, rng);
                a.stop_qk_gradient = config.stop_grad;
                a
            });
            blocks.push(Block {
                convlstm,
                norm,
                attention,
            });
            c_in = f;
        }
        let head = HeadParams::glorot(c_in, rng);
        Ok(Self {
            config,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &VapaadConfig {
        &self.config
    }

    /// Switches the stop-gradient variant on or off in every block.
    pub fn set_stop_grad(&mut self, on: bool) {
        self.config.stop_grad = on;
        for a in self.blocks.iter_mut().filter_map(|b| b.attention.as_mut()) {
            a.stop_qk_gradient = on;
        }
    }

    /// Every trainable tensor exactly once, with stable dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.convlstm.named_params() {
                out.push((format!("block{i}.convlstm.{n}"), t));
            }
            for (n, t) in b.norm.named_params() {
                out.push((format!("block{i}.norm.{n}"), t));
            }
            if let Some(a) = &b.attention {
                for (n, t) in a.named_params() {
                    out.push((format!("block{i}.attention.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.named_params() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.convlstm.named_params_mut() {
                out.push((format!("block{i}.convlstm.{n}"), t));
            }
            for (n, t) in b.norm.named_params_mut() {
                out.push((format!("block{i}.norm.{n}"), t));
            }
            if let Some(a) = &mut b.attention {
                for (n, t) in a.named_params_mut() {
                    out.push((format!("block{i}.attention.{n}"), t));
                }
            }
        }
        for (n, t) in self.head.named_params_mut() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.norm.named_buffers() {
                out.push((format!("block{i}.norm.{n}"), t));
            }
        }
        out
    }

    /// Replaces the running statistic called `name` (as listed by
    /// [`named_buffers`](Self::named_buffers)).
    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let (block, field) = name
            .strip_prefix("block")
            .and_then(|s| s.split_once(".norm."))
            .ok_or_else(|| Error::invalid(format!("unknown buffer `{name}`")))?;
        let i: usize = block
            .parse()
            .map_err(|_| Error::invalid(format!("unknown buffer `{name}`")))?;
        let norm = &mut self
            .blocks
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("unknown buffer `{name}`")))?
            .norm;
        if value.shape() != [norm.channels()] {
            return Err(Error::shape(format!(
                "buffer `{name}` expects {} channels, got {:?}",
                norm.channels(),
                value.shape()
            )));
        }
        match field {
            "running_mean" => norm.running_mean = Some(value),
            "running_var" => norm.running_var = Some(value),
            _ => return Err(Error::invalid(format!("unknown buffer `{name}`"))),
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.config.frame_size;
        match *shape {
            [b, t, 1, hh, ww] if b > 0 && t > 0 && hh == h && ww == w => Ok(()),
            _ => Err(Error::shape(format!(
                "model expects (B, T, 1, {h}, {w}) input, got {shape:?}"
            ))),
        }
    }

    /// Records a forward pass of `x: (B, T, 1, H, W)` on `tape`.
    ///
    /// Train mode rotates each input sequence by its own random angle and
    /// normalizes with batch statistics; infer mode consumes no randomness.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward<'t, T>> {
        self.forward_impl(tape, None, x, mode, rng)
    }

    /// Like [`forward_on_tape`](Self::forward_on_tape), but with the
    /// parameters taken from `params` (in [`named_params`](Self::named_params)
    /// order) instead of the model's own tensors.
    pub fn forward_with_params<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        x: Var<'t, T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward<'t, T>> {
        let expected = self.named_params().len();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "{} parameter handles for a model with {expected}",
                params.len()
            )));
        }
        for ((name, t), v) in self.named_params().into_iter().zip(params) {
            if t.shape() != v.shape().as_slice() {
                return Err(Error::shape(format!(
                    "handle for {name} is {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
        }
        self.forward_impl(tape, Some(params), x, mode, rng)
    }

    fn forward_impl<'t>(
        &self,
        tape: &'t Tape<T>,
        supplied: Option<&[Var<'t, T>]>,
        x: Var<'t, T>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward<'t, T>> {
        self.check_input(&x.shape())?;
        let mut supplied = supplied.map(|s| s.iter().copied());
        let mut pick = |v: &mut Var<'t, T>| {
            if let Some(next) = supplied.as_mut().and_then(|it| it.next()) {
                *v = next;
            }
        };
        let batch = x.shape()[0];
        let max_deg = self.config.max_rotation_deg;
        let augment = mode == Mode::Train && max_deg > 0.0;
        let mut rotate = |h: Var<'t, T>| -> Result<Var<'t, T>> {
            let angles: Vec<f64> = (0..batch).map(|_| draw_angle(max_deg, rng)).collect();
            rotate_batch(h, &angles)
        };

        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        // internal layout is (T, B, C, H, W)
        let mut h = x.swap01()?;
        if augment {
            h = rotate(h)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if augment && i > 0 && self.config.interior_augmentation {
                h = rotate(h)?;
            }
            let mut lstm = block.convlstm.bind(tape);
            for v in [
                &mut lstm.w_xi,
                &mut lstm.w_xf,
                &mut lstm.w_xc,
                &mut lstm.w_xo,
                &mut lstm.w_hi,
                &mut lstm.w_hf,
                &mut lstm.w_hc,
                &mut lstm.w_ho,
                &mut lstm.b_i,
                &mut lstm.b_f,
                &mut lstm.b_c,
                &mut lstm.b_o,
            ] {
                pick(v);
            }
            let mut norm = block.norm.bind(tape);
            pick(&mut norm.gamma);
            pick(&mut norm.beta);
            params.extend(lstm.vars());
            params.extend(norm.vars());
            h = convlstm_sequence(h, &lstm)?;
            let (normed, stats) = batchnorm(h, &norm, mode)?;
            h = normed;
            batch_stats.extend(stats);
            if let Some(a) = &block.attention {
                let mut att = a.bind(tape);
                pick(&mut att.w_q);
                pick(&mut att.w_k);
                pick(&mut att.w_v);
                params.extend(att.vars());
                h = self_attention(h, &att)?;
            }
        }
        let (mut k, mut b) = self.head.bind(tape);
        pick(&mut k);
        pick(&mut b);
        params.extend([k, b]);
        let output = conv3d_head(h, k, b)?.swap01()?;
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "{} batch statistics for {} blocks",
                stats.len(),
                self.blocks.len()
            )));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.norm.update_running(s)?;
        }
        Ok(())
    }

    /// Forward pass without gradient recording.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let out = self.forward_on_tape(&tape, tape.constant(x.clone()), mode, rng)?;
        let value = out.output.value().clone();
        Ok(value)
    }

    /// Deterministic inference-mode forward pass.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, Mode::Infer, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Closed-loop generation from `(T0, 1, H, W)` seed frames: each step runs
    /// the model on the context, appends its last predicted frame and repeats.
    /// Returns the `horizon` generated frames as `(horizon, 1, H, W)`.
    pub fn rollout(&self, seed_frames: &Tensor<T>, horizon: usize) -> Result<Tensor<T>> {
        if horizon == 0 {
            return Err(Error::invalid("rollout horizon must be at least 1"));
        }
        let shape = seed_frames.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::shape(format!(
                "rollout seed must be (T0, 1, H, W), got {shape:?}"
            )));
        }
        let frame_shape = shape[1..].to_vec();
        let mut frames: Vec<Tensor<T>> = (0..shape[0])
            .map(|t| seed_frames.slice0(t, 1)?.reshape(frame_shape.clone()))
            .collect::<Result<_>>()?;
        let mut generated = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let len = frames.len();
            let mut context_shape = vec![1, len];
            context_shape.extend(&frame_shape);
            let context = Tensor::stack(&frames)?.reshape(context_shape)?;
            let pred = self.predict(&context)?;
            let last = pred
                .reshape(
                    vec![len]
                        .into_iter()
                        .chain(frame_shape.iter().copied())
                        .collect::<Vec<_>>(),
                )?
                .slice0(len - 1, 1)?
                .reshape(frame_shape.clone())?;
            frames.push(last.clone());
            generated.push(last);
        }
        Tensor::stack(&generated)
    }
}
