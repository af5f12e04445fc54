//! Layers built from tape operations. Each layer owns parameter ids into a
//! shared [`ParamStore`].

use rand::Rng;

use super::params::{he_uniform, ParamId, ParamStore};
use super::tape::{BnMode, BufferUpdate, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_uniform([fan_in, fan_out], fan_in, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), true)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Stack of linear layers with ReLU between them and none at the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, sizes: &[usize]) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Multiplies the output layer's weights by `factor`.
    pub fn scale_output(&self, store: &mut ParamStore, factor: f64) {
        if let Some(l) = self.layers.last() {
            for w in store.get_mut(l.weight).data_mut() {
                *w *= factor;
            }
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k * k;
        let weight = store.add(format!("{name}.weight"), he_uniform([cout, cin, k, k, k], fan_in, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose3d {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_uniform([cin, cout, 2, 2, 2], cin * 8, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose3d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let ones = || Tensor::new([channels], vec![1.0; channels]).expect("shape");
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ones(), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), ones(), false)?,
        })
    }

    /// In training mode the batch statistics are queued on the tape as a
    /// running-average update.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        if training {
            let (y, stats) = tape.batchnorm3d(x, g, b, BnMode::Train, None)?;
            if let Some((batch_mean, batch_var)) = stats {
                tape.record_buffer_update(BufferUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean,
                    batch_var,
                });
            }
            Ok(y)
        } else {
            let rm = store.get(self.running_mean).data();
            let rv = store.get(self.running_var).data();
            Ok(tape.batchnorm3d(x, g, b, BnMode::Eval, Some((rm, rv)))?.0)
        }
    }
}
