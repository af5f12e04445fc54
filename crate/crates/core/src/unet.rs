//! 3D U-Net mapping interface history, pooled velocity and geometry to
//! next-frame occupancy logits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamW, BatchNorm3d, Conv3d, ConvTranspose3d, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::grids::{OccupancyField, VoxelGrid};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Number of past interface fields in the input stack.
    pub history: usize,
    pub no_velocity: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            history: 2,
            no_velocity: false,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.history == 0 || self.batch_size == 0 {
            return Err(Error::Config("unet: depth, width, history and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("unet: learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.history + if self.no_velocity { 0 } else { 3 } + 1
    }

    /// Spatial multiple required by the pooling stack.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Unassembled network input; all fields share one (coarse) grid.
#[derive(Debug, Clone)]
pub struct UNetInput {
    /// Oldest first.
    pub history: Vec<OccupancyField>,
    /// Three velocity components.
    pub velocity: VoxelGrid,
    pub geometry: OccupancyField,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv3d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            bn1: BatchNorm3d::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv3d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            bn2: BatchNorm3d::new(store, &format!("{name}.bn2"), cout)?,
        })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let x = self.conv1.forward(tape, store, x)?;
        let x = tape.relu(self.bn1.forward(tape, store, x, training)?);
        let x = self.conv2.forward(tape, store, x)?;
        Ok(tape.relu(self.bn2.forward(tape, store, x, training)?))
    }

    fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.conv2.weight).shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub params: ParamStore,
    /// Multiplier applied to the velocity channels during assembly.
    pub velocity_scale: f64,
    stem: DoubleConv,
    down: Vec<DoubleConv>,
    up: Vec<(ConvTranspose3d, DoubleConv)>,
    head: Conv3d,
}

impl UNetModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let width = |k: usize| config.base_channels << k;
        let stem = DoubleConv::new(&mut params, &mut rng, "unet.enc0", config.input_channels(), width(0))?;
        let down = (1..=config.depth)
            .map(|k| DoubleConv::new(&mut params, &mut rng, &format!("unet.enc{k}"), width(k - 1), width(k)))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..config.depth)
            .rev()
            .map(|k| {
                let t = ConvTranspose3d::new(&mut params, &mut rng, &format!("unet.up{k}"), width(k + 1), width(k))?;
                let d = DoubleConv::new(&mut params, &mut rng, &format!("unet.dec{k}"), 2 * width(k), width(k))?;
                Ok((t, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv3d::new(&mut params, &mut rng, "unet.head", width(0), 1, 1, 1, 0)?;
        Ok(Self {
            config,
            params,
            velocity_scale: 1.0,
            stem,
            down,
            up,
            head,
        })
    }

    /// Output channels of each encoder level, shallowest first.
    pub fn encoder_channels(&self) -> Vec<usize> {
        std::iter::once(&self.stem)
            .chain(&self.down)
            .map(|d| d.out_channels(&self.params))
            .collect()
    }

    pub fn zero_head(&mut self, bias: f64) {
        self.params.get_mut(self.head.weight).data_mut().fill(0.0);
        self.params.get_mut(self.head.bias).data_mut().fill(bias);
    }

    /// Stacks `[S oldest..newest, Vx, Vy, Vz, G]` (velocity omitted when
    /// ablated).
    pub fn assemble(&self, input: &UNetInput) -> Result<VoxelGrid> {
        let dims = input.geometry.dims();
        if input.history.len() != self.config.history {
            return Err(Error::Shape(format!(
                "expected {} interface fields, got {}",
                self.config.history,
                input.history.len()
            )));
        }
        if input.velocity.channels() != 3 {
            return Err(Error::Shape("velocity input needs 3 channels".into()));
        }
        if input.history.iter().any(|s| s.dims() != dims) || input.velocity.dims() != dims {
            return Err(Error::Shape("input fields disagree on grid dims".into()));
        }
        let mut parts: Vec<VoxelGrid> = input.history.iter().map(|s| s.grid().clone()).collect();
        if !self.config.no_velocity {
            let mut v = input.velocity.clone();
            v.data_mut().iter_mut().for_each(|x| *x *= self.velocity_scale);
            parts.push(v);
        }
        parts.push(input.geometry.grid().clone());
        VoxelGrid::stack(&parts.iter().collect::<Vec<_>>())
    }

    /// Zero-pads assembled grids to the pooling multiple and batches them.
    fn batch_tensor(&self, grids: &[VoxelGrid]) -> Result<(Tensor, [usize; 3])> {
        let first = grids.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let dims = first.dims();
        let c = first.channels();
        if grids.iter().any(|g| g.dims() != dims || g.channels() != c) {
            return Err(Error::Shape("batch members differ in shape".into()));
        }
        let m = self.config.multiple();
        let p = dims.map(|d| d.div_ceil(m) * m);
        let mut data = vec![0.0; grids.len() * c * p[0] * p[1] * p[2]];
        let plane = p[0] * p[1] * p[2];
        for (b, g) in grids.iter().enumerate() {
            for ch in 0..c {
                let src = g.channel(ch);
                let base = (b * c + ch) * plane;
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        let s = (z * dims[1] + y) * dims[0];
                        let d = base + (z * p[1] + y) * p[0];
                        data[d..d + dims[0]].copy_from_slice(&src[s..s + dims[0]]);
                    }
                }
            }
        }
        Ok((Tensor::new([grids.len(), c, p[2], p[1], p[0]], data)?, dims))
    }

    fn crop(&self, padded: &[f64], batch: usize, dims: [usize; 3]) -> Vec<VoxelGrid> {
        let m = self.config.multiple();
        let p = dims.map(|d| d.div_ceil(m) * m);
        let plane = p[0] * p[1] * p[2];
        (0..batch)
            .map(|b| {
                let mut out = Vec::with_capacity(dims.iter().product());
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        let s = b * plane + (z * p[1] + y) * p[0];
                        out.extend_from_slice(&padded[s..s + dims[0]]);
                    }
                }
                VoxelGrid::from_vec(dims, 1, out).expect("cropped size matches dims")
            })
            .collect()
    }

    /// Logits `[B, 1, ...]` for a padded batch.
    pub fn forward_tape(&self, tape: &Tape, x: Var, training: bool) -> Result<Var> {
        let shape = tape.shape(x);
        let m = self.config.multiple();
        if shape.len() != 5 || shape[2..].iter().any(|d| d % m != 0) {
            return Err(Error::Shape(format!("U-Net input {shape:?} not divisible by {m}")));
        }
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = self.stem.forward(tape, p, x, training)?;
        for level in &self.down {
            skips.push(h);
            let pooled = tape.maxpool3d(h)?;
            h = level.forward(tape, p, pooled, training)?;
        }
        for (t, block) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = t.forward(tape, p, h)?;
            let cat = tape.concat(&[skip, u], 1)?;
            h = block.forward(tape, p, cat, training)?;
        }
        self.head.forward(tape, p, h)
    }

    /// Eval-mode logits on the input grid.
    pub fn logits(&self, input: &UNetInput) -> Result<VoxelGrid> {
        let grid = self.assemble(input)?;
        let (t, dims) = self.batch_tensor(std::slice::from_ref(&grid))?;
        let tape = Tape::new();
        let x = tape.constant(t);
        let out = self.forward_tape(&tape, x, false)?;
        let value = tape.value(out);
        Ok(self.crop(value.data(), 1, dims).remove(0))
    }

    pub fn predict(&self, input: &UNetInput) -> Result<OccupancyField> {
        Ok(binarize(&self.logits(input)?))
    }

    /// Mean BCE over a batch in training mode, with batch-norm updates
    /// queued on the tape.
    pub fn batch_loss(&self, tape: &Tape, inputs: &[UNetInput], targets: &[&VoxelGrid]) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape("inputs and targets differ in count".into()));
        }
        let grids = inputs.iter().map(|i| self.assemble(i)).collect::<Result<Vec<_>>>()?;
        let (t, dims) = self.batch_tensor(&grids)?;
        for target in targets {
            if target.dims() != dims || target.channels() != 1 {
                return Err(Error::Shape("target does not match input grid".into()));
            }
            if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Input("target occupancy must be binary".into()));
            }
        }
        let x = tape.constant(t);
        let logits = self.forward_tape(tape, x, true)?;
        // padded voxels are excluded from the loss by cropping first
        let shape = tape.shape(logits);
        let cropped = crop_var(tape, logits, &shape, dims)?;
        let y: Vec<f64> = targets.iter().flat_map(|t| t.data().iter().copied()).collect();
        tape.bce_with_logits(cropped, &y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "unet",
            "config": self.config,
            "velocity_scale": self.velocity_scale,
            "channel_order": self.channel_order(),
        });
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("unet") {
            return Err(Error::format(path, "not a U-Net checkpoint"));
        }
        let config: UNetConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(path, format!("config: {e}")))?;
        let scale = meta["velocity_scale"]
            .as_f64()
            .ok_or_else(|| Error::format(path, "missing velocity scale"))?;
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&store)?;
        model.velocity_scale = scale;
        Ok(model)
    }

    pub fn channel_order(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.config.history)
            .map(|k| format!("S(t-{})", self.config.history - 1 - k))
            .collect();
        if !self.config.no_velocity {
            names.extend(["Vx", "Vy", "Vz"].map(String::from));
        }
        names.push("G".into());
        names
    }
}

fn crop_var(tape: &Tape, v: Var, shape: &[usize], dims: [usize; 3]) -> Result<Var> {
    let mut v = v;
    if shape[2] != dims[2] {
        v = tape.slice(v, 2, 0, dims[2])?;
    }
    if shape[3] != dims[1] {
        v = tape.slice(v, 3, 0, dims[1])?;
    }
    if shape[4] != dims[0] {
        v = tape.slice(v, 4, 0, dims[0])?;
    }
    Ok(v)
}

/// Logit `>= 0` is occupied.
pub fn binarize(logits: &VoxelGrid) -> OccupancyField {
    let values: Vec<bool> = logits.channel(0).iter().map(|&z| z >= 0.0).collect();
    OccupancyField::from_bools(logits.dims(), &values).expect("sizes agree")
}

pub struct UNetTrainer {
    pub model: UNetModel,
    opt: AdamW,
}

impl UNetTrainer {
    pub fn new(model: UNetModel) -> Self {
        let opt = AdamW::new(&model.params, model.config.weight_decay);
        Self { model, opt }
    }

    pub fn train_step(&mut self, inputs: &[UNetInput], targets: &[&VoxelGrid], lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.model.batch_loss(&tape, inputs, targets)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.param_grads(&self.model.params);
        self.opt.step(&mut self.model.params, &grads, lr);
        let ups = tape.take_buffer_updates();
        self.model.params.apply_buffer_updates(&ups, BN_MOMENTUM);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_boundary_and_sign() {
        let g = VoxelGrid::from_vec([3, 1, 1], 1, vec![0.0, -3.0, 2.5]).unwrap();
        let b = binarize(&g);
        assert!(b.is_set(0, 0, 0));
        assert!(!b.is_set(1, 0, 0));
        assert!(b.is_set(2, 0, 0));
    }

    #[test]
    fn channel_counts() {
        let full = UNetConfig::default();
        assert_eq!(full.input_channels(), 6);
        let ablated = UNetConfig { no_velocity: true, ..full };
        assert_eq!(ablated.input_channels(), 3);
    }

    #[test]
    fn channel_order_names() {
        let m = UNetModel::new(UNetConfig { base_channels: 2, depth: 1, ..Default::default() }, 0).unwrap();
        assert_eq!(m.channel_order(), ["S(t-1)", "S(t-0)", "Vx", "Vy", "Vz", "G"]);
    }
}
