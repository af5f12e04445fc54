//! Graph network simulator: node/edge encoders, a per-particle geometry
//! patch encoder, residual message passing and a velocity decoder.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    load_checkpoint, save_checkpoint, AdamW, Conv3d, CosineSchedule, Linear, Mlp, ParamStore, Tape, Tensor, Var,
};
use crate::coupling::condition_patches;
use crate::error::{Error, Result};
use crate::graph::{Edge, Features, FlowGraph, NormStats, EDGE_FEATURES, NODE_FEATURES};
use crate::grids::{OccupancyField, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnsConfig {
    pub hidden: usize,
    pub layers: usize,
    pub mlp_hidden_layers: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub patch_size: usize,
    /// Average-pooling factor applied to each patch before the CNN.
    pub patch_pool: usize,
    pub image_channels: Vec<usize>,
    pub no_geometry: bool,
    /// Zero the absolute-position node features after normalisation.
    pub mask_absolute_positions: bool,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub t_max: u64,
    pub noise_std: f64,
}

impl Default for GnsConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 10,
            mlp_hidden_layers: 2,
            radius: 32.0,
            max_neighbors: 64,
            patch_size: 32,
            patch_pool: 2,
            image_channels: vec![8, 16, 32],
            no_geometry: false,
            mask_absolute_positions: false,
            lr: 5e-5,
            lr_min: 0.0,
            weight_decay: 5e-4,
            epochs: 600,
            t_max: 200,
            noise_std: 0.067,
        }
    }
}

impl GnsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gns: {m}")));
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden width and layer count must be positive");
        }
        if !(self.radius > 0.0) || self.max_neighbors == 0 {
            return bad("radius and max_neighbors must be positive");
        }
        if self.patch_pool == 0 || self.patch_size == 0 || self.patch_size % self.patch_pool != 0 {
            return bad("patch size must be a positive multiple of the pooling factor");
        }
        if self.image_channels.is_empty() || self.image_channels.contains(&0) {
            return bad("image encoder needs positive channel counts");
        }
        if !(self.noise_std >= 0.0) || !(self.lr > 0.0) || self.lr_min < 0.0 || self.weight_decay < 0.0 {
            return bad("learning rate, decay and noise must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr0: self.lr,
            lr_min: self.lr_min,
            t_max: self.t_max,
        }
    }

    fn mlp_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat(self.hidden).take(self.mlp_hidden_layers));
        s.push(output);
        s
    }
}

#[derive(Debug, Clone)]
struct ImageEncoder {
    convs: Vec<Conv3d>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Processor {
    edge: Mlp,
    node: Mlp,
}

/// One training example: positions at `t-1` and `t`, the velocity history
/// (most recent first), the target velocity at `t` and the interface at `t`.
#[derive(Debug, Clone)]
pub struct GnsSample {
    pub prev: Vec<Vec3>,
    pub cur: Vec<Vec3>,
    pub history: Vec<Vec<Vec3>>,
    pub target: Vec<Vec3>,
    pub interface: OccupancyField,
}

#[derive(Debug, Clone)]
pub struct GnsModel {
    pub config: GnsConfig,
    pub params: ParamStore,
    pub stats: Option<NormStats>,
    node_encoder: Mlp,
    edge_encoder: Mlp,
    image: Option<ImageEncoder>,
    processors: Vec<Processor>,
    decoder: Mlp,
}

impl GnsModel {
    pub fn new(config: GnsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let node_encoder = Mlp::new(&mut params, &mut rng, "gns.node_encoder", &config.mlp_sizes(NODE_FEATURES, h))?;
        let edge_encoder = Mlp::new(&mut params, &mut rng, "gns.edge_encoder", &config.mlp_sizes(EDGE_FEATURES, h))?;
        let image = if config.no_geometry {
            None
        } else {
            let mut convs = Vec::new();
            let mut cin = 2;
            for (i, &c) in config.image_channels.iter().enumerate() {
                convs.push(Conv3d::new(&mut params, &mut rng, &format!("gns.image.conv{i}"), cin, c, 3, 2, 1)?);
                cin = c;
            }
            let head = Linear::new(&mut params, &mut rng, "gns.image.head", cin, h)?;
            Some(ImageEncoder { convs, head })
        };
        let processors = (0..config.layers)
            .map(|l| {
                Ok(Processor {
                    edge: Mlp::new(&mut params, &mut rng, &format!("gns.processor{l}.edge"), &config.mlp_sizes(3 * h, h))?,
                    node: Mlp::new(&mut params, &mut rng, &format!("gns.processor{l}.node"), &config.mlp_sizes(2 * h, h))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Mlp::new(&mut params, &mut rng, "gns.decoder", &config.mlp_sizes(h, 3))?;
        // keep the summed residual updates near unit scale at initialisation
        let f = 1.0 / ((config.layers * config.max_neighbors) as f64).sqrt();
        for p in &processors {
            p.edge.scale_output(&mut params, f);
            p.node.scale_output(&mut params, f);
        }
        Ok(Self {
            config,
            params,
            stats: None,
            node_encoder,
            edge_encoder,
            image,
            processors,
            decoder,
        })
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Config("GNS normalisation statistics are not set".into()))
    }

    /// Sets every decoder weight and bias to zero.
    pub fn zero_decoder(&mut self) {
        for l in &self.decoder.layers {
            for id in [l.weight, l.bias] {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn build_graph(&self, prev: &[Vec3], cur: &[Vec3], history: &[Vec<Vec3>]) -> Result<FlowGraph> {
        FlowGraph::build(prev, cur, history, self.config.radius, self.config.max_neighbors)
    }

    /// Pooled `[N, 2, s, s, s]` geometry/interface patches, or `None` when
    /// the geometry branch is ablated.
    pub fn image_batch(
        &self,
        geometry: &OccupancyField,
        interface: &OccupancyField,
        positions: &[Vec3],
    ) -> Result<Option<Tensor>> {
        if self.image.is_none() {
            return Ok(None);
        }
        let size = self.config.patch_size;
        let f = self.config.patch_pool;
        let s = size / f;
        let patches = condition_patches(geometry, interface, positions, size)?;
        let mut data = Vec::with_capacity(positions.len() * 2 * s * s * s);
        let inv = 1.0 / (f * f * f) as f64;
        for patch in &patches {
            for c in 0..2 {
                for z in 0..s {
                    for y in 0..s {
                        for x in 0..s {
                            let mut acc = 0.0;
                            for dz in 0..f {
                                for dy in 0..f {
                                    for dx in 0..f {
                                        acc += patch.get(c, x * f + dx, y * f + dy, z * f + dz);
                                    }
                                }
                            }
                            data.push(acc * inv);
                        }
                    }
                }
            }
        }
        Ok(Some(Tensor::new([positions.len(), 2, s, s, s], data)?))
    }

    fn normalized_inputs(&self, graph: &FlowGraph) -> Result<(Features, Features)> {
        let stats = self.stats()?;
        let mut node = stats.node.normalize(&graph.node_features);
        if self.config.mask_absolute_positions {
            for r in 0..node.rows {
                node.row_mut(r)[..6].fill(0.0);
            }
        }
        Ok((node, stats.edge.normalize(&graph.edge_features)))
    }

    /// Network body on already-normalised features; returns `[N, 3]`
    /// normalised velocities.
    pub fn forward_features(
        &self,
        tape: &Tape,
        node: Var,
        edge: Var,
        edges: &[Edge],
        image: Option<Var>,
    ) -> Result<Var> {
        let p = &self.params;
        let n = tape.shape(node)[0];
        let receivers: Rc<[usize]> = edges.iter().map(|e| e[0]).collect();
        let senders: Rc<[usize]> = edges.iter().map(|e| e[1]).collect();
        let mut h = self.node_encoder.forward(tape, p, node)?;
        let mut e = self.edge_encoder.forward(tape, p, edge)?;
        if let (Some(enc), Some(img)) = (&self.image, image) {
            let mut x = img;
            for conv in &enc.convs {
                x = tape.relu(conv.forward(tape, p, x)?);
            }
            let pooled = tape.global_avg_pool(x)?;
            let g = enc.head.forward(tape, p, pooled)?;
            h = tape.add(h, g)?;
        }
        for proc in &self.processors {
            let hi = tape.gather(h, receivers.clone())?;
            let hj = tape.gather(h, senders.clone())?;
            let cat = tape.concat(&[e, hi, hj], 1)?;
            let de = proc.edge.forward(tape, p, cat)?;
            e = tape.add(e, de)?;
            let agg = tape.segment_sum(e, receivers.clone(), n)?;
            let cat = tape.concat(&[h, agg], 1)?;
            let dh = proc.node.forward(tape, p, cat)?;
            h = tape.add(h, dh)?;
        }
        self.decoder.forward(tape, p, h)
    }

    /// Normalised `[N, 3]` prediction on the tape.
    pub fn forward_tape(&self, tape: &Tape, graph: &FlowGraph, image: Option<Tensor>) -> Result<Var> {
        let (node, edge) = self.normalized_inputs(graph)?;
        let node = tape.constant(Tensor::new([node.rows, node.cols], node.data)?);
        let edge = tape.constant(Tensor::new([edge.rows, edge.cols], edge.data)?);
        let image = image.map(|t| tape.constant(t));
        self.forward_features(tape, node, edge, &graph.edge_index, image)
    }

    /// Velocities in voxels per frame.
    pub fn predict(&self, graph: &FlowGraph, geometry: &OccupancyField, interface: &OccupancyField) -> Result<Vec<Vec3>> {
        let image = self.image_batch(geometry, interface, &graph.node_positions)?;
        let tape = Tape::new();
        let out = self.forward_tape(&tape, graph, image)?;
        let stats = self.stats()?;
        let value = tape.value(out);
        Ok(value
            .data()
            .chunks(3)
            .map(|row| {
                let mut v = [row[0], row[1], row[2]];
                stats.velocity.denormalize_row(&mut v);
                v
            })
            .collect())
    }

    fn normalized_target(&self, target: &[Vec3]) -> Result<Vec<f64>> {
        let stats = self.stats()?;
        Ok(target
            .iter()
            .flat_map(|v| {
                let mut v = *v;
                stats.velocity.normalize_row(&mut v);
                v
            })
            .collect())
    }

    /// One-step loss in normalised velocity space. Noise, when given,
    /// perturbs the position frames `t-C-1 ..= t`; the two input frames
    /// and the central-difference history are rebuilt from them. The
    /// target is never touched.
    pub fn sample_loss(
        &self,
        tape: &Tape,
        sample: &GnsSample,
        geometry: &OccupancyField,
        noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        let (prev, cur, history) = match noise {
            Some((rng, std)) if std > 0.0 => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let n = sample.cur.len();
                // offsets[k] perturbs frame t - k
                let offsets: Vec<Vec<Vec3>> = (0..sample.history.len() + 2)
                    .map(|_| (0..n).map(|_| [d.sample(rng), d.sample(rng), d.sample(rng)]).collect())
                    .collect();
                let shift = |ps: &[Vec3], off: &[Vec3]| -> Vec<Vec3> {
                    ps.iter().zip(off).map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]]).collect()
                };
                let history = sample
                    .history
                    .iter()
                    .enumerate()
                    .map(|(j, vs)| {
                        // v(t-1-j) spans frames t-j and t-2-j
                        let (a, b) = (&offsets[j], &offsets[j + 2]);
                        vs.iter()
                            .zip(a.iter().zip(b))
                            .map(|(v, (oa, ob))| {
                                [
                                    v[0] + 0.5 * (oa[0] - ob[0]),
                                    v[1] + 0.5 * (oa[1] - ob[1]),
                                    v[2] + 0.5 * (oa[2] - ob[2]),
                                ]
                            })
                            .collect()
                    })
                    .collect();
                (shift(&sample.prev, &offsets[1]), shift(&sample.cur, &offsets[0]), history)
            }
            _ => (sample.prev.clone(), sample.cur.clone(), sample.history.clone()),
        };
        let graph = self.build_graph(&prev, &cur, &history)?;
        let image = self.image_batch(geometry, &sample.interface, &cur)?;
        let out = self.forward_tape(tape, &graph, image)?;
        tape.mse_loss(out, &self.normalized_target(&sample.target)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "gns",
            "config": self.config,
            "stats": self.stats()?,
        });
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("gns") {
            return Err(Error::format(path, "not a GNS checkpoint"));
        }
        let config: GnsConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(path, format!("config: {e}")))?;
        let stats: NormStats =
            serde_json::from_value(meta["stats"].clone()).map_err(|e| Error::format(path, format!("stats: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&store)?;
        model.stats = Some(stats);
        Ok(model)
    }
}

/// Optimiser state bound to one model.
pub struct GnsTrainer {
    pub model: GnsModel,
    opt: AdamW,
    rng: ChaCha8Rng,
}

impl GnsTrainer {
    pub fn new(model: GnsModel, seed: u64) -> Self {
        let opt = AdamW::new(&model.params, model.config.weight_decay);
        Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Noisy one-step loss, backward pass and AdamW update; returns the loss.
    pub fn train_step(&mut self, sample: &GnsSample, geometry: &OccupancyField, lr: f64) -> Result<f64> {
        let std = self.model.config.noise_std;
        let tape = Tape::new();
        let loss = self.model.sample_loss(&tape, sample, geometry, Some((&mut self.rng, std)))?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.param_grads(&self.model.params);
        self.opt.step(&mut self.model.params, &grads, lr);
        Ok(value)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Central-difference position advance `p(t+1) = p(t-1) + 2 v̂(t)`.
pub fn update_positions(prev: &[Vec3], v_hat: &[Vec3]) -> Result<Vec<Vec3>> {
    if prev.len() != v_hat.len() {
        return Err(Error::Shape(format!("{} positions vs {} velocities", prev.len(), v_hat.len())));
    }
    Ok(prev
        .iter()
        .zip(v_hat)
        .map(|(p, v)| [p[0] + 2.0 * v[0], p[1] + 2.0 * v[1], p[2] + 2.0 * v[2]])
        .collect())
}
