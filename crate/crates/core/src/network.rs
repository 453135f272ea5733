//! The two-input encoder-decoder network.
//!
//! The encoder sees two stems: one over the medical image and one over the
//! interim segmentation map. Their feature maps are concatenated in front
//! of encoder stage 1 (the copy connection). The interim stem also feeds a
//! shallow branch (max-pool plus two convolutions) whose output joins the
//! encoder at every configured merge point past stage 1. Each encoder
//! stage is two 3x3 convolutions with ReLU followed by a 2x2 max-pool,
//! doubling channels as resolution halves. The decoder mirrors this with
//! stride-2 transposed convolutions, concatenating each encoder stage's
//! pre-pool feature map (skip connection) before two more convolutions.
//! A 1x1 convolution with sigmoid produces the single-channel map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

const CHECKPOINT_MAGIC: [u8; 4] = *b"ISEG";
const CHECKPOINT_VERSION: u16 = 1;

/// Structural hyperparameters; everything else about the topology is fixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Number of encoder pooling stages.
    pub stages: usize,
    /// Channel count of the first stage; doubles per stage.
    pub base_channels: usize,
    /// Encoder stages whose input receives interim-segmentation features.
    /// Stage 1 means the stem copy connection; later stages concatenate the
    /// interim branch output (downsampled to the matching resolution).
    pub merge_points: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 256,
            input_width: 320,
            stages: 4,
            base_channels: 16,
            merge_points: vec![1, 2],
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and experiments on synthetic data.
    pub fn desk_scale() -> Self {
        NetworkConfig {
            input_height: 64,
            input_width: 80,
            stages: 2,
            base_channels: 8,
            merge_points: vec![1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        let div = 1usize << self.stages;
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^stages = {div}",
                self.input_height, self.input_width
            )));
        }
        if self.merge_points.is_empty() {
            return Err(Error::Config("merge_points must not be empty".into()));
        }
        if !self.merge_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "merge_points must be strictly increasing, got {:?}",
                self.merge_points
            )));
        }
        if self.merge_points[0] == 0 || *self.merge_points.last().unwrap() > self.stages {
            return Err(Error::Config(format!(
                "merge_points must lie in 1..={}, got {:?}",
                self.stages, self.merge_points
            )));
        }
        Ok(())
    }

    /// Channels produced by encoder stage `s` (1-based).
    fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.stages
    }

    fn has_branch(&self) -> bool {
        self.merge_points.iter().any(|&m| m > 1)
    }

    fn encoder_input_channels(&self, s: usize) -> usize {
        let merged = self.merge_points.contains(&s);
        if s == 1 {
            if merged {
                2 * self.base_channels
            } else {
                self.base_channels
            }
        } else {
            self.stage_channels(s - 1) + if merged { self.base_channels } else { 0 }
        }
    }

    pub fn pixels(&self) -> usize {
        self.input_height * self.input_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv { k: usize },
    Deconv,
}

#[derive(Clone, Debug)]
struct LayerSpec {
    name: String,
    kind: LayerKind,
    c_in: usize,
    c_out: usize,
}

/// Topology-ordered layer list, shared by `build`, `forward` and the
/// checkpoint code so they cannot drift apart.
fn layer_specs(config: &NetworkConfig) -> Vec<LayerSpec> {
    let conv3 = |name: &str, c_in, c_out| LayerSpec {
        name: name.to_string(),
        kind: LayerKind::Conv { k: 3 },
        c_in,
        c_out,
    };
    let base = config.base_channels;
    let mut specs = vec![conv3("stem_img", 1, base), conv3("stem_seg", 1, base)];
    if config.has_branch() {
        specs.push(conv3("branch_conv1", base, base));
        specs.push(conv3("branch_conv2", base, base));
    }
    for s in 1..=config.stages {
        let c = config.stage_channels(s);
        specs.push(conv3(
            &format!("enc{s}_conv1"),
            config.encoder_input_channels(s),
            c,
        ));
        specs.push(conv3(&format!("enc{s}_conv2"), c, c));
    }
    let bott = config.bottleneck_channels();
    specs.push(conv3(
        "bottleneck_conv1",
        config.stage_channels(config.stages),
        bott,
    ));
    specs.push(conv3("bottleneck_conv2", bott, bott));
    for s in (1..=config.stages).rev() {
        let c = config.stage_channels(s);
        let c_in = if s == config.stages {
            bott
        } else {
            config.stage_channels(s + 1)
        };
        specs.push(LayerSpec {
            name: format!("dec{s}_up"),
            kind: LayerKind::Deconv,
            c_in,
            c_out: c,
        });
        specs.push(conv3(&format!("dec{s}_conv1"), 2 * c, c));
        specs.push(conv3(&format!("dec{s}_conv2"), c, c));
    }
    specs.push(LayerSpec {
        name: "head".to_string(),
        kind: LayerKind::Conv { k: 1 },
        c_in: base,
        c_out: 1,
    });
    specs
}

/// Kernel, bias and per-tensor optimizer state for one layer. The
/// velocity buffers double as SGD momentum or Adam's first moment; the
/// second-moment buffers are only touched by Adam.
#[derive(Clone, Debug)]
pub struct LayerParams<S: Scalar = f32> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
    pub kernel_velocity: Tensor<S>,
    pub bias_velocity: Tensor<S>,
    pub kernel_second_moment: Tensor<S>,
    pub bias_second_moment: Tensor<S>,
}

/// All learnable tensors of one network, in topology order.
#[derive(Clone, Debug)]
pub struct ParameterSet<S: Scalar = f32> {
    config: NetworkConfig,
    layers: Vec<(String, LayerParams<S>)>,
    /// Optimizer steps taken so far (Adam bias correction).
    pub step_count: u64,
}

/// Node handles of one parameter set bound into a graph.
pub struct GraphBinding {
    nodes: Vec<(String, (NodeId, NodeId))>,
}

impl GraphBinding {
    pub fn layers(&self) -> impl Iterator<Item = (&str, (NodeId, NodeId))> {
        self.nodes.iter().map(|(n, ids)| (n.as_str(), *ids))
    }

    fn get(&self, name: &str) -> (NodeId, NodeId) {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ids)| *ids)
            .expect("binding contains every topology layer")
    }
}

impl<S: Scalar> ParameterSet<S> {
    /// Initializes all layers for `config`: He-uniform kernels, zero
    /// biases, zero momentum. The same seed reproduces the same tensors.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_specs(config)
            .into_iter()
            .map(|spec| {
                let k = match spec.kind {
                    LayerKind::Conv { k } => k,
                    LayerKind::Deconv => 3,
                };
                let fan_in = (spec.c_in * k * k) as f64;
                let limit = (6.0 / fan_in).sqrt();
                let data = (0..spec.c_out * spec.c_in * k * k)
                    .map(|_| S::from_f64(rng.random_range(-limit..limit)))
                    .collect();
                let kernel = Tensor::new(vec![spec.c_out, spec.c_in, k, k], data)
                    .expect("spec shapes are consistent");
                let params = LayerParams {
                    kernel_velocity: Tensor::zeros(kernel.shape().to_vec()),
                    kernel_second_moment: Tensor::zeros(kernel.shape().to_vec()),
                    bias: Tensor::zeros(vec![spec.c_out]),
                    bias_velocity: Tensor::zeros(vec![spec.c_out]),
                    bias_second_moment: Tensor::zeros(vec![spec.c_out]),
                    kernel,
                };
                (spec.name, params)
            })
            .collect();
        Ok(ParameterSet {
            config: config.clone(),
            layers,
            step_count: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams<S>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams<S>> {
        self.layers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, p)| p.kernel.numel() + p.bias.numel())
            .sum()
    }

    /// Registers every kernel/bias as a graph leaf. With `trainable` the
    /// leaves require gradients.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> GraphBinding {
        let nodes = self
            .layers
            .iter()
            .map(|(name, p)| {
                let kernel = if trainable {
                    p.kernel.clone().with_requires_grad()
                } else {
                    p.kernel.clone()
                };
                let bias = if trainable {
                    p.bias.clone().with_requires_grad()
                } else {
                    p.bias.clone()
                };
                (name.clone(), (graph.leaf(kernel), graph.leaf(bias)))
            })
            .collect();
        GraphBinding { nodes }
    }

    /// Wires one forward pass inside an existing graph. `image` and
    /// `interim` must already be graph nodes of shape `N x 1 x H x W`.
    pub fn forward_bound(
        &self,
        graph: &mut Graph<S>,
        binding: &GraphBinding,
        image: NodeId,
        interim: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let (_, ci, h, w) = graph.value(image).dims4()?;
        if ci != 1 || h != cfg.input_height || w != cfg.input_width {
            return Err(Error::Shape(format!(
                "image must be Nx1x{}x{}, got {:?}",
                cfg.input_height,
                cfg.input_width,
                graph.value(image).shape()
            )));
        }
        if graph.value(interim).shape() != graph.value(image).shape() {
            return Err(Error::Shape(format!(
                "interim map shape {:?} does not match image shape {:?}",
                graph.value(interim).shape(),
                graph.value(image).shape()
            )));
        }

        let conv_relu = |graph: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId> {
            let (k, b) = binding.get(name);
            let y = graph.conv2d(x, k, b)?;
            Ok(graph.relu(y))
        };

        let img_feat = conv_relu(graph, image, "stem_img")?;
        let seg_feat = conv_relu(graph, interim, "stem_seg")?;

        let branch = if cfg.has_branch() {
            let pooled = graph.maxpool2x2(seg_feat)?;
            let b1 = conv_relu(graph, pooled, "branch_conv1")?;
            Some(conv_relu(graph, b1, "branch_conv2")?)
        } else {
            None
        };

        let mut x = if cfg.merge_points.contains(&1) {
            graph.concat_channels(img_feat, seg_feat)?
        } else {
            img_feat
        };

        let mut skips = Vec::with_capacity(cfg.stages);
        for s in 1..=cfg.stages {
            if s > 1 && cfg.merge_points.contains(&s) {
                let mut feat = branch.expect("branch exists for merge points past stage 1");
                for _ in 0..s - 2 {
                    feat = graph.maxpool2x2(feat)?;
                }
                x = graph.concat_channels(x, feat)?;
            }
            x = conv_relu(graph, x, &format!("enc{s}_conv1"))?;
            x = conv_relu(graph, x, &format!("enc{s}_conv2"))?;
            skips.push(x);
            x = graph.maxpool2x2(x)?;
        }

        x = conv_relu(graph, x, "bottleneck_conv1")?;
        x = conv_relu(graph, x, "bottleneck_conv2")?;

        for s in (1..=cfg.stages).rev() {
            let (k, b) = binding.get(&format!("dec{s}_up"));
            let up = graph.conv_transpose2d(x, k, b)?;
            let up = graph.relu(up);
            x = graph.concat_channels(up, skips[s - 1])?;
            x = conv_relu(graph, x, &format!("dec{s}_conv1"))?;
            x = conv_relu(graph, x, &format!("dec{s}_conv2"))?;
        }

        let (hk, hb) = binding.get("head");
        let logits = graph.conv2d(x, hk, hb)?;
        Ok(graph.sigmoid(logits))
    }

    /// Single inference pass: `1 x 1 x H x W` image plus interim map in,
    /// segmentation map (iteration index advanced by one) out.
    pub fn forward(
        &self,
        image: &Tensor<S>,
        interim: &SegmentationMap<S>,
    ) -> Result<SegmentationMap<S>> {
        let mut graph = Graph::new();
        let binding = self.bind(&mut graph, false);
        let image_node = graph.constant(image.clone());
        let interim_node = graph.constant(interim.values().clone());
        let out = self.forward_bound(&mut graph, &binding, image_node, interim_node)?;
        SegmentationMap::new(graph.value(out).clone(), interim.iteration() + 1)
    }

    /// Writes the checkpoint: magic `ISEG`, version, layer count, then per
    /// layer the name and the kernel/bias tensor blocks (rank, dims,
    /// 32-bit little-endian floats).
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            out.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        write(&mut out, &CHECKPOINT_MAGIC)?;
        write(&mut out, &CHECKPOINT_VERSION.to_le_bytes())?;
        write(&mut out, &(self.layers.len() as u32).to_le_bytes())?;
        for (name, layer) in &self.layers {
            write(&mut out, &(name.len() as u16).to_le_bytes())?;
            write(&mut out, name.as_bytes())?;
            for tensor in [&layer.kernel, &layer.bias] {
                write(&mut out, &[tensor.shape().len() as u8])?;
                for &dim in tensor.shape() {
                    write(&mut out, &(dim as u32).to_le_bytes())?;
                }
                for &v in tensor.data() {
                    write(&mut out, &(v.to_f64() as f32).to_le_bytes())?;
                }
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Self::save_checkpoint`] and checks
    /// it against the topology implied by `config`. Momentum buffers start
    /// at zero.
    pub fn load_checkpoint(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);

        let mut read_exact = |buf: &mut [u8], what: &str| -> Result<()> {
            input.read_exact(buf).map_err(|e| {
                Error::Checkpoint(format!(
                    "{}: truncated while reading {what}: {e}",
                    path.display()
                ))
            })
        };

        let mut magic = [0u8; 4];
        read_exact(&mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&CHECKPOINT_MAGIC)
            )));
        }
        let mut version = [0u8; 2];
        read_exact(&mut version, "version")?;
        let version = u16::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}, expected {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let mut count = [0u8; 4];
        read_exact(&mut count, "layer count")?;
        let count = u32::from_le_bytes(count) as usize;

        let specs = layer_specs(config);
        if count != specs.len() {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint has {count} layers, config implies {}",
                path.display(),
                specs.len()
            )));
        }

        let mut layers = Vec::with_capacity(count);
        for spec in &specs {
            let mut len = [0u8; 2];
            read_exact(&mut len, "layer name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut name, "layer name")?;
            let name = String::from_utf8(name).map_err(|_| {
                Error::Checkpoint(format!("{}: layer name is not utf-8", path.display()))
            })?;
            if name != spec.name {
                return Err(Error::Checkpoint(format!(
                    "{}: layer `{name}` does not match expected layer `{}`",
                    path.display(),
                    spec.name
                )));
            }
            let k = match spec.kind {
                LayerKind::Conv { k } => k,
                LayerKind::Deconv => 3,
            };
            let expected_shapes = [vec![spec.c_out, spec.c_in, k, k], vec![spec.c_out]];
            let mut tensors = Vec::with_capacity(2);
            for expected in &expected_shapes {
                let mut rank = [0u8; 1];
                read_exact(&mut rank, "tensor rank")?;
                let mut shape = Vec::with_capacity(rank[0] as usize);
                for _ in 0..rank[0] {
                    let mut dim = [0u8; 4];
                    read_exact(&mut dim, "tensor dim")?;
                    shape.push(u32::from_le_bytes(dim) as usize);
                }
                if &shape != expected {
                    return Err(Error::Checkpoint(format!(
                        "{}: layer `{name}` has shape {shape:?}, config expects {expected:?}",
                        path.display()
                    )));
                }
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    let mut v = [0u8; 4];
                    read_exact(&mut v, "tensor data")?;
                    data.push(S::from_f64(f32::from_le_bytes(v) as f64));
                }
                tensors.push(Tensor::new(shape, data)?);
            }
            let bias = tensors.pop().unwrap();
            let kernel = tensors.pop().unwrap();
            layers.push((
                spec.name.clone(),
                LayerParams {
                    kernel_velocity: Tensor::zeros(kernel.shape().to_vec()),
                    kernel_second_moment: Tensor::zeros(kernel.shape().to_vec()),
                    bias_velocity: Tensor::zeros(bias.shape().to_vec()),
                    bias_second_moment: Tensor::zeros(bias.shape().to_vec()),
                    kernel,
                    bias,
                },
            ));
        }
        Ok(ParameterSet {
            config: config.clone(),
            layers,
            step_count: 0,
        })
    }
}

/// Single-channel map in `[0, 1]` at the network resolution, tagged with
/// its refinement iteration index (0 = initial map).
#[derive(Clone, Debug)]
pub struct SegmentationMap<S: Scalar = f32> {
    values: Tensor<S>,
    iteration: usize,
}

impl<S: Scalar> SegmentationMap<S> {
    pub fn new(values: Tensor<S>, iteration: usize) -> Result<Self> {
        let (n, c, _, _) = values.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!(
                "segmentation map must be 1x1xHxW, got {:?}",
                values.shape()
            )));
        }
        if !values
            .data()
            .iter()
            .all(|&v| v >= S::zero() && v <= S::one())
        {
            return Err(Error::Shape(
                "segmentation map values must lie in [0, 1]".into(),
            ));
        }
        Ok(SegmentationMap { values, iteration })
    }

    /// The all-0.5 map that seeds the refinement loop (iteration 0).
    pub fn initial(height: usize, width: usize) -> Self {
        SegmentationMap {
            values: Tensor::full(vec![1, 1, height, width], S::from_f64(0.5)),
            iteration: 0,
        }
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Thresholded copy: entries >= `threshold` become 1, others 0. The
    /// iteration index is preserved.
    pub fn binarized(&self, threshold: f64) -> Self {
        let data = self
            .values
            .data()
            .iter()
            .map(|&v| {
                if v.to_f64() >= threshold {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect();
        SegmentationMap {
            values: Tensor::new(self.values.shape().to_vec(), data).unwrap(),
            iteration: self.iteration,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepest_feature_map_follows_the_doubling_rule() {
        // stages=4, base=16: bottleneck carries 16 * 2^4 = 256 channels.
        let config = NetworkConfig::default();
        let params = ParameterSet::<f32>::build(&config, 0).unwrap();
        let bott = params.layer("bottleneck_conv2").unwrap();
        assert_eq!(bott.kernel.shape(), &[256, 256, 3, 3]);
        // and it operates at H/16 x W/16 by construction: 4 pools halve 4x.
        assert_eq!(config.input_height >> config.stages, 16);
        assert_eq!(config.input_width >> config.stages, 20);
    }

    #[test]
    fn parameter_count_matches_hand_enumeration() {
        // stages=1, base=1, 2x2 input, merge at stage 1 only:
        //   stem_img 1->1:        9 + 1 = 10
        //   stem_seg 1->1:        9 + 1 = 10
        //   enc1_conv1 2->1:     18 + 1 = 19
        //   enc1_conv2 1->1:      9 + 1 = 10
        //   bottleneck_conv1 1->2: 18 + 2 = 20
        //   bottleneck_conv2 2->2: 36 + 2 = 38
        //   dec1_up 2->1:        18 + 1 = 19
        //   dec1_conv1 2->1:     18 + 1 = 19
        //   dec1_conv2 1->1:      9 + 1 = 10
        //   head 1x1 1->1:        1 + 1 = 2
        // total 157
        let config = NetworkConfig {
            input_height: 2,
            input_width: 2,
            stages: 1,
            base_channels: 1,
            merge_points: vec![1],
        };
        let params = ParameterSet::<f32>::build(&config, 7).unwrap();
        assert_eq!(params.num_parameters(), 157);
        let names: Vec<_> = params.layer_names().collect();
        assert_eq!(
            names,
            vec![
                "stem_img",
                "stem_seg",
                "enc1_conv1",
                "enc1_conv2",
                "bottleneck_conv1",
                "bottleneck_conv2",
                "dec1_up",
                "dec1_conv1",
                "dec1_conv2",
                "head"
            ]
        );
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let config = NetworkConfig::desk_scale();
        let a = ParameterSet::<f32>::build(&config, 42).unwrap();
        let b = ParameterSet::<f32>::build(&config, 42).unwrap();
        for name in a.layer_names() {
            assert!(a
                .layer(name)
                .unwrap()
                .kernel
                .bit_eq(&b.layer(name).unwrap().kernel));
        }
        let c = ParameterSet::<f32>::build(&config, 43).unwrap();
        assert!(!a
            .layer("stem_img")
            .unwrap()
            .kernel
            .bit_eq(&c.layer("stem_img").unwrap().kernel));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = NetworkConfig::default();
        config.input_height = 250; // not divisible by 16
        assert!(config.validate().is_err());

        let mut config = NetworkConfig::default();
        config.merge_points = vec![];
        assert!(config.validate().is_err());

        let mut config = NetworkConfig::default();
        config.merge_points = vec![1, 7];
        assert!(config.validate().is_err());

        assert!(ParameterSet::<f32>::build(
            &NetworkConfig {
                merge_points: vec![2, 1],
                ..NetworkConfig::default()
            },
            0
        )
        .is_err());
    }

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            input_height: 16,
            input_width: 16,
            stages: 2,
            base_channels: 2,
            merge_points: vec![1, 2],
        }
    }

    #[test]
    fn full_resolution_forward_has_256x320_output_in_open_interval() {
        let config = NetworkConfig::default();
        let params = ParameterSet::<f32>::build(&config, 0).unwrap();
        let mut image = Tensor::zeros(vec![1, 1, 256, 320]);
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f32 / 251.0;
        }
        let out = params
            .forward(&image, &SegmentationMap::initial(256, 320))
            .unwrap();
        assert_eq!(out.values().shape(), &[1, 1, 256, 320]);
        assert!(out.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_output_has_input_resolution_and_open_unit_range() {
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 1).unwrap();
        let image = Tensor::full(vec![1, 1, 16, 16], 0.25);
        let interim = SegmentationMap::initial(16, 16);
        let out = params.forward(&image, &interim).unwrap();
        assert_eq!(out.values().shape(), &[1, 1, 16, 16]);
        assert!(out.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out.iteration(), 1);
    }

    #[test]
    fn zero_image_with_half_interim_stays_finite() {
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 2).unwrap();
        let image = Tensor::zeros(vec![1, 1, 16, 16]);
        let out = params
            .forward(&image, &SegmentationMap::initial(16, 16))
            .unwrap();
        assert!(out.values().all_finite());
    }

    #[test]
    fn forward_twice_is_bit_identical() {
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 3).unwrap();
        let mut image = Tensor::zeros(vec![1, 1, 16, 16]);
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let interim = SegmentationMap::initial(16, 16);
        let a = params.forward(&image, &interim).unwrap();
        let b = params.forward(&image, &interim).unwrap();
        assert!(a.values().bit_eq(b.values()));
    }

    #[test]
    fn resolution_mismatch_between_image_and_interim_is_rejected() {
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 4).unwrap();
        let image = Tensor::zeros(vec![1, 1, 16, 16]);
        let interim = SegmentationMap::initial(8, 8);
        assert!(matches!(
            params.forward(&image, &interim),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn interim_input_is_live() {
        // With random parameters, swapping the interim map between all-0
        // and all-1 must change the output somewhere.
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 5).unwrap();
        let mut image = Tensor::zeros(vec![1, 1, 16, 16]);
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 11) as f32 / 11.0;
        }
        let zeros = SegmentationMap::new(Tensor::zeros(vec![1, 1, 16, 16]), 1).unwrap();
        let ones = SegmentationMap::new(Tensor::full(vec![1, 1, 16, 16], 1.0), 1).unwrap();
        let out0 = params.forward(&image, &zeros).unwrap();
        let out1 = params.forward(&image, &ones).unwrap();
        let max_diff = out0
            .values()
            .data()
            .iter()
            .zip(out1.values().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "copy connection appears dead: {max_diff}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.iseg");
        let config = small_config();
        let params = ParameterSet::<f32>::build(&config, 6).unwrap();
        params.save_checkpoint(&path).unwrap();
        let loaded = ParameterSet::<f32>::load_checkpoint(&path, &config).unwrap();
        for name in params.layer_names() {
            assert!(params
                .layer(name)
                .unwrap()
                .kernel
                .bit_eq(&loaded.layer(name).unwrap().kernel));
            assert!(params
                .layer(name)
                .unwrap()
                .bias
                .bit_eq(&loaded.layer(name).unwrap().bias));
        }
    }

    #[test]
    fn checkpoint_bad_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.iseg");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        let err = ParameterSet::<f32>::load_checkpoint(&path, &small_config()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("magic") && msg.contains("NOPE"), "{msg}");
    }

    #[test]
    fn checkpoint_config_mismatch_names_first_offending_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.iseg");
        let config = small_config();
        ParameterSet::<f32>::build(&config, 6)
            .unwrap()
            .save_checkpoint(&path)
            .unwrap();
        let other = NetworkConfig {
            base_channels: 4,
            ..config
        };
        let err = ParameterSet::<f32>::load_checkpoint(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("stem_img"),
            "should name the first bad layer: {msg}"
        );
    }

    #[test]
    fn checkpoint_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.iseg");
        let config = small_config();
        ParameterSet::<f32>::build(&config, 6)
            .unwrap()
            .save_checkpoint(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = ParameterSet::<f32>::load_checkpoint(&path, &config).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn segmentation_map_validates_range() {
        let bad = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        assert!(SegmentationMap::new(bad, 0).is_err());
        let map = SegmentationMap::<f32>::initial(2, 2);
        assert_eq!(map.values().data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(map.iteration(), 0);
    }
}
