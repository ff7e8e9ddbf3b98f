//! The model zoo: shared feature extractor, frozen per-task counter heads,
//! cross-task adaptors, and the task-aware inference chain.

use incount_tensor::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::continual::MethodKind;
use crate::data::Image;
use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct HeadLayerConfig {
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub hidden: Vec<HeadLayerConfig>,
    /// Initial bias of the final 1x1 layer; a positive value keeps the
    /// output relu alive at the start of training.
    pub final_bias: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: vec![
                HeadLayerConfig {
                    channels: 256,
                    downsample: false,
                },
                HeadLayerConfig {
                    channels: 128,
                    downsample: false,
                },
            ],
            final_bias: 0.5,
        }
    }
}

/// Extractor + head layout. `head_depth`, when set, re-balances layers
/// between the trunk and the head while keeping the total network size
/// fixed: depth 3 moves the trailing trunk block into the head, depth 1
/// moves the first head layer into the trunk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub blocks: Vec<BlockConfig>,
    pub head: HeadConfig,
    pub head_depth: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            blocks: vec![
                BlockConfig {
                    channels: 32,
                    downsample: false,
                },
                BlockConfig {
                    channels: 32,
                    downsample: true,
                },
                BlockConfig {
                    channels: 64,
                    downsample: true,
                },
                BlockConfig {
                    channels: 64,
                    downsample: true,
                },
            ],
            head: HeadConfig::default(),
            head_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNetwork {
    pub blocks: Vec<BlockConfig>,
    pub head: HeadConfig,
}

impl NetworkConfig {
    pub fn resolve(&self) -> Result<ResolvedNetwork> {
        let mut blocks = self.blocks.clone();
        let mut head = self.head.clone();
        match self.head_depth {
            None => {}
            Some(depth) if depth == head.hidden.len() => {}
            Some(1) => {
                if head.hidden.len() < 2 {
                    return Err(CoreError::InvalidConfig(
                        "head_depth 1 needs at least two configured head layers".into(),
                    ));
                }
                let moved = head.hidden.remove(0);
                blocks.push(BlockConfig {
                    channels: moved.channels,
                    downsample: moved.downsample,
                });
                while head.hidden.len() > 1 {
                    head.hidden.pop();
                }
            }
            Some(depth) if depth == head.hidden.len() + 1 => {
                let moved = blocks.pop().ok_or_else(|| {
                    CoreError::InvalidConfig("cannot move a block out of an empty trunk".into())
                })?;
                head.hidden.insert(
                    0,
                    HeadLayerConfig {
                        channels: moved.channels,
                        downsample: moved.downsample,
                    },
                );
            }
            Some(depth) => {
                return Err(CoreError::InvalidConfig(format!(
                    "head_depth {depth} not reachable from a {}-layer head; use {}..={}",
                    self.head.hidden.len(),
                    1,
                    self.head.hidden.len() + 1
                )));
            }
        }
        if blocks.is_empty() {
            return Err(CoreError::InvalidConfig("extractor needs at least one block".into()));
        }
        Ok(ResolvedNetwork { blocks, head })
    }

    /// Image-to-feature downsampling factor of the resolved trunk.
    pub fn extractor_stride(&self) -> Result<usize> {
        Ok(self
            .resolve()?
            .blocks
            .iter()
            .fold(1, |s, b| if b.downsample { s * 2 } else { s }))
    }

    /// Image-to-density-map downsampling factor (trunk plus head).
    pub fn total_stride(&self) -> Result<usize> {
        let r = self.resolve()?;
        let head_stride = r
            .head
            .hidden
            .iter()
            .fold(1, |s, l| if l.downsample { s * 2 } else { s });
        Ok(self.extractor_stride()? * head_stride)
    }

    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.resolve()?.blocks.last().expect("validated nonempty").channels)
    }
}

/// One conv layer with its parameters as graph leaves.
#[derive(Debug)]
pub struct ConvLayer {
    pub kernel: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn init(
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * ksize * ksize) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let kernel: Vec<f64> = (0..cout * cin * ksize * ksize)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvLayer {
            kernel: Tensor::from_vec(vec![cout, cin, ksize, ksize], kernel, true).unwrap(),
            bias: Tensor::from_vec(vec![cout], bias, true).unwrap(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, graph: &Graph<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(graph.conv2d(x, &self.kernel, Some(&self.bias), self.stride, self.padding)?)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.kernel.clone(), self.bias.clone()]
    }

    fn deep_clone(&self) -> Self {
        ConvLayer {
            kernel: self.kernel.deep_clone(),
            bias: self.bias.deep_clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn set_trainable(&self, trainable: bool) {
        self.kernel.set_requires_grad(trainable);
        self.bias.set_requires_grad(trainable);
    }
}

/// Shared convolutional trunk mapping `[N,3,H,W]` images (padded to a
/// stride multiple) to `[N,d,H/s,W/s]` feature grids.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub layers: Vec<ConvLayer>,
    pub blocks: Vec<BlockConfig>,
}

impl FeatureExtractor {
    pub fn new(blocks: &[BlockConfig], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(blocks.len());
        let mut cin = 3;
        for b in blocks {
            let stride = if b.downsample { 2 } else { 1 };
            layers.push(ConvLayer::init(cin, b.channels, 3, stride, 1, rng));
            cin = b.channels;
        }
        FeatureExtractor {
            layers,
            blocks: blocks.to_vec(),
        }
    }

    pub fn stride(&self) -> usize {
        self.blocks
            .iter()
            .fold(1, |s, b| if b.downsample { s * 2 } else { s })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.channels).unwrap_or(0)
    }

    pub fn forward(&self, graph: &Graph<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = x.clone();
        for layer in &self.layers {
            z = graph.relu(&layer.forward(graph, &z)?)?;
        }
        Ok(z)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Stable parameter paths, e.g. `<prefix>/block2/conv/kernel`.
    pub fn params_with_paths(&self, prefix: &str) -> Vec<(String, Tensor<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}/block{}/conv/kernel", i + 1), l.kernel.clone()),
                    (format!("{prefix}/block{}/conv/bias", i + 1), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn deep_clone(&self) -> Self {
        FeatureExtractor {
            layers: self.layers.iter().map(|l| l.deep_clone()).collect(),
            blocks: self.blocks.clone(),
        }
    }

    pub fn set_trainable(&self, trainable: bool) {
        for l in &self.layers {
            l.set_trainable(trainable);
        }
    }
}

/// Per-task counter head: hidden 3x3 conv+relu layers, a final 1x1 conv to
/// one channel, and a closing relu so the density map stays nonnegative.
#[derive(Debug)]
pub struct CounterHead {
    pub hidden: Vec<ConvLayer>,
    pub final_layer: ConvLayer,
    frozen: bool,
}

impl CounterHead {
    pub fn new(in_channels: usize, config: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut cin = in_channels;
        for l in &config.hidden {
            let stride = if l.downsample { 2 } else { 1 };
            hidden.push(ConvLayer::init(cin, l.channels, 3, stride, 1, rng));
            cin = l.channels;
        }
        let final_layer = ConvLayer::init(cin, 1, 1, 1, 0, rng);
        final_layer
            .bias
            .set_data(&[config.final_bias])
            .expect("single bias");
        CounterHead {
            hidden,
            final_layer,
            frozen: false,
        }
    }

    pub fn forward(&self, graph: &Graph<f64>, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = features.clone();
        for layer in &self.hidden {
            z = graph.relu(&layer.forward(graph, &z)?)?;
        }
        Ok(graph.relu(&self.final_layer.forward(graph, &z)?)?)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        let mut p: Vec<Tensor<f64>> = self.hidden.iter().flat_map(|l| l.params()).collect();
        p.extend(self.final_layer.params());
        p
    }

    pub fn params_with_paths(&self, prefix: &str) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for (j, l) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}/hidden{}/kernel", j + 1), l.kernel.clone()));
            out.push((format!("{prefix}/hidden{}/bias", j + 1), l.bias.clone()));
        }
        out.push((format!("{prefix}/final/kernel"), self.final_layer.kernel.clone()));
        out.push((format!("{prefix}/final/bias"), self.final_layer.bias.clone()));
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing twice is a no-op.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for l in &self.hidden {
            l.set_trainable(false);
        }
        self.final_layer.set_trainable(false);
    }

    pub fn deep_clone(&self) -> Self {
        CounterHead {
            hidden: self.hidden.iter().map(|l| l.deep_clone()).collect(),
            final_layer: self.final_layer.deep_clone(),
            frozen: self.frozen,
        }
    }

    /// Fresh storage with the same values, thawed for training.
    pub fn trainable_copy(&self) -> Self {
        let copy = self.deep_clone();
        for p in copy.params() {
            p.set_requires_grad(true);
        }
        CounterHead {
            frozen: false,
            ..copy
        }
    }

    /// Fresh storage with the same values, locked against training.
    pub fn frozen_copy(&self) -> Self {
        let copy = self.deep_clone();
        for p in copy.params() {
            p.set_requires_grad(false);
        }
        CounterHead {
            frozen: true,
            ..copy
        }
    }

    /// FNV-1a over the exact parameter bytes.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |t: &Tensor<f64>| {
            for v in t.to_vec() {
                for byte in v.to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        };
        for l in &self.hidden {
            eat(&l.kernel);
            eat(&l.bias);
        }
        eat(&self.final_layer.kernel);
        eat(&self.final_layer.bias);
        hash
    }
}

/// Cross-task adaptor: one 1x1 conv over the feature channels, identity
/// initialized so a fresh adaptor is a no-op.
#[derive(Debug)]
pub struct Adaptor {
    pub conv: ConvLayer,
    frozen: bool,
}

impl Adaptor {
    pub fn identity(channels: usize) -> Self {
        let mut kernel = vec![0.0; channels * channels];
        for i in 0..channels {
            kernel[i * channels + i] = 1.0;
        }
        Adaptor {
            conv: ConvLayer {
                kernel: Tensor::from_vec(vec![channels, channels, 1, 1], kernel, true).unwrap(),
                bias: Tensor::from_vec(vec![channels], vec![0.0; channels], true).unwrap(),
                stride: 1,
                padding: 0,
            },
            frozen: false,
        }
    }

    pub fn forward(&self, graph: &Graph<f64>, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.conv.forward(graph, features)
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.conv.params()
    }

    pub fn params_with_paths(&self, prefix: &str) -> Vec<(String, Tensor<f64>)> {
        vec![
            (format!("{prefix}/kernel"), self.conv.kernel.clone()),
            (format!("{prefix}/bias"), self.conv.bias.clone()),
        ]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.conv.set_trainable(false);
    }

    pub fn deep_clone(&self) -> Self {
        Adaptor {
            conv: self.conv.deep_clone(),
            frozen: self.frozen,
        }
    }
}

/// Nonnegative density grid at feature resolution; its sum is the count.
#[derive(Debug, Clone)]
pub struct DensityMap {
    pub rows: usize,
    pub cols: usize,
    /// Image pixels per grid cell edge.
    pub stride: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Zero-pad an image tensor on the right/bottom to the next multiple of
/// `stride`, per the odd-size policy. Returns the input when aligned.
pub fn pad_to_multiple(x: &Tensor<f64>, stride: usize) -> Result<Tensor<f64>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(CoreError::Shape(format!(
            "expected [N,C,H,W] image tensor, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    if ph == h && pw == w {
        return Ok(x.clone());
    }
    let src = x.to_vec();
    let mut out = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sbase = ((ni * c + ci) * h + y) * w;
                let dbase = ((ni * c + ci) * ph + y) * pw;
                out[dbase..dbase + w].copy_from_slice(&src[sbase..sbase + w]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, c, ph, pw], out, x.requires_grad())?)
}

/// Image -> tensor, `[1, 3, H, W]`.
pub fn image_to_tensor(image: &Image) -> Tensor<f64> {
    Tensor::from_vec(
        vec![1, 3, image.height, image.width],
        image.pixels.clone(),
        false,
    )
    .expect("image dims consistent")
}

/// Run the trunk on an image tensor (padding first). Rejects non-RGB input.
pub fn extract_features(
    graph: &Graph<f64>,
    extractor: &FeatureExtractor,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::Shape(format!(
            "extractor expects [N,3,H,W] input, got {shape:?}"
        )));
    }
    let padded = pad_to_multiple(x, extractor.stride())?;
    extractor.forward(graph, &padded)
}

/// Head output on a feature grid, returned as a `DensityMap`.
pub fn predict_density(
    graph: &Graph<f64>,
    head: &CounterHead,
    features: &Tensor<f64>,
    image_stride: usize,
) -> Result<DensityMap> {
    let out = head.forward(graph, features)?;
    density_from_tensor(&out, image_stride)
}

pub fn density_from_tensor(out: &Tensor<f64>, image_stride: usize) -> Result<DensityMap> {
    let shape = out.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(CoreError::Shape(format!(
            "density tensor must be [1,1,H,W], got {shape:?}"
        )));
    }
    Ok(DensityMap {
        rows: shape[2],
        cols: shape[3],
        stride: image_stride,
        values: out.to_vec(),
    })
}

/// Apply a slice of adaptors newest-first (the chain phi_tau .. phi_{t-1}
/// acting on current features applies phi_{t-1} first). An empty slice is
/// the identity.
pub fn adapt_chain(
    graph: &Graph<f64>,
    features: &Tensor<f64>,
    adaptors: &[&Adaptor],
) -> Result<Tensor<f64>> {
    let mut z = features.clone();
    for adaptor in adaptors.iter().rev() {
        z = adaptor.forward(graph, &z)?;
    }
    Ok(z)
}

/// Per-method auxiliary state owned by the model: weight-importance stores
/// for EWC/MAS and the trainable head copies LwF distills through.
#[derive(Debug, Default)]
pub struct AuxStores {
    /// Per extractor-parameter importance, aligned with
    /// `FeatureExtractor::params` order.
    pub importance: Option<Vec<Vec<f64>>>,
    /// Post-task parameter anchors, same alignment.
    pub anchor: Option<Vec<Vec<f64>>>,
    /// LwF's trainable copies of previous heads (never used for inference).
    pub lwf_heads: Vec<CounterHead>,
}

/// The evolving continual-learning state: current trunk, at most one stored
/// previous trunk, frozen heads, adaptor chain, and auxiliary stores.
#[derive(Debug)]
pub struct ModelState {
    pub method: MethodKind,
    pub network: NetworkConfig,
    pub extractor: FeatureExtractor,
    pub prev_extractor: Option<FeatureExtractor>,
    pub heads: Vec<CounterHead>,
    pub adaptors: Vec<Adaptor>,
    pub task_registry: Vec<String>,
    pub completed_tasks: usize,
    pub aux: AuxStores,
}

impl ModelState {
    pub fn new(network: NetworkConfig, method: MethodKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        let resolved = network.resolve()?;
        let extractor = FeatureExtractor::new(&resolved.blocks, rng);
        Ok(ModelState {
            method,
            network,
            extractor,
            prev_extractor: None,
            heads: Vec::new(),
            adaptors: Vec::new(),
            task_registry: Vec::new(),
            completed_tasks: 0,
            aux: AuxStores::default(),
        })
    }

    /// Total image-to-density stride (trunk and any downsampling head layer).
    pub fn total_stride(&self) -> usize {
        let head_stride = self
            .heads
            .first()
            .map(|h| {
                h.hidden
                    .iter()
                    .fold(1, |s, l| if l.stride == 2 { s * 2 } else { s })
            })
            .unwrap_or_else(|| {
                self.network
                    .resolve()
                    .map(|r| {
                        r.head
                            .hidden
                            .iter()
                            .fold(1, |s, l| if l.downsample { s * 2 } else { s })
                    })
                    .unwrap_or(1)
            });
        self.extractor.stride() * head_stride
    }

    /// Density-grid shape for an `h x w` image under the padding policy.
    pub fn density_grid(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.total_stride();
        (height.div_ceil(s), width.div_ceil(s))
    }

    /// Mark head `task` (1-based) immutable; freezing twice is a no-op.
    pub fn freeze_head(&mut self, task: usize) -> Result<()> {
        if task == 0 || task > self.heads.len() {
            return Err(CoreError::UnknownTask {
                index: task,
                completed: self.completed_tasks,
            });
        }
        self.heads[task - 1].freeze();
        Ok(())
    }

    /// Store a deep copy of the current trunk as f_{t-1}, discarding any
    /// older snapshot; at most two extractors ever exist.
    pub fn snapshot_extractor(&mut self) {
        let snap = self.extractor.deep_clone();
        snap.set_trainable(false);
        self.prev_extractor = Some(snap);
    }

    pub fn head_checksums(&self) -> Vec<u64> {
        self.heads.iter().map(|h| h.checksum()).collect()
    }

    /// Task-aware inference: density for task `tau` (1-based) through the
    /// adaptor chain learned after it.
    pub fn infer_task(&self, image: &Image, tau: usize) -> Result<(DensityMap, f64)> {
        if tau == 0 || tau > self.completed_tasks {
            return Err(CoreError::UnknownTask {
                index: tau,
                completed: self.completed_tasks,
            });
        }
        let graph = Graph::new();
        let x = image_to_tensor(image);
        let features = extract_features(&graph, &self.extractor, &x)?;
        let adapted = if self.method.uses_adaptors() {
            // adaptors learned after task tau: phi_tau .. phi_{t-1}
            let end = (self.completed_tasks - 1).max(tau - 1).min(self.adaptors.len());
            let chain: Vec<&Adaptor> = self.adaptors[tau - 1..end].iter().collect();
            adapt_chain(&graph, &features, &chain)?
        } else {
            features
        };
        let density = predict_density(&graph, &self.heads[tau - 1], &adapted, self.total_stride())?;
        let count = density.count();
        Ok((density, count))
    }
}
