//! MobileNetV2 topology with batch norm already folded into every convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{conv2d, global_avg_pool, linear, relu6_inplace, ConvParams};
use crate::tensor::{Matrix, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const STEM_CHANNELS: usize = 32;
pub const FEATURE_DIM: usize = 1280;
/// Smallest input side for which every stride-2 stage keeps at least one pixel.
pub const MIN_INPUT_SIZE: usize = 32;

/// One row of the inverted-residual stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

const fn spec(expansion: usize, out_channels: usize, repeats: usize, stride: usize) -> BlockSpec {
    BlockSpec {
        expansion,
        out_channels,
        repeats,
        stride,
    }
}

pub const BLOCK_SPECS: [BlockSpec; 7] = [
    spec(1, 16, 1, 1),
    spec(6, 24, 2, 2),
    spec(6, 32, 3, 2),
    spec(6, 64, 4, 2),
    spec(6, 96, 3, 1),
    spec(6, 160, 3, 2),
    spec(6, 320, 1, 1),
];

/// A single inverted-residual instance after expanding the stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl BlockConfig {
    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_expand(&self) -> bool {
        self.expansion != 1
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// The 17 block instances in execution order.
pub fn block_configs() -> Vec<BlockConfig> {
    let mut configs = Vec::with_capacity(17);
    let mut in_channels = STEM_CHANNELS;
    for s in BLOCK_SPECS {
        for r in 0..s.repeats {
            configs.push(BlockConfig {
                index: configs.len(),
                in_channels,
                out_channels: s.out_channels,
                expansion: s.expansion,
                stride: if r == 0 { s.stride } else { 1 },
            });
            in_channels = s.out_channels;
        }
    }
    configs
}

/// Convolution with its folded bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub params: ConvParams,
}

impl ConvLayer {
    pub fn zeros(cout: usize, cin_per_group: usize, kernel: usize, params: ConvParams) -> Self {
        ConvLayer {
            weight: Tensor::zeros([cout, cin_per_group, kernel, kernel]),
            bias: vec![0.0; cout],
            params,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.params)
    }

    /// Conv followed by ReLU6.
    pub fn forward_relu6(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.forward(x)?;
        relu6_inplace(y.data_mut());
        Ok(y)
    }

    fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        // He-uniform over the fan-in of one output channel.
        let [_, cin, kh, kw] = self.weight.shape();
        let bound = (6.0 / (cin * kh * kw) as f32).sqrt();
        for v in self.weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.bias.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub config: BlockConfig,
    pub expand: Option<ConvLayer>,
    pub depthwise: ConvLayer,
    pub project: ConvLayer,
}

impl InvertedResidual {
    pub fn zeros(config: BlockConfig) -> Self {
        let hidden = config.hidden_channels();
        InvertedResidual {
            config,
            expand: config
                .has_expand()
                .then(|| ConvLayer::zeros(hidden, config.in_channels, 1, ConvParams::default())),
            depthwise: ConvLayer::zeros(hidden, 1, 3, ConvParams::new(config.stride, 1, hidden)),
            project: ConvLayer::zeros(config.out_channels, hidden, 1, ConvParams::default()),
        }
    }

    /// Expand (ReLU6), depthwise (ReLU6), linear projection, plus the skip when eligible.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.config.in_channels {
            return Err(Error::shape(
                "inverted_residual",
                format!(
                    "block {} expects {} channels, got {}",
                    self.config.index,
                    self.config.in_channels,
                    x.c()
                ),
            ));
        }
        let hidden = match &self.expand {
            Some(expand) => expand.forward_relu6(x)?,
            None => x.clone(),
        };
        let hidden = self.depthwise.forward_relu6(&hidden)?;
        let mut out = self.project.forward(&hidden)?;
        if self.config.has_residual() {
            for (o, &i) in out.data_mut().iter_mut().zip(x.data()) {
                *o += i;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Classifier {
    pub fn zeros(num_classes: usize) -> Self {
        Classifier {
            weight: Matrix::zeros(num_classes, FEATURE_DIM),
            bias: vec![0.0; num_classes],
        }
    }

    /// Fan-in uniform initialization: weights in `±1/sqrt(1280)`, zero bias.
    pub fn init_uniform(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (FEATURE_DIM as f32).sqrt();
        let data = (0..num_classes * FEATURE_DIM)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Classifier {
            weight: Matrix::from_vec(num_classes, FEATURE_DIM, data).expect("classifier shape"),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        linear(features, &self.weight, &self.bias)
    }
}

/// MobileNetV2 (width 1.0) with an arbitrary-size classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct MobileNetV2 {
    pub stem: ConvLayer,
    pub blocks: Vec<InvertedResidual>,
    pub head: ConvLayer,
    pub classifier: Classifier,
}

impl MobileNetV2 {
    /// Zero-initialized network with the fixed topology.
    pub fn build(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let blocks: Vec<_> = block_configs().into_iter().map(InvertedResidual::zeros).collect();
        let last = blocks.last().map_or(STEM_CHANNELS, |b| b.config.out_channels);
        Ok(MobileNetV2 {
            stem: ConvLayer::zeros(STEM_CHANNELS, INPUT_CHANNELS, 3, ConvParams::new(2, 1, 1)),
            blocks,
            head: ConvLayer::zeros(FEATURE_DIM, last, 1, ConvParams::default()),
            classifier: Classifier::zeros(num_classes),
        })
    }

    /// Backbone with He-uniform random weights and a fan-in initialized head.
    /// Stands in for pretrained weights in tests and throughput runs.
    pub fn random(num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::build(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.conv_layers_mut() {
            layer.randomize(&mut rng);
        }
        model.classifier = Classifier::init_uniform(num_classes, rng.gen());
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| {
                b.expand.iter().chain([&b.depthwise, &b.project])
            }))
            .chain(std::iter::once(&self.head))
    }

    fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut layers = vec![&mut self.stem];
        for b in &mut self.blocks {
            if let Some(e) = b.expand.as_mut() {
                layers.push(e);
            }
            layers.push(&mut b.depthwise);
            layers.push(&mut b.project);
        }
        layers.push(&mut self.head);
        layers
    }

    /// Trainable parameters of the unfused architecture: convolution weights,
    /// one batch-norm scale and shift per conv output channel, and the classifier.
    pub fn parameter_count(&self) -> usize {
        let convs: usize = self
            .conv_layers()
            .map(|l| l.weight.len() + 2 * l.out_channels())
            .sum();
        convs + self.classifier.weight.data().len() + self.classifier.bias.len()
    }

    fn check_input(batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.shape();
        if c != INPUT_CHANNELS {
            return Err(Error::shape(
                "forward",
                format!("expected {INPUT_CHANNELS} input channels, got {c}"),
            ));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum"),
            ));
        }
        Ok(())
    }

    /// Backbone output before pooling: `(n, 1280, S/32, S/32)`.
    pub fn backbone(&self, batch: &Tensor) -> Result<Tensor> {
        Self::check_input(batch)?;
        let mut x = self.stem.forward_relu6(batch)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.head.forward_relu6(&x)
    }

    /// Pooled 1280-d embeddings; the classifier is not applied.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Matrix> {
        let pooled = global_avg_pool(&self.backbone(batch)?);
        let n = pooled.n();
        Matrix::from_vec(n, FEATURE_DIM, pooled.into_data())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Matrix> {
        self.classifier.forward(&self.extract_features(batch)?)
    }
}
