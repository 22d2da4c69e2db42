//! Desk-scale prompt-conditioned encoder-decoder restoration network.
//!
//! Layout, for an input of `H x W` (divisible by 8) and `C = base_dim`:
//!
//! ```text
//! embed      3x3 conv 3 -> C                         H   x W
//! enc1..enc4 blocks at C, 2C, 4C, 8C; stride-2 3x3 convs between levels
//! dec3..dec1 nearest 2x + 3x3 conv, concat skip + 1x1 fuse,
//!            optional prompt block (PGM + PIM), blocks
//! output     3x3 conv C -> 3, plus the input image when `global_residual`
//! ```
//!
//! Every conv kernel is prunable; biases and prompt components are not.
//! The transformer block is a small stand-in: residual channel attention
//! followed by a residual 1x1 feed-forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::store::{NamedTensorStore, ParamEntry};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_dim: usize,
    pub blocks_per_level: usize,
    /// Decoder levels carrying a prompt block; 1 is full resolution, 3 is H/4.
    pub prompt_levels: Vec<usize>,
    pub n_prompts: usize,
    /// Height/width of the prompt components, one entry per prompt level.
    pub prompt_spatial: Vec<usize>,
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_dim: 8,
            blocks_per_level: 1,
            prompt_levels: vec![1, 2, 3],
            n_prompts: 3,
            prompt_spatial: vec![8, 8, 8],
            global_residual: true,
        }
    }
}

impl ModelConfig {
    /// Channel width per level, shallowest first.
    pub fn level_dims(&self) -> [usize; LEVELS] {
        let b = self.base_dim;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_dim < 2 || self.base_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_dim must be even and >= 2, got {}",
                self.base_dim
            )));
        }
        if self.n_prompts == 0 {
            return Err(Error::InvalidArgument("n_prompts must be >= 1".into()));
        }
        if self.prompt_levels.len() != self.prompt_spatial.len() {
            return Err(Error::InvalidArgument(format!(
                "{} prompt levels but {} prompt sizes",
                self.prompt_levels.len(),
                self.prompt_spatial.len()
            )));
        }
        let mut seen = [false; LEVELS];
        for &l in &self.prompt_levels {
            if !(1..LEVELS).contains(&l) || std::mem::replace(&mut seen[l], true) {
                return Err(Error::InvalidArgument(format!(
                    "prompt level {l} must be a distinct decoder level in 1..=3"
                )));
            }
        }
        if self.prompt_spatial.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("prompt_spatial entries must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIdx {
    pub kernel: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIdx {
    pub ca_reduce: ConvIdx,
    pub ca_expand: ConvIdx,
    pub ffn_in: ConvIdx,
    pub ffn_out: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptIdx {
    pub components: usize,
    /// 1x1 conv producing prompt logits from pooled features
    pub logits: ConvIdx,
    pub gen_refine: ConvIdx,
    pub block: BlockIdx,
    pub proj: ConvIdx,
    pub refine: ConvIdx,
    pub spatial: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    pub up: ConvIdx,
    pub fuse: ConvIdx,
    pub prompt: Option<PromptIdx>,
    pub blocks: Vec<BlockIdx>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: ConvIdx,
    pub encoder: Vec<Vec<BlockIdx>>,
    pub down: Vec<ConvIdx>,
    pub decoder: Vec<DecoderLevel>,
    pub output: ConvIdx,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kernel { fan_in: usize },
    Zero,
    Prompt,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    output_layer: bool,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, output_layer: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            output_layer,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> ConvIdx {
        self.conv_with(name, k, cin, cout, false)
    }

    fn conv_with(&mut self, name: &str, k: usize, cin: usize, cout: usize, output_layer: bool) -> ConvIdx {
        let kernel = self.add(
            format!("{name}.kernel"),
            vec![k, k, cin, cout],
            Init::Kernel { fan_in: k * k * cin },
            output_layer,
        );
        let bias = self.add(format!("{name}.bias"), vec![cout], Init::Zero, false);
        ConvIdx { kernel, bias }
    }

    fn block(&mut self, name: &str, c: usize) -> BlockIdx {
        let hidden = (c / 2).max(1);
        BlockIdx {
            ca_reduce: self.conv(&format!("{name}.ca_reduce"), 1, c, hidden),
            ca_expand: self.conv(&format!("{name}.ca_expand"), 1, hidden, c),
            ffn_in: self.conv(&format!("{name}.ffn_in"), 1, c, 2 * c),
            ffn_out: self.conv(&format!("{name}.ffn_out"), 1, 2 * c, c),
        }
    }

    fn build(config: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
        let dims = config.level_dims();
        let mut b = LayoutBuilder::default();
        let embed = b.conv("embed", 3, 3, dims[0]);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for (l, &c) in dims.iter().enumerate() {
            let blocks = (0..config.blocks_per_level)
                .map(|i| b.block(&format!("enc{}.block{i}", l + 1), c))
                .collect();
            encoder.push(blocks);
            if l + 1 < LEVELS {
                down.push(b.conv(&format!("down{}", l + 1), 3, c, dims[l + 1]));
            }
        }
        let mut decoder = Vec::new();
        for level in (1..LEVELS).rev() {
            let c = dims[level - 1];
            let name = format!("dec{level}");
            let up = b.conv(&format!("{name}.up"), 3, dims[level], c);
            let fuse = b.conv(&format!("{name}.fuse"), 1, 2 * c, c);
            let prompt = config
                .prompt_levels
                .iter()
                .position(|&p| p == level)
                .map(|i| {
                    let s = config.prompt_spatial[i];
                    let pn = format!("{name}.prompt");
                    let components = b.add(
                        format!("{pn}.components"),
                        vec![config.n_prompts, s, s, c],
                        Init::Prompt,
                        false,
                    );
                    PromptIdx {
                        components,
                        logits: b.conv(&format!("{pn}.pgm.logits"), 1, c, config.n_prompts),
                        gen_refine: b.conv(&format!("{pn}.pgm.refine"), 3, c, c),
                        block: b.block(&format!("{pn}.pim.block"), 2 * c),
                        proj: b.conv(&format!("{pn}.pim.proj"), 1, 2 * c, c),
                        refine: b.conv(&format!("{pn}.pim.refine"), 3, c, c),
                        spatial: s,
                    }
                });
            let blocks = (0..config.blocks_per_level)
                .map(|i| b.block(&format!("{name}.block{i}"), c))
                .collect();
            decoder.push(DecoderLevel {
                level,
                up,
                fuse,
                prompt,
                blocks,
            });
        }
        let output = b.conv_with("output", 3, dims[0], 3, true);
        (
            Layout {
                embed,
                encoder,
                down,
                decoder,
                output,
            },
            b.specs,
        )
    }
}

/// One row of the architecture summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub prunable: bool,
    pub output_layer: bool,
}

#[derive(Clone, Debug)]
pub struct MicroPromptNet {
    config: ModelConfig,
    layout: Layout,
    params: NamedTensorStore,
}

impl MicroPromptNet {
    /// Fresh parameters: kernels ~ U(±sqrt(1/fan_in)), zero biases, prompt
    /// components ~ U(±0.5). The draw order is the enumeration order, so a
    /// seed fully determines the initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NamedTensorStore::new();
        for spec in specs {
            let tensor = match spec.init {
                Init::Kernel { fan_in } => {
                    let bound = (1.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound))
                }
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::Prompt => Tensor::from_fn(&spec.shape, |_| rng.random_range(-0.5f32..0.5)),
            };
            params.push(ParamEntry {
                name: spec.name,
                tensor,
                prunable: matches!(spec.init, Init::Kernel { .. }),
                output_layer: spec.output_layer,
            })?;
        }
        Ok(MicroPromptNet {
            config: config.clone(),
            layout,
            params,
        })
    }

    /// Rebuilds a network around existing parameters (e.g. from a checkpoint).
    pub fn from_store(config: &ModelConfig, params: NamedTensorStore) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(config);
        if specs.len() != params.len() {
            return Err(Error::Alignment(format!(
                "config describes {} tensors, store holds {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, entry) in specs.iter().zip(params.iter()) {
            if spec.name != entry.name
                || spec.shape != entry.tensor.shape()
                || spec.output_layer != entry.output_layer
                || matches!(spec.init, Init::Kernel { .. }) != entry.prunable
            {
                return Err(Error::Alignment(format!(
                    "store entry `{}` {:?} does not match expected `{}` {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(MicroPromptNet {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &NamedTensorStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensorStore {
        &mut self.params
    }

    pub fn into_params(self) -> NamedTensorStore {
        self.params
    }

    pub fn enumerate_params(&self) -> Vec<ParamInfo> {
        self.params
            .iter()
            .map(|e| ParamInfo {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                prunable: e.prunable,
                output_layer: e.output_layer,
            })
            .collect()
    }

    /// Adds every parameter to `g` as a leaf, in enumeration order.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|e| {
                let t = e.tensor.cast::<T>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have height and width divisible by 8; pad the image first"
            )));
        }
        Ok(())
    }

    fn conv<T: Real>(g: &mut Graph<T>, p: &[Var], c: ConvIdx, x: Var, stride: usize) -> Result<Var> {
        let k = g.value(p[c.kernel]).shape()[0];
        g.conv2d(x, p[c.kernel], p[c.bias], stride, k / 2)
    }

    /// `F0 = Conv3x3(image)`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Var> {
        let (h, w, c) = g.value(image).hwc()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
        }
        Self::check_input(h, w)?;
        Self::conv(g, p, self.layout.embed, image, 1)
    }

    /// Channel attention then feed-forward, each with a residual connection.
    pub fn transformer_block<T: Real>(&self, g: &mut Graph<T>, p: &[Var], b: &BlockIdx, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let r = Self::conv(g, p, b.ca_reduce, pooled, 1)?;
        let r = g.activation(r, Activation::Relu);
        let e = Self::conv(g, p, b.ca_expand, r, 1)?;
        let gate = g.activation(e, Activation::Sigmoid);
        let attended = g.mul_channels(x, gate)?;
        let x = g.add(x, attended)?;
        let f = Self::conv(g, p, b.ffn_in, x, 1)?;
        let f = g.activation(f, Activation::Gelu);
        let f = Self::conv(g, p, b.ffn_out, f, 1)?;
        g.add(x, f)
    }

    /// Prompt generation: `w = softmax(conv1x1(gap(F)))`, `P = conv3x3(resize(Σ w_i P_ci))`.
    pub fn pgm<T: Real>(&self, g: &mut Graph<T>, p: &[Var], pi: &PromptIdx, features: Var) -> Result<Var> {
        let (h, w, c) = g.value(features).hwc()?;
        let comps = p[pi.components];
        let cshape = g.value(comps).shape().to_vec();
        if cshape[3] != c {
            return Err(Error::Shape(format!(
                "prompt components have {} channels, features {c}",
                cshape[3]
            )));
        }
        let pooled = g.global_avg_pool(features)?;
        let logits = Self::conv(g, p, pi.logits, pooled, 1)?;
        let n = g.value(logits).len();
        if n != cshape[0] {
            return Err(Error::Shape(format!(
                "{n} prompt weights for {} prompt components",
                cshape[0]
            )));
        }
        let logits = g.reshape(logits, &[n])?;
        let weights = g.softmax(logits)?;
        let mut prompt = g.weighted_sum(weights, comps)?;
        if (cshape[1], cshape[2]) != (h, w) {
            prompt = g.resize_bilinear(prompt, h, w)?;
        }
        Self::conv(g, p, pi.gen_refine, prompt, 1)
    }

    /// Prompt interaction: `conv3x3(conv1x1(T(concat(F, P))))`.
    pub fn pim<T: Real>(&self, g: &mut Graph<T>, p: &[Var], pi: &PromptIdx, prompt: Var, features: Var) -> Result<Var> {
        let fused = g.concat_channels(features, prompt)?;
        let t = self.transformer_block(g, p, &pi.block, fused)?;
        let t = Self::conv(g, p, pi.proj, t, 1)?;
        Self::conv(g, p, pi.refine, t, 1)
    }

    /// Full restoration pass. The output is not clamped.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(Error::Alignment(format!(
                "{} bound parameters for a network with {}",
                p.len(),
                self.params.len()
            )));
        }
        let mut x = self.embed(g, p, image)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for (l, blocks) in self.layout.encoder.iter().enumerate() {
            for b in blocks {
                x = self.transformer_block(g, p, b, x)?;
            }
            if let Some(&d) = self.layout.down.get(l) {
                skips.push(x);
                x = Self::conv(g, p, d, x, 2)?;
            }
        }
        for dec in &self.layout.decoder {
            let up = g.upsample_nearest2x(x)?;
            let up = Self::conv(g, p, dec.up, up, 1)?;
            let skip = skips[dec.level - 1];
            let cat = g.concat_channels(up, skip)?;
            x = Self::conv(g, p, dec.fuse, cat, 1)?;
            if let Some(pi) = &dec.prompt {
                let prompt = self.pgm(g, p, pi, x)?;
                x = self.pim(g, p, pi, prompt, x)?;
            }
            for b in &dec.blocks {
                x = self.transformer_block(g, p, b, x)?;
            }
        }
        let out = Self::conv(g, p, self.layout.output, x, 1)?;
        if self.config.global_residual {
            g.add(out, image)
        } else {
            Ok(out)
        }
    }

    /// Inference on one image with frozen parameters.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}
