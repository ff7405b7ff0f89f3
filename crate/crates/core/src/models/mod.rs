//! Three desk-scale classifier families spanning an inductive-bias axis:
//! a plain MLP, a residual CNN with explicit locality, and a small vision
//! transformer with optional hierarchical patch merging. Each ends in a
//! penultimate embedding layer and a 2-unit classification head.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::stimgen::Image;
use crate::tensornet::{
    Graph, NodeId, ParamSpec, ParameterSet, Tensor, TensorError,
};

pub const HEAD_CLASSES: usize = 2;
/// Index of the "many" logit.
pub const MANY_CLASS: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    MicroCnn,
    MicroVit,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Mlp, Family::MicroCnn, Family::MicroVit];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::MicroCnn => "micro_cnn",
            Family::MicroVit => "micro_vit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flatten → dense(256) → ReLU → dense(256) → ReLU → dense(2); the second
/// hidden activation is the embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub hidden: [usize; 2],
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            input_channels: 1,
            hidden: [256, 256],
        }
    }
}

/// Stem conv → residual stages → global average pool → dense embedding →
/// dense(2). Stage transitions downsample by stride 2 with a 1×1 projection
/// shortcut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    /// Stride of the 3×3 stem convolution.
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    /// Residual blocks per stage; same length as `widths`.
    pub blocks: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            input_channels: 1,
            stem_stride: 2,
            widths: vec![16, 32, 64],
            blocks: vec![1, 1, 2],
            embedding_dim: 64,
        }
    }
}

/// Patch embedding with learned positions → transformer blocks (optionally
/// merging 2×2 patch groups between stages) → token mean-pool → dense
/// embedding → dense(2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub patch_size: usize,
    pub hierarchical: bool,
    /// Width of the first stage; doubles after each merge when hierarchical.
    pub dim: usize,
    /// Blocks per stage; a single entry when not hierarchical.
    pub depths: Vec<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embedding_dim: usize,
    pub layer_norm: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            input_channels: 1,
            patch_size: 8,
            hierarchical: false,
            dim: 48,
            depths: vec![2],
            heads: 4,
            mlp_ratio: 2,
            embedding_dim: 64,
            layer_norm: false,
        }
    }
}

impl VitConfig {
    pub fn hierarchical_default() -> Self {
        Self {
            hierarchical: true,
            dim: 24,
            depths: vec![1, 1, 1],
            ..Self::default()
        }
    }

    /// Width at each stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.depths.len()).map(|s| self.dim << s).collect()
    }

    /// Token count entering each stage.
    pub fn stage_token_counts(&self) -> Vec<usize> {
        let grid = self.input_resolution / self.patch_size;
        (0..self.depths.len())
            .map(|s| (grid >> s) * (grid >> s))
            .collect()
    }
}

/// Architecture description; fully determines the parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NetworkConfig {
    Mlp(MlpConfig),
    MicroCnn(CnnConfig),
    MicroVit(VitConfig),
}

impl NetworkConfig {
    pub fn family(&self) -> Family {
        match self {
            NetworkConfig::Mlp(_) => Family::Mlp,
            NetworkConfig::MicroCnn(_) => Family::MicroCnn,
            NetworkConfig::MicroVit(_) => Family::MicroVit,
        }
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Mlp => NetworkConfig::Mlp(MlpConfig::default()),
            Family::MicroCnn => NetworkConfig::MicroCnn(CnnConfig::default()),
            Family::MicroVit => NetworkConfig::MicroVit(VitConfig::default()),
        }
    }

    pub fn input_resolution(&self) -> usize {
        match self {
            NetworkConfig::Mlp(c) => c.input_resolution,
            NetworkConfig::MicroCnn(c) => c.input_resolution,
            NetworkConfig::MicroVit(c) => c.input_resolution,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            NetworkConfig::Mlp(c) => c.input_channels,
            NetworkConfig::MicroCnn(c) => c.input_channels,
            NetworkConfig::MicroVit(c) => c.input_channels,
        }
    }

    /// Set the input resolution, keeping everything else.
    pub fn with_resolution(mut self, resolution: usize) -> Self {
        match &mut self {
            NetworkConfig::Mlp(c) => c.input_resolution = resolution,
            NetworkConfig::MicroCnn(c) => c.input_resolution = resolution,
            NetworkConfig::MicroVit(c) => c.input_resolution = resolution,
        }
        self
    }

    /// Penultimate embedding width.
    pub fn embedding_dim(&self) -> usize {
        match self {
            NetworkConfig::Mlp(c) => c.hidden[1],
            NetworkConfig::MicroCnn(c) => c.embedding_dim,
            NetworkConfig::MicroVit(c) => c.embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.input_resolution() == 0 || self.input_channels() == 0 {
            return bad("input resolution and channels must be positive".into());
        }
        match self {
            NetworkConfig::Mlp(c) => {
                if c.hidden.iter().any(|&h| h == 0) {
                    return bad("hidden sizes must be positive".into());
                }
            }
            NetworkConfig::MicroCnn(c) => {
                if c.widths.is_empty() || c.widths.len() != c.blocks.len() {
                    return bad(format!(
                        "widths ({}) and blocks ({}) must be non-empty and same length",
                        c.widths.len(),
                        c.blocks.len()
                    ));
                }
                if c.blocks.iter().any(|&b| b == 0) || c.widths.iter().any(|&w| w == 0) {
                    return bad("stage widths and block counts must be positive".into());
                }
                if c.stem_stride == 0 || c.embedding_dim == 0 {
                    return bad("stem stride and embedding dim must be positive".into());
                }
                let after_stem = c.input_resolution / c.stem_stride;
                let downsamples = c.widths.len() - 1;
                if after_stem == 0 || after_stem >> downsamples == 0 {
                    return bad("input resolution too small for the stage count".into());
                }
            }
            NetworkConfig::MicroVit(c) => {
                if c.patch_size == 0 || c.input_resolution % c.patch_size != 0 {
                    return bad(format!(
                        "patch size {} must divide input resolution {}",
                        c.patch_size, c.input_resolution
                    ));
                }
                if c.depths.is_empty() || c.depths.iter().any(|&d| d == 0) {
                    return bad("depths must be non-empty and positive".into());
                }
                if !c.hierarchical && c.depths.len() != 1 {
                    return bad("non-hierarchical config takes a single stage".into());
                }
                for (i, d) in c.stage_dims().iter().enumerate() {
                    if c.heads == 0 || d % c.heads != 0 {
                        return bad(format!(
                            "stage {i} width {d} not divisible by {} heads",
                            c.heads
                        ));
                    }
                }
                let grid = c.input_resolution / c.patch_size;
                let merges = c.depths.len() - 1;
                if merges > 0 && grid >> merges << merges != grid {
                    return bad(format!(
                        "patch grid {grid} cannot merge {merges} times"
                    ));
                }
                if grid >> merges == 0 {
                    return bad("too many merge stages for the patch grid".into());
                }
                if c.mlp_ratio == 0 || c.embedding_dim == 0 {
                    return bad("mlp ratio and embedding dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Declarative parameter list; drives initialization and counting.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>, ModelError> {
        self.validate()?;
        let mut specs = Vec::new();
        match self {
            NetworkConfig::Mlp(c) => {
                let in_dim = c.input_channels * c.input_resolution * c.input_resolution;
                let dims = [in_dim, c.hidden[0], c.hidden[1], HEAD_CLASSES];
                let names = ["dense1", "dense2", "head"];
                for (i, name) in names.iter().enumerate() {
                    specs.push(ParamSpec::weight(
                        format!("{name}.w"),
                        &[dims[i], dims[i + 1]],
                        dims[i],
                    ));
                    specs.push(ParamSpec::bias(format!("{name}.b"), &[dims[i + 1]]));
                }
            }
            NetworkConfig::MicroCnn(c) => {
                let w0 = c.widths[0];
                specs.push(ParamSpec::weight(
                    "stem.w",
                    &[w0, c.input_channels, 3, 3],
                    c.input_channels * 9,
                ));
                specs.push(ParamSpec::bias("stem.b", &[w0]));
                let mut in_c = w0;
                for (s, (&width, &blocks)) in c.widths.iter().zip(&c.blocks).enumerate() {
                    for b in 0..blocks {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let prefix = format!("s{s}.b{b}");
                        specs.push(ParamSpec::weight(
                            format!("{prefix}.conv1.w"),
                            &[width, in_c, 3, 3],
                            in_c * 9,
                        ));
                        specs.push(ParamSpec::bias(format!("{prefix}.conv1.b"), &[width]));
                        specs.push(ParamSpec::weight(
                            format!("{prefix}.conv2.w"),
                            &[width, width, 3, 3],
                            width * 9,
                        ));
                        specs.push(ParamSpec::bias(format!("{prefix}.conv2.b"), &[width]));
                        if stride != 1 || in_c != width {
                            specs.push(ParamSpec::weight(
                                format!("{prefix}.proj.w"),
                                &[width, in_c, 1, 1],
                                in_c,
                            ));
                            specs.push(ParamSpec::bias(format!("{prefix}.proj.b"), &[width]));
                        }
                        in_c = width;
                    }
                }
                specs.push(ParamSpec::weight(
                    "embed.w",
                    &[in_c, c.embedding_dim],
                    in_c,
                ));
                specs.push(ParamSpec::bias("embed.b", &[c.embedding_dim]));
                specs.push(ParamSpec::weight(
                    "head.w",
                    &[c.embedding_dim, HEAD_CLASSES],
                    c.embedding_dim,
                ));
                specs.push(ParamSpec::bias("head.b", &[HEAD_CLASSES]));
            }
            NetworkConfig::MicroVit(c) => {
                let dims = c.stage_dims();
                let tokens = c.stage_token_counts();
                let patch_feat = c.input_channels * c.patch_size * c.patch_size;
                specs.push(ParamSpec::weight("patch.w", &[patch_feat, dims[0]], patch_feat));
                specs.push(ParamSpec::bias("patch.b", &[dims[0]]));
                specs.push(ParamSpec::weight("pos", &[tokens[0], dims[0]], dims[0]));
                for (s, &depth) in c.depths.iter().enumerate() {
                    let d = dims[s];
                    for b in 0..depth {
                        let prefix = format!("s{s}.b{b}");
                        for proj in ["wq", "wk", "wv", "wo"] {
                            specs.push(ParamSpec::weight(
                                format!("{prefix}.attn.{proj}"),
                                &[d, d],
                                d,
                            ));
                        }
                        if c.layer_norm {
                            specs.push(ParamSpec::norm_scale(format!("{prefix}.ln1.scale"), &[d]));
                            specs.push(ParamSpec::norm_scale(format!("{prefix}.ln2.scale"), &[d]));
                        }
                        specs.push(ParamSpec::weight(
                            format!("{prefix}.mlp.w1"),
                            &[d, c.mlp_ratio * d],
                            d,
                        ));
                        specs.push(ParamSpec::bias(
                            format!("{prefix}.mlp.b1"),
                            &[c.mlp_ratio * d],
                        ));
                        specs.push(ParamSpec::weight(
                            format!("{prefix}.mlp.w2"),
                            &[c.mlp_ratio * d, d],
                            c.mlp_ratio * d,
                        ));
                        specs.push(ParamSpec::bias(format!("{prefix}.mlp.b2"), &[d]));
                    }
                    if s + 1 < c.depths.len() {
                        specs.push(ParamSpec::weight(
                            format!("merge{s}.w"),
                            &[4 * d, 2 * d],
                            4 * d,
                        ));
                        specs.push(ParamSpec::bias(format!("merge{s}.b"), &[2 * d]));
                    }
                }
                let d_last = *dims.last().expect("at least one stage");
                specs.push(ParamSpec::weight(
                    "embed.w",
                    &[d_last, c.embedding_dim],
                    d_last,
                ));
                specs.push(ParamSpec::bias("embed.b", &[c.embedding_dim]));
                specs.push(ParamSpec::weight(
                    "head.w",
                    &[c.embedding_dim, HEAD_CLASSES],
                    c.embedding_dim,
                ));
                specs.push(ParamSpec::bias("head.b", &[HEAD_CLASSES]));
            }
        }
        Ok(specs)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self.param_specs()?.iter().map(ParamSpec::count).sum())
    }
}

/// Logit and embedding node ids from one forward pass; the embedding is the
/// penultimate activation, produced by the same pass as the logits.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub embedding: NodeId,
}

/// A classifier: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Network<S> {
    pub config: NetworkConfig,
    pub params: ParameterSet<S>,
}

pub fn build_mlp<S: Scalar>(config: MlpConfig, seed: u64) -> Result<Network<S>, ModelError> {
    Network::build(NetworkConfig::Mlp(config), seed)
}

pub fn build_microcnn<S: Scalar>(config: CnnConfig, seed: u64) -> Result<Network<S>, ModelError> {
    Network::build(NetworkConfig::MicroCnn(config), seed)
}

pub fn build_microvit<S: Scalar>(config: VitConfig, seed: u64) -> Result<Network<S>, ModelError> {
    Network::build(NetworkConfig::MicroVit(config), seed)
}

impl<S: Scalar> Network<S> {
    /// Build with freshly initialized parameters.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        let specs = config.param_specs()?;
        let params = ParameterSet::init(&specs, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParameterSet<S>) -> Self {
        Self { config, params }
    }

    pub fn family(&self) -> Family {
        self.config.family()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_count()
    }

    /// Insert all parameters as graph leaves.
    pub fn mount(&self, g: &mut Graph<S>, trainable: bool) -> BTreeMap<String, NodeId> {
        self.params
            .iter()
            .map(|(name, p)| (name.clone(), g.leaf(p.tensor.clone(), trainable)))
            .collect()
    }

    /// Batch input tensor for this architecture, replicating the single
    /// stimulus channel when the config wants more.
    pub fn input_tensor(&self, images: &[&Image]) -> Result<Tensor<S>, ModelError> {
        let res = self.config.input_resolution();
        let channels = self.config.input_channels();
        for img in images {
            if img.width != res || img.height != res {
                return Err(ModelError::InvalidConfig(format!(
                    "image {}x{} does not match input resolution {res}",
                    img.width, img.height
                )));
            }
        }
        let hw = res * res;
        let mut data = Vec::with_capacity(images.len() * channels * hw);
        for img in images {
            let plane = img.to_scalars::<S>();
            for _ in 0..channels {
                data.extend_from_slice(&plane);
            }
        }
        let shape = match self.config {
            NetworkConfig::Mlp(_) => vec![images.len(), channels * hw],
            _ => vec![images.len(), channels, res, res],
        };
        Ok(Tensor::new(shape, data)?)
    }

    /// One forward pass producing logits `[batch, 2]` and the penultimate
    /// embedding `[batch, embedding_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        input: NodeId,
        params: &BTreeMap<String, NodeId>,
    ) -> Result<ForwardOutput, ModelError> {
        let node = |name: &str| -> Result<NodeId, ModelError> {
            params
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter {name}")))
        };
        let dense = |g: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId, ModelError> {
            let w = node(&format!("{name}.w"))?;
            let b = node(&format!("{name}.b"))?;
            let y = g.matmul(x, w)?;
            Ok(g.add_bias(y, b)?)
        };

        match &self.config {
            NetworkConfig::Mlp(_) => {
                let h1 = dense(g, input, "dense1")?;
                let h1 = g.relu(h1);
                let h2 = dense(g, h1, "dense2")?;
                let embedding = g.relu(h2);
                let logits = dense(g, embedding, "head")?;
                Ok(ForwardOutput { logits, embedding })
            }
            NetworkConfig::MicroCnn(c) => {
                let conv = |g: &mut Graph<S>,
                            x: NodeId,
                            name: &str,
                            stride: usize,
                            pad: usize|
                 -> Result<NodeId, ModelError> {
                    let w = node(&format!("{name}.w"))?;
                    let b = node(&format!("{name}.b"))?;
                    let y = g.conv2d(x, w, stride, pad)?;
                    Ok(g.add_channel_bias(y, b)?)
                };
                let mut x = conv(g, input, "stem", c.stem_stride, 1)?;
                x = g.relu(x);
                let mut in_c = c.widths[0];
                for (s, (&width, &blocks)) in c.widths.iter().zip(&c.blocks).enumerate() {
                    for b in 0..blocks {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let prefix = format!("s{s}.b{b}");
                        let mut h = conv(g, x, &format!("{prefix}.conv1"), stride, 1)?;
                        h = g.relu(h);
                        h = conv(g, h, &format!("{prefix}.conv2"), 1, 1)?;
                        let shortcut = if stride != 1 || in_c != width {
                            conv(g, x, &format!("{prefix}.proj"), stride, 0)?
                        } else {
                            x
                        };
                        let sum = g.add(h, shortcut)?;
                        x = g.relu(sum);
                        in_c = width;
                    }
                }
                let pooled = g.global_avg_pool(x)?;
                let emb = dense(g, pooled, "embed")?;
                let embedding = g.relu(emb);
                let logits = dense(g, embedding, "head")?;
                Ok(ForwardOutput { logits, embedding })
            }
            NetworkConfig::MicroVit(c) => {
                let dims = c.stage_dims();
                let tokens = c.stage_token_counts();
                let batch = g.value(input).shape()[0];
                let patches = g.extract_patches(input, c.patch_size)?;
                let flat = g.reshape(
                    patches,
                    &[batch * tokens[0], c.input_channels * c.patch_size * c.patch_size],
                )?;
                let embedded = dense(g, flat, "patch")?;
                let mut x = g.reshape(embedded, &[batch, tokens[0], dims[0]])?;
                let pos = node("pos")?;
                x = g.add_bias(x, pos)?;
                for (s, &depth) in c.depths.iter().enumerate() {
                    let d = dims[s];
                    let t = tokens[s];
                    for blk in 0..depth {
                        let prefix = format!("s{s}.b{blk}");
                        let attn_in = if c.layer_norm {
                            let scale = node(&format!("{prefix}.ln1.scale"))?;
                            g.layer_norm_scale(x, scale)?
                        } else {
                            x
                        };
                        let attn = g.attention(
                            attn_in,
                            node(&format!("{prefix}.attn.wq"))?,
                            node(&format!("{prefix}.attn.wk"))?,
                            node(&format!("{prefix}.attn.wv"))?,
                            node(&format!("{prefix}.attn.wo"))?,
                            c.heads,
                        )?;
                        x = g.add(x, attn)?;
                        let mlp_in = if c.layer_norm {
                            let scale = node(&format!("{prefix}.ln2.scale"))?;
                            g.layer_norm_scale(x, scale)?
                        } else {
                            x
                        };
                        let flat = g.reshape(mlp_in, &[batch * t, d])?;
                        let w1 = node(&format!("{prefix}.mlp.w1"))?;
                        let b1 = node(&format!("{prefix}.mlp.b1"))?;
                        let w2 = node(&format!("{prefix}.mlp.w2"))?;
                        let b2 = node(&format!("{prefix}.mlp.b2"))?;
                        let mut f = g.matmul(flat, w1)?;
                        f = g.add_bias(f, b1)?;
                        f = g.relu(f);
                        f = g.matmul(f, w2)?;
                        f = g.add_bias(f, b2)?;
                        let f = g.reshape(f, &[batch, t, d])?;
                        x = g.add(x, f)?;
                    }
                    if s + 1 < c.depths.len() {
                        let merged = g.merge_patches(x)?;
                        let flat = g.reshape(merged, &[batch * tokens[s + 1], 4 * d])?;
                        let w = node(&format!("merge{s}.w"))?;
                        let b = node(&format!("merge{s}.b"))?;
                        let proj = g.matmul(flat, w)?;
                        let proj = g.add_bias(proj, b)?;
                        x = g.reshape(proj, &[batch, tokens[s + 1], dims[s + 1]])?;
                    }
                }
                let pooled = g.mean_axis1(x)?;
                let emb = dense(g, pooled, "embed")?;
                let embedding = g.relu(emb);
                let logits = dense(g, embedding, "head")?;
                Ok(ForwardOutput { logits, embedding })
            }
        }
    }

    /// Forward pass on raw images with frozen parameters; returns the logits
    /// and embedding tensors.
    pub fn infer(&self, images: &[&Image]) -> Result<(Tensor<S>, Tensor<S>), ModelError> {
        let mut g = Graph::new();
        let params = self.mount(&mut g, false);
        let input = g.constant(self.input_tensor(images)?);
        let out = self.forward(&mut g, input, &params)?;
        Ok((g.value(out.logits).clone(), g.value(out.embedding).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimgen::Image;

    #[test]
    fn mlp_parameter_count_at_16x16_matches_closed_form() {
        let cfg = NetworkConfig::Mlp(MlpConfig {
            input_resolution: 16,
            input_channels: 1,
            hidden: [256, 256],
        });
        // 256·256+256 + 256·256+256 + 256·2+2
        assert_eq!(cfg.parameter_count().unwrap(), 132_098);
    }

    #[test]
    fn mlp_parameter_count_at_224x224x3() {
        let cfg = NetworkConfig::Mlp(MlpConfig {
            input_resolution: 224,
            input_channels: 3,
            hidden: [256, 256],
        });
        assert_eq!(cfg.parameter_count().unwrap(), 38_601_730);
    }

    #[test]
    fn mlp_zero_input_follows_the_bias_path() {
        let net: Network<f64> =
            Network::build(NetworkConfig::Mlp(MlpConfig::default()), 3).unwrap();
        let img = Image::black(64, 64);
        let (logits, _) = net.infer(&[&img]).unwrap();
        // biases are zero-initialized, so the whole path collapses to zero
        assert_eq!(logits.data(), &[0.0, 0.0]);
    }

    #[test]
    fn cnn_parameter_count_matches_architecture_sum() {
        let c = CnnConfig::default();
        let cfg = NetworkConfig::MicroCnn(c.clone());
        // stem + stage convs + projections + embedding + head, counted by hand
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let mut expect = conv(16, 1, 3); // stem
        expect += conv(16, 16, 3) + conv(16, 16, 3); // s0.b0
        expect += conv(32, 16, 3) + conv(32, 32, 3) + conv(32, 16, 1); // s1.b0
        expect += conv(64, 32, 3) + conv(64, 64, 3) + conv(64, 32, 1); // s2.b0
        expect += conv(64, 64, 3) + conv(64, 64, 3); // s2.b1
        expect += 64 * c.embedding_dim + c.embedding_dim; // embed
        expect += c.embedding_dim * 2 + 2; // head
        assert_eq!(cfg.parameter_count().unwrap(), expect);
        // desk-scale envelope
        assert!((100_000..=300_000).contains(&expect), "{expect}");
    }

    #[test]
    fn cnn_count_invariant_to_input_resolution() {
        let base = NetworkConfig::MicroCnn(CnnConfig::default())
            .parameter_count()
            .unwrap();
        let doubled = NetworkConfig::MicroCnn(CnnConfig {
            input_resolution: 128,
            ..CnnConfig::default()
        })
        .parameter_count()
        .unwrap();
        assert_eq!(base, doubled);
    }

    #[test]
    fn residual_block_with_zero_convs_is_identity() {
        let mut net: Network<f64> = Network::build(
            NetworkConfig::MicroCnn(CnnConfig {
                input_resolution: 8,
                stem_stride: 1,
                widths: vec![4],
                blocks: vec![1],
                embedding_dim: 4,
                ..CnnConfig::default()
            }),
            5,
        )
        .unwrap();
        // zero the block convs; stem stays random so the block input is
        // non-trivial (and non-negative after relu)
        for name in ["s0.b0.conv1.w", "s0.b0.conv2.w"] {
            let p = net.params.get_mut(name).unwrap();
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        let mut g = Graph::new();
        let params = net.mount(&mut g, false);
        let px: Vec<u8> = (0..64).map(|i| u8::from(i % 5 == 0)).collect();
        let img = Image::from_binary_pixels(8, 8, px);
        let input = g.constant(net.input_tensor(&[&img]).unwrap());
        // run stem manually to capture the block input
        let stem_w = params["stem.w"];
        let stem_b = params["stem.b"];
        let stem = g.conv2d(input, stem_w, 1, 1).unwrap();
        let stem = g.add_channel_bias(stem, stem_b).unwrap();
        let block_in = g.relu(stem);
        // block with zero convs: relu(0 + x) == x for x >= 0
        let conv1w = params["s0.b0.conv1.w"];
        let conv1b = params["s0.b0.conv1.b"];
        let conv2w = params["s0.b0.conv2.w"];
        let conv2b = params["s0.b0.conv2.b"];
        let h = g.conv2d(block_in, conv1w, 1, 1).unwrap();
        let h = g.add_channel_bias(h, conv1b).unwrap();
        let h = g.relu(h);
        let h = g.conv2d(h, conv2w, 1, 1).unwrap();
        let h = g.add_channel_bias(h, conv2b).unwrap();
        let sum = g.add(h, block_in).unwrap();
        let out = g.relu(sum);
        assert_eq!(g.value(out).data(), g.value(block_in).data());
    }

    #[test]
    fn vit_token_counts() {
        let flat = VitConfig::default();
        assert_eq!(flat.stage_token_counts(), vec![64]);
        let hier = VitConfig::hierarchical_default();
        assert_eq!(hier.stage_token_counts(), vec![64, 16, 4]);
        assert_eq!(hier.stage_dims(), vec![24, 48, 96]);
    }

    #[test]
    fn vit_forward_shapes() {
        for cfg in [VitConfig::default(), VitConfig::hierarchical_default()] {
            let net: Network<f64> = Network::build(NetworkConfig::MicroVit(cfg), 2).unwrap();
            let img = Image::black(64, 64);
            let (logits, emb) = net.infer(&[&img]).unwrap();
            assert_eq!(logits.shape(), &[1, 2]);
            assert_eq!(emb.shape(), &[1, 64]);
        }
    }

    #[test]
    fn vit_logits_invariant_to_joint_patch_and_position_permutation() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let cfg = VitConfig {
            input_resolution: 16,
            patch_size: 4,
            dim: 8,
            heads: 2,
            depths: vec![2],
            embedding_dim: 8,
            ..VitConfig::default()
        };
        let mut net: Network<f64> =
            Network::build(NetworkConfig::MicroVit(cfg.clone()), 11).unwrap();

        // random binary image
        let mut rng = crate::rng::stream(55, &[1]);
        let pixels: Vec<u8> = (0..256).map(|_| rng.gen_range(0..2u8)).collect();
        let img = Image::from_binary_pixels(16, 16, pixels.clone());
        let (logits_before, _) = net.infer(&[&img]).unwrap();

        // permute the 16 patches of the image and the rows of `pos` together
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let grid = 4usize;
        let p = cfg.patch_size;
        let mut permuted = vec![0u8; 256];
        for (dst_tok, &src_tok) in perm.iter().enumerate() {
            let (dy, dx) = (dst_tok / grid, dst_tok % grid);
            let (sy, sx) = (src_tok / grid, src_tok % grid);
            for yy in 0..p {
                for xx in 0..p {
                    permuted[(dy * p + yy) * 16 + dx * p + xx] =
                        pixels[(sy * p + yy) * 16 + sx * p + xx];
                }
            }
        }
        let pos = net.params.get("pos").unwrap().tensor.clone();
        let d = cfg.dim;
        let mut pos_data = vec![0.0; pos.len()];
        for (dst_tok, &src_tok) in perm.iter().enumerate() {
            pos_data[dst_tok * d..(dst_tok + 1) * d]
                .copy_from_slice(&pos.data()[src_tok * d..(src_tok + 1) * d]);
        }
        net.params.get_mut("pos").unwrap().tensor = Tensor::new(vec![16, d], pos_data).unwrap();
        let img2 = Image::from_binary_pixels(16, 16, permuted);
        let (logits_after, _) = net.infer(&[&img2]).unwrap();

        for (a, b) in logits_before.data().iter().zip(logits_after.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net: Network<f64> =
            Network::build(NetworkConfig::MicroCnn(CnnConfig::default()), 8).unwrap();
        let img = Image::black(64, 64);
        let (a, _) = net.infer(&[&img]).unwrap();
        let (b, _) = net.infer(&[&img]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(NetworkConfig::MicroVit(VitConfig {
            patch_size: 7,
            ..VitConfig::default()
        })
        .validate()
        .is_err());
        assert!(NetworkConfig::MicroVit(VitConfig {
            dim: 50, // not divisible by 4 heads
            ..VitConfig::default()
        })
        .validate()
        .is_err());
        assert!(NetworkConfig::MicroCnn(CnnConfig {
            widths: vec![16, 32],
            blocks: vec![1],
            ..CnnConfig::default()
        })
        .validate()
        .is_err());
    }
}
