//! Residual classifier and encoder-decoder segmenter built from a shared
//! `(c, d, n, blocks)` parameterization, plus the `.wsm` model file format.
//!
//! Layout of both models (every conv is 3x3, same-zero padded, `c` channels):
//!
//! ```text
//! stem:        conv(1 -> c) -> bn -> relu
//! down{l}:     blocks residual blocks, then 2x2 max pool     (l = 0..d)
//! classifier:  global average pool -> linear(c -> classes) -> softmax
//! segmenter:   for l = d-1 down to 0:
//!                  upsample x2, add the down{l} output taken before its pool,
//!                  blocks residual blocks (up{l})
//!              conv(c -> 1, with bias) -> sigmoid
//! ```
//!
//! Residual block `k` of level `l` is named `down{l}.block{k}` and its
//! conv-BN-ReLU stages `down{l}.block{k}.stage{s}`; each stage owns
//! `.conv.weight`, `.bn.gamma` and `.bn.beta`. Convs followed by batch norm
//! carry no bias. The classifier head is `head.linear.{weight,bias}`, the
//! segmenter head `head.conv.{weight,bias}`.

use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BatchStats, ConvBnRelu, ConvLayer, LinearLayer, Mode, ResidualBlock};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels in every hidden layer.
    pub c: usize,
    /// Number of pooling levels.
    pub d: usize,
    /// Conv-BN-ReLU stages per residual block.
    pub n: usize,
    /// Residual blocks per level.
    #[serde(alias = "bn", alias = "N")]
    pub blocks: usize,
    pub num_classes: usize,
    /// `(height, width)` of the grayscale input.
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 8,
            d: 2,
            n: 1,
            blocks: 1,
            num_classes: 8,
            input_size: (64, 64),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c", self.c),
            ("d", self.d),
            ("n", self.n),
            ("blocks", self.blocks),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("model config `{name}` must be >= 1")));
            }
        }
        let (h, w) = self.input_size;
        let unit = 1usize
            .checked_shl(self.d as u32)
            .ok_or_else(|| Error::Invalid(format!("d = {} is too large", self.d)))?;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Divisibility { h, w, d: self.d });
        }
        Ok(())
    }

    /// Conv layers in the classifier: `d * n * blocks + 1`.
    pub fn depth(&self) -> usize {
        self.d * self.n * self.blocks + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Segmenter,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Classifier(LinearLayer),
    Segmenter(ConvLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    params: ParamStore,
    stem: ConvBnRelu,
    down: Vec<Vec<ResidualBlock>>,
    // Execution order: deepest level first.
    up: Vec<Vec<ResidualBlock>>,
    head: Head,
}

impl Model {
    pub fn classifier(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(ModelKind::Classifier, config, seed)
    }

    pub fn segmenter(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(ModelKind::Segmenter, config, seed)
    }

    pub fn build(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.c;
        let mut params = ParamStore::new();
        let mut layer = 0u64;
        let mut next_seed = || {
            layer += 1;
            derive_seed(seed, &[layer])
        };
        let stem = ConvBnRelu::new(&mut params, "stem", 1, c, next_seed());
        let mut level = |params: &mut ParamStore, prefix: &str, l: usize| -> Vec<ResidualBlock> {
            (0..config.blocks)
                .map(|k| ResidualBlock::new(params, &format!("{prefix}{l}.block{k}"), c, config.n, next_seed()))
                .collect()
        };
        let down: Vec<_> = (0..config.d).map(|l| level(&mut params, "down", l)).collect();
        let up: Vec<_> = match kind {
            ModelKind::Classifier => Vec::new(),
            ModelKind::Segmenter => (0..config.d).rev().map(|l| level(&mut params, "up", l)).collect(),
        };
        let head_seed = derive_seed(seed, &[u64::MAX]);
        let head = match kind {
            ModelKind::Classifier => {
                Head::Classifier(LinearLayer::new(&mut params, "head.linear", c, config.num_classes, head_seed))
            }
            ModelKind::Segmenter => Head::Segmenter(ConvLayer::new(&mut params, "head.conv", c, 1, true, head_seed)),
        };
        Ok(Self {
            kind,
            config,
            params,
            stem,
            down,
            up,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Number of 3x3 convolutions in the network.
    pub fn conv_count(&self) -> usize {
        let blocks: usize = self
            .down
            .iter()
            .chain(&self.up)
            .flatten()
            .map(ResidualBlock::conv_count)
            .sum();
        let head = usize::from(self.kind == ModelKind::Segmenter);
        1 + blocks + head
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        std::iter::once(&mut self.stem.bn).chain(
            self.down
                .iter_mut()
                .chain(self.up.iter_mut())
                .flatten()
                .flat_map(|b| b.stages.iter_mut().map(|s| &mut s.bn)),
        )
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNormLayer> {
        std::iter::once(&self.stem.bn).chain(
            self.down
                .iter()
                .chain(self.up.iter())
                .flatten()
                .flat_map(|b| b.stages.iter().map(|s| &s.bn)),
        )
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x)?;
        let (h, w) = self.config.input_size;
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Invalid(format!("expected [batch, 1, {h}, {w}] input, got {s:?}")));
        }
        if s[2] != h || s[3] != w {
            return Err(Error::ShapeMismatch(s.to_vec(), vec![s[0], 1, h, w]));
        }
        Ok(())
    }

    /// Forward pass. In train mode, batch statistics of every batch-norm
    /// layer are appended to `stats` in execution order.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<Var> {
        self.forward_with(g, &self.params, x, mode, stats)
    }

    /// [`Model::forward`] reading parameter values from `p`, which must have
    /// this model's layout (for example a perturbed copy of [`Model::params`]).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        if p.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "parameter store holds {} tensors, model has {}",
                p.len(),
                self.params.len()
            )));
        }
        let mut h = self.stem.forward(g, p, x, mode, stats)?;
        let mut skips = Vec::with_capacity(self.config.d);
        for level in &self.down {
            for block in level {
                h = block.forward(g, p, h, mode, stats)?;
            }
            skips.push(h);
            h = g.maxpool2x2(h)?;
        }
        match &self.head {
            Head::Classifier(linear) => {
                let pooled = g.global_avg_pool(h)?;
                linear.forward_softmax(g, p, pooled)
            }
            Head::Segmenter(conv) => {
                for level in &self.up {
                    h = g.bilinear_upsample_x2(h)?;
                    let skip = skips.pop().expect("one skip per level");
                    h = g.add(h, skip)?;
                    for block in level {
                        h = block.forward(g, p, h, mode, stats)?;
                    }
                }
                let logits = conv.forward(g, p, h)?;
                g.sigmoid(logits)
            }
        }
    }

    /// Train-mode forward pass that folds the batch statistics into the
    /// running averages.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut stats = Vec::new();
        let out = self.forward(g, x, Mode::Train, &mut stats)?;
        for (bn, s) in self.batch_norms_mut().zip(&stats) {
            bn.update_running(s);
        }
        Ok(out)
    }

    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward(g, x, Mode::Eval, &mut Vec::new())
    }

    /// Eval-mode inference on a `[batch, 1, H, W]` tensor. Returns class
    /// probabilities `[batch, classes]` or masks `[batch, 1, H, W]`.
    pub fn infer(&self, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images);
        let y = self.forward_eval(&mut g, x)?;
        Ok(g.value(y)?.clone())
    }

    /// Bytes of the `.wsm` model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Classifier => 0,
            ModelKind::Segmenter => 1,
        });
        let cfg = &self.config;
        for v in [
            cfg.c,
            cfg.d,
            cfg.n,
            cfg.blocks,
            cfg.num_classes,
            cfg.input_size.0,
            cfg.input_size.1,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let entries = self.directory();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, _) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, _, data) in &entries {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Named tensors in file order: parameters first, then batch-norm running
    /// statistics.
    fn directory(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut entries: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data()))
            .collect();
        for bn in self.batch_norms() {
            let base = self.params.name(bn.gamma).trim_end_matches(".gamma").to_string();
            entries.push((format!("{base}.running_mean"), vec![bn.running_mean.len()], &bn.running_mean));
            entries.push((format!("{base}.running_var"), vec![bn.running_var.len()], &bn.running_var));
        }
        entries
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::MalformedModel("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let kind = match r.take(1)?[0] {
            0 => ModelKind::Classifier,
            1 => ModelKind::Segmenter,
            k => return Err(Error::MalformedModel(format!("unknown model kind {k}"))),
        };
        let mut nums = [0usize; 7];
        for v in &mut nums {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            c: nums[0],
            d: nums[1],
            n: nums[2],
            blocks: nums[3],
            num_classes: nums[4],
            input_size: (nums[5], nums[6]),
        };
        let count = r.u32()? as usize;
        let mut dir = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::MalformedModel("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            dir.push((name, shape));
        }
        let mut model = Self::build(kind, config, 0).map_err(|e| Error::MalformedModel(e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> =
            model.directory().into_iter().map(|(n, s, _)| (n, s)).collect();
        if dir != expected {
            return Err(Error::MalformedModel("parameter directory does not match the model layout".into()));
        }
        let mut values = Vec::with_capacity(dir.len());
        for (_, shape) in &dir {
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or(Error::Truncated)?)?;
            values.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>(),
            );
        }
        let body_end = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::MalformedModel("trailing bytes after checksum".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
            return Err(Error::Checksum);
        }
        let n_params = model.params.len();
        for (i, v) in values.iter().take(n_params).enumerate() {
            model.params.iter_mut().nth(i).unwrap().tensor.data_mut().copy_from_slice(v);
        }
        let mut rest = values[n_params..].iter();
        for bn in model.batch_norms_mut() {
            bn.running_mean.copy_from_slice(rest.next().unwrap());
            bn.running_var.copy_from_slice(rest.next().unwrap());
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const MAGIC: &[u8; 4] = b"WSM\0";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn cfg(c: usize, d: usize, n: usize, blocks: usize, size: usize) -> ModelConfig {
        ModelConfig {
            c,
            d,
            n,
            blocks,
            num_classes: 3,
            input_size: (size, size),
        }
    }

    #[test]
    fn classifier_depth_law() {
        let m = Model::classifier(cfg(2, 3, 2, 2, 8), 0).unwrap();
        assert_eq!(m.conv_count(), 13);
        let m = Model::classifier(cfg(2, 1, 1, 1, 8), 0).unwrap();
        assert_eq!(m.conv_count(), 2);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            Model::classifier(cfg(2, 3, 1, 1, 12), 0),
            Err(Error::Divisibility { h: 12, w: 12, d: 3 })
        ));
        assert!(Model::segmenter(cfg(0, 1, 1, 1, 8), 0).is_err());
    }

    #[test]
    fn classifier_forward_shape_and_rows() {
        let config = ModelConfig {
            num_classes: 5,
            ..cfg(4, 2, 1, 1, 64)
        };
        let mut m = Model::classifier(config, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 1, 64, 64], Init::Uniform { low: 0.0, high: 1.0, seed: 2 }).unwrap());
        let y = m.forward_train(&mut g, x).unwrap();
        let v = g.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 5]);
        for row in v.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segmenter_shape_and_range() {
        for (d, size) in [(1, 8), (2, 16), (3, 16)] {
            let m = Model::segmenter(cfg(3, d, 1, 2, size), 3).unwrap();
            assert_eq!(m.conv_count(), 2 * d * 2 + 2);
            let x = Tensor::new(&[2, 1, size, size], Init::Normal { std: 3.0, seed: 4 }).unwrap();
            let y = m.infer(x).unwrap();
            assert_eq!(y.shape(), &[2, 1, size, size]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn segmenter_d1_parameter_layout() {
        // Enumerated by hand from the construction order.
        let m = Model::segmenter(cfg(2, 1, 1, 1, 8), 0).unwrap();
        let expect = [
            "stem.conv.weight",
            "stem.bn.gamma",
            "stem.bn.beta",
            "down0.block0.stage0.conv.weight",
            "down0.block0.stage0.bn.gamma",
            "down0.block0.stage0.bn.beta",
            "up0.block0.stage0.conv.weight",
            "up0.block0.stage0.bn.gamma",
            "up0.block0.stage0.bn.beta",
            "head.conv.weight",
            "head.conv.bias",
        ];
        assert_eq!(m.param_names(), expect);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::segmenter(cfg(3, 2, 1, 1, 16), 9).unwrap();
        let b = Model::segmenter(cfg(3, 2, 1, 1, 16), 9).unwrap();
        let c = Model::segmenter(cfg(3, 2, 1, 1, 16), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::classifier(cfg(2, 1, 1, 1, 8), 5).unwrap();
        m.batch_norms_mut().next().unwrap().running_mean[0] = 0.25;
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_stream() {
        let bytes = Model::classifier(cfg(2, 1, 1, 1, 8), 5).unwrap().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Model::from_bytes(&bytes[..cut]), Err(Error::Truncated)), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = Model::classifier(cfg(2, 1, 1, 1, 8), 5).unwrap().to_bytes();
        bytes[4] = 7;
        assert!(matches!(
            Model::from_bytes(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn checksum_failure() {
        let mut bytes = Model::segmenter(cfg(2, 1, 1, 1, 8), 5).unwrap().to_bytes();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(Model::from_bytes(&bytes), Err(Error::Checksum)));
    }
}
