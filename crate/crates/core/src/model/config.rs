use crate::kv::{join, KvError, KvMap};

use super::ModelError;

/// Declarative architecture description.
///
/// The defaults describe the reference network: four parallel input
/// convolutions (3, 5, 7, 11), six two-branch blocks (3, 5) with stride-2
/// downsampling in blocks 2 and 4, two 4×4 transposed-convolution decoder
/// stages, dropout 0.4 and a two-class 1×1 classifier, all 24 channels wide.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub input_kernels: Vec<usize>,
    pub block_kernels: Vec<usize>,
    pub num_blocks: usize,
    /// 1-based indices of the blocks whose convolutions use stride 2.
    pub stride2_blocks: Vec<usize>,
    pub decoder_kernel: usize,
    pub decoder_stages: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            width: 24,
            input_kernels: vec![3, 5, 7, 11],
            block_kernels: vec![3, 5],
            num_blocks: 6,
            stride2_blocks: vec![2, 4],
            decoder_kernel: 4,
            decoder_stages: 2,
            dropout_p: 0.4,
            num_classes: 2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Keys read by [`ModelConfig::from_kv`].
    pub const KEYS: &'static [&'static str] = &[
        "model.in_channels",
        "model.width",
        "model.input_kernels",
        "model.block_kernels",
        "model.num_blocks",
        "model.stride2_blocks",
        "model.decoder_kernel",
        "model.decoder_stages",
        "model.dropout_p",
        "model.num_classes",
        "model.bn_epsilon",
        "model.bn_momentum",
    ];

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be at least 1".into());
        }
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, list) in [("input_kernels", &self.input_kernels), ("block_kernels", &self.block_kernels)] {
            if list.is_empty() {
                return fail(format!("{name} must not be empty"));
            }
            if let Some(k) = list.iter().find(|&&k| k % 2 == 0) {
                return fail(format!("{name} must be odd, got {k}"));
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return fail(format!("{name} contains duplicates"));
            }
        }
        if self.decoder_kernel < 2 || self.decoder_kernel % 2 != 0 {
            return fail(format!(
                "decoder_kernel must be even and at least 2, got {}",
                self.decoder_kernel
            ));
        }
        let mut strided = self.stride2_blocks.clone();
        strided.sort_unstable();
        strided.dedup();
        if strided.len() != self.stride2_blocks.len() {
            return fail("stride2_blocks contains duplicates".into());
        }
        if let Some(b) = strided.iter().find(|&&b| b == 0 || b > self.num_blocks) {
            return fail(format!("stride2_blocks entry {b} outside 1..={}", self.num_blocks));
        }
        if self.decoder_stages != strided.len() {
            return fail(format!(
                "decoder_stages ({}) must equal the number of stride-2 blocks ({})",
                self.decoder_stages,
                strided.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !(self.bn_epsilon > 0.0) {
            return fail(format!("bn_epsilon must be positive, got {}", self.bn_epsilon));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return fail(format!("bn_momentum must be in (0, 1), got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn is_strided(&self, block: usize) -> bool {
        self.stride2_blocks.contains(&block)
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.decoder_stages
    }

    /// Padding that makes a stride-2 transposed convolution double its input.
    pub fn decoder_padding(&self) -> usize {
        (self.decoder_kernel - 2) / 2
    }

    pub fn write_kv(&self, map: &mut KvMap) {
        map.set("model.in_channels", self.in_channels);
        map.set("model.width", self.width);
        map.set("model.input_kernels", join(&self.input_kernels));
        map.set("model.block_kernels", join(&self.block_kernels));
        map.set("model.num_blocks", self.num_blocks);
        map.set("model.stride2_blocks", join(&self.stride2_blocks));
        map.set("model.decoder_kernel", self.decoder_kernel);
        map.set("model.decoder_stages", self.decoder_stages);
        map.set("model.dropout_p", self.dropout_p);
        map.set("model.num_classes", self.num_classes);
        map.set("model.bn_epsilon", self.bn_epsilon);
        map.set("model.bn_momentum", self.bn_momentum);
    }

    /// Reads `model.*` keys over the defaults; other keys are ignored.
    pub fn from_kv(map: &KvMap) -> Result<Self, KvError> {
        let mut c = ModelConfig::default();
        macro_rules! scalar {
            ($field:ident) => {
                if let Some(v) = map.parsed(concat!("model.", stringify!($field)))? {
                    c.$field = v;
                }
            };
        }
        macro_rules! list {
            ($field:ident) => {
                if let Some(v) = map.list(concat!("model.", stringify!($field)))? {
                    c.$field = v;
                }
            };
        }
        scalar!(in_channels);
        scalar!(width);
        list!(input_kernels);
        list!(block_kernels);
        scalar!(num_blocks);
        list!(stride2_blocks);
        scalar!(decoder_kernel);
        scalar!(decoder_stages);
        scalar!(dropout_p);
        scalar!(num_classes);
        scalar!(bn_epsilon);
        scalar!(bn_momentum);
        Ok(c)
    }
}
