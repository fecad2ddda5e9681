//! Closed-form parameter, multiply-add and receptive-field accounting.

use super::{io, Model, ModelConfig, ModelError};
use crate::tensor::kernels::conv_output_size;

/// Trainable parameter count of the network described by `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let w = config.width;
    let bn = 2 * w;
    let input: usize = config
        .input_kernels
        .iter()
        .map(|&k| k * k * config.in_channels * w + bn)
        .sum();
    let block: usize = config.block_kernels.iter().map(|&k| k * k * w * w + bn).sum();
    let dk = config.decoder_kernel;
    let decoder = config.decoder_stages * (dk * dk * w * w + bn);
    let classifier = w * config.num_classes + config.num_classes;
    input + config.num_blocks * block + decoder + classifier
}

/// Multiply-adds of one forward pass at a stated resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaddsReport {
    pub height: usize,
    pub width: usize,
    pub stages: Vec<(String, u64)>,
    pub total: u64,
}

/// Multiply-adds of every convolution for one `height × width` image.
///
/// A convolution costs `K²·Cin·Cout·Hout·Wout`. A transposed convolution is
/// charged per input pixel, `K²·Cin·Cout·Hin·Win`, which is the number of
/// multiply-adds its scatter actually performs. Batch norm, ReLU and softmax
/// are not counted.
pub fn count_madds(config: &ModelConfig, height: usize, width: usize) -> Result<MaddsReport, ModelError> {
    config.validate()?;
    let m = config.size_multiple();
    if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
        return Err(ModelError::Geometry {
            height,
            width,
            multiple: m,
        });
    }
    let c = config.width as u64;
    let mut stages = Vec::new();
    let (mut h, mut w) = (height, width);
    let input: u64 = config
        .input_kernels
        .iter()
        .map(|&k| (k * k) as u64 * config.in_channels as u64 * c * (h * w) as u64)
        .sum();
    stages.push(("input".to_string(), input));
    for block in 1..=config.num_blocks {
        let stride = if config.is_strided(block) { 2 } else { 1 };
        let mut total = 0;
        let mut out = (h, w);
        for &k in &config.block_kernels {
            let pad = (k - 1) / 2;
            let geometry = |n| conv_output_size(n, k, stride, pad).filter(|&o| o > 0);
            let (Some(ho), Some(wo)) = (geometry(h), geometry(w)) else {
                return Err(ModelError::Geometry {
                    height,
                    width,
                    multiple: m,
                });
            };
            out = (ho, wo);
            total += (k * k) as u64 * c * c * (ho * wo) as u64;
        }
        (h, w) = out;
        stages.push((format!("block{block}"), total));
    }
    let dk = config.decoder_kernel as u64;
    for stage in 1..=config.decoder_stages {
        stages.push((format!("decoder{stage}"), dk * dk * c * c * (h * w) as u64));
        h *= 2;
        w *= 2;
    }
    stages.push(("classifier".to_string(), c * config.num_classes as u64 * (h * w) as u64));
    let total = stages.iter().map(|(_, v)| v).sum();
    Ok(MaddsReport {
        height,
        width,
        stages,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveFieldReport {
    /// Receptive field of each input-block branch on its own.
    pub input_branches: Vec<usize>,
    /// Receptive field after the input block and after each multi-kernel block.
    pub stages: Vec<(String, usize)>,
}

impl ReceptiveFieldReport {
    /// Receptive field of the encoder output.
    pub fn encoder(&self) -> usize {
        self.stages.last().map_or(0, |s| s.1)
    }
}

/// Standard recursion `rf += (k - 1)·jump; jump *= stride`, taking the
/// largest kernel of each multi-kernel stage.
pub fn receptive_field(config: &ModelConfig) -> ReceptiveFieldReport {
    let input_branches = config.input_kernels.clone();
    let mut rf = input_branches.iter().copied().max().unwrap_or(1);
    let mut jump = 1;
    let mut stages = vec![("input".to_string(), rf)];
    let k = config.block_kernels.iter().copied().max().unwrap_or(1);
    for block in 1..=config.num_blocks {
        rf += (k - 1) * jump;
        if config.is_strided(block) {
            jump *= 2;
        }
        stages.push((format!("block{block}"), rf));
    }
    ReceptiveFieldReport {
        input_branches,
        stages,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub trainable_params: usize,
    pub madds: MaddsReport,
    /// Size of the serialized 32-bit model file.
    pub model_size_bytes: usize,
    pub receptive_field: ReceptiveFieldReport,
}

pub fn complexity_report(config: &ModelConfig, height: usize, width: usize) -> Result<ComplexityReport, ModelError> {
    let madds = count_madds(config, height, width)?;
    let model = Model::<f32>::build(config.clone(), 0)?;
    Ok(ComplexityReport {
        trainable_params: count_parameters(config),
        madds,
        model_size_bytes: io::serialized_size(&model),
        receptive_field: receptive_field(config),
    })
}
