//! Convolutional feature extractor mapping the three task segments of a
//! walking test to a matrix of patch embeddings.
//!
//! Every segment (3 × 300) runs through the same five blocks. The first four
//! are conv → batchnorm → maxpool → leaky ReLU; the last is conv → batchnorm.
//! Each segment yields `n_e × 5` patches, and the three segments are
//! concatenated to `n_e × 15`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BatchStats, Graph, Tensor, Var, BATCHNORM_MOMENTUM};
use crate::sensor::{Task, SEGMENT_LEN};

pub const BLOCKS: usize = 5;
pub const SEGMENTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output channels of the five conv layers; the last is `n_e`.
    pub channels: [usize; BLOCKS],
    pub kernel: usize,
    pub input_len: usize,
    /// Initial scale of the final batchnorm. Small values keep the initial
    /// patch embeddings close to the prototypes.
    pub final_bn_gamma: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [256, 512, 256, 128, 128],
            kernel: 8,
            input_len: SEGMENT_LEN,
            final_bn_gamma: 1.0,
        }
    }
}

impl EncoderConfig {
    /// Narrow variant with the same lengths and embedding size, cheap enough
    /// for single-core training.
    pub fn compact() -> Self {
        Self {
            channels: [32, 64, 32, 128, 128],
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.channels[BLOCKS - 1]
    }

    /// Lengths after every conv and every pool, in order.
    pub fn length_chain(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut l = self.input_len;
        for b in 0..BLOCKS {
            l = (l + 1).saturating_sub(self.kernel);
            out.push(l);
            if b + 1 < BLOCKS {
                l /= 2;
                out.push(l);
            }
        }
        out
    }

    /// Patches per segment.
    pub fn patches_per_segment(&self) -> usize {
        *self.length_chain().last().expect("non-empty chain")
    }

    pub fn num_patches(&self) -> usize {
        SEGMENTS * self.patches_per_segment()
    }

    /// Shapes `(channels, len)` after every conv and pool of one segment.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        self.length_chain()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (self.channels[i / 2], l))
            .collect()
    }

    fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            3
        } else {
            self.channels[block - 1]
        }
    }
}

pub fn conv_weight(b: usize) -> String {
    format!("encoder.conv{b}.weight")
}
pub fn conv_bias(b: usize) -> String {
    format!("encoder.conv{b}.bias")
}
pub fn bn_gamma(b: usize) -> String {
    format!("encoder.bn{b}.gamma")
}
pub fn bn_beta(b: usize) -> String {
    format!("encoder.bn{b}.beta")
}
pub fn bn_running_mean(b: usize) -> String {
    format!("encoder.bn{b}.running_mean")
}
pub fn bn_running_var(b: usize) -> String {
    format!("encoder.bn{b}.running_var")
}

/// Adds freshly initialized weights to `params` and batchnorm statistics to
/// `buffers`. Conv weights and biases are uniform in ±1/√fan_in.
pub fn init_params<R: Rng + ?Sized>(
    config: &EncoderConfig,
    rng: &mut R,
    params: &mut BTreeMap<String, Tensor>,
    buffers: &mut BTreeMap<String, Tensor>,
) {
    for b in 0..BLOCKS {
        let (cin, cout) = (config.in_channels(b), config.channels[b]);
        let bound = 1.0 / ((cin * config.kernel) as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = uniform(cout * cin * config.kernel);
        let bias = uniform(cout);
        params.insert(conv_weight(b), Tensor::new([cout, cin, config.kernel], w).expect("shape"));
        params.insert(conv_bias(b), Tensor::vector(bias));
        let gamma = if b + 1 == BLOCKS { config.final_bn_gamma } else { 1.0 };
        params.insert(bn_gamma(b), Tensor::full([cout], gamma));
        params.insert(bn_beta(b), Tensor::zeros([cout]));
        buffers.insert(bn_running_mean(b), Tensor::zeros([cout]));
        buffers.insert(bn_running_var(b), Tensor::full([cout], 1.0));
    }
}

/// How batchnorm layers obtain their statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Statistics of the current batch.
    Train,
    /// Frozen running statistics.
    Eval(&'a BTreeMap<String, Tensor>),
}

pub struct EncoderOutput {
    /// `(segments, n_e, patches_per_segment)`.
    pub patches: Var,
    /// Batch statistics per block; empty in eval mode.
    pub stats: Vec<BatchStats>,
    /// `(channels, len)` after every conv and pool.
    pub shapes: Vec<(usize, usize)>,
}

/// Runs a batch of segments `(batch, 3, input_len)` through the blocks.
pub fn forward(
    config: &EncoderConfig,
    g: &mut Graph,
    vars: &BTreeMap<String, Var>,
    x: Var,
    mode: BnMode,
) -> Result<EncoderOutput, AutodiffError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != 3 || shape[2] != config.input_len {
        return Err(AutodiffError::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![0, 3, config.input_len],
        });
    }
    let mut h = x;
    let mut stats = Vec::new();
    let mut shapes = Vec::new();
    for b in 0..BLOCKS {
        h = g.conv1d(h, vars[&conv_weight(b)], Some(vars[&conv_bias(b)]))?;
        shapes.push((g.shape(h)[1], g.shape(h)[2]));
        let (gamma, beta) = (vars[&bn_gamma(b)], vars[&bn_beta(b)]);
        h = match mode {
            BnMode::Train => {
                let (out, s) = g.batchnorm1d_train(h, gamma, beta)?;
                stats.push(s);
                out
            }
            BnMode::Eval(buffers) => g.batchnorm1d_eval(
                h,
                gamma,
                beta,
                buffers[&bn_running_mean(b)].data(),
                buffers[&bn_running_var(b)].data(),
            )?,
        };
        if b + 1 < BLOCKS {
            h = g.maxpool1d(h)?;
            shapes.push((g.shape(h)[1], g.shape(h)[2]));
            h = g.leaky_relu(h);
        }
    }
    Ok(EncoderOutput {
        patches: h,
        stats,
        shapes,
    })
}

/// Folds one batch's statistics into the running estimates.
pub fn update_running_stats(buffers: &mut BTreeMap<String, Tensor>, stats: &[BatchStats]) {
    for (b, s) in stats.iter().enumerate() {
        for (key, batch) in [(bn_running_mean(b), &s.mean), (bn_running_var(b), &s.var)] {
            let old = &buffers[&key];
            let updated: Vec<f64> = old
                .data()
                .iter()
                .zip(batch)
                .map(|(r, v)| (1.0 - BATCHNORM_MOMENTUM) * r + BATCHNORM_MOMENTUM * v)
                .collect();
            let shape = old.shape().to_vec();
            buffers.insert(key, Tensor::new(shape, updated).expect("same length"));
        }
    }
}

/// Reorders `(3·tests, n_e, p)` segment outputs into `(tests, n_e, 3·p)`
/// feature matrices, segments side by side in task order.
pub fn concat_segments(g: &mut Graph, patches: Var) -> Result<Var, AutodiffError> {
    let s = g.shape(patches).to_vec();
    if s.len() != 3 || s[0] % SEGMENTS != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "concat_segments",
            msg: format!("expected (3·tests, n_e, patches), got {s:?}"),
        });
    }
    let tests = s[0] / SEGMENTS;
    let r = g.reshape(patches, &[tests, SEGMENTS, s[1], s[2]])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[tests, s[1], SEGMENTS * s[2]])
}

/// Input samples that can influence one patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub segment: Task,
    /// First influencing sample.
    pub start: usize,
    /// One past the last influencing sample.
    pub end: usize,
}

/// Receptive field of patch `o` (0-based over all segments), derived by
/// walking the kernel and pooling arithmetic backwards.
pub fn receptive_field(config: &EncoderConfig, o: usize) -> Result<ReceptiveField, AutodiffError> {
    let per = config.patches_per_segment();
    if o >= SEGMENTS * per {
        return Err(AutodiffError::InvalidArgument {
            op: "receptive_field",
            msg: format!("patch {o} outside 0..{}", SEGMENTS * per),
        });
    }
    let (mut lo, mut hi) = (o % per, o % per);
    for b in (0..BLOCKS).rev() {
        hi += config.kernel - 1;
        if b > 0 {
            lo *= 2;
            hi = 2 * hi + 1;
        }
    }
    Ok(ReceptiveField {
        segment: Task::ALL[o / per],
        start: lo,
        end: (hi + 1).min(config.input_len),
    })
}
