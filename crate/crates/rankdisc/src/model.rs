//! The shared representation (a freezable macro-block MLP) plus its heads:
//! rotation pretext (4-way), labelled classifier, unlabelled clustering head
//! and the extended incremental head. Includes bit-exact checkpoint
//! persistence.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ndcore::{
    matmul, matmul_backward, relu, relu_backward, softmax_backward_rows, softmax_rows, Parameter,
    Tensor,
};
use crate::{Error, Result};

/// Backbone shape: MLP layer widths grouped into contiguous macro-blocks
/// (the early blocks are the ones frozen after pretraining).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// (channels, height, width) of one input sample.
    pub input_dims: (usize, usize, usize),
    pub layer_widths: Vec<usize>,
    /// Cumulative layer counts marking macro-block boundaries;
    /// last entry == layer_widths.len().
    pub macro_blocks: Vec<usize>,
    /// Output width d of the representation; must equal the last layer width.
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn input_size(&self) -> usize {
        self.input_dims.0 * self.input_dims.1 * self.input_dims.2
    }

    pub fn n_blocks(&self) -> usize {
        self.macro_blocks.len()
    }

    /// Macro-block index of layer `layer`.
    pub fn block_of(&self, layer: usize) -> usize {
        self.macro_blocks
            .iter()
            .position(|&end| layer < end)
            .expect("layer within bounds")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layer_widths.is_empty() {
            problems.push("backbone: at least one layer required".to_string());
        }
        if self.input_size() == 0 {
            problems.push("backbone: input dims must be positive".to_string());
        }
        if self.macro_blocks.is_empty()
            || self.macro_blocks.last() != Some(&self.layer_widths.len())
            || self.macro_blocks.windows(2).any(|w| w[0] >= w[1])
            || self.macro_blocks.contains(&0)
        {
            problems.push(format!(
                "backbone: macro_blocks {:?} must be strictly increasing and end at {}",
                self.macro_blocks,
                self.layer_widths.len()
            ));
        }
        if self.layer_widths.last() != Some(&self.feature_dim) {
            problems.push(format!(
                "backbone: feature_dim {} must equal the last layer width {:?}",
                self.feature_dim,
                self.layer_widths.last()
            ));
        }
        if self.feature_dim < 2 {
            problems.push("backbone: feature_dim must be >= 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Parameter, // [in, out]
    pub bias: Parameter,   // [out]
}

impl LinearLayer {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        LinearLayer {
            weight: Parameter::new(Tensor::from_vec(&[fan_in, fan_out], w).unwrap()),
            bias: Parameter::new(Tensor::zeros(&[fan_out])),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight.value)?;
        let out = y.cols();
        for r in 0..y.rows() {
            for c in 0..out {
                y.data_mut()[r * out + c] += self.bias.value.data()[c];
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients, returns gradient w.r.t. the input.
    fn backward(&mut self, x: &Tensor, d_out: &Tensor) -> Tensor {
        let (d_x, d_w) = matmul_backward(x, &self.weight.value, d_out);
        self.weight.grad.add_assign(&d_w);
        let cols = d_out.cols();
        for r in 0..d_out.rows() {
            for c in 0..cols {
                self.bias.grad.data_mut()[c] += d_out.at2(r, c);
            }
        }
        d_x
    }
}

/// The representation Phi: stacked linear layers with ReLU after each
/// (features are therefore nonnegative).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub layers: Vec<LinearLayer>,
    pub config: BackboneConfig,
}

/// Per-layer activations saved by a cached forward pass.
pub struct BackboneCache {
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = config.input_size();
        for &width in &config.layer_widths {
            layers.push(LinearLayer::init(fan_in, width, rng));
            fan_in = width;
        }
        Ok(Backbone { layers, config })
    }

    /// Forward pass returning features only.
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(batch)?.0)
    }

    /// Forward pass keeping per-layer activations for the backward pass.
    pub fn forward_cached(&self, batch: &Tensor) -> Result<(Tensor, BackboneCache)> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_size() {
            return Err(Error::Dimension(format!(
                "backbone expects [B, {}] input, got {:?}",
                self.config.input_size(),
                batch.shape()
            )));
        }
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.clone();
        for layer in &self.layers {
            let pre = layer.forward(&x)?;
            cache.inputs.push(x);
            x = relu(&pre);
            cache.preacts.push(pre);
        }
        Ok((x, cache))
    }

    /// Backpropagate d(features), accumulating parameter gradients.
    pub fn backward(&mut self, cache: &BackboneCache, d_features: &Tensor) {
        let mut d = d_features.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let d_pre = relu_backward(&cache.preacts[l], &d);
            d = layer.backward(&cache.inputs[l], &d_pre);
        }
    }

    /// Freeze exactly the given macro-block indices, unfreeze the rest.
    pub fn set_frozen_blocks(&mut self, frozen_blocks: &[usize]) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let frozen = frozen_blocks.contains(&self.config.block_of(l));
            layer.weight.frozen = frozen;
            layer.bias.frozen = frozen;
        }
    }

    /// All blocks except the last (frozen during stages 2 and 3).
    pub fn early_blocks(&self) -> Vec<usize> {
        (0..self.config.n_blocks().saturating_sub(1)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Rotation,
    Labelled,
    Unlabelled,
    Incremental,
}

impl HeadKind {
    fn code(self) -> u8 {
        match self {
            HeadKind::Rotation => 0,
            HeadKind::Labelled => 1,
            HeadKind::Unlabelled => 2,
            HeadKind::Incremental => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => HeadKind::Rotation,
            1 => HeadKind::Labelled,
            2 => HeadKind::Unlabelled,
            3 => HeadKind::Incremental,
            _ => return None,
        })
    }
}

/// A single linear layer terminated by softmax.
#[derive(Debug, Clone)]
pub struct Head {
    pub kind: HeadKind,
    pub weight: Parameter, // [d, out]
    pub bias: Parameter,   // [out]
    pub out: usize,
}

impl Head {
    pub fn init(kind: HeadKind, d: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let layer = LinearLayer::init(d, out, rng);
        Head {
            kind,
            weight: layer.weight,
            bias: layer.bias,
            out,
        }
    }

    /// Probability rows (softmax applied) for a batch of features.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut logits = matmul(z, &self.weight.value)?;
        for r in 0..logits.rows() {
            for c in 0..self.out {
                logits.data_mut()[r * self.out + c] += self.bias.value.data()[c];
            }
        }
        Ok(softmax_rows(&logits))
    }

    /// Backward from d(logits): accumulates head gradients, returns d(z).
    pub fn backward_dlogits(&mut self, z: &Tensor, d_logits: &Tensor) -> Tensor {
        let (d_z, d_w) = matmul_backward(z, &self.weight.value, d_logits);
        self.weight.grad.add_assign(&d_w);
        for r in 0..d_logits.rows() {
            for c in 0..self.out {
                self.bias.grad.data_mut()[c] += d_logits.at2(r, c);
            }
        }
        d_z
    }

    /// Backward from d(probs): folds in the softmax Jacobian first.
    pub fn backward_dprobs(&mut self, z: &Tensor, probs: &Tensor, d_probs: &Tensor) -> Tensor {
        let d_logits = softmax_backward_rows(probs, d_probs);
        self.backward_dlogits(z, &d_logits)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cluster prediction of the unlabelled head for one feature vector.
pub fn predict_unlabelled(head_u: &Head, z: &Tensor) -> Result<usize> {
    if !matches!(head_u.kind, HeadKind::Unlabelled) {
        return Err(Error::Argument(
            "predict_unlabelled requires the unlabelled head".into(),
        ));
    }
    let row = Tensor::from_vec(&[1, z.len()], z.data().to_vec())?;
    let probs = head_u.forward(&row)?;
    Ok(argmax(probs.row(0)))
}

/// Batch cluster predictions from the unlabelled head.
pub fn predict_unlabelled_batch(head_u: &Head, z: &Tensor) -> Result<Vec<usize>> {
    if !matches!(head_u.kind, HeadKind::Unlabelled) {
        return Err(Error::Argument(
            "predict_unlabelled requires the unlabelled head".into(),
        ));
    }
    let probs = head_u.forward(z)?;
    Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
}

/// Extend the labelled head by `c_new` randomly initialized output columns.
/// The original columns are preserved bit-exactly; the kind becomes
/// incremental.
pub fn extend_head(head_l: &Head, c_new: usize, rng: &mut ChaCha8Rng) -> Result<Head> {
    if !matches!(head_l.kind, HeadKind::Labelled) {
        return Err(Error::Argument(
            "extend_head requires the labelled head".into(),
        ));
    }
    if c_new == 0 {
        return Err(Error::Argument(
            "extend_head: c_new must be positive".into(),
        ));
    }
    let d = head_l.weight.value.rows();
    let old_out = head_l.out;
    let new_out = old_out + c_new;
    let bound = (6.0 / (d + new_out) as f64).sqrt();
    let mut w = Tensor::zeros(&[d, new_out]);
    for r in 0..d {
        for c in 0..old_out {
            w.set2(r, c, head_l.weight.value.at2(r, c));
        }
        for c in old_out..new_out {
            w.set2(r, c, rng.gen_range(-bound..bound));
        }
    }
    let mut b = Tensor::zeros(&[new_out]);
    b.data_mut()[..old_out].copy_from_slice(head_l.bias.value.data());
    // new bias entries stay zero, matching fresh-head initialization
    Ok(Head {
        kind: HeadKind::Incremental,
        weight: Parameter::new(w),
        bias: Parameter::new(b),
        out: new_out,
    })
}

/// Pipeline progress marker stored in checkpoints; stage ordering is enforced
/// against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Fresh,
    Pretrained,
    Finetuned,
    Discovered,
    Incremental,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Fresh => 0,
            Stage::Pretrained => 1,
            Stage::Finetuned => 2,
            Stage::Discovered => 3,
            Stage::Incremental => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Stage::Fresh,
            1 => Stage::Pretrained,
            2 => Stage::Finetuned,
            3 => Stage::Discovered,
            4 => Stage::Incremental,
            _ => return None,
        })
    }
}

/// Backbone + head inventory + stage marker + the model's PRNG (used for
/// initialization draws, persisted so resumed runs continue the same stream).
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub rotation: Option<Head>,
    pub labelled: Option<Head>,
    pub unlabelled: Option<Head>,
    pub incremental: Option<Head>,
    pub stage: Stage,
    pub rng: ChaCha8Rng,
}

impl Model {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::component_rng(seed, "model-init");
        let backbone = Backbone::init(config, &mut rng)?;
        Ok(Model {
            backbone,
            rotation: None,
            labelled: None,
            unlabelled: None,
            incremental: None,
            stage: Stage::Fresh,
            rng,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.config.feature_dim
    }

    /// Zero every momentum buffer. Each training stage owns a fresh optimizer,
    /// so velocity never carries across stage boundaries (or checkpoints).
    pub fn reset_velocity(&mut self) {
        for p in self.backbone.params_mut() {
            p.velocity.data_mut().fill(0.0);
        }
        for h in [
            &mut self.rotation,
            &mut self.labelled,
            &mut self.unlabelled,
            &mut self.incremental,
        ]
        .into_iter()
        .flatten()
        {
            for p in h.params_mut() {
                p.velocity.data_mut().fill(0.0);
            }
        }
    }

    fn heads(&self) -> Vec<(&'static str, &Head)> {
        let mut v = Vec::new();
        if let Some(h) = &self.rotation {
            v.push(("rotation", h));
        }
        if let Some(h) = &self.labelled {
            v.push(("labelled", h));
        }
        if let Some(h) = &self.unlabelled {
            v.push(("unlabelled", h));
        }
        if let Some(h) = &self.incremental {
            v.push(("incremental", h));
        }
        v
    }
}

const CKPT_MAGIC: &[u8; 4] = b"RDCP";
const CKPT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated: needed {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_param(out: &mut Vec<u8>, p: &Parameter) {
    out.push(p.frozen as u8);
    for &v in p.value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_param(r: &mut ByteReader, shape: &[usize]) -> Result<Parameter> {
    let frozen = r.u8()? != 0;
    let n = shape.iter().product();
    let data = r.f64s(n)?;
    let mut p = Parameter::new(Tensor::from_vec(shape, data).unwrap());
    p.frozen = frozen;
    Ok(p)
}

/// Serialize the model to an explicit binary format: magic, version, config
/// digest, stage marker, PRNG state, backbone config, then little-endian
/// IEEE-754 parameter payloads. Round trips are bit-exact.
pub fn save_checkpoint(model: &Model, path: &Path, config_digest: &[u8; 8]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(config_digest);
    out.push(model.stage.code());
    out.extend_from_slice(&model.rng.get_seed());
    out.extend_from_slice(&model.rng.get_word_pos().to_le_bytes());

    let cfg = &model.backbone.config;
    for v in [cfg.input_dims.0, cfg.input_dims.1, cfg.input_dims.2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.layer_widths.len() as u32).to_le_bytes());
    for &w in &cfg.layer_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.macro_blocks.len() as u32).to_le_bytes());
    for &b in &cfg.macro_blocks {
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.feature_dim as u32).to_le_bytes());

    for layer in &model.backbone.layers {
        put_param(&mut out, &layer.weight);
        put_param(&mut out, &layer.bias);
    }

    let heads = model.heads();
    out.push(heads.len() as u8);
    for (_, head) in heads {
        out.push(head.kind.code());
        out.extend_from_slice(&(head.out as u32).to_le_bytes());
        put_param(&mut out, &head.weight);
        put_param(&mut out, &head.bias);
    }

    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint. Returns the model and the config digest recorded at
/// save time; callers compare that digest against their own configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model, [u8; 8])> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let digest: [u8; 8] = r.take(8)?.try_into().unwrap();
    let stage_code = r.u8()?;
    let stage = Stage::from_code(stage_code).ok_or(Error::Parse {
        offset: r.pos - 1,
        msg: format!("unknown stage marker {stage_code}"),
    })?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let input_dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n_layers = r.u32()? as usize;
    let mut layer_widths = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_widths.push(r.u32()? as usize);
    }
    let n_blocks = r.u32()? as usize;
    let mut macro_blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        macro_blocks.push(r.u32()? as usize);
    }
    let feature_dim = r.u32()? as usize;
    let config = BackboneConfig {
        input_dims,
        layer_widths,
        macro_blocks,
        feature_dim,
    };
    config.validate().map_err(|e| Error::Parse {
        offset: r.pos,
        msg: format!("invalid backbone config in checkpoint: {e}"),
    })?;

    let mut layers = Vec::with_capacity(n_layers);
    let mut fan_in = config.input_size();
    for &width in &config.layer_widths {
        let weight = read_param(&mut r, &[fan_in, width])?;
        let bias = read_param(&mut r, &[width])?;
        layers.push(LinearLayer { weight, bias });
        fan_in = width;
    }
    let backbone = Backbone { layers, config };

    let mut model = Model {
        backbone,
        rotation: None,
        labelled: None,
        unlabelled: None,
        incremental: None,
        stage,
        rng,
    };
    let n_heads = r.u8()? as usize;
    let d = model.feature_dim();
    for _ in 0..n_heads {
        let kind_code = r.u8()?;
        let kind = HeadKind::from_code(kind_code).ok_or(Error::Parse {
            offset: r.pos - 1,
            msg: format!("unknown head kind {kind_code}"),
        })?;
        let out = r.u32()? as usize;
        let weight = read_param(&mut r, &[d, out])?;
        let bias = read_param(&mut r, &[out])?;
        let head = Head {
            kind,
            weight,
            bias,
            out,
        };
        match kind {
            HeadKind::Rotation => model.rotation = Some(head),
            HeadKind::Labelled => model.labelled = Some(head),
            HeadKind::Unlabelled => model.unlabelled = Some(head),
            HeadKind::Incremental => model.incremental = Some(head),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((model, digest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use rand::Rng;
    use tempfile::tempdir;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            input_dims: (1, 4, 4),
            layer_widths: vec![12, 10, 8],
            macro_blocks: vec![1, 2, 3],
            feature_dim: 8,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
        let data = (0..b * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, n], data).unwrap()
    }

    #[test]
    fn zero_weight_backbone_propagates_bias() {
        let mut model = Model::init(small_config(), 1).unwrap();
        for layer in &mut model.backbone.layers {
            layer.weight.value.data_mut().fill(0.0);
            layer.bias.value.data_mut().fill(0.3);
        }
        let mut rng = component_rng(2, "t");
        let batch = random_batch(&mut rng, 3, 16);
        let z = model.backbone.forward_features(&batch).unwrap();
        for r in 1..3 {
            assert_eq!(z.row(r), z.row(0), "constant function across batch rows");
        }
    }

    #[test]
    fn single_sample_equals_batched_row() {
        let model = Model::init(small_config(), 3).unwrap();
        let mut rng = component_rng(4, "t");
        let batch = random_batch(&mut rng, 5, 16);
        let z_batch = model.backbone.forward_features(&batch).unwrap();
        let single = Tensor::from_vec(&[1, 16], batch.row(2).to_vec()).unwrap();
        let z_single = model.backbone.forward_features(&single).unwrap();
        assert_eq!(z_single.row(0), z_batch.row(2));
    }

    #[test]
    fn forward_matches_layer_by_layer_replay() {
        let model = Model::init(small_config(), 5).unwrap();
        let mut rng = component_rng(6, "t");
        let batch = random_batch(&mut rng, 1, 16);
        let z = model.backbone.forward_features(&batch).unwrap();
        // replay: explicit per-layer matmul + bias + relu
        let mut x: Vec<f64> = batch.row(0).to_vec();
        for layer in &model.backbone.layers {
            let w = &layer.weight.value;
            let mut y = vec![0.0; w.cols()];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut acc = layer.bias.value.data()[j];
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w.at2(i, j);
                }
                *yj = acc.max(0.0);
            }
            x = y;
        }
        for (a, b) in z.row(0).iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn input_size_mismatch_rejected() {
        let model = Model::init(small_config(), 1).unwrap();
        let batch = Tensor::zeros(&[2, 9]);
        assert!(model.backbone.forward_features(&batch).is_err());
    }

    #[test]
    fn head_outputs_are_probabilities() {
        let mut rng = component_rng(7, "t");
        let head = Head::init(HeadKind::Labelled, 8, 5, &mut rng);
        let z = random_batch(&mut rng, 4, 8);
        let p = head.forward(&z).unwrap();
        for r in 0..4 {
            let sum: f64 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn predict_unlabelled_examples() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0, "ties break toward lowest index");
        let mut rng = component_rng(8, "t");
        for _ in 0..100 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // linear-scan oracle
            let mut best = 0;
            for i in 0..6 {
                if v[i] > v[best] {
                    best = i;
                }
            }
            assert_eq!(argmax(&v), best);
        }
    }

    #[test]
    fn predict_requires_unlabelled_head() {
        let mut rng = component_rng(9, "t");
        let head = Head::init(HeadKind::Labelled, 4, 3, &mut rng);
        let z = Tensor::zeros(&[4]);
        assert!(predict_unlabelled(&head, &z).is_err());
    }

    #[test]
    fn extend_head_contracts() {
        let mut rng = component_rng(10, "t");
        let head = Head::init(HeadKind::Labelled, 8, 5, &mut rng);
        assert!(extend_head(&head, 0, &mut rng).is_err());
        let ext = extend_head(&head, 5, &mut rng).unwrap();
        assert_eq!(ext.out, 10);
        assert_eq!(ext.kind, HeadKind::Incremental);
        for r in 0..8 {
            for c in 0..5 {
                assert_eq!(
                    ext.weight.value.at2(r, c).to_bits(),
                    head.weight.value.at2(r, c).to_bits()
                );
            }
        }
        assert_eq!(ext.bias.value.data()[..5], head.bias.value.data()[..]);
    }

    #[test]
    fn extension_preserves_restricted_argmax() {
        let mut rng = component_rng(11, "t");
        let head = Head::init(HeadKind::Labelled, 8, 5, &mut rng);
        let ext = extend_head(&head, 4, &mut rng).unwrap();
        for _ in 0..50 {
            let z = random_batch(&mut rng, 1, 8);
            let old = head.forward(&z).unwrap();
            let new = ext.forward(&z).unwrap();
            // argmax over the first C^l outputs is unchanged: softmax is
            // monotone in logits and the old columns are identical
            assert_eq!(argmax(&old.row(0)[..5]), argmax(&new.row(0)[..5]));
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut model = Model::init(small_config(), 13).unwrap();
        let d = model.feature_dim();
        let mut hr = model.rng.clone();
        model.rotation = Some(Head::init(HeadKind::Rotation, d, 4, &mut hr));
        model.labelled = Some(Head::init(HeadKind::Labelled, d, 3, &mut hr));
        model.rng = hr;
        model.stage = Stage::Pretrained;
        model.backbone.set_frozen_blocks(&[0, 1]);

        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let digest = [1, 2, 3, 4, 5, 6, 7, 8];
        save_checkpoint(&model, &p1, &digest).unwrap();
        let (loaded, got_digest) = load_checkpoint(&p1).unwrap();
        assert_eq!(got_digest, digest);
        assert_eq!(loaded.stage, Stage::Pretrained);
        save_checkpoint(&loaded, &p2, &digest).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // forward pass identical before and after, bitwise
        let mut rng = component_rng(14, "t");
        for _ in 0..10 {
            let batch = random_batch(&mut rng, 1, 16);
            let a = model.backbone.forward_features(&batch).unwrap();
            let b = loaded.backbone.forward_features(&batch).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // frozen flags survive
        assert!(loaded.backbone.layers[0].weight.frozen);
        assert!(!loaded.backbone.layers[2].weight.frozen);
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let model = Model::init(small_config(), 15).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model, &p, &[0; 8]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut model = Model::init(small_config(), 16).unwrap();
        let mut rng = component_rng(17, "t");
        let batch = random_batch(&mut rng, 3, 16);
        let w: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = Tensor::from_vec(&[3, 8], w).unwrap();
        let loss = |bb: &Backbone| -> f64 {
            bb.forward_features(&batch)
                .unwrap()
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = model.backbone.forward_cached(&batch).unwrap();
        model.backbone.backward(&cache, &weights);
        let h = 1e-5;
        let grads: Vec<Vec<f64>> = model
            .backbone
            .params()
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();
        for (li, layer) in model.backbone.layers.clone().iter().enumerate() {
            for (pi, param) in [&layer.weight, &layer.bias].into_iter().enumerate() {
                #[allow(clippy::needless_range_loop)]
                for i in 0..param.value.len().min(20) {
                    let orig = param.value.data()[i];
                    let mut bb = model.backbone.clone();
                    let target = if pi == 0 {
                        &mut bb.layers[li].weight
                    } else {
                        &mut bb.layers[li].bias
                    };
                    target.value.data_mut()[i] = orig + h;
                    let fp = loss(&bb);
                    let target = if pi == 0 {
                        &mut bb.layers[li].weight
                    } else {
                        &mut bb.layers[li].bias
                    };
                    target.value.data_mut()[i] = orig - h;
                    let fm = loss(&bb);
                    let fd = (fp - fm) / (2.0 * h);
                    let analytic = grads[li * 2 + pi][i];
                    let rel = (analytic - fd).abs() / fd.abs().max(1.0);
                    assert!(
                        rel < 1e-4,
                        "layer {li} param {pi} idx {i}: {analytic} vs {fd}"
                    );
                }
            }
        }
    }
}
