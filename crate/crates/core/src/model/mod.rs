//! The full consistency pipeline: modulation, hierarchical encoding, noisy
//! bottleneck, decoding, and scoring, assembled into one computation graph
//! per ablation variant.
//!
//! The graph is built once per (shapes, variant, sample count) and reused:
//! training binds parameters plus per-sample inputs into a persistent
//! executor; evaluation binds an all-ones mask and zero noise, which makes
//! the bottleneck the exact identity.

pub mod decoder;
pub mod encoders;
pub mod heatmap;
pub mod modulation;
pub mod scoring;

use std::collections::BTreeMap;

use crate::autodiff::{CompGraph, Exec, GraphBuilder, NodeId};
use crate::data::manifest::DatasetManifest;
use crate::data::synth::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Element, Tensor};

use decoder::{
    bottleneck_fragment, decoder_fragment, sample_bottleneck, BottleneckConfig, DecoderAttention,
};
use encoders::{cross_attention_fragment, gated_angle_fragment, mlp_fragment, pool_process_fragment};
use modulation::{affine_head_fragment, film_fragment, ssm_fragment, SsmDims};
use scoring::{scoring_fragment, LossConfig, ScoreNodes};

/// Modality shapes, fixed per dataset and declared in its manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShapes {
    pub t_s: usize,
    pub c_s: usize,
    pub m_angles: usize,
    pub n_video: usize,
    pub n_audio: usize,
    pub n_image: usize,
    pub feat_dim: usize,
}

impl DataShapes {
    pub fn desk_default() -> Self {
        DataShapes {
            t_s: crate::data::T_S,
            c_s: crate::data::C_S,
            m_angles: crate::data::M_ANGLES,
            n_video: 16,
            n_audio: 16,
            n_image: 16,
            feat_dim: 64,
        }
    }

    pub fn from_manifest(m: &DatasetManifest) -> Self {
        DataShapes {
            t_s: m.t_s,
            c_s: m.c_s,
            m_angles: m.m_angles,
            n_video: m.n_video,
            n_audio: m.n_audio,
            n_image: m.n_image,
            feat_dim: m.feat_dim,
        }
    }
}

/// Trainable-module widths and bottleneck behavior.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Unified latent width shared by both encoders and the decoder head.
    pub out_dim: usize,
    pub text_dim: usize,
    pub decoder_blocks: usize,
    pub mask_prob: f64,
    pub noise_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_state: 16,
            heads: 4,
            hidden: 128,
            out_dim: 512,
            text_dim: 64,
            decoder_blocks: 2,
            mask_prob: 0.1,
            noise_std: 0.02,
        }
    }
}

/// Pipeline topology variants used by the ablation runner. The variant fully
/// determines the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Decode result tokens into a predicted process latent and score against
    /// the observed process latent.
    ReverseMapping,
    /// No bottleneck noise; softmax attention in the decoder.
    PlainDecoder,
    NoTextLoss,
    /// Train both mapping directions with summed losses; score with summed
    /// consistencies.
    Bidirectional,
    /// No sensor-driven modulation; a pooled sensor embedding is concatenated
    /// to the process tokens instead.
    SymmetricFusion,
    ModalityImage,
    ModalityImageVideo,
    ModalityImageVideoAudio,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::ReverseMapping,
        AblationVariant::PlainDecoder,
        AblationVariant::NoTextLoss,
        AblationVariant::Bidirectional,
        AblationVariant::SymmetricFusion,
        AblationVariant::ModalityImage,
        AblationVariant::ModalityImageVideo,
        AblationVariant::ModalityImageVideoAudio,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::ReverseMapping => "reverse-mapping",
            AblationVariant::PlainDecoder => "plain-decoder",
            AblationVariant::NoTextLoss => "no-text-loss",
            AblationVariant::Bidirectional => "bidirectional",
            AblationVariant::SymmetricFusion => "symmetric-fusion",
            AblationVariant::ModalityImage => "image",
            AblationVariant::ModalityImageVideo => "image-video",
            AblationVariant::ModalityImageVideoAudio => "image-video-audio",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| {
                let tags: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
                Error::Config(format!(
                    "unknown variant '{tag}' (expected one of {})",
                    tags.join(", ")
                ))
            })
    }

    pub fn uses_sensor(self) -> bool {
        !matches!(
            self,
            AblationVariant::ModalityImage
                | AblationVariant::ModalityImageVideo
                | AblationVariant::ModalityImageVideoAudio
        )
    }

    pub fn uses_video(self) -> bool {
        self != AblationVariant::ModalityImage
    }

    pub fn uses_audio(self) -> bool {
        !matches!(
            self,
            AblationVariant::ModalityImage | AblationVariant::ModalityImageVideo
        )
    }

    /// Sensor-driven affine modulation is active.
    pub fn uses_modulation(self) -> bool {
        self.uses_sensor() && self != AblationVariant::SymmetricFusion
    }

    pub fn has_text_anchor(self) -> bool {
        !matches!(
            self,
            AblationVariant::NoTextLoss | AblationVariant::ReverseMapping
        )
    }

    pub fn has_forward_direction(self) -> bool {
        self != AblationVariant::ReverseMapping
    }

    pub fn has_reverse_direction(self) -> bool {
        matches!(
            self,
            AblationVariant::ReverseMapping | AblationVariant::Bidirectional
        )
    }

    pub fn has_bottleneck(self) -> bool {
        self != AblationVariant::PlainDecoder
    }

    pub fn decoder_attention(self) -> DecoderAttention {
        if self == AblationVariant::PlainDecoder {
            DecoderAttention::Softmax
        } else {
            DecoderAttention::Linear
        }
    }
}

/// Everything needed to build the graph: shapes, widths, loss weights, and
/// the topology variant.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub shapes: DataShapes,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub variant: AblationVariant,
}

impl PipelineConfig {
    pub fn new(shapes: DataShapes, model: ModelConfig, loss: LossConfig, variant: AblationVariant) -> Result<Self> {
        loss.validate(model.out_dim)?;
        BottleneckConfig {
            mask_prob: model.mask_prob,
            noise_std: model.noise_std,
            training: true,
        }
        .validate()?;
        if model.heads == 0 || shapes.feat_dim % model.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide feature width {}",
                model.heads, shapes.feat_dim
            )));
        }
        Ok(PipelineConfig { shapes, model, loss, variant })
    }

    pub fn desk_default(variant: AblationVariant) -> Self {
        PipelineConfig::new(
            DataShapes::desk_default(),
            ModelConfig::default(),
            LossConfig::default(),
            variant,
        )
        .expect("desk defaults are valid")
    }

    fn bottleneck(&self, training: bool) -> BottleneckConfig {
        BottleneckConfig {
            mask_prob: self.model.mask_prob,
            noise_std: self.model.noise_std,
            training,
        }
    }
}

/// Node handles for one sample inside a pipeline graph.
#[derive(Debug, Clone, Copy)]
pub struct SampleNodes {
    pub total_loss: NodeId,
    pub score: NodeId,
    /// Cosine-distance term of the score; saliency maps backpropagate from
    /// here.
    pub cos_dist: NodeId,
    pub z_r: NodeId,
    pub zhat_r: Option<NodeId>,
    pub z_p: Option<NodeId>,
    pub zhat_p: Option<NodeId>,
}

/// A built pipeline graph over `n_samples` input slots sharing one parameter
/// set, with the batch loss as the mean of per-sample total losses.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub graph: CompGraph,
    pub n_samples: usize,
    pub batch_loss: NodeId,
    pub samples: Vec<SampleNodes>,
}

fn build_sample(b: &mut GraphBuilder, cfg: &PipelineConfig, i: usize) -> Result<SampleNodes> {
    let sh = &cfg.shapes;
    let m = &cfg.model;
    let v = cfg.variant;
    let d = sh.feat_dim;

    // Result branch: gated angle aggregation + MLP -> observed result latent.
    let f_i = b.input(&format!("feat_image/{i}"), &[sh.m_angles, sh.n_image, d])?;
    let (agg, angle_tokens) = gated_angle_fragment(b, f_i, "result")?;
    let z_r = mlp_fragment(b, agg, m.hidden, m.out_dim, "result.mlp")?;

    // Process branch.
    let process_tokens: Option<NodeId> = if !v.uses_video() {
        None
    } else {
        let f_v = b.input(&format!("feat_video/{i}"), &[sh.n_video, d])?;
        if !v.uses_audio() {
            Some(f_v)
        } else {
            let f_a = b.input(&format!("feat_audio/{i}"), &[sh.n_audio, d])?;
            let (q_tokens, kv_tokens) = if v.uses_modulation() {
                let x_s = b.input(&format!("sensor_z/{i}"), &[sh.t_s, sh.c_s])?;
                let dims = SsmDims {
                    c_in: sh.c_s,
                    d_model: m.d_model,
                    d_state: m.d_state,
                };
                let h_s = ssm_fragment(b, x_s, &dims, "ssm")?;
                let (gamma, beta) = affine_head_fragment(b, h_s, d, "film")?;
                let f_v_mod = film_fragment(b, f_v, gamma, beta)?;
                let f_a_mod = film_fragment(b, f_a, gamma, beta)?;
                (f_v_mod, f_a_mod)
            } else {
                (f_v, f_a)
            };
            let fused = cross_attention_fragment(b, q_tokens, kv_tokens, m.heads, "xattn")?;
            if v == AblationVariant::SymmetricFusion {
                // Flat fusion control: a time-pooled sensor embedding joins
                // the token sequence instead of governing it.
                let x_s = b.input(&format!("sensor_z/{i}"), &[sh.t_s, sh.c_s])?;
                let mean_t = b.mean(x_s, Some(0))?;
                let mean_t = b.reshape(mean_t, &[1, sh.c_s])?;
                let w_s = b.param("symfuse.w", &[sh.c_s, d])?;
                let b_s = b.param("symfuse.b", &[d])?;
                let sensor_token = b.linear(mean_t, w_s, Some(b_s))?;
                Some(b.concat(0, &[fused, sensor_token])?)
            } else {
                Some(fused)
            }
        }
    };

    // Pooled process latent (reverse-direction target and diagnostics).
    let z_p = match process_tokens {
        Some(tokens) => Some(pool_process_fragment(b, tokens, m.hidden, m.out_dim, "pool")?),
        None => None,
    };

    let bn_cfg = cfg.bottleneck(true);
    bn_cfg.validate()?;

    // Forward direction: decode (bottlenecked) process tokens into the
    // predicted result latent.
    let forward_nodes: Option<(NodeId, ScoreNodes)> = if v.has_forward_direction() {
        let dec_tokens = match process_tokens {
            Some(tokens) => tokens,
            // No process modalities at all: decode a learned constant token
            // set (degenerate autoencoder-style consistency).
            None => b.param("const_tokens", &[sh.n_video, d])?,
        };
        let n_tok = b.shape(dec_tokens)[0];
        let dec_in = if v.has_bottleneck() {
            let mask = b.input(&format!("mask/{i}"), &[n_tok, d])?;
            let noise = b.input(&format!("noise/{i}"), &[n_tok, d])?;
            bottleneck_fragment(b, dec_tokens, mask, noise)?
        } else {
            dec_tokens
        };
        let zhat_r = decoder_fragment(
            b,
            dec_in,
            m.decoder_blocks,
            m.hidden,
            m.out_dim,
            v.decoder_attention(),
            "dec",
        )?;
        let text = if v.has_text_anchor() {
            let e_text = b.input("e_text", &[1, m.text_dim])?;
            let w_text = b.param("text.w", &[m.out_dim, m.text_dim])?;
            Some((e_text, w_text))
        } else {
            None
        };
        let nodes = scoring_fragment(b, z_r, zhat_r, text, &cfg.loss)?;
        Some((zhat_r, nodes))
    } else {
        None
    };

    // Reverse direction: decode result-side angle tokens into a predicted
    // process latent.
    let reverse_nodes: Option<(NodeId, ScoreNodes)> = if v.has_reverse_direction() {
        let z_p = z_p.ok_or_else(|| {
            Error::Graph("reverse direction requires a process branch".into())
        })?;
        let n_tok = b.shape(angle_tokens)[0];
        let mask = b.input(&format!("mask_rev/{i}"), &[n_tok, d])?;
        let noise = b.input(&format!("noise_rev/{i}"), &[n_tok, d])?;
        let r_in = bottleneck_fragment(b, angle_tokens, mask, noise)?;
        let zhat_p = decoder_fragment(
            b,
            r_in,
            m.decoder_blocks,
            m.hidden,
            m.out_dim,
            DecoderAttention::Linear,
            "rdec",
        )?;
        let nodes = scoring_fragment(b, z_p, zhat_p, None, &cfg.loss)?;
        Some((zhat_p, nodes))
    } else {
        None
    };

    let (total_loss, score, cos_dist, zhat_r, zhat_p) = match (forward_nodes, reverse_nodes) {
        (Some((zhat_r, f)), None) => (f.total, f.score, f.cos_dist, Some(zhat_r), None),
        (None, Some((zhat_p, r))) => (r.total, r.score, r.cos_dist, None, Some(zhat_p)),
        (Some((zhat_r, f)), Some((zhat_p, r))) => {
            let total = b.add(f.total, r.total)?;
            let score = b.add(f.score, r.score)?;
            (total, score, f.cos_dist, Some(zhat_r), Some(zhat_p))
        }
        (None, None) => unreachable!("every variant has at least one direction"),
    };

    b.mark_output(&format!("total/{i}"), total_loss);
    b.mark_output(&format!("score/{i}"), score);
    b.mark_output(&format!("score_cos/{i}"), cos_dist);
    b.mark_output(&format!("z_r/{i}"), z_r);
    if let Some(n) = zhat_r {
        b.mark_output(&format!("zhat_r/{i}"), n);
    }
    if let Some(n) = z_p {
        b.mark_output(&format!("z_p/{i}"), n);
    }
    if let Some(n) = zhat_p {
        b.mark_output(&format!("zhat_p/{i}"), n);
    }

    Ok(SampleNodes {
        total_loss,
        score,
        cos_dist,
        z_r,
        zhat_r,
        z_p,
        zhat_p,
    })
}

/// Builds the pipeline graph with `n_samples` input slots. Parameters are
/// shared across slots; the batch loss node is the mean of the per-sample
/// total losses.
pub fn build_pipeline(cfg: &PipelineConfig, n_samples: usize) -> Result<Pipeline> {
    if n_samples == 0 {
        return Err(Error::Graph("pipeline needs at least one sample slot".into()));
    }
    let mut b = GraphBuilder::new();
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        samples.push(build_sample(&mut b, cfg, i)?);
    }
    let mut acc = samples[0].total_loss;
    for s in &samples[1..] {
        acc = b.add(acc, s.total_loss)?;
    }
    let batch_loss = b.mul_scalar(acc, 1.0 / n_samples as f64);
    b.mark_output("batch_loss", batch_loss);
    Ok(Pipeline {
        cfg: cfg.clone(),
        graph: b.finish(),
        n_samples,
        batch_loss,
        samples,
    })
}

/// All trainable parameters plus frozen buffers (sensor normalization stats
/// and the text anchor).
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: PipelineConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub buffers: BTreeMap<String, Tensor<f32>>,
}

fn init_param(name: &str, shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut s = Stream::derive(seed, &format!("init.{name}"), 0);
    let last = name.rsplit('.').next().unwrap_or(name);
    let n: usize = shape.iter().product();
    if last == "a_log" {
        // Real diagonal decay initialized to -(state_index + 1).
        let states = shape[1];
        let data: Vec<f32> = (0..n)
            .map(|i| ((i % states) as f32 + 1.0).ln())
            .collect();
        return Tensor::new(shape.to_vec(), data).expect("a_log shape");
    }
    if last == "b_dt" {
        // softplus(b_dt) ~ 0.01 step size at zero input: with decay rates
        // spread over -(1..=d_state), the slowest state channels retain
        // information across the whole sensor series instead of forgetting
        // transients within a few bins.
        let v = (0.01f64.exp() - 1.0).ln() as f32;
        return Tensor::filled(shape, v);
    }
    if last == "p_raw" {
        if name.starts_with("dec.") || name.starts_with("rdec.") {
            // Decoder heads pool near-max (p = 1 + softplus ~ 10): one
            // strongly shifted token dominates the pooled readout instead of
            // being diluted by the token count.
            return Tensor::scalar(9.0f32);
        }
        // p = 1 + softplus(p_raw) = 3 at init.
        return Tensor::scalar((2.0f64.exp() - 1.0).ln() as f32);
    }
    if last == "gate" {
        return Tensor::zeros(shape);
    }
    if last.starts_with('b') {
        return Tensor::zeros(shape);
    }
    if last == "const_tokens" || name == "const_tokens" {
        let data: Vec<f32> = (0..n).map(|_| s.uniform_in(-0.5, 0.5) as f32).collect();
        return Tensor::new(shape.to_vec(), data).expect("const shape");
    }
    // Weights: uniform +- 1/sqrt(fan_in); modulation heads start smaller so
    // training begins near the identity modulation, and decoder output heads
    // start near zero so their direction is built from accumulated gradient
    // rather than spent un-learning a random read-out (the cosine objective
    // cares about direction, not amplitude).
    let fan_in = if shape.len() >= 2 { shape[0] } else { n };
    let mut scale = 1.0 / (fan_in as f64).sqrt();
    if name.starts_with("film.") {
        scale *= 0.5;
    }
    if name == "dec.head.w" || name == "rdec.head.w" {
        scale *= 0.05;
    }
    // Latent-producing encoder heads start at half scale so the decoder's
    // amplitude (grown from near zero under a bounded step budget) can reach
    // the observed latent's norm; a large common-mode amplitude mismatch
    // would otherwise dominate every top-k coordinate.
    if name == "result.mlp.w2" || name == "pool.w2" {
        scale *= 0.3;
    }
    let data: Vec<f32> = (0..n).map(|_| s.uniform_in(-scale, scale) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("weight shape")
}

impl ModelState {
    /// Fresh state with seeded parameter initialization. Buffers start at
    /// neutral values (zero sensor mean, unit sensor std, axis-aligned text
    /// anchor) and are overwritten from the dataset before training.
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        let pl = build_pipeline(&cfg, 1)?;
        let mut params = BTreeMap::new();
        for name in pl.graph.param_names() {
            let shape = pl.graph.leaf_shape(&name).expect("param shape").to_vec();
            params.insert(name.clone(), init_param(&name, &shape, seed));
        }
        let mut buffers = BTreeMap::new();
        buffers.insert("sensor_mean".into(), Tensor::zeros(&[cfg.shapes.c_s]));
        buffers.insert("sensor_std".into(), Tensor::filled(&[cfg.shapes.c_s], 1.0));
        let mut anchor = Tensor::zeros(&[cfg.model.text_dim]);
        anchor.data_mut()[0] = 1.0;
        buffers.insert("e_text".into(), anchor);
        Ok(ModelState { cfg, params, buffers })
    }

    pub fn set_text_anchor(&mut self, anchor: Tensor<f32>) -> Result<()> {
        if anchor.numel() != self.cfg.model.text_dim {
            return Err(Error::Config(format!(
                "text anchor width {} does not match configured {}",
                anchor.numel(),
                self.cfg.model.text_dim
            )));
        }
        let norm: f64 = anchor
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "text anchor must be unit-norm, |e| = {norm}"
            )));
        }
        self.buffers
            .insert("e_text".into(), anchor.reshaped(vec![self.cfg.model.text_dim])?);
        Ok(())
    }

    /// Per-channel z-scoring statistics from a training split.
    pub fn set_sensor_stats(&mut self, samples: &[SampleRecord]) -> Result<()> {
        let c = self.cfg.shapes.c_s;
        let mut mean = vec![0.0f64; c];
        let mut count = 0usize;
        for s in samples {
            let data = s.sensor_raw.data();
            let t = s.sensor_raw.shape()[0];
            for ti in 0..t {
                for ci in 0..c {
                    mean[ci] += data[ti * c + ci] as f64;
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::Data("no samples for sensor statistics".into()));
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; c];
        for s in samples {
            let data = s.sensor_raw.data();
            let t = s.sensor_raw.shape()[0];
            for ti in 0..t {
                for ci in 0..c {
                    let d = data[ti * c + ci] as f64 - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        let std: Vec<f32> = var
            .iter()
            .map(|v| ((v / count as f64).sqrt().max(1e-6)) as f32)
            .collect();
        self.buffers.insert(
            "sensor_mean".into(),
            Tensor::new(vec![c], mean.iter().map(|&v| v as f32).collect())?,
        );
        self.buffers
            .insert("sensor_std".into(), Tensor::new(vec![c], std)?);
        Ok(())
    }

    /// Z-scores a raw sensor tensor with the stored training statistics.
    pub fn z_score_sensors(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.cfg.shapes.c_s;
        let mean = &self.buffers["sensor_mean"];
        let std = &self.buffers["sensor_std"];
        if raw.shape().len() != 2 || raw.shape()[1] != c {
            return Err(Error::ShapeMismatch(format!(
                "sensor tensor {:?} does not have {c} channels",
                raw.shape()
            )));
        }
        let t = raw.shape()[0];
        let mut data = Vec::with_capacity(t * c);
        for ti in 0..t {
            for ci in 0..c {
                data.push((raw.data()[ti * c + ci] - mean.data()[ci]) / std.data()[ci]);
            }
        }
        Tensor::new(vec![t, c], data)
    }

    pub fn params_as<E: Element>(&self) -> BTreeMap<String, Tensor<E>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast::<E>()))
            .collect()
    }
}

/// Bottleneck binding mode for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum PassMode {
    /// Seeded stochastic bottleneck draws.
    Train { seed: u64 },
    /// Identity bottleneck (all-ones mask, zero noise).
    Eval,
}

/// Binds everything shared across samples: parameters and the text anchor.
pub fn bind_state<E: Element>(exec: &mut Exec<E>, pl: &Pipeline, state: &ModelState) -> Result<()> {
    for (name, t) in &state.params {
        exec.bind(&pl.graph, name, &t.cast::<E>())?;
    }
    if pl.graph.leaf("e_text").is_some() {
        let anchor = state.buffers["e_text"]
            .cast::<E>()
            .reshaped(vec![1, state.cfg.model.text_dim])?;
        exec.bind(&pl.graph, "e_text", &anchor)?;
    }
    Ok(())
}

/// Binds one sample's modality inputs plus bottleneck draws into slot `i`.
pub fn bind_sample<E: Element>(
    exec: &mut Exec<E>,
    pl: &Pipeline,
    state: &ModelState,
    i: usize,
    record: &SampleRecord,
    mode: PassMode,
) -> Result<()> {
    let g = &pl.graph;
    if g.leaf(&format!("sensor_z/{i}")).is_some() {
        let z = state.z_score_sensors(&record.sensor_raw)?;
        exec.bind(g, &format!("sensor_z/{i}"), &z.cast::<E>())?;
    }
    if g.leaf(&format!("feat_video/{i}")).is_some() {
        exec.bind(g, &format!("feat_video/{i}"), &record.feat_video.cast::<E>())?;
    }
    if g.leaf(&format!("feat_audio/{i}")).is_some() {
        exec.bind(g, &format!("feat_audio/{i}"), &record.feat_audio.cast::<E>())?;
    }
    exec.bind(g, &format!("feat_image/{i}"), &record.feat_image.cast::<E>())?;

    for (lane, mask_name, noise_name) in [
        (0u64, format!("mask/{i}"), format!("noise/{i}")),
        (1u64, format!("mask_rev/{i}"), format!("noise_rev/{i}")),
    ] {
        let Some(mask_id) = g.leaf(&mask_name) else {
            continue;
        };
        let shape = g.node(mask_id).shape.clone();
        let (mask, noise) = match mode {
            PassMode::Eval => decoder::identity_bottleneck::<E>(&shape),
            PassMode::Train { seed } => {
                let lane_seed = Stream::derive(seed, "bottleneck-lane", lane).next_u64();
                sample_bottleneck::<E>(&shape, &pl.cfg.bottleneck(true), lane_seed)?
            }
        };
        exec.bind(g, &mask_name, &mask)?;
        exec.bind(g, &noise_name, &noise)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{SynthConfig, SynthWorld};

    pub(crate) fn tiny_shapes() -> DataShapes {
        DataShapes {
            t_s: 12,
            c_s: 4,
            m_angles: 2,
            n_video: 4,
            n_audio: 4,
            n_image: 4,
            feat_dim: 8,
        }
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_state: 4,
            heads: 2,
            hidden: 8,
            out_dim: 16,
            text_dim: 8,
            decoder_blocks: 2,
            mask_prob: 0.2,
            noise_std: 0.1,
        }
    }

    pub(crate) fn tiny_cfg(variant: AblationVariant) -> PipelineConfig {
        PipelineConfig::new(
            tiny_shapes(),
            tiny_model(),
            LossConfig { topk: 4, ..LossConfig::default() },
            variant,
        )
        .unwrap()
    }

    #[test]
    fn every_variant_builds() {
        for v in AblationVariant::ALL {
            let pl = build_pipeline(&tiny_cfg(v), 2).unwrap();
            assert_eq!(pl.samples.len(), 2);
            assert!(pl.graph.len() > 10, "{} graph strangely small", v.tag());
        }
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.tag()).unwrap(), v);
        }
        assert!(AblationVariant::parse("nonsense").is_err());
    }

    #[test]
    fn parameter_sets_differ_by_variant() {
        let full = build_pipeline(&tiny_cfg(AblationVariant::Full), 1).unwrap();
        let image = build_pipeline(&tiny_cfg(AblationVariant::ModalityImage), 1).unwrap();
        let full_params = full.graph.param_names();
        let image_params = image.graph.param_names();
        assert!(full_params.iter().any(|n| n.starts_with("ssm.")));
        assert!(!image_params.iter().any(|n| n.starts_with("ssm.")));
        assert!(!image_params.iter().any(|n| n.starts_with("xattn.")));
        assert!(image_params.iter().any(|n| n == "const_tokens"));

        let sym = build_pipeline(&tiny_cfg(AblationVariant::SymmetricFusion), 1).unwrap();
        let sym_params = sym.graph.param_names();
        assert!(!sym_params.iter().any(|n| n.starts_with("ssm.")));
        assert!(sym_params.iter().any(|n| n.starts_with("symfuse.")));

        let no_text = build_pipeline(&tiny_cfg(AblationVariant::NoTextLoss), 1).unwrap();
        assert!(!no_text.graph.param_names().iter().any(|n| n == "text.w"));
    }

    fn tiny_world_record() -> SampleRecord {
        let cfg = SynthConfig {
            n_train: 1,
            n_val: 1,
            n_test: 1,
            feat_dim: 8,
            n_video: 4,
            n_audio: 4,
            n_image: 4,
            text_dim: 8,
            ..SynthConfig::default()
        };
        let world = SynthWorld::new(cfg).unwrap();
        let rec = world.render_normal(0);
        // Shrink the sensor series to the tiny graph's 12 x 4 window.
        let mut sensor = Vec::new();
        for t in 0..12 {
            for c in 0..4 {
                sensor.push(rec.sensor_raw.data()[t * crate::data::C_S + c]);
            }
        }
        // Shrink angles to 2.
        let d = 8 * 4;
        let image = rec.feat_image.data()[..2 * d].to_vec();
        SampleRecord {
            sensor_raw: Tensor::new(vec![12, 4], sensor).unwrap(),
            feat_video: rec.feat_video,
            feat_audio: rec.feat_audio,
            feat_image: Tensor::new(vec![2, 4, 8], image).unwrap(),
            defect_kind: crate::data::DefectKind::None,
        }
    }

    #[test]
    fn forward_pass_runs_and_eval_is_deterministic() {
        for v in AblationVariant::ALL {
            let cfg = tiny_cfg(v);
            let pl = build_pipeline(&cfg, 1).unwrap();
            let state = ModelState::new(cfg, 7).unwrap();
            let rec = tiny_world_record();
            let run = || -> (f64, f64) {
                let mut exec = Exec::<f64>::new(&pl.graph);
                bind_state(&mut exec, &pl, &state).unwrap();
                bind_sample(&mut exec, &pl, &state, 0, &rec, PassMode::Eval).unwrap();
                exec.forward(&pl.graph).unwrap();
                (exec.scalar(pl.samples[0].total_loss), exec.scalar(pl.samples[0].score))
            };
            let (l1, s1) = run();
            let (l2, s2) = run();
            assert_eq!(l1.to_bits(), l2.to_bits(), "{}", v.tag());
            assert_eq!(s1.to_bits(), s2.to_bits(), "{}", v.tag());
            assert!(l1.is_finite() && s1 >= 0.0, "{}: loss {l1} score {s1}", v.tag());
        }
    }

    #[test]
    fn eval_mode_bottleneck_is_identity_in_graph() {
        // Binding the identity mask/noise must reproduce the de-noised
        // variant of the same pass: compare against training mode with
        // mask_prob = 0 and noise_std = 0.
        let mut cfg = tiny_cfg(AblationVariant::Full);
        let pl = build_pipeline(&cfg, 1).unwrap();
        let state = ModelState::new(cfg.clone(), 9).unwrap();
        let rec = tiny_world_record();
        let mut exec = Exec::<f64>::new(&pl.graph);
        bind_state(&mut exec, &pl, &state).unwrap();
        bind_sample(&mut exec, &pl, &state, 0, &rec, PassMode::Eval).unwrap();
        exec.forward(&pl.graph).unwrap();
        let eval_score = exec.scalar(pl.samples[0].score);

        cfg.model.mask_prob = 0.0;
        cfg.model.noise_std = 0.0;
        let pl2 = build_pipeline(&cfg, 1).unwrap();
        let state2 = ModelState { cfg: cfg.clone(), ..state };
        let mut exec2 = Exec::<f64>::new(&pl2.graph);
        bind_state(&mut exec2, &pl2, &state2).unwrap();
        bind_sample(&mut exec2, &pl2, &state2, 0, &rec, PassMode::Train { seed: 5 }).unwrap();
        exec2.forward(&pl2.graph).unwrap();
        assert_eq!(eval_score.to_bits(), exec2.scalar(pl2.samples[0].score).to_bits());
    }

    #[test]
    fn init_is_seed_deterministic_and_name_keyed() {
        let cfg = tiny_cfg(AblationVariant::Full);
        let a = ModelState::new(cfg.clone(), 42).unwrap();
        let b = ModelState::new(cfg.clone(), 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = ModelState::new(cfg, 43).unwrap();
        assert_ne!(a.params, c.params);
        // Biases and gates start at zero.
        assert!(a.params["ssm.b_in"].data().iter().all(|&v| v == 0.0));
        assert!(a.params["xattn.gate"].data().iter().all(|&v| v == 0.0));
    }
}
