//! Checkpoints: a directory of named parameter tensor files plus a config
//! snapshot and the training-loss trace. Save/load round trips are bit-exact,
//! so evaluating a reloaded checkpoint reproduces the original evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::tensor_file::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::harness::train::{render_trace, EpochStats};
use crate::model::scoring::LossConfig;
use crate::model::{AblationVariant, DataShapes, ModelConfig, ModelState, PipelineConfig};

fn render_pipeline_config(cfg: &PipelineConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant = {}", cfg.variant.tag());
    let _ = writeln!(s, "shapes.t_s = {}", cfg.shapes.t_s);
    let _ = writeln!(s, "shapes.c_s = {}", cfg.shapes.c_s);
    let _ = writeln!(s, "shapes.m_angles = {}", cfg.shapes.m_angles);
    let _ = writeln!(s, "shapes.n_video = {}", cfg.shapes.n_video);
    let _ = writeln!(s, "shapes.n_audio = {}", cfg.shapes.n_audio);
    let _ = writeln!(s, "shapes.n_image = {}", cfg.shapes.n_image);
    let _ = writeln!(s, "shapes.feat_dim = {}", cfg.shapes.feat_dim);
    let _ = writeln!(s, "model.d_model = {}", cfg.model.d_model);
    let _ = writeln!(s, "model.d_state = {}", cfg.model.d_state);
    let _ = writeln!(s, "model.heads = {}", cfg.model.heads);
    let _ = writeln!(s, "model.hidden = {}", cfg.model.hidden);
    let _ = writeln!(s, "model.out_dim = {}", cfg.model.out_dim);
    let _ = writeln!(s, "model.text_dim = {}", cfg.model.text_dim);
    let _ = writeln!(s, "model.decoder_blocks = {}", cfg.model.decoder_blocks);
    let _ = writeln!(s, "model.mask_prob = {}", cfg.model.mask_prob);
    let _ = writeln!(s, "model.noise_std = {}", cfg.model.noise_std);
    let _ = writeln!(s, "loss.lambda = {}", cfg.loss.lambda);
    let _ = writeln!(s, "loss.eta = {}", cfg.loss.eta);
    let _ = writeln!(s, "loss.topk = {}", cfg.loss.topk);
    let _ = writeln!(s, "loss.delta = {}", cfg.loss.delta);
    let _ = writeln!(s, "loss.w_cos = {}", cfg.loss.w_cos);
    let _ = writeln!(s, "loss.w_topk = {}", cfg.loss.w_topk);
    let _ = writeln!(s, "loss.heatmap_sigma = {}", cfg.loss.heatmap_sigma);
    let _ = writeln!(s, "loss.heatmap_res = {}", cfg.loss.heatmap_res);
    s
}

fn parse_pipeline_config(text: &str) -> Result<PipelineConfig> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("pipeline config line {}: not key = value", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Config(format!("pipeline config missing '{k}'")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("pipeline config key '{k}' not an integer")))
    };
    let f64_of = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("pipeline config key '{k}' not a number")))
    };
    let shapes = DataShapes {
        t_s: usize_of("shapes.t_s")?,
        c_s: usize_of("shapes.c_s")?,
        m_angles: usize_of("shapes.m_angles")?,
        n_video: usize_of("shapes.n_video")?,
        n_audio: usize_of("shapes.n_audio")?,
        n_image: usize_of("shapes.n_image")?,
        feat_dim: usize_of("shapes.feat_dim")?,
    };
    let model = ModelConfig {
        d_model: usize_of("model.d_model")?,
        d_state: usize_of("model.d_state")?,
        heads: usize_of("model.heads")?,
        hidden: usize_of("model.hidden")?,
        out_dim: usize_of("model.out_dim")?,
        text_dim: usize_of("model.text_dim")?,
        decoder_blocks: usize_of("model.decoder_blocks")?,
        mask_prob: f64_of("model.mask_prob")?,
        noise_std: f64_of("model.noise_std")?,
    };
    let loss = LossConfig {
        lambda: f64_of("loss.lambda")?,
        eta: f64_of("loss.eta")?,
        topk: usize_of("loss.topk")?,
        delta: f64_of("loss.delta")?,
        w_cos: f64_of("loss.w_cos")?,
        w_topk: f64_of("loss.w_topk")?,
        heatmap_sigma: f64_of("loss.heatmap_sigma")?,
        heatmap_res: usize_of("loss.heatmap_res")?,
    };
    let variant = AblationVariant::parse(get("variant")?)?;
    PipelineConfig::new(shapes, model, loss, variant)
}

/// Persists a model state (plus optional run-config snapshot and loss trace)
/// under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    run_config_snapshot: Option<&str>,
    trace: Option<&[EpochStats]>,
) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    let mut index = String::new();
    for (name, t) in &state.params {
        let _ = writeln!(index, "param {name}");
        write_tensor(&params_dir.join(format!("{name}.phmt")), t)?;
    }
    for (name, t) in &state.buffers {
        let _ = writeln!(index, "buffer {name}");
        write_tensor(&params_dir.join(format!("{name}.phmt")), t)?;
    }
    fs::write(dir.join("params.txt"), index)?;
    fs::write(dir.join("pipeline.txt"), render_pipeline_config(&state.cfg))?;
    if let Some(snapshot) = run_config_snapshot {
        fs::write(dir.join("config.txt"), snapshot)?;
    }
    if let Some(trace) = trace {
        fs::write(dir.join("loss_trace.txt"), render_trace(trace))?;
    }
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let cfg = parse_pipeline_config(&fs::read_to_string(dir.join("pipeline.txt"))?)?;
    let index = fs::read_to_string(dir.join("params.txt"))?;
    let params_dir = dir.join("params");
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for (lineno, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (kind, name) = line.split_once(' ').ok_or_else(|| {
            Error::Config(format!("params.txt line {}: malformed", lineno + 1))
        })?;
        let t = read_tensor(&params_dir.join(format!("{name}.phmt")))?.expect_f32()?;
        match kind {
            "param" => {
                params.insert(name.to_string(), t);
            }
            "buffer" => {
                buffers.insert(name.to_string(), t);
            }
            other => {
                return Err(Error::Config(format!(
                    "params.txt line {}: unknown kind '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    for required in ["sensor_mean", "sensor_std", "e_text"] {
        if !buffers.contains_key(required) {
            return Err(Error::Config(format!(
                "checkpoint missing buffer '{required}'"
            )));
        }
    }
    Ok(ModelState { cfg, params, buffers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationVariant;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let shapes = DataShapes {
            t_s: 12,
            c_s: 4,
            m_angles: 2,
            n_video: 4,
            n_audio: 4,
            n_image: 4,
            feat_dim: 8,
        };
        let model = ModelConfig {
            d_model: 8,
            d_state: 4,
            heads: 2,
            hidden: 8,
            out_dim: 16,
            text_dim: 8,
            decoder_blocks: 1,
            mask_prob: 0.2,
            noise_std: 0.1,
        };
        let loss = LossConfig { topk: 4, ..LossConfig::default() };
        let cfg = PipelineConfig::new(shapes, model, loss, AblationVariant::Full).unwrap();
        let state = ModelState::new(cfg, 17).unwrap();

        let dir = std::env::temp_dir().join(format!("procres-ckpt-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_checkpoint(&dir, &state, Some("train.epochs = 2\n"), None).unwrap();
        let back = load_checkpoint(&dir).unwrap();
        assert_eq!(state.params, back.params);
        assert_eq!(state.buffers, back.buffers);
        assert_eq!(state.cfg.variant, back.cfg.variant);
        assert_eq!(state.cfg.shapes, back.cfg.shapes);
        fs::remove_dir_all(&dir).unwrap();
    }
}
