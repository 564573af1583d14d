//! UTF-8 key-value configuration files.
//!
//! One flat `key = value` file configures every subcommand; keys are
//! namespaced (`synth.*`, `model.*`, `loss.*`, `train.*`). Lines starting
//! with `#` are comments. Unknown keys inside a recognized namespace are
//! rejected; every key has a default, so an empty file is a valid config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::model::scoring::LossConfig;
use crate::model::ModelConfig;

/// Optimization loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 16,
            epochs: 60,
            seed: 42,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if self.epochs < 2 {
            return Err(Error::Config("train.epochs must be >= 2".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: synthesis, model widths, loss weights, training.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Scope<'a> {
    map: &'a BTreeMap<String, String>,
    seen: Vec<String>,
}

impl<'a> Scope<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> Self {
        Scope { map, seen: Vec::new() }
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.seen.push(key.to_string());
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    fn reject_unknown(&self, namespaces: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if namespaces.iter().any(|ns| key.starts_with(ns)) && !self.seen.contains(key) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }
}

/// Parses a config file, applying defaults for missing keys.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let map = parse_kv(text)?;
    let mut s = Scope::new(&map);

    let sd = SynthConfig::default();
    let synth = SynthConfig {
        n_train: s.get("synth.n_train", sd.n_train)?,
        n_val: s.get("synth.n_val", sd.n_val)?,
        n_test: s.get("synth.n_test", sd.n_test)?,
        seed: s.get("synth.seed", sd.seed)?,
        feat_dim: s.get("synth.feat_dim", sd.feat_dim)?,
        n_video: s.get("synth.n_video", sd.n_video)?,
        n_audio: s.get("synth.n_audio", sd.n_audio)?,
        n_image: s.get("synth.n_image", sd.n_image)?,
        d_theta: s.get("synth.d_theta", sd.d_theta)?,
        text_dim: s.get("synth.text_dim", sd.text_dim)?,
        sigma_sensor: s.get("synth.sigma_sensor", sd.sigma_sensor)?,
        sigma_video: s.get("synth.sigma_video", sd.sigma_video)?,
        sigma_audio: s.get("synth.sigma_audio", sd.sigma_audio)?,
        sigma_image: s.get("synth.sigma_image", sd.sigma_image)?,
        severity_min: s.get("synth.severity_min", sd.severity_min)?,
        severity_max: s.get("synth.severity_max", sd.severity_max)?,
        anomaly_fraction: s.get("synth.anomaly_fraction", sd.anomaly_fraction)?,
    };

    let md = ModelConfig::default();
    let model = ModelConfig {
        d_model: s.get("model.d_model", md.d_model)?,
        d_state: s.get("model.d_state", md.d_state)?,
        heads: s.get("model.heads", md.heads)?,
        hidden: s.get("model.hidden", md.hidden)?,
        out_dim: s.get("model.out_dim", md.out_dim)?,
        text_dim: s.get("model.text_dim", md.text_dim)?,
        decoder_blocks: s.get("model.decoder_blocks", md.decoder_blocks)?,
        mask_prob: s.get("model.mask_prob", md.mask_prob)?,
        noise_std: s.get("model.noise_std", md.noise_std)?,
    };

    let ld = LossConfig::default();
    let loss = LossConfig {
        lambda: s.get("loss.lambda", ld.lambda)?,
        eta: s.get("loss.eta", ld.eta)?,
        topk: s.get("loss.topk", ld.topk)?,
        delta: s.get("loss.delta", ld.delta)?,
        w_cos: s.get("loss.w_cos", ld.w_cos)?,
        w_topk: s.get("loss.w_topk", ld.w_topk)?,
        heatmap_sigma: s.get("loss.heatmap_sigma", ld.heatmap_sigma)?,
        heatmap_res: s.get("loss.heatmap_res", ld.heatmap_res)?,
    };

    let td = TrainConfig::default();
    let train = TrainConfig {
        lr: s.get("train.lr", td.lr)?,
        batch: s.get("train.batch", td.batch)?,
        epochs: s.get("train.epochs", td.epochs)?,
        seed: s.get("train.seed", td.seed)?,
        weight_decay: s.get("train.weight_decay", td.weight_decay)?,
    };

    s.reject_unknown(&["synth.", "model.", "loss.", "train."])?;
    synth.validate()?;
    train.validate()?;
    Ok(RunConfig { synth, model, loss, train })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Serializes a config as a key-value snapshot (used inside checkpoints).
pub fn render_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "synth.n_train = {}", cfg.synth.n_train);
    let _ = writeln!(s, "synth.n_val = {}", cfg.synth.n_val);
    let _ = writeln!(s, "synth.n_test = {}", cfg.synth.n_test);
    let _ = writeln!(s, "synth.seed = {}", cfg.synth.seed);
    let _ = writeln!(s, "synth.feat_dim = {}", cfg.synth.feat_dim);
    let _ = writeln!(s, "synth.n_video = {}", cfg.synth.n_video);
    let _ = writeln!(s, "synth.n_audio = {}", cfg.synth.n_audio);
    let _ = writeln!(s, "synth.n_image = {}", cfg.synth.n_image);
    let _ = writeln!(s, "synth.d_theta = {}", cfg.synth.d_theta);
    let _ = writeln!(s, "synth.text_dim = {}", cfg.synth.text_dim);
    let _ = writeln!(s, "synth.sigma_sensor = {}", cfg.synth.sigma_sensor);
    let _ = writeln!(s, "synth.sigma_video = {}", cfg.synth.sigma_video);
    let _ = writeln!(s, "synth.sigma_audio = {}", cfg.synth.sigma_audio);
    let _ = writeln!(s, "synth.sigma_image = {}", cfg.synth.sigma_image);
    let _ = writeln!(s, "synth.severity_min = {}", cfg.synth.severity_min);
    let _ = writeln!(s, "synth.severity_max = {}", cfg.synth.severity_max);
    let _ = writeln!(s, "synth.anomaly_fraction = {}", cfg.synth.anomaly_fraction);
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
    let _ = writeln!(s, "train.lr = {}", cfg.train.lr);
    let _ = writeln!(s, "train.batch = {}", cfg.train.batch);
    let _ = writeln!(s, "train.epochs = {}", cfg.train.epochs);
    let _ = writeln!(s, "train.seed = {}", cfg.train.seed);
    let _ = writeln!(s, "train.weight_decay = {}", cfg.train.weight_decay);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch, 16);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.synth.n_train, 128);
        assert_eq!(cfg.model.out_dim, 512);
    }

    #[test]
    fn overrides_comments_and_unknown_keys() {
        let cfg = parse_config("# comment\ntrain.epochs = 5\nsynth.n_test = 10\n").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.synth.n_test, 10);
        assert!(parse_config("train.epocs = 5\n").is_err());
        assert!(parse_config("train.epochs = soon\n").is_err());
        assert!(parse_config("not a key value line\n").is_err());
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 7;
        cfg.loss.lambda = 0.25;
        cfg.synth.sigma_video = 0.125;
        let text = render_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(back.train.epochs, 7);
        assert_eq!(back.loss.lambda, 0.25);
        assert_eq!(back.synth.sigma_video, 0.125);
    }
}
