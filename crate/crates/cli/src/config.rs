//! Run configuration: every model, training, synthesis and run key in one
//! flat `key=value` namespace.
//!
//! Layers are applied lowest precedence first: built-in defaults, then the
//! `--config` file, then `--set key=value` pairs, then dedicated flags.

use std::path::{Path, PathBuf};

use claw_unet::data::SynthSpec;
use claw_unet::kv::KvMap;
use claw_unet::metrics::HausdorffMode;
use claw_unet::train::{ablate::parse_variants, TrainConfig, VariantId};
use claw_unet::{Error, ModelConfig, Result};

const RUN_KEYS: &[&str] = &["preset", "data", "out", "count", "split_seed", "variants", "hausdorff_mode"];

/// Settings that belong to a run rather than to a module.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub preset: String,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub count: usize,
    pub split_seed: u64,
    pub variants: Vec<VariantId>,
    pub hausdorff_mode: HausdorffMode,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            data: None,
            out: None,
            count: 51,
            split_seed: 0,
            variants: VariantId::ALL.to_vec(),
            hausdorff_mode: HausdorffMode::SymmetricMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub run: RunSettings,
}

pub fn known_keys() -> impl Iterator<Item = &'static str> {
    ModelConfig::keys()
        .iter()
        .chain(TrainConfig::keys())
        .chain(SynthSpec::keys())
        .chain(RUN_KEYS)
        .copied()
}

fn check_keys(kv: &KvMap, origin: &str) -> Result<()> {
    let known: Vec<&str> = known_keys().collect();
    match kv.keys().find(|k| !known.contains(k)) {
        Some(k) => Err(Error::Config(format!("unknown key {k:?} in {origin}"))),
        None => Ok(()),
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "desk" => Ok(ModelConfig::desk()),
        "toy" => Ok(ModelConfig::toy()),
        _ => Err(Error::Config(format!("unknown preset {name:?} (default, desk, toy)"))),
    }
}

/// Channel and block lists resized to `depth` by truncation, or by
/// doubling the last width and repeating the last block count.
fn fit_depth(base: &ModelConfig, depth: usize) -> (Vec<usize>, Vec<usize>) {
    let mut channels = base.channels.clone();
    channels.truncate(depth + 1);
    while channels.len() < depth + 1 {
        channels.push(channels.last().copied().unwrap_or(8) * 2);
    }
    let mut blocks = base.blocks.clone();
    blocks.truncate(depth);
    while blocks.len() < depth {
        blocks.push(blocks.last().copied().unwrap_or(2));
    }
    (channels, blocks)
}

impl RunConfig {
    /// Reads `file` (if any) and overlays `layers` in order.
    pub fn resolve(file: Option<&Path>, layers: &[(&str, KvMap)]) -> Result<Self> {
        let mut merged = KvMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let kv = KvMap::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            check_keys(&kv, &path.display().to_string())?;
            merged.merge(&kv);
        }
        for (origin, kv) in layers {
            check_keys(kv, origin)?;
            merged.merge(kv);
        }
        Self::from_kv(&merged)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut run = RunSettings::default();
        if let Some(p) = kv.get("preset") {
            run.preset = p.to_string();
        }
        let mut model = preset(&run.preset)?;
        if let Some(depth) = kv.parse_value::<usize>("depth")? {
            let (channels, blocks) = fit_depth(&model, depth);
            if !kv.contains("channels") {
                model.channels = channels;
            }
            if !kv.contains("blocks") {
                model.blocks = blocks;
            }
        }
        model.apply_kv(kv)?;
        model.validate()?;

        let mut train = TrainConfig::default();
        train.apply_kv(kv)?;
        train.validate()?;

        let mut synth = SynthSpec::default();
        synth.apply_kv(kv)?;
        synth.validate()?;

        run.data = kv.get("data").map(PathBuf::from);
        run.out = kv.get("out").map(PathBuf::from);
        if let Some(v) = kv.parse_value("count")? {
            run.count = v;
        }
        if let Some(v) = kv.parse_value("split_seed")? {
            run.split_seed = v;
        }
        if let Some(v) = kv.get("variants") {
            run.variants = parse_variants(v).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(v) = kv.get("hausdorff_mode") {
            run.hausdorff_mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        Ok(Self { model, train, synth, run })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> KvMap {
        let mut m = KvMap::new();
        for (k, v) in pairs {
            m.insert(*k, v);
        }
        m
    }

    #[test]
    fn defaults_without_layers() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.run.count, 51);
    }

    #[test]
    fn precedence_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "epochs = 5\nbatch_size = 3 # from file\n").unwrap();
        // (file, --set, flag) -> expected epochs
        let cases: [(bool, Option<&str>, Option<&str>, usize); 8] = [
            (false, None, None, 30),
            (true, None, None, 5),
            (false, Some("7"), None, 7),
            (false, None, Some("9"), 9),
            (true, Some("7"), None, 7),
            (true, None, Some("9"), 9),
            (false, Some("7"), Some("9"), 9),
            (true, Some("7"), Some("9"), 9),
        ];
        for (use_file, set, flag, want) in cases {
            let set = set.map_or_else(KvMap::new, |v| kv(&[("epochs", v)]));
            let flag = flag.map_or_else(KvMap::new, |v| kv(&[("epochs", v)]));
            let c = RunConfig::resolve(use_file.then_some(file.as_path()), &[("--set", set), ("flags", flag)]).unwrap();
            assert_eq!(c.train.epochs, want, "file={use_file}");
            assert_eq!(c.train.batch_size, if use_file { 3 } else { 4 });
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.cfg");
        std::fs::write(&file, "epochz = 5\n").unwrap();
        assert!(RunConfig::resolve(Some(&file), &[]).is_err());
        assert!(RunConfig::resolve(None, &[("--set", kv(&[("nope", "1")]))]).is_err());
    }

    #[test]
    fn depth_adjusts_default_lists() {
        let c = RunConfig::from_kv(&kv(&[("depth", "2"), ("input_size", "64")])).unwrap();
        assert_eq!(c.model.channels, vec![64, 64, 128]);
        assert_eq!(c.model.blocks, vec![3, 4]);
        let c = RunConfig::from_kv(&kv(&[("preset", "toy"), ("depth", "3")])).unwrap();
        assert_eq!(c.model.channels, vec![8, 8, 16, 32]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::from_kv(&kv(&[("epochs", "0")])), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv(&kv(&[("variants", "unet,bogus")])), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv(&kv(&[("preset", "huge")])), Err(Error::Config(_))));
    }
}
