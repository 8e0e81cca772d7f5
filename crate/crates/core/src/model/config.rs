use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};

/// How a residual block matches channels when its output is wider than its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutMode {
    /// Subsample spatially and append zero channels. Adds no parameters.
    ZeroPad,
    /// Strided 1×1 convolution followed by batch norm.
    Projection,
}

impl fmt::Display for ShortcutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutMode::ZeroPad => "zero-pad",
            ShortcutMode::Projection => "projection",
        })
    }
}

impl FromStr for ShortcutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-pad" => Ok(ShortcutMode::ZeroPad),
            "projection" => Ok(ShortcutMode::Projection),
            other => Err(Error::Config(format!("unknown shortcut mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `channels[0]` is the stem width; `channels[i]` is the width of encoder
/// stage `i` (1-based), so the list has `depth + 1` entries. Stage `i`
/// holds `blocks[i - 1]` residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub enable_attention: bool,
    pub enable_residual: bool,
    pub enable_bottom_branch: bool,
    pub shortcut_mode: ShortcutMode,
    /// Max-pool before every encoder stage instead of strided first blocks.
    pub pool_everywhere: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 512² RGB input, ResNet-34 encoder (3, 4, 6, 3 blocks), all mechanisms on.
    fn default() -> Self {
        Self {
            input_size: 512,
            input_channels: 3,
            depth: 4,
            channels: vec![64, 64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            enable_attention: true,
            enable_residual: true,
            enable_bottom_branch: true,
            shortcut_mode: ShortcutMode::ZeroPad,
            pool_everywhere: false,
            threshold: 0.5,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "input_size",
    "input_channels",
    "depth",
    "channels",
    "blocks",
    "enable_attention",
    "enable_residual",
    "enable_bottom_branch",
    "shortcut_mode",
    "pool_everywhere",
    "threshold",
    "seed",
];

impl ModelConfig {
    /// Depth-2 model small enough for finite-difference checks:
    /// 32² input, 8 base channels, one block per stage.
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            depth: 2,
            channels: vec![8, 8, 16],
            blocks: vec![1, 1],
            ..Self::default()
        }
    }

    /// Reduced-width ResNet-34 layout for single-core CPU runs at 128².
    pub fn desk() -> Self {
        Self {
            input_size: 128,
            input_channels: 3,
            channels: vec![16, 16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.channels[0]
    }

    /// Spatial extent of encoder output `E_i` (`i = 0` is the stem).
    pub fn extent(&self, level: usize) -> usize {
        self.input_size >> (level + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.channels.len() != self.depth + 1 {
            return fail(format!(
                "channel schedule needs depth + 1 = {} entries, got {}",
                self.depth + 1,
                self.channels.len()
            ));
        }
        if self.blocks.len() != self.depth {
            return fail(format!("blocks needs {} entries, got {}", self.depth, self.blocks.len()));
        }
        if self.channels.iter().chain(&self.blocks).any(|&c| c == 0) {
            return fail("channel and block counts must be positive".into());
        }
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        let div = 1usize.checked_shl(self.depth as u32 + 1).unwrap_or(0);
        if div == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^(depth+1) = {div}",
                self.input_size
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        Ok(())
    }

    /// Canonical `key=value` block (sorted keys, one per line).
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("input_size", self.input_size);
        kv.insert("input_channels", self.input_channels);
        kv.insert("depth", self.depth);
        kv.insert("channels", join_list(&self.channels));
        kv.insert("blocks", join_list(&self.blocks));
        kv.insert("enable_attention", self.enable_attention);
        kv.insert("enable_residual", self.enable_residual);
        kv.insert("enable_bottom_branch", self.enable_bottom_branch);
        kv.insert("shortcut_mode", self.shortcut_mode);
        kv.insert("pool_everywhere", self.pool_everywhere);
        kv.insert("threshold", self.threshold);
        kv.insert("seed", self.seed);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Keys understood by [`ModelConfig::apply_kv`].
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse_value("input_size")? {
            self.input_size = v;
        }
        if let Some(v) = kv.parse_value("input_channels")? {
            self.input_channels = v;
        }
        if let Some(v) = kv.parse_value("depth")? {
            self.depth = v;
        }
        if let Some(v) = kv.parse_list("channels")? {
            self.channels = v;
        }
        if let Some(v) = kv.parse_list("blocks")? {
            self.blocks = v;
        }
        if let Some(v) = kv.parse_value("enable_attention")? {
            self.enable_attention = v;
        }
        if let Some(v) = kv.parse_value("enable_residual")? {
            self.enable_residual = v;
        }
        if let Some(v) = kv.parse_value("enable_bottom_branch")? {
            self.enable_bottom_branch = v;
        }
        if let Some(v) = kv.get("shortcut_mode") {
            self.shortcut_mode = v.parse()?;
        }
        if let Some(v) = kv.parse_value("pool_everywhere")? {
            self.pool_everywhere = v;
        }
        if let Some(v) = kv.parse_value("threshold")? {
            self.threshold = v;
        }
        if let Some(v) = kv.parse_value("seed")? {
            self.seed = v;
        }
        Ok(())
    }

    /// Parses a complete canonical block; every key must be present and known.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        for k in kv.keys() {
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        if let Some(missing) = KEYS.iter().find(|k| !kv.contains(k)) {
            return Err(Error::Config(format!("missing model key {missing:?}")));
        }
        let mut cfg = Self::default();
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_resnet34_layout() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.channels, vec![64, 64, 128, 256, 512]);
        assert_eq!((0..=4).map(|i| c.extent(i)).collect::<Vec<_>>(), vec![256, 128, 64, 32, 16]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::toy();
        c.shortcut_mode = ShortcutMode::Projection;
        c.threshold = 0.3;
        c.seed = 99;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ModelConfig::default();
        c.input_size = 500;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.channels.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.depth = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_text("depth=2\n").is_err());
    }
}
