//! Trains and scores several architecture variants under identical seeds.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{init_params, ModelConfig};
use crate::tensor::Real;

use super::{evaluate, train_observed, EpochSummary, TrainConfig, TrainHistory};

/// Mechanisms switched on, from plain UNet to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    /// No attention, no bottom branch, plain double-conv encoder stages.
    Unet,
    /// Bottom branch only.
    Claw,
    /// Bottom branch and residual encoder.
    ClawRes,
    /// Bottom branch, residual encoder and attention gates.
    ClawResAtt,
}

impl VariantId {
    pub const ALL: [VariantId; 4] = [Self::Unet, Self::Claw, Self::ClawRes, Self::ClawResAtt];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::Claw => "claw",
            Self::ClawRes => "claw_res",
            Self::ClawResAtt => "claw_res_att",
        }
    }

    /// `(attention, residual, bottom_branch)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Self::Unet => (false, false, false),
            Self::Claw => (false, false, true),
            Self::ClawRes => (false, true, true),
            Self::ClawResAtt => (true, true, true),
        }
    }

    /// `base` with this variant's toggles; everything else is kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (attention, residual, bottom) = self.toggles();
        ModelConfig {
            enable_attention: attention,
            enable_residual: residual,
            enable_bottom_branch: bottom,
            ..base.clone()
        }
    }

    /// The variant whose toggles match `config`, if any.
    pub fn of(config: &ModelConfig) -> Option<Self> {
        let t = (config.enable_attention, config.enable_residual, config.enable_bottom_branch);
        Self::ALL.into_iter().find(|v| v.toggles() == t)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Value(format!("unknown variant {s:?} (unet, claw, claw_res, claw_res_att)")))
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<VariantId>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: VariantId,
    pub trainable_params: usize,
    pub report: MetricsReport,
    #[serde(skip)]
    pub history: TrainHistory,
}

/// One row per variant, in the order requested.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Metrics on which row `i` is best (ties all count): highest MIoU,
    /// highest Dice, lowest defined average Hausdorff distance.
    pub fn best_flags(&self, i: usize) -> Vec<&'static str> {
        let r = &self.rows[i].report;
        let max_miou = self.rows.iter().map(|r| r.report.mean_miou).fold(f64::NEG_INFINITY, f64::max);
        let max_dice = self.rows.iter().map(|r| r.report.mean_dice).fold(f64::NEG_INFINITY, f64::max);
        let min_hd = self.rows.iter().filter_map(|r| r.report.mean_aver_hd).fold(f64::INFINITY, f64::min);
        let mut flags = Vec::new();
        if r.mean_miou == max_miou {
            flags.push("miou");
        }
        if r.mean_dice == max_dice {
            flags.push("dice");
        }
        if r.mean_aver_hd == Some(min_hd) {
            flags.push("aver_hd");
        }
        flags
    }

    /// `variant,miou,dice,aver_hd,best_flags`; flags are `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,miou,dice,aver_hd,best_flags\n");
        for (i, row) in self.rows.iter().enumerate() {
            let r = &row.report;
            let hd = r.mean_aver_hd.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.variant,
                r.mean_miou,
                r.mean_dice,
                hd,
                self.best_flags(i).join(";")
            ));
        }
        out
    }

    /// Rows with parameter counts and full per-image reports.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation table serializes")
    }
}

/// Trainable-parameter count of `variant` built on `base`.
pub fn parameter_count<T: Real>(variant: VariantId, base: &ModelConfig) -> Result<usize> {
    Ok(init_params::<T>(&variant.apply(base))?.trainable_count())
}

/// Trains every variant on the same data with the same seeds and scores it
/// on `test_set` at the base config's threshold.
pub fn ablate(
    variants: &[VariantId],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
) -> Result<AblationTable> {
    ablate_with(variants, model_config, train_config, train_set, test_set, |_, _| {})
}

/// [`ablate`] with a callback after each finished variant.
pub fn ablate_with(
    variants: &[VariantId],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    mut on_row: impl FnMut(usize, &AblationRow),
) -> Result<AblationTable> {
    ablate_observed(variants, model_config, train_config, train_set, test_set, |_, _| {}, &mut on_row)
}

/// [`ablate_with`] that also reports each training epoch.
pub fn ablate_observed(
    variants: &[VariantId],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    mut on_epoch: impl FnMut(VariantId, EpochSummary<'_>),
    mut on_row: impl FnMut(usize, &AblationRow),
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Value("no variants to compare".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (i, &variant) in variants.iter().enumerate() {
        let cfg = variant.apply(model_config);
        let tc = TrainConfig { checkpoint_path: None, ..train_config.clone() };
        let (params, history) = train_observed(&cfg, &tc, train_set, None, |e| on_epoch(variant, e))?;
        let report = evaluate(&params, test_set, cfg.threshold)?;
        let row = AblationRow { variant, trainable_params: params.trainable_count(), report, history };
        on_row(i, &row);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in VariantId::ALL {
            assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
            assert_eq!(VariantId::of(&v.apply(&ModelConfig::default())), Some(v));
        }
        assert!("resunet".parse::<VariantId>().is_err());
        assert_eq!(parse_variants("unet, claw_res_att").unwrap(), vec![VariantId::Unet, VariantId::ClawResAtt]);
    }

    #[test]
    fn parameter_counts_are_ordered() {
        let count = |v, base: &ModelConfig| parameter_count::<f32>(v, base).unwrap();
        let base = ModelConfig::desk();
        let c: Vec<usize> = VariantId::ALL.iter().map(|&v| count(v, &base)).collect();
        assert!(c[0] < c[1] && c[1] < c[2] && c[2] <= c[3], "{c:?}");
        // one block per stage has exactly the plain stage's two convolutions
        let toy = ModelConfig::toy();
        assert_eq!(count(VariantId::Claw, &toy), count(VariantId::ClawRes, &toy));
    }
}
