//! Scoring a model (or a stand-in) on a labelled set.

use std::path::Path;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{self, HausdorffMode, MetricsReport};
use crate::model::{self, checkpoint, ClawParams};
use crate::nn::Mode;
use crate::tensor::Real;

/// Anything that turns a sample into a binary prediction.
pub trait Predictor {
    fn predict_with(&self, sample: &Sample, threshold: f64) -> Result<BinaryMask>;
}

impl<T: Real> Predictor for ClawParams<T> {
    /// Eval-mode forward pass on one sample, thresholded.
    fn predict_with(&self, sample: &Sample, threshold: f64) -> Result<BinaryMask> {
        let sample = &super::prepare(std::slice::from_ref(sample), &self.config)?[0];
        let prob = model::forward(&sample.image.cast::<T>(), self, Mode::Eval)?;
        model::predict_mask(&prob, threshold)
    }
}

impl<T: Real> ClawParams<T> {
    /// Prediction at the configured threshold.
    pub fn predict(&self, sample: &Sample) -> Result<BinaryMask> {
        self.predict_with(sample, self.config.threshold)
    }
}

/// Test stand-in that "predicts" the ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskOracle;

impl Predictor for MaskOracle {
    fn predict_with(&self, sample: &Sample, _threshold: f64) -> Result<BinaryMask> {
        Ok(sample.mask.clone())
    }
}

/// Predicts every sample and scores it against its mask.
pub fn evaluate(predictor: &impl Predictor, test_set: &[Sample], threshold: f64) -> Result<MetricsReport> {
    evaluate_with_mode(predictor, test_set, threshold, HausdorffMode::SymmetricMax)
}

pub fn evaluate_with_mode(
    predictor: &impl Predictor,
    test_set: &[Sample],
    threshold: f64,
    mode: HausdorffMode,
) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let images = test_set
        .iter()
        .map(|s| metrics::image_metrics(&s.id, &predictor.predict_with(s, threshold)?, &s.mask, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(images, mode))
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate_checkpoint(path: impl AsRef<Path>, test_set: &[Sample], threshold: f64) -> Result<MetricsReport> {
    let params = checkpoint::load::<f32>(path)?;
    evaluate(&params, test_set, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn oracle_scores_perfectly() {
        let set = synth_generate(&SynthSpec { size: 32, width: (1.0, 2.0), ..SynthSpec::default() }, 3).unwrap();
        let r = evaluate(&MaskOracle, &set, 0.5).unwrap();
        assert_eq!((r.mean_miou, r.mean_dice, r.mean_aver_hd), (1.0, 1.0, Some(0.0)));
        assert!(evaluate(&MaskOracle, &[], 0.5).is_err());
    }

    #[test]
    fn checkpoint_evaluation_repeats() {
        let cfg = ModelConfig::toy();
        let set = synth_generate(&SynthSpec { size: 32, width: (1.0, 2.0), ..SynthSpec::default() }, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params::<f32>(&cfg).unwrap();
        checkpoint::save(&p, &path).unwrap();
        let a = evaluate_checkpoint(&path, &set, 0.5).unwrap();
        let b = evaluate_checkpoint(&path, &set, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, evaluate(&p, &set, 0.5).unwrap());
    }
}
