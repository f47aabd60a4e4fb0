//! Label sources: reference masks per annotator tier and the training
//! annotation for each condition.

use std::collections::BTreeMap;

use mocl_core::annotator::{segment_boxes, PixelAnnotation, PromptableBackend};
use mocl_core::components::{label_components, Connectivity};
use mocl_core::data_ingest::{
    boxes_from_mask, derive_mask_from_if, jitter_boxes, BoxAnnotation, BoxMode, DatasetManifest, PatchSample,
};
use mocl_core::synth::apply_label_noise;
use mocl_core::{io, Mask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{Condition, ExperimentConfig, Tier};
use crate::error::{PipelineError, Result};

/// Seed for one (sample, purpose) pair, independent of processing order.
pub fn derived_seed(seed: u64, sample_id: &str, purpose: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{sample_id}/{purpose}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Ground truth per class: the stored mask, or the mask derived from the
/// class's IF channel.
pub fn expert_masks(manifest: &DatasetManifest, sample: &PatchSample, if_min_size: usize) -> Result<Vec<Mask>> {
    manifest
        .classes
        .iter()
        .map(|class| {
            if let Some(m) = sample.class_masks.get(class) {
                return Ok(m.clone());
            }
            let channel = sample
                .if_channels
                .get(class)
                .ok_or_else(|| mocl_core::Error::Validation {
                    id: sample.id.clone(),
                    message: format!("no mask or IF channel for class `{class}`"),
                })?;
            let threshold = manifest
                .if_thresholds
                .get(class)
                .ok_or_else(|| mocl_core::Error::Manifest(format!("IF channel `{class}` has no threshold")))?;
            Ok(derive_mask_from_if(channel, *threshold, if_min_size))
        })
        .collect()
}

/// Reference masks of the configured tier. Student labels come from the
/// alternate label directory when it holds the file, and otherwise from the
/// noise model applied to the expert instances.
pub fn tier_masks(cfg: &ExperimentConfig, manifest: &DatasetManifest, sample: &PatchSample) -> Result<Vec<Mask>> {
    let expert = expert_masks(manifest, sample, cfg.data.if_min_size)?;
    if cfg.tier == Tier::Expert {
        return Ok(expert);
    }
    let dir = manifest.resolve(&cfg.annotation.student_dir);
    manifest
        .classes
        .iter()
        .zip(expert)
        .map(|(class, mask)| {
            let path = dir.join(class).join(format!("{}.png", sample.id));
            if path.exists() {
                let m = io::read_mask(&path)?;
                mask.ensure_same_shape(&m, &format!("student label {}", path.display()))?;
                return Ok(m);
            }
            let (instances, _) = label_components(&mask, Connectivity::Eight);
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.annotation.seed, &sample.id, class));
            Ok(apply_label_noise(&instances, &cfg.annotation.student_noise, &mut rng))
        })
        .collect()
}

/// Boxes for the weak conditions: manifest boxes for the expert tier when
/// present, tight boxes around the tier's instances otherwise; displaced for
/// `weak_random`.
pub fn weak_boxes(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    sample: &PatchSample,
) -> Result<Vec<BoxAnnotation>> {
    let tight = if cfg.tier == Tier::Expert && !sample.boxes.is_empty() {
        sample.boxes.clone()
    } else {
        let mut out = Vec::new();
        for (class, mask) in manifest.classes.iter().zip(tier_masks(cfg, manifest, sample)?) {
            let (instances, _) = label_components(&mask, Connectivity::Eight);
            out.extend(boxes_from_mask(&instances, class, BoxMode::Tight, 0.0, 0)?);
        }
        out
    };
    match cfg.condition {
        Condition::WeakRandom => Ok(jitter_boxes(
            &tight,
            cfg.annotation.jitter_frac,
            derived_seed(cfg.annotation.seed, &sample.id, "jitter"),
            sample.shape(),
        )?),
        _ => Ok(tight),
    }
}

/// Pixel-level training labels for one sample.
pub fn annotate_sample(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    sample: &PatchSample,
    backend: &dyn PromptableBackend,
) -> Result<PixelAnnotation> {
    match cfg.condition {
        Condition::Complete => {
            let masks: BTreeMap<String, Mask> = manifest
                .classes
                .iter()
                .cloned()
                .zip(tier_masks(cfg, manifest, sample)?)
                .collect();
            Ok(PixelAnnotation::from_class_masks(masks, sample.shape()))
        }
        Condition::WeakTight | Condition::WeakRandom => {
            let boxes = weak_boxes(cfg, manifest, sample)?;
            for b in &boxes {
                if !manifest.classes.contains(&b.class_name) {
                    return Err(PipelineError::Core(mocl_core::Error::Validation {
                        id: sample.id.clone(),
                        message: format!("box class `{}` is not a manifest class", b.class_name),
                    }));
                }
            }
            Ok(segment_boxes(&sample.image, &boxes, backend)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mocl_core::annotator::BuiltinBackend;
    use mocl_core::metrics::dice;
    use mocl_core::synth::{generate_synthetic_dataset, SynthConfig};

    fn synth(n: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let classes = vec!["podocyte".to_string(), "mesangial".to_string()];
        let mut m = generate_synthetic_dataset(dir.path(), n, &classes, 3, &SynthConfig::default()).unwrap();
        m.root_path = dir.path().to_path_buf();
        (dir, m)
    }

    #[test]
    fn derived_seeds_differ_by_sample_and_purpose() {
        let a = derived_seed(42, "s1", "jitter");
        assert_eq!(a, derived_seed(42, "s1", "jitter"));
        assert_ne!(a, derived_seed(42, "s2", "jitter"));
        assert_ne!(a, derived_seed(42, "s1", "podocyte"));
        assert_ne!(a, derived_seed(43, "s1", "jitter"));
    }

    #[test]
    fn condition_label_sources() {
        let (_dir, manifest) = synth(2);
        let sample = manifest.load_by_id(&manifest.ids()[0]).unwrap();
        let gt = expert_masks(&manifest, &sample, 10).unwrap();

        let mut cfg = ExperimentConfig {
            condition: Condition::Complete,
            ..ExperimentConfig::default()
        };
        let complete = annotate_sample(&cfg, &manifest, &sample, &BuiltinBackend).unwrap();
        for (class, g) in manifest.classes.iter().zip(&gt) {
            assert_eq!(&complete.mask_for(class), g);
        }

        cfg.condition = Condition::WeakTight;
        let tight = weak_boxes(&cfg, &manifest, &sample).unwrap();
        assert_eq!(tight, sample.boxes);
        let weak = annotate_sample(&cfg, &manifest, &sample, &BuiltinBackend).unwrap();
        for (class, g) in manifest.classes.iter().zip(&gt) {
            assert!(dice(&weak.mask_for(class), g).unwrap() > 0.8, "{class}");
        }

        cfg.condition = Condition::WeakRandom;
        let random = weak_boxes(&cfg, &manifest, &sample).unwrap();
        assert_eq!(random.len(), tight.len());
        assert_ne!(random, tight);
        assert_eq!(random, weak_boxes(&cfg, &manifest, &sample).unwrap());
    }

    #[test]
    fn student_tier_reads_directory_or_adds_noise() {
        let (dir, manifest) = synth(2);
        let sample = manifest.load_by_id(&manifest.ids()[0]).unwrap();
        let gt = expert_masks(&manifest, &sample, 10).unwrap();
        let cfg = ExperimentConfig {
            tier: Tier::Student,
            ..ExperimentConfig::default()
        };
        let noisy = tier_masks(&cfg, &manifest, &sample).unwrap();
        assert_ne!(noisy, gt);
        assert_eq!(noisy, tier_masks(&cfg, &manifest, &sample).unwrap());

        let (h, w) = sample.shape();
        let override_mask = Mask::from_fn(h, w, |y, x| y < 10 && x < 10);
        let path = dir.path().join("student/podocyte").join(format!("{}.png", sample.id));
        io::write_mask(&path, &override_mask).unwrap();
        let read = tier_masks(&cfg, &manifest, &sample).unwrap();
        assert_eq!(read[0], override_mask);
        assert_eq!(read[1], noisy[1]);
    }
}
