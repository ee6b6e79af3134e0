//! Synthetic two-entity interaction corpus: approach, retreat, orbit, mirror.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    serialize_manifest, write_iskel, DataError, DatasetManifest, ManifestEntry, SkeletonSequence,
    SplitTag,
};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["approach", "retreat", "orbit", "mirror"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    /// Standard deviation of per-coordinate Gaussian noise.
    pub noise: f64,
    /// Randomly swap the two entities; otherwise the actor is always entity 0.
    pub shuffle_entities: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 3,
            frames: 40,
            joints: 5,
            noise: 0.02,
            shuffle_entities: false,
        }
    }
}

/// Centre trajectory of both entities at normalized time `s` in `[0, 1]`.
fn centres(class: usize, s: f64, p: &Motion) -> [[f64; 3]; 2] {
    let partner = [p.gap, 0.0, 0.0];
    let actor = match class {
        0 => [p.gap * (0.9 * s) * p.speed, 0.0, 0.0],
        1 => [-p.gap * 0.9 * s * p.speed, 0.0, 0.0],
        2 => {
            let a = p.phase + 2.0 * PI * s * p.speed;
            [p.gap - p.gap * a.cos(), 0.0, p.gap * a.sin()]
        }
        _ => {
            let sway = 0.4 * (p.phase + 2.0 * PI * s * p.speed).sin();
            return [[0.0, sway, 0.0], [p.gap, sway, 0.0]];
        }
    };
    [actor, partner]
}

struct Motion {
    gap: f64,
    speed: f64,
    phase: f64,
}

/// One clip of `class`, deterministic in `seed`.
pub fn generate_clip(
    cfg: &SynthConfig,
    class: usize,
    seed: u64,
    source_id: &str,
) -> SkeletonSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let motion = Motion {
        gap: rng.random_range(1.5..2.5),
        speed: rng.random_range(0.8..1.2),
        phase: rng.random_range(0.0..2.0 * PI),
    };
    // A rigid body layout per entity: joints spread vertically with jitter.
    let layout: Vec<[f64; 3]> = (0..cfg.joints * 2)
        .map(|_| {
            [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.1..0.1),
            ]
        })
        .collect();
    let swap = cfg.shuffle_entities && rng.random_bool(0.5);
    let (c, t, j) = (cfg.channels, cfg.frames, cfg.joints);
    let mut data = Tensor::zeros(&[c, t, j, 2]);
    for ti in 0..t {
        let s = if t > 1 {
            ti as f64 / (t - 1) as f64
        } else {
            0.0
        };
        let pos = centres(class, s, &motion);
        for (e, centre) in pos.iter().enumerate() {
            let slot = if swap { 1 - e } else { e };
            for ji in 0..j {
                let offset = layout[e * j + ji];
                for ci in 0..c {
                    let v = centre[ci % 3] + offset[ci % 3] + noise.sample(&mut rng);
                    data.set(&[ci, ti, ji, slot], (v * 1e4).round() / 1e4);
                }
            }
        }
    }
    SkeletonSequence::new(data, class, source_id).expect("synthetic clip is valid")
}

/// `per_class` clips of each class, interleaved by class.
pub fn generate(cfg: &SynthConfig, per_class: usize, seed: u64) -> Vec<SkeletonSequence> {
    let mut out = Vec::with_capacity(per_class * CLASS_NAMES.len());
    for i in 0..per_class {
        for class in 0..CLASS_NAMES.len() {
            let idx = i * CLASS_NAMES.len() + class;
            let clip_seed = seed.wrapping_mul(0x100_0000).wrapping_add(idx as u64);
            out.push(generate_clip(
                cfg,
                class,
                clip_seed,
                &format!("synth_{idx:05}"),
            ));
        }
    }
    out
}

/// Writes each split's clips under `dir` and a `manifest.txt` listing them.
pub fn write_corpus(
    dir: &Path,
    splits: &[(SplitTag, &[SkeletonSequence])],
) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::new();
    for (tag, clips) in splits {
        for (i, clip) in clips.iter().enumerate() {
            let rel = PathBuf::from(format!("{}_{i:05}.iskel", tag.as_string()));
            write_iskel(&dir.join(&rel), clip)?;
            samples.push(ManifestEntry {
                path: rel,
                label: clip.label,
                split: tag.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        samples,
        num_classes: CLASS_NAMES.len(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("manifest.txt");
    fs::write(&path, serialize_manifest(&manifest)).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_shaped() {
        let cfg = SynthConfig::default();
        let a = generate_clip(&cfg, 2, 11, "a");
        let b = generate_clip(&cfg, 2, 11, "a");
        assert_eq!(a.data.data(), b.data.data());
        assert_eq!(a.data.shape(), &[3, 40, 5, 2]);
        assert_eq!(a.label, 2);
    }

    #[test]
    fn actor_is_entity_zero_unless_shuffled() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        for seed in 0..10 {
            let clip = generate_clip(&cfg, 0, seed, "x");
            let last = cfg.frames - 1;
            // The partner never moves.
            assert_eq!(clip.data.at(&[0, 0, 0, 1]), clip.data.at(&[0, last, 0, 1]));
        }
        let shuffled = SynthConfig {
            shuffle_entities: true,
            ..cfg.clone()
        };
        let moved_second = (0..40)
            .filter(|&seed| {
                let clip = generate_clip(&shuffled, 0, seed, "x");
                clip.data.at(&[0, 0, 0, 1]) != clip.data.at(&[0, cfg.frames - 1, 0, 1])
            })
            .count();
        assert!(moved_second > 5 && moved_second < 35);
    }

    #[test]
    fn generate_balances_classes() {
        let clips = generate(&SynthConfig::default(), 3, 0);
        for class in 0..4 {
            assert_eq!(clips.iter().filter(|c| c.label == class).count(), 3);
        }
    }
}
