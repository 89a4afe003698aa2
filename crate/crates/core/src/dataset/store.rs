//! One directory per sample: furnished.png, empty.png, mask.png, layout.png, meta.json.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DRSample, RoomSpec};
use crate::error::{PanoError, Result};
use crate::pano::{DiminishMask, LayoutMap, Panorama};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene_id: String,
    pub seed: Option<u64>,
    pub spec: Option<RoomSpec>,
    #[serde(default)]
    pub source: String,
}

pub fn write_sample(dir: &Path, sample: &DRSample, meta: &SampleMeta) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir)?;
    sample.furnished.save_png(&dir.join("furnished.png"))?;
    sample.empty.save_png(&dir.join("empty.png"))?;
    sample.mask.save_png(&dir.join("mask.png"))?;
    sample.layout.save_png(&dir.join("layout.png"))?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<(DRSample, SampleMeta)> {
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mask = DiminishMask::load_png(&dir.join("mask.png"))?;
    let sample = DRSample {
        furnished: Panorama::load_png(&dir.join("furnished.png"))?,
        empty: Panorama::load_png(&dir.join("empty.png"))?,
        object_mask: mask.clone(),
        mask,
        layout: LayoutMap::load_png(&dir.join("layout.png"))?,
        scene_id: meta.scene_id.clone(),
    };
    sample.validate()?;
    Ok((sample, meta))
}

/// Sample directories directly under `root`, sorted by name.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<DRSample>> {
    let dirs = sample_dirs(root)?;
    if dirs.is_empty() {
        return Err(PanoError::Config(format!("no samples under {}", root.display())));
    }
    dirs.iter().map(|d| read_sample(d).map(|s| s.0)).collect()
}

/// Validator pass: per-directory outcome.
pub fn validate_dir(root: &Path) -> Result<Vec<(PathBuf, Result<()>)>> {
    Ok(sample_dirs(root)?.into_iter().map(|d| {
        let r = read_sample(&d).map(|_| ());
        (d, r)
    }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, MaskPolicy};

    #[test]
    fn round_trip_preserves_labels_and_pixels() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, spec, seed) = synth_dataset(1, 16, 5, &MaskPolicy::default()).unwrap().remove(0);
        let meta = SampleMeta { scene_id: s.scene_id.clone(), seed: Some(seed), spec: Some(spec), source: "toy".into() };
        let dir = tmp.path().join(&s.scene_id);
        write_sample(&dir, &s, &meta).unwrap();
        let (back, m2) = read_sample(&dir).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back.mask, s.mask);
        assert_eq!(back.layout, s.layout);
        assert_eq!(back.furnished, s.furnished.quantized());
        assert_eq!(validate_dir(tmp.path()).unwrap().len(), 1);
        fs::remove_file(dir.join("layout.png")).unwrap();
        assert!(validate_dir(tmp.path()).unwrap()[0].1.is_err());
    }
}
