//! Stage-specific training setup shared by the CLI and the experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::config::{ConfigFile, ConfigReader};
use super::metaimage::{read_mask, read_volume};
use super::pipeline::{preprocess_global, preprocess_global_mask, scaled_global_dims};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::locate::LocalGeometry;
use crate::network::{global_spec, local_spec, NetworkSpec};
use crate::train::{local_pair, Sample, TrainConfig, LOCAL_BOX_JITTER_MM};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub stage: Stage,
    pub train: TrainConfig,
    pub spec: NetworkSpec,
    pub scale: f64,
    pub box_jitter_mm: f64,
}

/// Read the augmentation keys into `a`.
pub fn read_augment_keys(r: &mut ConfigReader<'_>, a: &mut AugmentConfig) -> Result<()> {
    r.set("noise_std", &mut a.noise_std)?;
    r.set("deform_probability", &mut a.deform_probability)?;
    r.set("coeff_spread", &mut a.coeff_spread)?;
    r.set("bandwidth_mm", &mut a.bandwidth_mm)?;
    r.set("max_shift", &mut a.max_shift)?;
    r.set("max_points", &mut a.max_points)?;
    Ok(())
}

impl StageSettings {
    pub fn defaults(stage: Stage) -> Self {
        let spec = match stage {
            Stage::Global => global_spec(),
            Stage::Local => local_spec(),
        };
        Self { stage, train: TrainConfig::default(), spec, scale: 1.0, box_jitter_mm: LOCAL_BOX_JITTER_MM }
    }

    pub fn from_config(stage: Stage, c: &ConfigFile) -> Result<Self> {
        let mut s = Self::defaults(stage);
        let t = &mut s.train;
        let mut r = c.reader();
        r.set("epochs", &mut t.epochs)?;
        r.set("lr", &mut t.lr)?;
        r.set("lr_factor", &mut t.lr_factor)?;
        r.set("plateau_window", &mut t.plateau_window)?;
        r.set("plateau_threshold", &mut t.plateau_threshold)?;
        r.set("lr_floor", &mut t.lr_floor)?;
        r.set("adam_beta1", &mut t.adam.beta1)?;
        r.set("adam_beta2", &mut t.adam.beta2)?;
        r.set("adam_eps", &mut t.adam.eps)?;
        r.set("batch", &mut t.batch)?;
        r.set("seed", &mut t.seed)?;
        r.set("checkpoint_every", &mut t.checkpoint_every)?;
        read_augment_keys(&mut r, &mut t.augment)?;
        r.set("scale", &mut s.scale)?;
        r.set("depth", &mut s.spec.depth)?;
        r.set("base_features", &mut s.spec.base_features)?;
        r.set("dropout", &mut s.spec.dropout_rate)?;
        r.set("box_jitter_mm", &mut s.box_jitter_mm)?;
        r.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.box_jitter_mm >= 0.0) {
            return Err(Error::Config(format!("box jitter must be >= 0, got {}", self.box_jitter_mm)));
        }
        let mut spec = self.spec;
        spec.in_dims = self.input_dims();
        spec.validate()?;
        self.train.validate()
    }

    pub fn input_dims(&self) -> [usize; 3] {
        match self.stage {
            Stage::Global => scaled_global_dims(self.scale),
            Stage::Local => self.local_geometry().dims,
        }
    }

    pub fn local_geometry(&self) -> LocalGeometry {
        LocalGeometry::scaled(self.scale).expect("validated scale")
    }

    /// Network spec with input dims set for this stage and scale.
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec { in_dims: self.input_dims(), ..self.spec }
    }

    /// Training samples for this stage. Local samples consume `rng` for box jitter.
    pub fn samples<R: Rng + ?Sized>(&self, cases: &[(Volume, Mask)], rng: &mut R) -> Result<Vec<Sample>> {
        cases
            .iter()
            .map(|(img, mask)| match self.stage {
                Stage::Global => {
                    Ok(Sample { image: preprocess_global(img, self.scale)?, mask: preprocess_global_mask(mask, self.scale)? })
                }
                Stage::Local => local_pair(img, mask, &self.local_geometry(), self.box_jitter_mm, rng),
            })
            .collect()
    }
}

/// `(id, image, mask)` for every `*.mhd`/`*.mha` in `images` with a same-named mask in `masks`.
pub fn load_cases(images: &Path, masks: &Path) -> Result<Vec<(String, Volume, Mask)>> {
    let mut out = Vec::new();
    for (id, path) in list_volumes(images)? {
        let mpath = masks.join(path.file_name().expect("listed file"));
        if !mpath.exists() {
            return Err(Error::invalid(format!("no mask {} for image {}", mpath.display(), path.display())));
        }
        let img = read_volume(&path)?;
        let mask = read_mask(&mpath)?;
        if img.grid() != mask.grid() {
            return Err(Error::invalid(format!("{id}: image and mask grids differ")));
        }
        out.push((id, img, mask));
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no images in {}", images.display())));
    }
    Ok(out)
}

/// Sorted `(stem, path)` of the volume headers in `dir`.
pub fn list_volumes(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext.eq_ignore_ascii_case("mhd") || ext.eq_ignore_ascii_case("mha") {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_from_config() {
        let c = ConfigFile::parse("epochs = 7\nlr = 1e-3\nscale = 0.5\ndepth = 3\nbase_features = 4\nnoise_std = 0.01\n").unwrap();
        let s = StageSettings::from_config(Stage::Global, &c).unwrap();
        assert_eq!(s.train.epochs, 7);
        assert_eq!(s.train.augment.noise_std, 0.01);
        assert_eq!(s.network_spec().in_dims, [64, 64, 36]);
        assert_eq!(s.network_spec().depth, 3);
        let l = StageSettings::from_config(Stage::Local, &c).unwrap();
        assert_eq!(l.network_spec().in_dims, [64, 64, 36]);
        assert!(StageSettings::from_config(Stage::Local, &ConfigFile::parse("epochz = 1").unwrap()).is_err());
        assert!(StageSettings::from_config(Stage::Local, &ConfigFile::parse("batch = 2").unwrap()).is_err());
    }

    #[test]
    fn defaults_follow_stage_presets() {
        assert_eq!(StageSettings::defaults(Stage::Global).spec.depth, global_spec().depth);
        assert_eq!(StageSettings::defaults(Stage::Local).spec.depth, local_spec().depth);
        assert_eq!(StageSettings::defaults(Stage::Local).network_spec().in_dims, [128, 128, 72]);
    }
}
