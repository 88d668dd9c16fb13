//! The two-stage segmentation pipeline and its on-disk bundle.

use std::fs;
use std::path::Path;

use super::config::ConfigFile;
use crate::error::{Error, Result};
use crate::locate::{extract_box, fit_shape, map_back, resample_local, FitResult, LocalGeometry, PsoConfig};
use crate::network::Network;
use crate::shapemodel::ShapeModel;
use crate::volume::{
    crop_or_pad, morph_open, normalize, resample, resample_to_grid, spanning_dims, sphere_element, threshold, Aabb, Mask,
    ProbMap, Volume,
};

/// Global network input at scale 1 (voxels of 1 mm).
pub const GLOBAL_DIMS: [usize; 3] = [128, 128, 72];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Resolution factor: the global grid has spacing `1/scale` mm and
    /// `scale * 128 x 128 x 72` voxels; the local geometry scales alike.
    pub scale: f64,
    pub opening_radius_mm: f64,
    pub threshold: f64,
    pub box_margin_mm: f64,
    pub pso: PsoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { scale: 1.0, opening_radius_mm: 2.0, threshold: 0.5, box_margin_mm: 0.0, pso: PsoConfig::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.opening_radius_mm >= 0.0) {
            return Err(Error::Config(format!("opening radius must be >= 0, got {}", self.opening_radius_mm)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if !(self.box_margin_mm >= 0.0) {
            return Err(Error::Config(format!("box margin must be >= 0, got {}", self.box_margin_mm)));
        }
        self.pso.validate()
    }

    pub fn global_dims(&self) -> [usize; 3] {
        scaled_global_dims(self.scale)
    }

    pub fn local_geometry(&self) -> LocalGeometry {
        LocalGeometry::scaled(self.scale).expect("validated scale")
    }

    pub fn from_config(c: &ConfigFile) -> Result<Self> {
        let mut cfg = Self::default();
        let mut r = c.reader();
        r.set("scale", &mut cfg.scale)?;
        r.set("opening_radius_mm", &mut cfg.opening_radius_mm)?;
        r.set("threshold", &mut cfg.threshold)?;
        r.set("box_margin_mm", &mut cfg.box_margin_mm)?;
        r.set("pso_particles", &mut cfg.pso.particles)?;
        r.set("pso_iterations", &mut cfg.pso.iterations)?;
        r.set("pso_inertia", &mut cfg.pso.inertia)?;
        r.set("pso_cognitive", &mut cfg.pso.cognitive)?;
        r.set("pso_social", &mut cfg.pso.social)?;
        r.set("pso_velocity_clamp", &mut cfg.pso.velocity_clamp)?;
        r.set("pso_seed", &mut cfg.pso.seed)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let p = &self.pso;
        format!(
            "scale = {}\nopening_radius_mm = {}\nthreshold = {}\nbox_margin_mm = {}\npso_particles = {}\npso_iterations = {}\n\
             pso_inertia = {}\npso_cognitive = {}\npso_social = {}\npso_velocity_clamp = {}\npso_seed = {}\n",
            self.scale,
            self.opening_radius_mm,
            self.threshold,
            self.box_margin_mm,
            p.particles,
            p.iterations,
            p.inertia,
            p.cognitive,
            p.social,
            p.velocity_clamp,
            p.seed
        )
    }
}

pub fn scaled_global_dims(scale: f64) -> [usize; 3] {
    GLOBAL_DIMS.map(|n| ((n as f64 * scale).round() as usize).max(1))
}

/// Isotropic resample at `1/scale` mm around the image centre, then centred crop or pad.
fn to_global_grid(v: &Volume, scale: f64) -> Result<Volume> {
    let sp = [1.0 / scale; 3];
    let iso = resample(v, sp, spanning_dims(v.grid(), sp), v.grid().center())?;
    crop_or_pad(&iso, scaled_global_dims(scale))
}

/// Global network input: isotropic resample, crop or pad, normalize.
pub fn preprocess_global(image: &Volume, scale: f64) -> Result<Volume> {
    normalize(&to_global_grid(image, scale)?)
}

/// Ground truth on the global network's grid.
pub fn preprocess_global_mask(mask: &Mask, scale: f64) -> Result<Mask> {
    Ok(Mask::from_predicate(&to_global_grid(mask.as_volume(), scale)?, |v| v >= 0.5))
}

#[derive(Debug, Clone)]
pub struct PipelineBundle {
    pub global: Network,
    pub local: Network,
    pub model: ShapeModel,
    pub config: PipelineConfig,
}

pub const GLOBAL_CKPT: &str = "global.ckpt";
pub const LOCAL_CKPT: &str = "local.ckpt";
pub const SHAPE_MODEL: &str = "shape.model";
pub const PIPELINE_CFG: &str = "pipeline.cfg";

impl PipelineBundle {
    pub fn new(global: Network, local: Network, model: ShapeModel, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let gd = config.global_dims();
        if global.spec().in_dims != gd {
            return Err(Error::invalid(format!(
                "global network input {:?} does not match scale {} dims {gd:?}",
                global.spec().in_dims,
                config.scale
            )));
        }
        let ld = config.local_geometry().dims;
        if local.spec().in_dims != ld {
            return Err(Error::invalid(format!(
                "local network input {:?} does not match scale {} dims {ld:?}",
                local.spec().in_dims,
                config.scale
            )));
        }
        if model.num_modes() == 0 {
            return Err(Error::invalid("shape model has no modes"));
        }
        Ok(Self { global, local, model, config })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.global.save(&dir.join(GLOBAL_CKPT))?;
        self.local.save(&dir.join(LOCAL_CKPT))?;
        self.model.save(&dir.join(SHAPE_MODEL))?;
        let p = dir.join(PIPELINE_CFG);
        fs::write(&p, self.config.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let global = Network::load(&dir.join(GLOBAL_CKPT))?;
        let local = Network::load(&dir.join(LOCAL_CKPT))?;
        let model = ShapeModel::load(&dir.join(SHAPE_MODEL))?;
        let config = PipelineConfig::from_config(&ConfigFile::read(&dir.join(PIPELINE_CFG))?)?;
        Self::new(global, local, model, config)
    }
}

/// Every intermediate product of [`segment_detailed`].
#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Global network output on its own grid.
    pub global_prob: ProbMap,
    /// Thresholded global output on the original grid.
    pub global_mask: Mask,
    pub fit: FitResult,
    pub bbox: Aabb,
    /// Local network output mapped back to the original grid.
    pub local_prob: ProbMap,
    /// Thresholded local output before the opening.
    pub pre_opening: Mask,
    pub mask: Mask,
}

pub fn segment_detailed(bundle: &PipelineBundle, image: &Volume) -> Result<Segmentation> {
    let cfg = &bundle.config;
    let global_in = preprocess_global(image, cfg.scale)?;
    let global_prob = bundle.global.predict(&global_in)?;
    let global_mask = threshold(&ProbMap::clamped(resample_to_grid(global_prob.as_volume(), image.grid())), cfg.threshold);
    let fit = fit_shape(&bundle.model, &global_prob, &cfg.pso)?;
    let bbox = extract_box(&fit, cfg.box_margin_mm)?;
    let (local_in, t) = resample_local(image, &bbox, &cfg.local_geometry())?;
    let local_out = bundle.local.predict(&local_in)?;
    let local_prob = map_back(&local_out, &t, image.grid())?;
    let pre_opening = threshold(&local_prob, cfg.threshold);
    let mask = if cfg.opening_radius_mm > 0.0 {
        morph_open(&pre_opening, &sphere_element(cfg.opening_radius_mm, image.spacing())?)?
    } else {
        pre_opening.clone()
    };
    Ok(Segmentation { global_prob, global_mask, fit, bbox, local_prob, pre_opening, mask })
}

/// Final binary segmentation on the input grid.
pub fn segment(bundle: &PipelineBundle, image: &Volume) -> Result<Mask> {
    Ok(segment_detailed(bundle, image)?.mask)
}
