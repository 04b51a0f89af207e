//! Template rendering `f_α(u) = Σ_ℓ α_ℓ φ_ℓ(u)` on a raster.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::data::{fmt_f64, write_json, write_pgm};
use crate::deformation::{design_matrix_at, DesignGrid, KernelDictionary};
use crate::error::{check_dim, Error, Result};
use crate::model::ModelParams;

pub const DEFAULT_IMAGE_RASTER: usize = 64;
pub const PGM_MAXVAL: u32 = 255;

pub fn render_template(alpha: &DVector<f64>, dict: &KernelDictionary, raster: &DesignGrid) -> Result<DVector<f64>> {
    check_dim("template coefficients", dict.len(), alpha.len())?;
    check_dim("raster dimension", dict.dim(), raster.dim())?;
    Ok(design_matrix_at(dict, raster.coords(), raster.len()) * alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
    /// Pixels outside `[0, 1]` after the affine map, before clipping.
    pub clipped: usize,
}

/// Affine map of `[min, max]` onto `[0, 1]`; a constant image maps to 0.
pub fn normalize(values: &DVector<f64>) -> (Vec<f64>, Normalization) {
    let min = values.min();
    let max = values.max();
    let span = max - min;
    let mapped: Vec<f64> = values
        .iter()
        .map(|v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect();
    let clipped = mapped.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    (
        mapped.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        Normalization { min, max, clipped },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderEntry {
    pub class: usize,
    pub file: PathBuf,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSidecar {
    pub raster_side: Option<usize>,
    pub entries: Vec<RenderEntry>,
}

/// All class templates of a curve model as one CSV: `u` then one column per
/// class.
pub fn render_curves(params: &ModelParams, dict: &KernelDictionary, raster: &DesignGrid, dir: &Path) -> Result<Vec<PathBuf>> {
    let cols = params
        .classes
        .iter()
        .map(|c| render_template(&c.alpha, dict, raster))
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::from("u");
    for j in 0..cols.len() {
        text.push_str(&format!(",template_{j}"));
    }
    text.push('\n');
    for s in 0..raster.len() {
        text.push_str(&fmt_f64(raster.point(s)[0]));
        for c in &cols {
            text.push(',');
            text.push_str(&fmt_f64(c[s]));
        }
        text.push('\n');
    }
    let p = dir.join("templates.csv");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let sidecar = RenderSidecar {
        raster_side: None,
        entries: (0..cols.len())
            .map(|class| RenderEntry {
                class,
                file: PathBuf::from("templates.csv"),
                normalization: None,
            })
            .collect(),
    };
    let sp = dir.join("render.json");
    write_json(&sp, &sidecar)?;
    Ok(vec![p, sp])
}

/// One graymap per class on a `side × side` pixel raster, plus the
/// normalization sidecar `render.json`.
pub fn render_images(params: &ModelParams, dict: &KernelDictionary, side: usize, dir: &Path) -> Result<(Vec<PathBuf>, RenderSidecar)> {
    let raster = DesignGrid::pixel_grid(side)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (j, c) in params.classes.iter().enumerate() {
        let values = render_template(&c.alpha, dict, &raster)?;
        let (mapped, norm) = normalize(&values);
        if norm.clipped > 0 {
            log::warn!("template {j}: {} pixels clipped", norm.clipped);
        }
        let name = format!("template_{j:03}.pgm");
        let p = dir.join(&name);
        write_pgm(&p, side, side, &mapped, PGM_MAXVAL)?;
        files.push(p);
        entries.push(RenderEntry {
            class: j,
            file: PathBuf::from(name),
            normalization: Some(norm),
        });
    }
    let sidecar = RenderSidecar {
        raster_side: Some(side),
        entries,
    };
    let sp = dir.join("render.json");
    write_json(&sp, &sidecar)?;
    files.push(sp);
    Ok((files, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one_hot_templates() {
        let dict = KernelDictionary::regular_square(-1.0, 1.0, 3, 0.2).unwrap();
        let raster = DesignGrid::pixel_grid(8).unwrap();
        let zero = render_template(&DVector::zeros(9), &dict, &raster).unwrap();
        assert_eq!(zero, DVector::zeros(64));
        let (mapped, _) = normalize(&zero);
        assert!(mapped.iter().all(|v| *v == 0.0));
        let mut e = DVector::zeros(9);
        e[4] = 1.0;
        let r = render_template(&e, &dict, &raster).unwrap();
        for s in 0..raster.len() {
            assert_eq!(r[s], dict.eval(4, raster.point(s)));
        }
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let v = DVector::from_vec(vec![-2.0, 0.0, 2.0]);
        let (m, n) = normalize(&v);
        assert_eq!(m, vec![0.0, 0.5, 1.0]);
        assert_eq!((n.min, n.max, n.clipped), (-2.0, 2.0, 0));
    }
}
