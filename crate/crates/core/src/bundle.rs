//! Case bundle file format.
//!
//! A bundle is one container file (see [`crate::container`]) whose JSON
//! header declares the case metadata, both grid geometries and the ordered
//! list of `f32` tensors that follow: `image`, `dose`, then one
//! `mask:<structure>` entry per stored structure mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader, BUNDLE_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::structures::{slot_by_name, slot_name, NUM_OARS, PTV};
use crate::volume::{Mask, Volume};

pub const BUNDLE_VERSION: u32 = 1;

/// Intensity window that identifies one structure in the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBand {
    pub structure: String,
    pub low: f32,
    pub high: f32,
}

impl IntensityBand {
    pub fn contains(&self, v: f32) -> bool {
        v >= self.low && v < self.high
    }
}

/// One patient case: image, delivered dose, structures and prescription.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub case_id: String,
    pub image: Volume<f32>,
    pub image_geom: GridGeometry,
    pub dose: Volume<f32>,
    pub dose_geom: GridGeometry,
    /// Fourteen OAR masks in slot order, or `None` when the case only
    /// carries intensity bands and masks must be derived.
    pub oar_masks: Option<Vec<Mask>>,
    pub ptv_mask: Mask,
    pub intensity_bands: Vec<IntensityBand>,
    pub prescription_dose: f64,
    pub prescription_text: String,
}

impl CaseBundle {
    pub fn validate(&self) -> Result<()> {
        self.image_geom.validate()?;
        self.dose_geom.validate()?;
        if self.image.shape() != self.image_geom.shape() {
            return Err(Error::InvalidCase(format!(
                "image shape {:?} does not match geometry {:?}",
                self.image.shape(),
                self.image_geom.shape()
            )));
        }
        if self.dose.shape() != self.dose_geom.shape() {
            return Err(Error::InvalidCase(format!(
                "dose shape {:?} does not match geometry {:?}",
                self.dose.shape(),
                self.dose_geom.shape()
            )));
        }
        if let Some(masks) = &self.oar_masks {
            if masks.len() != NUM_OARS {
                return Err(Error::InvalidCase(format!(
                    "expected {NUM_OARS} OAR masks, got {}",
                    masks.len()
                )));
            }
            if masks.iter().any(|m| m.shape() != self.image.shape()) {
                return Err(Error::InvalidCase("mask shape differs from image".into()));
            }
        }
        if self.ptv_mask.shape() != self.image.shape() {
            return Err(Error::InvalidCase("PTV mask shape differs from image".into()));
        }
        if !self.ptv_mask.any() {
            return Err(Error::EmptyPtv);
        }
        if let Some(v) = self.dose.as_slice().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidCase(format!("dose value {v} is negative or non-finite")));
        }
        if !self.image.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCase("non-finite image intensity".into()));
        }
        if !(self.prescription_dose > 0.0) || !self.prescription_dose.is_finite() {
            return Err(Error::ZeroPrescription);
        }
        for band in &self.intensity_bands {
            if slot_by_name(&band.structure).is_none() {
                return Err(Error::InvalidCase(format!(
                    "intensity band for unknown structure `{}`",
                    band.structure
                )));
            }
        }
        Ok(())
    }

    /// Mask of any slot; `None` for OAR slots when masks are not carried.
    pub fn structure_mask(&self, slot: usize) -> Option<&Mask> {
        if slot == PTV {
            Some(&self.ptv_mask)
        } else {
            self.oar_masks.as_ref().map(|m| &m[slot])
        }
    }

    /// Translates both grids by `offset` (mm); tensors are untouched.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut c = self.clone();
        c.image_geom = self.image_geom.translated(offset);
        c.dose_geom = self.dose_geom.translated(offset);
        c
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    shape: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    version: u32,
    case_id: String,
    prescription_dose: f64,
    prescription_text: String,
    image_geometry: GridGeometry,
    dose_geometry: GridGeometry,
    intensity_bands: Vec<IntensityBand>,
    tensors: Vec<TensorDecl>,
}

pub fn encode_bundle(case: &CaseBundle) -> Result<Vec<u8>> {
    case.validate()?;
    let mut tensors = vec![
        TensorDecl {
            name: "image".into(),
            shape: case.image.shape(),
        },
        TensorDecl {
            name: "dose".into(),
            shape: case.dose.shape(),
        },
    ];
    let mut payload = Vec::new();
    container::push_f32(&mut payload, case.image.as_slice().iter().copied());
    container::push_f32(&mut payload, case.dose.as_slice().iter().copied());
    let mut masks: Vec<(usize, &Mask)> = Vec::new();
    if let Some(oars) = &case.oar_masks {
        masks.extend(oars.iter().enumerate());
    }
    masks.push((PTV, &case.ptv_mask));
    for (slot, mask) in masks {
        tensors.push(TensorDecl {
            name: format!("mask:{}", slot_name(slot)),
            shape: mask.shape(),
        });
        container::push_f32(
            &mut payload,
            mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }),
        );
    }
    let header = BundleHeader {
        format: "dosegraph-bundle".into(),
        version: BUNDLE_VERSION,
        case_id: case.case_id.clone(),
        prescription_dose: case.prescription_dose,
        prescription_text: case.prescription_text.clone(),
        image_geometry: case.image_geom.clone(),
        dose_geometry: case.dose_geom.clone(),
        intensity_bands: case.intensity_bands.clone(),
        tensors,
    };
    container::encode(BUNDLE_MAGIC, &header, &payload)
}

pub fn save_bundle(case: &CaseBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(case)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<CaseBundle> {
    let (header, payload): (BundleHeader, Vec<u8>) = container::decode(BUNDLE_MAGIC, bytes)?;
    if header.format != "dosegraph-bundle" {
        return Err(Error::MalformedHeader(format!("unknown format `{}`", header.format)));
    }
    if header.version != BUNDLE_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported bundle version {}",
            header.version
        )));
    }
    header.image_geometry.validate()?;
    header.dose_geometry.validate()?;

    let mut reader = PayloadReader::new(&payload);
    let mut image = None;
    let mut dose = None;
    let mut oars: Vec<Option<Mask>> = vec![None; NUM_OARS];
    let mut ptv = None;
    for decl in &header.tensors {
        let n = decl.shape.iter().product();
        let values = reader.f32s(&decl.name, n)?;
        match decl.name.as_str() {
            "image" => image = Some(Volume::from_vec(decl.shape, values)?),
            "dose" => dose = Some(Volume::from_vec(decl.shape, values)?),
            other => {
                let name = other.strip_prefix("mask:").ok_or_else(|| {
                    Error::MalformedHeader(format!("unknown tensor `{other}`"))
                })?;
                let slot = slot_by_name(name).ok_or_else(|| {
                    Error::MalformedHeader(format!("unknown structure `{name}`"))
                })?;
                if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::InvalidCase(format!("mask `{name}` is not binary")));
                }
                let mask = Volume::from_vec(decl.shape, values.iter().map(|v| *v == 1.0).collect())?;
                if slot == PTV {
                    ptv = Some(mask);
                } else {
                    oars[slot] = Some(mask);
                }
            }
        }
    }
    reader.finish()?;

    let image = image.ok_or_else(|| Error::MalformedHeader("missing image tensor".into()))?;
    let dose = dose.ok_or_else(|| Error::MalformedHeader("missing dose tensor".into()))?;
    let ptv_mask = ptv.ok_or(Error::MissingPtv)?;
    let oar_masks = if oars.iter().all(Option::is_none) {
        None
    } else {
        let shape = image.shape();
        Some(
            oars.into_iter()
                .map(|m| m.unwrap_or_else(|| Volume::filled(shape, false)))
                .collect(),
        )
    };
    let case = CaseBundle {
        case_id: header.case_id,
        image,
        image_geom: header.image_geometry,
        dose,
        dose_geom: header.dose_geometry,
        oar_masks,
        ptv_mask,
        intensity_bands: header.intensity_bands,
        prescription_dose: header.prescription_dose,
        prescription_text: header.prescription_text,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_bundle(path: &Path) -> Result<CaseBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

/// Loads every `*.dgb` bundle in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<CaseBundle>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == BUNDLE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_bundle(p)).collect()
}

pub const BUNDLE_EXTENSION: &str = "dgb";
