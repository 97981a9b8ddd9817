//! Image conversion: structure segmentation followed by per-pixel geometric
//! feature extraction into an 18-channel feature tensor.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::bundle::CaseBundle;
use crate::container::{self, DUMP_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{GridGeometry, Point3};
use crate::structures::{slot_name, NUM_OARS, NUM_SLOTS, PTV};
use crate::volume::{Mask, Volume};

pub const FEATURE_CHANNELS: usize = NUM_SLOTS + 3;
pub const DISTANCE_CHANNEL: usize = NUM_SLOTS;
pub const AZIMUTH_CHANNEL: usize = NUM_SLOTS + 1;
pub const ELEVATION_CHANNEL: usize = NUM_SLOTS + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Provided,
    Derived,
}

/// Fifteen structure masks on the image grid (slot 14 is the PTV).
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMasks {
    pub masks: Vec<Mask>,
    pub provenance: Provenance,
}

impl StructureMasks {
    pub fn new(masks: Vec<Mask>, provenance: Provenance) -> Result<Self> {
        if masks.len() != NUM_SLOTS {
            return Err(Error::InvalidCase(format!(
                "expected {NUM_SLOTS} structure masks, got {}",
                masks.len()
            )));
        }
        let shape = masks[0].shape();
        if masks.iter().any(|m| m.shape() != shape) {
            return Err(Error::InvalidCase("structure masks differ in shape".into()));
        }
        if !masks[PTV].any() {
            return Err(Error::EmptyPtv);
        }
        Ok(Self { masks, provenance })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.masks[0].shape()
    }

    pub fn ptv(&self) -> &Mask {
        &self.masks[PTV]
    }
}

/// Keeps, in every z slice, only the largest 4-connected component of the
/// mask. Ties go to the component found first in x-major scan order.
pub fn largest_component_per_slice(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.shape();
    let mut out = Volume::filled(mask.shape(), false);
    let mut seen = vec![false; nx * ny];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for z in 0..nz {
        seen.iter_mut().for_each(|s| *s = false);
        let mut best: Vec<(usize, usize)> = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                if seen[x * ny + y] || !*mask.get([x, y, z]) {
                    continue;
                }
                component.clear();
                seen[x * ny + y] = true;
                queue.push_back((x, y));
                while let Some((cx, cy)) = queue.pop_front() {
                    component.push((cx, cy));
                    let mut visit = |px: usize, py: usize| {
                        if !seen[px * ny + py] && *mask.get([px, py, z]) {
                            seen[px * ny + py] = true;
                            queue.push_back((px, py));
                        }
                    };
                    if cx > 0 {
                        visit(cx - 1, cy);
                    }
                    if cx + 1 < nx {
                        visit(cx + 1, cy);
                    }
                    if cy > 0 {
                        visit(cx, cy - 1);
                    }
                    if cy + 1 < ny {
                        visit(cx, cy + 1);
                    }
                }
                if component.len() > best.len() {
                    best = component.clone();
                }
            }
        }
        for (x, y) in best {
            *out.get_mut([x, y, z]) = true;
        }
    }
    out
}

/// Produces the structure masks for a case: carried masks pass through,
/// otherwise OARs are derived from intensity bands. The PTV always comes
/// from the bundle.
pub fn segment_structures(case: &CaseBundle) -> Result<StructureMasks> {
    if let Some(oars) = &case.oar_masks {
        let mut masks = oars.clone();
        masks.push(case.ptv_mask.clone());
        return StructureMasks::new(masks, Provenance::Provided);
    }
    if case.intensity_bands.is_empty() {
        return Err(Error::NoSegmentationSource);
    }
    let shape = case.image.shape();
    let mut masks = Vec::with_capacity(NUM_SLOTS);
    for slot in 0..NUM_OARS {
        let band = case
            .intensity_bands
            .iter()
            .find(|b| b.structure == slot_name(slot));
        let mask = match band {
            Some(band) => largest_component_per_slice(&case.image.map(|&v| band.contains(v))),
            None => Volume::filled(shape, false),
        };
        masks.push(mask);
    }
    masks.push(case.ptv_mask.clone());
    StructureMasks::new(masks, Provenance::Derived)
}

/// Mean voxel center of a mask in the grid-local frame.
fn local_centroid(mask: &Mask, geom: &GridGeometry) -> Option<Point3> {
    let (mut sx, mut sy, mut sz, mut n) = (0.0, 0.0, 0.0, 0usize);
    for idx in mask.indices() {
        if *mask.get(idx) {
            let c = geom.local_center(idx);
            sx += c.x;
            sy += c.y;
            sz += c.z;
            n += 1;
        }
    }
    (n > 0).then(|| {
        let n = n as f64;
        Point3::new(sx / n, sy / n, sz / n)
    })
}

/// Physical mean voxel center of a mask, `None` for an empty mask.
pub fn mask_centroid(mask: &Mask, geom: &GridGeometry) -> Option<Point3> {
    let local = local_centroid(mask, geom)?;
    let a = geom.anchor();
    Some(Point3::new(a.x + local.x, a.y + local.y, a.z + local.z))
}

pub fn ptv_centroid(masks: &StructureMasks, geom: &GridGeometry) -> Result<Point3> {
    mask_centroid(masks.ptv(), geom).ok_or(Error::EmptyPtv)
}

/// Per-pixel features, pixel-major: `values[p * 18 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: [usize; 3],
    values: Vec<f64>,
}

impl FeatureTensor {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels(&self) -> usize {
        self.shape.iter().product()
    }

    /// The 18 channels of the pixel at zero-based `index`.
    pub fn pixel(&self, index: [usize; 3]) -> &[f64] {
        let p = (index[0] * self.shape[1] + index[1]) * self.shape[2] + index[2];
        self.row(p)
    }

    pub fn row(&self, linear: usize) -> &[f64] {
        &self.values[linear * FEATURE_CHANNELS..(linear + 1) * FEATURE_CHANNELS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Writes the tensor in the raw container format for inspection.
    pub fn save_dump(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            kind: &'a str,
            shape: [usize; 3],
            channels: Vec<String>,
        }
        let mut channels: Vec<String> = (0..NUM_SLOTS).map(|s| slot_name(s).to_string()).collect();
        channels.extend(["manhattan_mm", "azimuth_rad", "elevation_rad"].map(String::from));
        let mut payload = Vec::with_capacity(self.values.len() * 8);
        container::push_f64(&mut payload, self.values.iter().copied());
        container::write(
            path,
            DUMP_MAGIC,
            &Header {
                kind: "features",
                shape: self.shape,
                channels,
            },
            &payload,
        )
    }
}

/// Geometric feature extraction: 15 structure indicators, Manhattan
/// distance (mm) and (azimuth, elevation) angles relative to the PTV
/// centroid. Coordinates are taken in the grid-local frame.
pub fn extract_pixel_features(masks: &StructureMasks, geom: &GridGeometry) -> Result<FeatureTensor> {
    let shape = masks.shape();
    if shape != geom.shape() {
        return Err(Error::shape(
            "extract_pixel_features",
            format!("masks {shape:?} vs geometry {:?}", geom.shape()),
        ));
    }
    let t = local_centroid(masks.ptv(), geom).ok_or(Error::EmptyPtv)?;
    let n = shape.iter().product::<usize>();
    let mut values = Vec::with_capacity(n * FEATURE_CHANNELS);
    let reference = &masks.masks[0];
    for idx in reference.indices() {
        for mask in &masks.masks {
            values.push(if *mask.get(idx) { 1.0 } else { 0.0 });
        }
        let c = geom.local_center(idx);
        let (dx, dy, dz) = (c.x - t.x, c.y - t.y, c.z - t.z);
        values.push(dx.abs() + dy.abs() + dz.abs());
        if dx == 0.0 && dy == 0.0 && dz == 0.0 {
            values.push(0.0);
            values.push(0.0);
        } else {
            let mut azimuth = dy.atan2(dx);
            if azimuth <= -PI {
                azimuth = PI;
            }
            values.push(azimuth);
            values.push(dz.atan2(dx.hypot(dy)));
        }
    }
    Ok(FeatureTensor { shape, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::structures::LEFT_LUNG;

    fn masks_with_ptv(shape: [usize; 3], ptv: &[[usize; 3]]) -> StructureMasks {
        let mut masks = vec![Volume::filled(shape, false); NUM_SLOTS];
        for &i in ptv {
            *masks[PTV].get_mut(i) = true;
        }
        StructureMasks::new(masks, Provenance::Provided).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let g = GridGeometry::uniform([-3.0, -3.0], 2.0, -3.0, 2.0, [3, 3, 3]).unwrap();
        let single = masks_with_ptv([3, 3, 3], &[[0, 2, 1]]);
        let c = ptv_centroid(&single, &g).unwrap();
        assert_eq!(c, Point3::new(-2.0, 2.0, 0.0));

        let pair = masks_with_ptv([3, 3, 3], &[[0, 0, 0], [2, 2, 2]]);
        assert_eq!(ptv_centroid(&pair, &g).unwrap(), Point3::new(0.0, 0.0, 0.0));

        let all: Vec<[usize; 3]> = Volume::filled([3, 3, 3], 0u8).indices().collect();
        let cube = masks_with_ptv([3, 3, 3], &all);
        assert_eq!(ptv_centroid(&cube, &g).unwrap(), Point3::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn feature_examples() {
        // grid whose voxel centers sit on integer mm, PTV centroid at local (1, 1, 1)
        let g = GridGeometry::uniform([0.0, 0.0], 2.0, 0.0, 2.0, [5, 5, 2]).unwrap();
        let masks = masks_with_ptv([5, 5, 2], &[[0, 0, 0]]);
        let f = extract_pixel_features(&masks, &g).unwrap();
        // center of [3,2,0] is (7, 5, 1): offset (6, 4, 0) → distance 10
        let p = f.pixel([3, 2, 0]);
        assert_eq!(p[DISTANCE_CHANNEL], 10.0);
        let p = f.pixel([1, 1, 0]);
        assert_eq!(p[DISTANCE_CHANNEL], 4.0);
        assert!((p[AZIMUTH_CHANNEL] - PI / 4.0).abs() < 1e-15);
        assert_eq!(p[ELEVATION_CHANNEL], 0.0);
        let at = f.pixel([0, 0, 0]);
        assert_eq!(&at[DISTANCE_CHANNEL..], &[0.0, 0.0, 0.0]);
        let mut onehot = [0.0; NUM_SLOTS];
        onehot[PTV] = 1.0;
        assert_eq!(&at[..NUM_SLOTS], &onehot);
        // straight along -x gives azimuth π, never -π
        let g2 = GridGeometry::uniform([0.0, 0.0], 2.0, 0.0, 2.0, [3, 1, 1]).unwrap();
        let m2 = masks_with_ptv([3, 1, 1], &[[2, 0, 0]]);
        let f2 = extract_pixel_features(&m2, &g2).unwrap();
        assert_eq!(f2.pixel([0, 0, 0])[AZIMUTH_CHANNEL], PI);
    }

    #[test]
    fn segmentation_passthrough_and_derivation() {
        let cfg = PhantomConfig {
            seed: 21,
            ..Default::default()
        };
        let case = generate_phantom(&cfg).unwrap();
        let provided = segment_structures(&case).unwrap();
        assert_eq!(provided.provenance, Provenance::Provided);
        assert_eq!(provided.masks[PTV], case.ptv_mask);

        let mut bare = case.clone();
        bare.oar_masks = None;
        let derived = segment_structures(&bare).unwrap();
        assert_eq!(derived.provenance, Provenance::Derived);
        assert_eq!(derived.masks, provided.masks);

        bare.intensity_bands.clear();
        assert!(matches!(
            segment_structures(&bare),
            Err(Error::NoSegmentationSource)
        ));
    }

    #[test]
    fn missing_oar_channel_is_zero() {
        let cfg = PhantomConfig {
            seed: 2,
            ..Default::default()
        };
        let mut case = generate_phantom(&cfg).unwrap();
        let oars = case.oar_masks.as_mut().unwrap();
        oars[LEFT_LUNG] = Volume::filled(case.image.shape(), false);
        let masks = segment_structures(&case).unwrap();
        let f = extract_pixel_features(&masks, &case.image_geom).unwrap();
        for p in 0..f.pixels() {
            assert_eq!(f.row(p)[LEFT_LUNG], 0.0);
        }
    }

    #[test]
    fn lcc_keeps_largest_per_slice() {
        let mut m = Volume::filled([5, 5, 2], false);
        for idx in [[0, 0, 0], [0, 1, 0], [4, 4, 0], [2, 2, 1], [3, 3, 1]] {
            *m.get_mut(idx) = true;
        }
        let l = largest_component_per_slice(&m);
        assert!(*l.get([0, 0, 0]) && *l.get([0, 1, 0]) && !*l.get([4, 4, 0]));
        // tie on slice 1: diagonal pixels are separate components, first wins
        assert!(*l.get([2, 2, 1]) && !*l.get([3, 3, 1]));
    }

    #[test]
    fn features_invariant_under_integer_translation() {
        let cfg = PhantomConfig {
            seed: 4,
            origin: [-7.0, 3.0, 11.0],
            ..Default::default()
        };
        let case = generate_phantom(&cfg).unwrap();
        let masks = segment_structures(&case).unwrap();
        let a = extract_pixel_features(&masks, &case.image_geom).unwrap();
        let moved = case.translated([13.0, -29.0, 5.0]);
        let b = extract_pixel_features(&masks, &moved.image_geom).unwrap();
        let bits = |f: &FeatureTensor| f.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
