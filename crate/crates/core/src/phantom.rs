//! Synthetic phantom cases with a closed-form dose law.
//!
//! Each phantom paints an ellipsoidal body, a subset of the fourteen OARs
//! (ellipsoids and boxes) and an ellipsoidal PTV into a label map. Labels are
//! mutually exclusive (later structures overwrite earlier ones, PTV last) and
//! every structure is reduced to its per-slice largest 4-connected component,
//! so intensity-band segmentation recovers the masks exactly.
//!
//! Dose inside the body follows `Rx · exp(-manhattan(center, ptv_centroid) / tau)`;
//! boost mode scales the PTV interior by 1.1 and tags the prescription text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::{CaseBundle, IntensityBand};
use crate::conversion::{largest_component_per_slice, mask_centroid};
use crate::error::{Error, Result};
use crate::geometry::{voxel_center, GridGeometry, Point3};
use crate::structures::*;
use crate::volume::{Mask, Volume};

pub const BOOST_TOKEN: &str = "BOOST_PTV";
pub const BOOST_FACTOR: f64 = 1.1;
const AIR_INTENSITY: f32 = -1000.0;
const IMAGE_NOISE_SD: f64 = 10.0;
const IMAGE_NOISE_CLAMP: f64 = 40.0;
const PRESCRIPTIONS: [f64; 5] = [50.0, 54.0, 60.0, 66.0, 70.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InstructionMode {
    #[default]
    None,
    Boost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_shape: [usize; 3],
    pub dose_shape: [usize; 3],
    pub image_resolution: f64,
    pub dose_resolution: f64,
    pub image_slice_thickness: f64,
    pub dose_slice_thickness: f64,
    /// Physical position of the image grid anchor (x, y, first slice z).
    pub origin: [f64; 3],
    /// Dose decay length (mm).
    pub tau: f64,
    /// Gaussian dose noise (Gy).
    pub noise_sd: f64,
    pub instruction_mode: InstructionMode,
    /// Fixed prescription (Gy); sampled from a standard list when absent.
    pub prescription_dose: Option<f64>,
    /// When false the bundle carries intensity bands only.
    pub include_masks: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_shape: [16, 16, 8],
            dose_shape: [8, 8, 4],
            image_resolution: 2.0,
            dose_resolution: 4.0,
            image_slice_thickness: 2.0,
            dose_slice_thickness: 4.0,
            origin: [0.0, 0.0, 0.0],
            tau: 20.0,
            noise_sd: 0.5,
            instruction_mode: InstructionMode::None,
            prescription_dose: None,
            include_masks: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_shape.iter().chain(&self.dose_shape).any(|&d| d == 0) {
            return Err(Error::InvalidPhantom("shapes must be positive".into()));
        }
        if self.image_shape.iter().any(|&d| d < 4) {
            return Err(Error::InvalidPhantom(format!(
                "image shape {:?} too small to fit a PTV (need >= 4 voxels per axis)",
                self.image_shape
            )));
        }
        let lengths = [
            self.image_resolution,
            self.dose_resolution,
            self.image_slice_thickness,
            self.dose_slice_thickness,
        ];
        if lengths.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidPhantom("resolutions must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidPhantom("tau must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidPhantom("noise_sd must be >= 0".into()));
        }
        if let Some(rx) = self.prescription_dose {
            if !(rx > 0.0) {
                return Err(Error::InvalidPhantom("prescription must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Analytic ellipsoid in physical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3,
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: &Point3) -> bool {
        let dx = (p.x - self.center.x) / self.semi_axes[0];
        let dy = (p.y - self.center.y) / self.semi_axes[1];
        let dz = (p.z - self.center.z) / self.semi_axes[2];
        dx * dx + dy * dy + dz * dz <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipsoid(Ellipsoid),
    Box { center: Point3, half: [f64; 3] },
}

impl Shape {
    fn contains(&self, p: &Point3) -> bool {
        match self {
            Shape::Ellipsoid(e) => e.contains(p),
            Shape::Box { center, half } => {
                (p.x - center.x).abs() <= half[0]
                    && (p.y - center.y).abs() <= half[1]
                    && (p.z - center.z).abs() <= half[2]
            }
        }
    }
}

/// Ground truth retained alongside a generated case.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub body: Ellipsoid,
    pub ptv: Ellipsoid,
    pub ptv_centroid: Point3,
    /// Noise-free dose law on the dose grid (row-major), including any boost.
    pub clean_dose: Vec<f64>,
    /// Whether each dose voxel center lies inside the analytic PTV.
    pub dose_in_ptv: Vec<bool>,
    pub dose_in_body: Vec<bool>,
}

pub fn generate_phantom(config: &PhantomConfig) -> Result<CaseBundle> {
    generate_with_truth(config).map(|(case, _)| case)
}

// (slot, relative center, relative half-extent, is_box, presence probability)
const OAR_LAYOUT: [(usize, [f64; 3], [f64; 3], bool, f64); 13] = [
    (LEFT_LUNG, [0.2, 0.0, 0.0], [0.12, 0.2, 0.45], false, 0.9),
    (RIGHT_LUNG, [-0.2, 0.0, 0.0], [0.12, 0.2, 0.45], false, 0.9),
    (HEART, [0.05, -0.16, -0.1], [0.1, 0.08, 0.3], false, 0.85),
    (SPINAL_CORD, [0.0, 0.32, 0.0], [0.05, 0.05, 0.5], true, 0.9),
    (CHEST_WALL, [0.0, -0.36, 0.0], [0.22, 0.04, 0.5], true, 0.85),
    (ESOPHAGUS, [-0.05, 0.21, 0.0], [0.04, 0.04, 0.5], true, 0.6),
    (TRACHEA, [0.05, 0.2, 0.3], [0.04, 0.04, 0.2], true, 0.5),
    (CARINA, [0.05, 0.16, 0.05], [0.04, 0.03, 0.08], true, 0.4),
    (BRONCHIAL_TREE, [0.1, 0.1, 0.0], [0.04, 0.04, 0.15], true, 0.4),
    (LEFT_BRACHIAL_PLEXUS, [0.3, 0.25, 0.4], [0.04, 0.04, 0.1], true, 0.4),
    (RIGHT_BRACHIAL_PLEXUS, [-0.3, 0.25, 0.4], [0.04, 0.04, 0.1], true, 0.4),
    (SKIN_RIND, [-0.38, -0.1, 0.0], [0.03, 0.12, 0.5], true, 0.4),
    (LIVER, [-0.15, -0.1, -0.4], [0.15, 0.12, 0.12], false, 0.5),
];

pub fn band_center(slot: usize) -> f32 {
    100.0 * (slot as f32 + 1.0)
}

pub fn intensity_bands() -> Vec<IntensityBand> {
    (0..NUM_SLOTS)
        .map(|slot| IntensityBand {
            structure: slot_name(slot).to_string(),
            low: band_center(slot) - 50.0,
            high: band_center(slot) + 50.0,
        })
        .collect()
}

pub fn generate_with_truth(config: &PhantomConfig) -> Result<(CaseBundle, PhantomTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let image_geom = GridGeometry::uniform(
        [config.origin[0], config.origin[1]],
        config.image_resolution,
        config.origin[2],
        config.image_slice_thickness,
        config.image_shape,
    )?;
    let extent = [
        config.image_shape[0] as f64 * config.image_resolution,
        config.image_shape[1] as f64 * config.image_resolution,
        config.image_shape[2] as f64 * config.image_slice_thickness,
    ];
    let center = Point3::new(
        config.origin[0] + 0.5 * extent[0],
        config.origin[1] + 0.5 * extent[1],
        config.origin[2] + 0.5 * extent[2],
    );
    let dose_extent = [
        config.dose_shape[0] as f64 * config.dose_resolution,
        config.dose_shape[1] as f64 * config.dose_resolution,
        config.dose_shape[2] as f64 * config.dose_slice_thickness,
    ];
    let dose_geom = GridGeometry::uniform(
        [
            center.x - 0.5 * dose_extent[0],
            center.y - 0.5 * dose_extent[1],
        ],
        config.dose_resolution,
        center.z - 0.5 * dose_extent[2],
        config.dose_slice_thickness,
        config.dose_shape,
    )?;

    let at = |rel: [f64; 3]| {
        Point3::new(
            center.x + rel[0] * extent[0],
            center.y + rel[1] * extent[1],
            center.z + rel[2] * extent[2],
        )
    };
    let jitter = |rng: &mut ChaCha8Rng, scale: f64| 1.0 + scale * (rng.random::<f64>() - 0.5);

    let body = Ellipsoid {
        center,
        semi_axes: [
            0.75 * extent[0] * jitter(&mut rng, 0.08),
            0.75 * extent[1] * jitter(&mut rng, 0.08),
            0.75 * extent[2],
        ],
    };

    let mut shapes: Vec<(usize, Shape)> = Vec::new();
    for &(slot, rel_center, rel_half, is_box, p) in OAR_LAYOUT.iter() {
        let present = rng.random::<f64>() < p;
        let c = at([
            rel_center[0] + 0.04 * (rng.random::<f64>() - 0.5),
            rel_center[1] + 0.04 * (rng.random::<f64>() - 0.5),
            rel_center[2],
        ]);
        let half = [
            rel_half[0] * extent[0] * jitter(&mut rng, 0.3),
            rel_half[1] * extent[1] * jitter(&mut rng, 0.3),
            rel_half[2] * extent[2],
        ];
        if !present {
            continue;
        }
        let shape = if is_box {
            Shape::Box { center: c, half }
        } else {
            Shape::Ellipsoid(Ellipsoid {
                center: c,
                semi_axes: half,
            })
        };
        shapes.push((slot, shape));
    }
    let ptv = Ellipsoid {
        center: at([
            0.3 * (rng.random::<f64>() - 0.5),
            0.3 * (rng.random::<f64>() - 0.5),
            0.2 * (rng.random::<f64>() - 0.5),
        ]),
        semi_axes: [
            extent[0] * (0.2 + 0.1 * rng.random::<f64>()),
            extent[1] * (0.2 + 0.1 * rng.random::<f64>()),
            extent[2] * (0.3 + 0.12 * rng.random::<f64>()),
        ],
    };
    let prescription = match config.prescription_dose {
        Some(rx) => rx,
        None => PRESCRIPTIONS[rng.random_range(0..PRESCRIPTIONS.len())],
    };
    let fractions = (prescription / 2.0).round() as usize;

    // Label map: 0 = outside body, slot + 1 otherwise.
    let shape = config.image_shape;
    let mut labels: Volume<u8> = Volume::filled(shape, 0);
    for idx in labels.indices().collect::<Vec<_>>() {
        let p = voxel_center(&image_geom.voxel_box(idx));
        let mut label = 0u8;
        if body.contains(&p) {
            label = BODY as u8 + 1;
            for (slot, s) in &shapes {
                if s.contains(&p) {
                    label = *slot as u8 + 1;
                }
            }
        }
        if ptv.contains(&p) {
            label = PTV as u8 + 1;
        }
        *labels.get_mut(idx) = label;
    }
    // The voxel nearest the PTV center always belongs to the PTV.
    let ptv_seed = nearest_index(&image_geom, &ptv.center);
    *labels.get_mut(ptv_seed) = PTV as u8 + 1;

    let mut masks: Vec<Mask> = Vec::with_capacity(NUM_SLOTS);
    for slot in 0..NUM_SLOTS {
        let raw = labels.map(|&l| l as usize == slot + 1);
        masks.push(largest_component_per_slice(&raw));
    }
    // Voxels dropped by component cleaning revert to air.
    for (i, l) in labels.as_mut_slice().iter_mut().enumerate() {
        if *l != 0 && !masks[*l as usize - 1].as_slice()[i] {
            *l = 0;
        }
    }

    let noise = Normal::new(0.0, IMAGE_NOISE_SD).expect("valid sd");
    let image_values: Vec<f32> = labels
        .as_slice()
        .iter()
        .map(|&l| {
            let n = noise.sample(&mut rng).clamp(-IMAGE_NOISE_CLAMP, IMAGE_NOISE_CLAMP) as f32;
            if l == 0 {
                AIR_INTENSITY + n
            } else {
                band_center(l as usize - 1) + n
            }
        })
        .collect();
    let image = Volume::from_vec(shape, image_values)?;

    let ptv_mask = masks.pop().expect("ptv slot");
    let ptv_centroid = mask_centroid(&ptv_mask, &image_geom).ok_or(Error::EmptyPtv)?;

    let boost = config.instruction_mode == InstructionMode::Boost;
    let dose_noise = if config.noise_sd > 0.0 {
        Some(Normal::new(0.0, config.noise_sd).expect("valid sd"))
    } else {
        None
    };
    let n_dose = dose_geom.len();
    let mut clean = Vec::with_capacity(n_dose);
    let mut in_ptv = Vec::with_capacity(n_dose);
    let mut in_body = Vec::with_capacity(n_dose);
    let mut dose_values = Vec::with_capacity(n_dose);
    for linear in 0..n_dose {
        let p = voxel_center(&dose_geom.voxel_box(dose_geom.grid_index(linear)));
        let inside = body.contains(&p);
        let target = ptv.contains(&p);
        let mut d = if inside {
            dose_law(prescription, &p, &ptv_centroid, config.tau)
        } else {
            0.0
        };
        if boost && target && inside {
            d *= BOOST_FACTOR;
        }
        let n = dose_noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
        let noisy = if inside { (d + n).max(0.0) } else { 0.0 };
        clean.push(d);
        in_ptv.push(target);
        in_body.push(inside);
        dose_values.push(noisy as f32);
    }
    let dose = Volume::from_vec(config.dose_shape, dose_values)?;

    let mut text = format!("Prescription {prescription} Gy in {fractions} fractions to PTV.");
    if boost {
        text.push(' ');
        text.push_str(BOOST_TOKEN);
    }

    let case = CaseBundle {
        case_id: format!("phantom-{:016x}", config.seed),
        image,
        image_geom,
        dose,
        dose_geom,
        oar_masks: config.include_masks.then_some(masks),
        ptv_mask,
        intensity_bands: intensity_bands(),
        prescription_dose: prescription,
        prescription_text: text,
    };
    case.validate()?;
    let truth = PhantomTruth {
        body,
        ptv,
        ptv_centroid,
        clean_dose: clean,
        dose_in_ptv: in_ptv,
        dose_in_body: in_body,
    };
    Ok((case, truth))
}

/// Noise-free in-body dose at `point`.
pub fn dose_law(prescription: f64, point: &Point3, ptv_centroid: &Point3, tau: f64) -> f64 {
    prescription * (-point.manhattan(ptv_centroid) / tau).exp()
}

fn nearest_index(geom: &GridGeometry, p: &Point3) -> [usize; 3] {
    let r = geom.slice_resolution;
    let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let x = clampi((p.x - geom.origin_xy[0]) / r, geom.dims_xy[0]);
    let y = clampi((p.y - geom.origin_xy[1]) / r, geom.dims_xy[1]);
    let z = geom.slice_z[1..]
        .partition_point(|&b| b <= p.z)
        .min(geom.slices() - 1);
    [x, y, z]
}

/// Seed for the `index`-th case of a cohort.
pub fn cohort_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n` cases; a `boost_fraction` share (interleaved) use boost mode.
pub fn generate_cohort(
    base: &PhantomConfig,
    n: usize,
    seed: u64,
    boost_fraction: f64,
) -> Result<Vec<CaseBundle>> {
    (0..n)
        .map(|i| {
            let mut cfg = base.clone();
            cfg.seed = cohort_seed(seed, i);
            let boosted = ((i + 1) as f64 * boost_fraction).floor() > (i as f64 * boost_fraction).floor();
            cfg.instruction_mode = if boosted {
                InstructionMode::Boost
            } else {
                InstructionMode::None
            };
            let mut case = generate_phantom(&cfg)?;
            case.case_id = format!("phantom-{i:03}");
            Ok(case)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = PhantomConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn noiseless_dose_matches_law() {
        let cfg = PhantomConfig {
            seed: 3,
            noise_sd: 0.0,
            ..Default::default()
        };
        let (case, truth) = generate_with_truth(&cfg).unwrap();
        for (linear, &d) in case.dose.as_slice().iter().enumerate() {
            let p = voxel_center(&case.dose_geom.voxel_box(case.dose_geom.grid_index(linear)));
            if truth.dose_in_body[linear] {
                let law = dose_law(case.prescription_dose, &p, &truth.ptv_centroid, cfg.tau);
                // payloads are f32, so the law is compared after one rounding
                assert_eq!(d, law as f32);
                let rel = ((d as f64 - law) / law).abs();
                assert!(rel < 1e-7, "rel {rel}");
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn dose_at_ptv_centroid_equals_prescription() {
        let c = Point3::new(3.5, -2.0, 7.25);
        assert_eq!(dose_law(60.0, &c, &c, 20.0), 60.0);
        assert_eq!(dose_law(60.0, &Point3::new(23.5, -2.0, 7.25), &c, 20.0), 60.0 * (-1.0f64).exp());
    }

    #[test]
    fn boost_scales_ptv_interior() {
        let base = PhantomConfig {
            seed: 5,
            noise_sd: 0.0,
            ..Default::default()
        };
        let (plain, t0) = generate_with_truth(&base).unwrap();
        let (boosted, t1) = generate_with_truth(&PhantomConfig {
            instruction_mode: InstructionMode::Boost,
            ..base.clone()
        })
        .unwrap();
        assert!(boosted.prescription_text.contains(BOOST_TOKEN));
        assert!(!plain.prescription_text.contains(BOOST_TOKEN));
        assert_eq!(plain.image, boosted.image);
        let mut checked = 0;
        for i in 0..plain.dose.len() {
            let (a, b) = (plain.dose.as_slice()[i] as f64, boosted.dose.as_slice()[i] as f64);
            if t0.dose_in_ptv[i] && t0.dose_in_body[i] {
                assert_eq!(t1.clean_dose[i], t0.clean_dose[i] * BOOST_FACTOR);
                assert!((b - BOOST_FACTOR * a).abs() <= 2e-7 * b.abs());
                checked += 1;
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn rejects_small_shapes() {
        let cfg = PhantomConfig {
            image_shape: [3, 8, 8],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&cfg), Err(Error::InvalidPhantom(_))));
        let cfg = PhantomConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(generate_phantom(&cfg).is_err());
    }

    #[test]
    fn cohort_interleaves_boost() {
        let base = PhantomConfig {
            image_shape: [8, 8, 4],
            dose_shape: [4, 4, 2],
            image_slice_thickness: 4.0,
            dose_slice_thickness: 8.0,
            ..Default::default()
        };
        let cases = generate_cohort(&base, 6, 1, 0.5).unwrap();
        let boosted: Vec<bool> = cases
            .iter()
            .map(|c| c.prescription_text.contains(BOOST_TOKEN))
            .collect();
        assert_eq!(boosted, vec![false, true, false, true, false, true]);
        assert_eq!(cases[0].case_id, "phantom-000");
    }
}
