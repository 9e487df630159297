//! Deterministic synthetic head-CT phantoms.
//!
//! Each patient is an elliptical skull ring around brain parenchyma with two
//! paracentral ventricles and additive Gaussian noise. Positive patients get
//! hypodense periventricular blobs on a slab of slices centered on the
//! slice-selection center, with per-slice ground-truth masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{
    write_patient, DicomError, DicomSlice, Label, PatientRecord, PixelRepresentation,
    TransferSyntax,
};
use crate::grid::Image;
use crate::volume_prep::{resize_bilinear, select_slices, SliceSelectConfig};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("bad phantom configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Tissue intensities in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HuAnchors {
    pub air: f64,
    pub skull: f64,
    pub parenchyma: f64,
    pub ventricle: f64,
    pub lesion: f64,
}

impl Default for HuAnchors {
    fn default() -> Self {
        Self {
            air: -1000.0,
            skull: 800.0,
            parenchyma: 35.0,
            ventricle: 8.0,
            lesion: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub positive_fraction: f64,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub hu: HuAnchors,
    pub noise_sigma: f64,
    /// Lesion blob radius range in pixels at `image_size`.
    pub lesion_radius: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_patients: 20,
            positive_fraction: 0.5,
            slices_per_patient: 90,
            image_size: 256,
            hu: HuAnchors::default(),
            noise_sigma: 3.0,
            lesion_radius: (14.0, 24.0),
            seed: 0,
        }
    }
}

/// Brain tissue is kept this far inside the `(0, 100)` HU window after noise.
const BRAIN_HU_MIN: f64 = 1.0;
const BRAIN_HU_MAX: f64 = 99.0;
const RESCALE_INTERCEPT: f64 = -1024.0;
const SLICE_SPACING_MM: f64 = 5.0;

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::BadConfig(m));
        let h = &self.hu;
        if !(h.air < 0.0) {
            return bad(format!("air anchor {} must be below 0 HU", h.air));
        }
        if !(h.skull >= 100.0) {
            return bad(format!("skull anchor {} must be at least 100 HU", h.skull));
        }
        for (name, v) in [
            ("parenchyma", h.parenchyma),
            ("ventricle", h.ventricle),
            ("lesion", h.lesion),
        ] {
            if !(BRAIN_HU_MIN..=BRAIN_HU_MAX).contains(&v) {
                return bad(format!("{name} anchor {v} must lie inside the (0, 100) HU window"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo >= 1.0 && lo <= hi) {
            return bad(format!("lesion_radius ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if hi > self.image_size as f64 / 8.0 {
            return bad(format!(
                "lesion radius {hi} too large for {}px images",
                self.image_size
            ));
        }
        if self.slices_per_patient < 3 {
            return bad("need at least 3 slices per patient".into());
        }
        if self.image_size < 32 || self.image_size > u16::MAX as usize {
            return bad(format!("image_size {} out of range", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            ));
        }
        Ok(())
    }

    /// Slices `[start, end)` that carry lesions in positive patients: a third
    /// of the stack centered on the default selection center.
    pub fn lesion_slab(&self) -> std::ops::Range<usize> {
        let n = self.slices_per_patient;
        let cfg = SliceSelectConfig {
            depth: (n / 3).max(1),
            ..SliceSelectConfig::default()
        };
        select_slices(n, &cfg).expect("slab fits in the stack")
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    fn of(mask: &[bool], cols: usize) -> Option<Self> {
        let mut bb: Option<BBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / cols, i % cols);
            bb = Some(match bb {
                None => BBox {
                    row_min: r,
                    col_min: c,
                    row_max: r,
                    col_max: c,
                },
                Some(b) => BBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
        bb
    }
}

/// Lesion pixels of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<bool>,
    pub bbox: BBox,
}

impl LesionMask {
    /// Bounding box of the mask after the same corner-aligned bilinear
    /// resampling the images go through; `None` if nothing survives.
    pub fn resampled_bbox(&self, rows: usize, cols: usize) -> Option<BBox> {
        let img = Image::from_vec(
            self.rows,
            self.cols,
            self.pixels.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        );
        let small = resize_bilinear(&img, rows, cols).ok()?;
        let mask: Vec<bool> = small.data().iter().map(|&v| v > 0.0).collect();
        BBox::of(&mask, cols)
    }
}

/// Per-slice lesion masks, indexed like the patient's slices.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionGroundTruth {
    pub slices: Vec<Option<LesionMask>>,
}

impl LesionGroundTruth {
    pub fn has_lesions(&self) -> bool {
        self.slices.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
}

struct Anatomy {
    cy: f64,
    cx: f64,
    head_ry: f64,
    head_rx: f64,
    skull: f64,
    vent_offset: f64,
    vent_ry: f64,
    vent_rx: f64,
    blobs: Vec<Blob>,
}

fn draw_anatomy<R: Rng + ?Sized>(cfg: &PhantomConfig, label: Label, rng: &mut R) -> Anatomy {
    let s = cfg.image_size as f64;
    let mut u = |lo: f64, hi: f64| Uniform::new_inclusive(lo, hi).unwrap().sample(rng);
    let centre = (s - 1.0) / 2.0;
    let mut a = Anatomy {
        cy: centre + u(-0.01, 0.01) * s,
        cx: centre + u(-0.01, 0.01) * s,
        head_ry: 0.42 * s * u(0.97, 1.02),
        head_rx: 0.34 * s * u(0.97, 1.02),
        skull: 0.03 * s,
        vent_offset: 0.06 * s * u(0.95, 1.05),
        vent_ry: 0.10 * s * u(0.9, 1.1),
        vent_rx: 0.028 * s * u(0.9, 1.1),
        blobs: Vec::new(),
    };
    if label.is_positive() {
        let (rmin, rmax) = cfg.lesion_radius;
        for side in [-1.0, 1.0] {
            let count = if u(0.0, 1.0) < 0.5 { 2 } else { 3 };
            for _ in 0..count {
                let r = u(rmin, rmax);
                a.blobs.push(Blob {
                    cy: a.cy + u(-0.6, 0.6) * a.vent_ry,
                    cx: a.cx + side * (a.vent_offset + a.vent_rx + 0.5 * r),
                    r,
                });
            }
        }
    }
    a
}

/// Generates one patient's slices and lesion masks from `rng`.
pub fn gen_phantom_patient<R: Rng + ?Sized>(
    cfg: &PhantomConfig,
    patient_id: &str,
    label: Label,
    rng: &mut R,
) -> Result<(PatientRecord, LesionGroundTruth), PhantomError> {
    cfg.validate()?;
    let anatomy = draw_anatomy(cfg, label, rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let n = cfg.slices_per_patient;
    let size = cfg.image_size;
    let slab = cfg.lesion_slab();
    let slab_mid = (slab.start + slab.end - 1) as f64 / 2.0;
    let slab_half = (slab.len() as f64 / 2.0).max(1.0);
    let h = cfg.hu;

    let mut slices = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for z in 0..n {
        let t = z as f64 / (n - 1) as f64;
        let head_scale = (1.0 - ((t - 0.6) / 0.65).powi(2)).max(0.2).sqrt();
        let vent_shape = 1.0 - ((t - 0.62) / 0.3).powi(2);
        let vent_scale = if vent_shape > 0.25 { vent_shape.sqrt() } else { 0.0 };

        let outer = Ellipse {
            cy: anatomy.cy,
            cx: anatomy.cx,
            ry: anatomy.head_ry * head_scale,
            rx: anatomy.head_rx * head_scale,
        };
        let inner = Ellipse {
            ry: outer.ry - anatomy.skull,
            rx: outer.rx - anatomy.skull,
            ..outer
        };
        let ventricles: Vec<Ellipse> = if vent_scale > 0.0 {
            [-1.0, 1.0]
                .iter()
                .map(|side| Ellipse {
                    cy: anatomy.cy,
                    cx: anatomy.cx + side * anatomy.vent_offset,
                    ry: anatomy.vent_ry * vent_scale,
                    rx: anatomy.vent_rx * vent_scale,
                })
                .collect()
        } else {
            Vec::new()
        };
        let blobs: Vec<Blob> = if slab.contains(&z) {
            let shrink = 1.0 - 0.3 * ((z as f64 - slab_mid).abs() / slab_half).min(1.0);
            anatomy
                .blobs
                .iter()
                .map(|b| Blob {
                    r: b.r * shrink,
                    ..*b
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut raw = Vec::with_capacity(size * size);
        let mut mask = vec![false; if blobs.is_empty() { 0 } else { size * size }];
        for r in 0..size {
            let y = r as f64;
            for c in 0..size {
                let x = c as f64;
                let e: f64 = noise.sample(rng);
                let hu = if !outer.contains(y, x) {
                    h.air + e
                } else if !inner.contains(y, x) {
                    h.skull + e
                } else {
                    let base = if ventricles.iter().any(|v| v.contains(y, x)) {
                        h.ventricle
                    } else if blobs.iter().any(|b| {
                        let (dy, dx) = (y - b.cy, x - b.cx);
                        dy * dy + dx * dx <= b.r * b.r
                    }) {
                        mask[r * size + c] = true;
                        h.lesion
                    } else {
                        h.parenchyma
                    };
                    (base + e).clamp(BRAIN_HU_MIN, BRAIN_HU_MAX)
                };
                let stored = (hu - RESCALE_INTERCEPT).round().clamp(0.0, u16::MAX as f64);
                raw.push(stored as i32);
            }
        }
        truth.push(BBox::of(&mask, size).map(|bbox| LesionMask {
            rows: size,
            cols: size,
            pixels: mask,
            bbox,
        }));
        slices.push(DicomSlice {
            rows: size,
            cols: size,
            bits_allocated: 16,
            pixel_representation: PixelRepresentation::Unsigned,
            rescale_slope: 1.0,
            rescale_intercept: RESCALE_INTERCEPT,
            instance_number: z as i32 + 1,
            slice_position: Some(z as f64 * SLICE_SPACING_MM),
            raw_pixels: raw,
        });
    }

    let finding = match label {
        Label::Positive => "synthetic phantom: periventricular hypodensity",
        Label::Negative => "synthetic phantom: no finding",
    };
    Ok((
        PatientRecord {
            patient_id: patient_id.to_string(),
            slices,
            label,
            finding_text: Some(finding.to_string()),
        },
        LesionGroundTruth { slices: truth },
    ))
}

/// Independent random stream for patient `index` of a dataset.
pub fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn patient_id(index: usize) -> String {
    format!("PH{index:04}")
}

/// Labels of a dataset: `round(n * positive_fraction)` positives at
/// seeded-shuffled positions.
pub fn dataset_labels(cfg: &PhantomConfig) -> Vec<Label> {
    let n = cfg.n_patients;
    let positives = (n as f64 * cfg.positive_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| Label::from_bool(i < positives)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    labels.shuffle(&mut rng);
    labels
}

/// Patient `index` of the dataset described by `cfg`.
pub fn generate_patient(
    cfg: &PhantomConfig,
    labels: &[Label],
    index: usize,
) -> Result<(PatientRecord, LesionGroundTruth), PhantomError> {
    let mut rng = patient_rng(cfg.seed, index);
    gen_phantom_patient(cfg, &patient_id(index), labels[index], &mut rng)
}

/// Ground-truth summary written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub label: Label,
    /// Slice index → lesion bounding box at full image resolution.
    pub lesion_boxes: BTreeMap<usize, BBox>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes every patient as `<out>/<id>/` (DICOM slices + JSON sidecar) and a
/// `ground_truth.json` with lesion boxes at `<out>/`.
pub fn write_phantom_dataset(cfg: &PhantomConfig, out: &Path) -> Result<(), PhantomError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let labels = dataset_labels(cfg);
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_patients {
        let (record, gt) = generate_patient(cfg, &labels, i)?;
        write_patient(
            &out.join(&record.patient_id),
            &record,
            TransferSyntax::ExplicitVrLittleEndian,
        )?;
        let lesion_boxes = gt
            .slices
            .iter()
            .enumerate()
            .filter_map(|(z, m)| m.as_ref().map(|m| (z, m.bbox)))
            .collect();
        truth.insert(
            record.patient_id.clone(),
            PatientTruth {
                label: record.label,
                lesion_boxes,
            },
        );
    }
    let text = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    fs::write(out.join(GROUND_TRUTH_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hu::{raw_to_hu, window_rescale};

    fn small() -> PhantomConfig {
        PhantomConfig {
            n_patients: 4,
            slices_per_patient: 12,
            image_size: 64,
            lesion_radius: (3.0, 5.0),
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn negative_patients_have_no_lesions() {
        let cfg = small();
        let mut rng = patient_rng(3, 0);
        let (rec, gt) = gen_phantom_patient(&cfg, "n", Label::Negative, &mut rng).unwrap();
        assert_eq!(rec.slices.len(), 12);
        assert!(gt.slices.iter().all(Option::is_none));
    }

    #[test]
    fn positive_lesions_cover_the_slab() {
        let cfg = small();
        let mut rng = patient_rng(3, 1);
        let (_, gt) = gen_phantom_patient(&cfg, "p", Label::Positive, &mut rng).unwrap();
        let slab = cfg.lesion_slab();
        assert_eq!(slab, 6..10);
        for (z, m) in gt.slices.iter().enumerate() {
            assert_eq!(m.is_some(), slab.contains(&z), "slice {z}");
            if let Some(m) = m {
                assert!(m.pixels.iter().any(|&p| p));
            }
        }
    }

    #[test]
    fn default_slab_matches_default_selection() {
        let cfg = PhantomConfig::default();
        let sel = select_slices(cfg.slices_per_patient, &SliceSelectConfig::default()).unwrap();
        assert_eq!(cfg.lesion_slab(), sel);
    }

    #[test]
    fn windowed_tissues_land_where_expected() {
        let cfg = small();
        let mut rng = patient_rng(5, 2);
        let (rec, _) = gen_phantom_patient(&cfg, "p", Label::Positive, &mut rng).unwrap();
        let unit = window_rescale(&raw_to_hu(&rec.slices[8]));
        // corner is air, centre row crosses skull and brain
        assert_eq!(unit.get(0, 0), 0.0);
        let row = unit.row(32);
        assert!(row.iter().any(|&v| v == 1.0));
        assert!(row.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bad_configs() {
        let mut c = small();
        c.hu.lesion = 120.0;
        assert!(matches!(c.validate(), Err(PhantomError::BadConfig(_))));
        let mut c = small();
        c.lesion_radius = (5.0, 2.0);
        assert!(c.validate().is_err());
        let mut c = small();
        c.hu.skull = 50.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn labels_follow_fraction() {
        let cfg = PhantomConfig {
            n_patients: 11,
            ..small()
        };
        let labels = dataset_labels(&cfg);
        assert_eq!(labels.iter().filter(|l| l.is_positive()).count(), 6);
        assert_eq!(labels, dataset_labels(&cfg));
    }
}
