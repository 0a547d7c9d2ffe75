//! Synthetic multi-metabolite brain phantoms and the data pipeline around them.

mod augment;
mod dataset;
pub mod kspace;
mod splits;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::metabolite::Metabolite;
use crate::Field;

pub use augment::{augment, augment_with, AugmentDraw};
pub(crate) use dataset::met_field_name;
pub use dataset::{list_case_dirs, read_case, read_dataset_manifest, write_case, write_dataset, DatasetManifest, CaseManifest};
pub use splits::{make_splits, Fold, SplitPlan};

/// Tissue classes painted into the phantom anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    WhiteMatter,
    GreyMatter,
    Csf,
    Tumor,
    Edema,
}

/// Concentration of one metabolite in each tissue class, before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaboliteProfile {
    pub metabolite: Metabolite,
    pub white_matter: f64,
    pub grey_matter: f64,
    pub csf: f64,
    pub tumor: f64,
    pub edema: f64,
    /// Amplitude of the smooth multiplicative heterogeneity field.
    pub heterogeneity: f64,
}

impl MetaboliteProfile {
    fn level(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Background => 0.0,
            Tissue::WhiteMatter => self.white_matter,
            Tissue::GreyMatter => self.grey_matter,
            Tissue::Csf => self.csf,
            Tissue::Tumor => self.tumor,
            Tissue::Edema => self.edema,
        }
    }
}

pub fn default_profiles() -> Vec<MetaboliteProfile> {
    let row = |m, wm, gm, csf, tumor, edema| MetaboliteProfile {
        metabolite: m,
        white_matter: wm,
        grey_matter: gm,
        csf,
        tumor,
        edema,
        heterogeneity: 0.12,
    };
    vec![
        row(Metabolite::TCho, 0.55, 0.45, 0.05, 0.95, 0.65),
        row(Metabolite::TCr, 0.60, 0.80, 0.05, 0.45, 0.55),
        row(Metabolite::Naa, 0.85, 0.70, 0.05, 0.12, 0.40),
        row(Metabolite::Gly, 0.20, 0.30, 0.05, 0.95, 0.40),
        row(Metabolite::Gln, 0.35, 0.55, 0.10, 0.75, 0.55),
        row(Metabolite::Glu, 0.55, 0.85, 0.05, 0.30, 0.45),
        row(Metabolite::Ins, 0.50, 0.40, 0.10, 0.55, 0.90),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: usize,
    /// Inclusive range for the number of random interior ellipses.
    pub num_ellipses: [usize; 2],
    pub tumor_probability: f64,
    /// Gaussian noise standard deviation as a fraction of the dynamic range.
    pub noise_sigma: f64,
    pub metabolite_profiles: Vec<MetaboliteProfile>,
    /// Width in pixels of the rejected band along the brain edge.
    pub border_band: usize,
    /// Fraction of interior pixels rejected at random.
    pub dropout_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_size: 64,
            num_ellipses: [5, 12],
            tumor_probability: 0.7,
            noise_sigma: 0.01,
            metabolite_profiles: default_profiles(),
            border_band: 2,
            dropout_fraction: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 16 || self.grid_size % 16 != 0 {
            return Err(config_err(format!(
                "grid size must be a positive multiple of 16, got {}",
                self.grid_size
            )));
        }
        if self.num_ellipses[0] > self.num_ellipses[1] {
            return Err(config_err("ellipse count range is empty"));
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) {
            return Err(config_err("tumor probability must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(config_err("noise sigma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(config_err("dropout fraction must lie in [0, 1)"));
        }
        let mut seen: Vec<Metabolite> = self.metabolite_profiles.iter().map(|p| p.metabolite).collect();
        seen.sort();
        if seen != Metabolite::ALL.to_vec() {
            return Err(config_err("metabolite profiles must cover each of the 7 metabolites exactly once"));
        }
        Ok(())
    }
}

/// One synthetic subject slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub t1: Field,
    pub flair: Field,
    pub metabolite_maps: BTreeMap<Metabolite, Field>,
    pub quality_mask: Array2<bool>,
    pub tumor_mask: Array2<bool>,
}

impl PhantomCase {
    pub fn size(&self) -> usize {
        self.t1.nrows()
    }

    pub fn map(&self, m: Metabolite) -> &Field {
        &self.metabolite_maps[&m]
    }

    pub fn has_tumor(&self) -> bool {
        self.tumor_mask.iter().any(|&t| t)
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized radius; < 1 inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn scaled(&self, k: f64) -> Ellipse {
        Ellipse { a: self.a * k, b: self.b * k, ..*self }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    width: f64,
    amp: f64,
}

fn smooth_field(rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<Blob> {
    (0..3)
        .map(|_| Blob {
            cx: rng.random_range(-0.7..0.7),
            cy: rng.random_range(-0.7..0.7),
            width: rng.random_range(0.2..0.5),
            amp: rng.random_range(-amplitude..amplitude),
        })
        .collect()
}

fn eval_blobs(blobs: &[Blob], x: f64, y: f64) -> f64 {
    blobs
        .iter()
        .map(|b| b.amp * (-((x - b.cx).powi(2) + (y - b.cy).powi(2)) / (2.0 * b.width * b.width)).exp())
        .sum()
}

fn normalize_unit(field: &mut Field) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        field.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        field.fill(0.0);
    }
}

/// Deterministic synthetic case for `(spec.seed, case_index)`.
pub fn generate_phantom(spec: &PhantomSpec, case_index: usize) -> Result<PhantomCase> {
    spec.validate()?;
    let n = spec.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_index as u64 + 1);

    let brain = Ellipse {
        cx: rng.random_range(-0.04..0.04),
        cy: rng.random_range(-0.04..0.04),
        a: rng.random_range(0.74..0.84),
        b: rng.random_range(0.84..0.93),
        theta: rng.random_range(-0.15..0.15),
    };
    let cortex_waves = rng.random_range(3..7) as f64;
    let cortex_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut interior = Vec::new();
    let count = rng.random_range(spec.num_ellipses[0]..=spec.num_ellipses[1]);
    for _ in 0..count {
        let r = rng.random_range(0.0..0.65);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let e = Ellipse {
            cx: brain.cx + r * brain.a * phi.cos(),
            cy: brain.cy + r * brain.b * phi.sin(),
            a: rng.random_range(0.05..0.2),
            b: rng.random_range(0.05..0.2),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let u: f64 = rng.random();
        let tissue = if u < 0.6 {
            Tissue::GreyMatter
        } else if u < 0.8 {
            Tissue::WhiteMatter
        } else {
            Tissue::Csf
        };
        interior.push((e, tissue));
    }

    let vent_dx = rng.random_range(0.08..0.14);
    let vent = [-1.0, 1.0].map(|side: f64| Ellipse {
        cx: brain.cx + side * vent_dx,
        cy: brain.cy + rng.random_range(-0.08..0.02),
        a: rng.random_range(0.04..0.07),
        b: rng.random_range(0.15..0.25),
        theta: side * rng.random_range(0.0..0.3),
    });

    let tumor = if rng.random::<f64>() < spec.tumor_probability {
        let r = rng.random_range(0.1..0.5);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        Some(Ellipse {
            cx: brain.cx + r * brain.a * phi.cos(),
            cy: brain.cy + r * brain.b * phi.sin(),
            a: rng.random_range(0.08..0.18),
            b: rng.random_range(0.08..0.18),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        })
    } else {
        None
    };
    let edema_scale = rng.random_range(1.4..1.9);

    let coord = |i: usize| (i as f64 + 0.5 - n as f64 / 2.0) / (n as f64 / 2.0);
    let mut labels = Array2::from_elem((n, n), Tissue::Background);
    for ((r, c), label) in labels.indexed_iter_mut() {
        let (x, y) = (coord(c), coord(r));
        let rho = brain.rho(x, y);
        if rho >= 1.0 {
            continue;
        }
        let angle = (y - brain.cy).atan2(x - brain.cx);
        let cortex_edge = 0.8 + 0.05 * (cortex_waves * angle + cortex_phase).sin();
        let mut t = if rho > cortex_edge { Tissue::GreyMatter } else { Tissue::WhiteMatter };
        for (e, tissue) in &interior {
            if e.rho(x, y) < 1.0 {
                t = *tissue;
            }
        }
        if vent.iter().any(|e| e.rho(x, y) < 1.0) {
            t = Tissue::Csf;
        }
        if let Some(core) = &tumor {
            if core.rho(x, y) < 1.0 {
                t = Tissue::Tumor;
            } else if core.scaled(edema_scale).rho(x, y) < 1.0 && t != Tissue::Csf {
                t = Tissue::Edema;
            }
        }
        *label = t;
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| config_err(e.to_string()))?;
    let add_noise = |field: &mut Field, rng: &mut ChaCha8Rng| {
        if spec.noise_sigma > 0.0 {
            for (v, l) in field.iter_mut().zip(labels.iter()) {
                if *l != Tissue::Background {
                    *v += noise.sample(rng);
                }
            }
        }
    };

    let contrast = |table: [f64; 5]| {
        labels.mapv(|t| match t {
            Tissue::Background => 0.0,
            Tissue::WhiteMatter => table[0],
            Tissue::GreyMatter => table[1],
            Tissue::Csf => table[2],
            Tissue::Tumor => table[3],
            Tissue::Edema => table[4],
        })
    };
    let mut t1 = contrast([0.85, 0.6, 0.15, 0.45, 0.55]);
    let mut flair = contrast([0.45, 0.6, 0.08, 0.75, 0.95]);
    add_noise(&mut t1, &mut rng);
    add_noise(&mut flair, &mut rng);
    normalize_unit(&mut t1);
    normalize_unit(&mut flair);

    let mut metabolite_maps = BTreeMap::new();
    for profile in &spec.metabolite_profiles {
        let blobs = smooth_field(&mut rng, profile.heterogeneity);
        let case_scale = rng.random_range(0.85..1.15);
        let mut map = Array2::<f64>::zeros((n, n));
        for ((r, c), v) in map.indexed_iter_mut() {
            let t = labels[[r, c]];
            if t == Tissue::Background {
                continue;
            }
            let het = 1.0 + eval_blobs(&blobs, coord(c), coord(r));
            *v = profile.level(t) * het * case_scale;
        }
        add_noise(&mut map, &mut rng);
        map.mapv_inplace(|v| v.max(0.0));
        normalize_unit(&mut map);
        map.mapv_inplace(|v| v.clamp(0.0, 1.0));
        metabolite_maps.insert(profile.metabolite, map);
    }

    let brain_mask = labels.mapv(|t| t != Tissue::Background);
    let band = spec.border_band as isize;
    let mut quality_mask = Array2::from_elem((n, n), false);
    for r in 0..n as isize {
        for c in 0..n as isize {
            let mut ok = true;
            'outer: for dr in -band..=band {
                for dc in -band..=band {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize || !brain_mask[[rr as usize, cc as usize]] {
                        ok = false;
                        break 'outer;
                    }
                }
            }
            if ok && rng.random::<f64>() >= spec.dropout_fraction {
                quality_mask[[r as usize, c as usize]] = true;
            }
        }
    }
    let tumor_mask = labels.mapv(|t| t == Tissue::Tumor);

    Ok(PhantomCase {
        case_id: case_id(case_index),
        t1,
        flair,
        metabolite_maps,
        quality_mask,
        tumor_mask,
    })
}

/// Zero out pixels without valid ground truth.
pub fn apply_quality_mask(map: &Field, mask: &Array2<bool>) -> Result<Field> {
    if map.dim() != mask.dim() {
        return Err(shape_err(format!("map {:?} and mask {:?} differ", map.dim(), mask.dim())));
    }
    let mut out = map.clone();
    for (v, m) in out.iter_mut().zip(mask.iter()) {
        if !*m {
            *v = 0.0;
        }
    }
    Ok(out)
}
