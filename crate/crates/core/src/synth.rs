//! Synthetic PET/CT studies with ellipsoidal lesions.
//!
//! Each case has a CT-like volume (smooth tissue field plus noise inside
//! [-100, 250] HU), an SUV volume with background near 1 and hot lesions
//! (SUV 5 to 12 inside every lesion voxel) and the lesion mask, all on one
//! randomly spaced grid. Every fifth case (index 4, 9, ...) is lesion-free.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::case::Case;
use crate::seed::rng_for;
use crate::volume::Volume;

pub const LESION_FREE_PERIOD: usize = 5;
pub const MIN_LESION_SUV: f64 = 5.0;
pub const MAX_LESION_SUV: f64 = 12.0;

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

pub fn is_lesion_free(index: usize) -> bool {
    index % LESION_FREE_PERIOD == LESION_FREE_PERIOD - 1
}

struct Lesion {
    centre: [f64; 3],
    radii: [f64; 3],
    peak: f64,
}

impl Lesion {
    /// Squared normalized radius of a physical point.
    fn r2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum()
    }
}

/// Generates case `index` of the set defined by `seed`.
pub fn synth_case(index: usize, seed: u64) -> Case {
    let mut rng = rng_for(seed, &[index as u64]);
    let in_plane: f64 = rng.random_range(1.5..3.0);
    let spacing = [in_plane, in_plane, rng.random_range(2.0..4.0)];
    let extent: [f64; 3] = [
        rng.random_range(220.0..280.0),
        rng.random_range(220.0..280.0),
        rng.random_range(180.0..240.0),
    ];
    let dims: [usize; 3] = std::array::from_fn(|a| (extent[a] / spacing[a]).round() as usize);
    let origin: [f64; 3] =
        std::array::from_fn(|a| -0.5 * extent[a] + rng.random_range(-20.0..20.0));

    let lesions: Vec<Lesion> = if is_lesion_free(index) {
        Vec::new()
    } else {
        (0..rng.random_range(1..=3))
            .map(|_| {
                let centre =
                    std::array::from_fn(|a| origin[a] + extent[a] * rng.random_range(0.2..0.8));
                let radii = std::array::from_fn(|_| rng.random_range(8.0..16.0));
                Lesion {
                    centre,
                    radii,
                    peak: rng.random_range(MIN_LESION_SUV + 1.0..MAX_LESION_SUV),
                }
            })
            .collect()
    };

    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let ct_noise = Normal::new(0.0, 15.0).expect("valid normal");
    let suv_noise = Normal::new(0.0, 0.1).expect("valid normal");
    let n: usize = dims.iter().product();
    let (mut ct, mut suv, mut label) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    origin[0] + spacing[0] * i as f64,
                    origin[1] + spacing[1] * j as f64,
                    origin[2] + spacing[2] * k as f64,
                ];
                let smooth = (p[0] / 23.0 + phase[0]).sin() * (p[1] / 31.0 + phase[1]).cos()
                    + 0.5 * (p[2] / 19.0 + phase[2]).sin();
                let mut ct_v = 40.0 + 60.0 * smooth + ct_noise.sample(&mut rng);
                let mut suv_v = (1.0 + 0.25 * smooth + suv_noise.sample(&mut rng)).clamp(0.2, 2.0);
                let mut inside = false;
                for l in &lesions {
                    let r2 = l.r2(p);
                    if r2 <= 1.0 {
                        inside = true;
                        let hot = MIN_LESION_SUV + (l.peak - MIN_LESION_SUV) * (1.0 - r2);
                        suv_v = suv_v.max(hot);
                        ct_v += 30.0;
                    }
                }
                ct.push(ct_v.clamp(-100.0, 250.0) as f32);
                suv.push(suv_v.min(MAX_LESION_SUV) as f32);
                label.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    let make = |data| Volume::new(dims, spacing, origin, data).expect("valid synthetic grid");
    Case {
        id: case_id(index),
        ct: make(ct),
        suv: make(suv),
        label: make(label),
    }
}

/// Cases `0..n` of the set defined by `seed`.
pub fn synth_cases(n: usize, seed: u64) -> Vec<Case> {
    (0..n).map(|i| synth_case(i, seed)).collect()
}
