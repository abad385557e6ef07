//! Case files on disk and the resample + window preprocessing step.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nifti::{read_volume, write_volume, NiftiError};
use crate::volume::{
    resample, resample_onto, window_normalize, IntensityWindow, Interpolation, Volume, VolumeError,
};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case {case}: {source}")]
    Nifti {
        case: String,
        #[source]
        source: NiftiError,
    },
    #[error("case {case}: {source}")]
    Volume {
        case: String,
        #[source]
        source: VolumeError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CaseError>;

/// Preprocessing parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessing {
    pub spacing: [f64; 3],
    pub ct_window: IntensityWindow,
    pub suv_window: IntensityWindow,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            spacing: crate::volume::TARGET_SPACING,
            ct_window: IntensityWindow::CT,
            suv_window: IntensityWindow::SUV,
        }
    }
}

/// CT, SUV and lesion mask of one study.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub ct: Volume,
    pub suv: Volume,
    pub label: Volume,
}

/// `<dir>/<id>_ct.nii.gz`, `<id>_suv.nii.gz`, `<id>_seg.nii.gz`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CasePaths {
    pub ct: PathBuf,
    pub suv: PathBuf,
    pub seg: PathBuf,
}

pub const CT_SUFFIX: &str = "_ct.nii.gz";
pub const SUV_SUFFIX: &str = "_suv.nii.gz";
pub const SEG_SUFFIX: &str = "_seg.nii.gz";

pub fn case_paths(dir: &Path, id: &str) -> CasePaths {
    CasePaths {
        ct: dir.join(format!("{id}{CT_SUFFIX}")),
        suv: dir.join(format!("{id}{SUV_SUFFIX}")),
        seg: dir.join(format!("{id}{SEG_SUFFIX}")),
    }
}

/// Sorted ids of every `<id>_ct.nii.gz` in `dir`.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let io = |source| CaseError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let name = entry.map_err(io)?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(CT_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn read(case: &str, path: &Path) -> Result<Volume> {
    read_volume(path).map_err(|source| CaseError::Nifti {
        case: case.to_string(),
        source,
    })
}

fn write(case: &str, v: &Volume, path: &Path) -> Result<()> {
    write_volume(v, path).map_err(|source| CaseError::Nifti {
        case: case.to_string(),
        source,
    })
}

/// Reads CT and SUV of a case.
pub fn load_images(dir: &Path, id: &str) -> Result<(Volume, Volume)> {
    let p = case_paths(dir, id);
    Ok((read(id, &p.ct)?, read(id, &p.suv)?))
}

pub fn load_label(dir: &Path, id: &str) -> Result<Volume> {
    read(id, &case_paths(dir, id).seg)
}

pub fn load_case(dir: &Path, id: &str) -> Result<Case> {
    let (ct, suv) = load_images(dir, id)?;
    Ok(Case {
        id: id.to_string(),
        ct,
        suv,
        label: load_label(dir, id)?,
    })
}

pub fn save_case(dir: &Path, case: &Case) -> Result<()> {
    let p = case_paths(dir, &case.id);
    write(&case.id, &case.ct, &p.ct)?;
    write(&case.id, &case.suv, &p.suv)?;
    write(&case.id, &case.label, &p.seg)
}

fn volume_err(case: &str) -> impl FnOnce(VolumeError) -> CaseError + '_ {
    move |source| CaseError::Volume {
        case: case.to_string(),
        source,
    }
}

/// Brings CT and SUV onto the working grid and windows them to `[0, 1]`.
/// The SUV grid is the reference; a CT on a different grid is first
/// resampled onto it.
pub fn preprocess_images(
    id: &str,
    ct: &Volume,
    suv: &Volume,
    p: &Preprocessing,
) -> Result<(Volume, Volume)> {
    let ct = resample_onto(ct, suv, Interpolation::Trilinear).map_err(volume_err(id))?;
    let ct = resample(&ct, p.spacing, Interpolation::Trilinear).map_err(volume_err(id))?;
    let suv = resample(suv, p.spacing, Interpolation::Trilinear).map_err(volume_err(id))?;
    Ok((
        window_normalize(&ct, p.ct_window),
        window_normalize(&suv, p.suv_window),
    ))
}

/// Preprocesses images and resamples the mask with nearest-neighbour
/// interpolation onto the same working grid.
pub fn preprocess_case(case: &Case, p: &Preprocessing) -> Result<Case> {
    let (ct, suv) = preprocess_images(&case.id, &case.ct, &case.suv, p)?;
    let label = resample_onto(&case.label, &case.suv, Interpolation::Nearest)
        .map_err(volume_err(&case.id))?;
    let label =
        resample(&label, p.spacing, Interpolation::Nearest).map_err(volume_err(&case.id))?;
    let binary = label
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(Case {
        id: case.id.clone(),
        ct,
        suv,
        label: label.like(binary).map_err(volume_err(&case.id))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case() -> Case {
        let dims = [9, 7, 5];
        let n = 9 * 7 * 5;
        let sp = [1.5, 1.5, 2.5];
        let ct = Volume::new(
            dims,
            sp,
            [0.0; 3],
            (0..n).map(|i| (i as f32) - 100.0).collect(),
        )
        .unwrap();
        let suv = Volume::new(dims, sp, [0.0; 3], vec![7.5; n]).unwrap();
        let label = Volume::new(
            dims,
            sp,
            [0.0; 3],
            (0..n).map(|i| (i % 4 == 0) as u8 as f32).collect(),
        )
        .unwrap();
        Case {
            id: "c0".into(),
            ct,
            suv,
            label,
        }
    }

    #[test]
    fn preprocessing_aligns_grids_and_windows() {
        let p = preprocess_case(&case(), &Preprocessing::default()).unwrap();
        assert_eq!(p.ct.spacing(), [2.0, 2.0, 3.0]);
        assert!(p.ct.same_grid(&p.suv) && p.ct.same_grid(&p.label));
        assert!(p.ct.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.suv.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(p.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn save_load_and_list() {
        let dir = tempfile::tempdir().unwrap();
        let c = case();
        save_case(dir.path(), &c).unwrap();
        let mut other = c.clone();
        other.id = "a1".into();
        save_case(dir.path(), &other).unwrap();
        assert_eq!(
            list_cases(dir.path()).unwrap(),
            vec!["a1".to_string(), "c0".to_string()]
        );
        assert_eq!(load_case(dir.path(), "c0").unwrap(), c);
        let err = load_case(dir.path(), "missing").unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
