//! Lesion-level evaluation: foreground Dice and connected-component
//! false-positive / false-negative volumes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask is not binary: voxel {index} holds {value}")]
    NonBinary { index: usize, value: f32 },
    #[error(transparent)]
    Grid(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Voxel neighbourhood used to join foreground voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Shared faces.
    Six,
    /// Shared faces or edges.
    Eighteen,
    /// Shared faces, edges or corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in x-fastest raster order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let allowed = match self {
                        Self::Six => manhattan == 1,
                        Self::Eighteen => (1..=2).contains(&manhattan),
                        Self::TwentySix => manhattan >= 1,
                    };
                    let before = (dz, dy, dx) < (0, 0, 0);
                    if allowed && before {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {v}")),
        }
    }
}

/// Component labelling of a binary mask: 0 is background, components are
/// numbered 1..=K in order of their first voxel in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledComponents {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl LabeledComponents {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn ensure_binary(mask: &Volume) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(MetricsError::NonBinary {
            index,
            value: mask.data()[index],
        }),
        None => Ok(()),
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

pub fn connected_components(
    mask: &Volume,
    connectivity: Connectivity,
) -> Result<LabeledComponents> {
    ensure_binary(mask)?;
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; data.len()];
    // parent[0] is unused so provisional labels start at 1
    let mut parent: Vec<u32> = vec![0];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if data[i] == 0.0 {
                    continue;
                }
                let mut label = 0u32;
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let q = provisional[qx as usize + nx * (qy as usize + ny * qz as usize)];
                    if q == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, q);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, q));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }
    // Dense relabelling in raster order of first appearance.
    let mut dense = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if dense[root] == 0 {
            sizes.push(0);
            dense[root] = sizes.len() as u32;
        }
        *l = dense[root];
        sizes[*l as usize - 1] += 1;
    }
    Ok(LabeledComponents {
        labels: provisional,
        sizes,
    })
}

/// `2|P ∩ G| / (|P| + |G|)`, or 1 when both masks are empty.
pub fn dice_score(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.ensure_same_grid(gt, "dice_score")?;
    ensure_binary(pred)?;
    ensure_binary(gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == 1.0 && g == 1.0) as usize;
        total += (p == 1.0) as usize + (g == 1.0) as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Volume (mL) of components of `source` that share no voxel with `other`.
fn unmatched_component_volume(
    source: &Volume,
    other: &Volume,
    connectivity: Connectivity,
) -> Result<f64> {
    ensure_binary(other)?;
    let cc = connected_components(source, connectivity)?;
    let mut touched = vec![false; cc.count() + 1];
    for (&l, &o) in cc.labels.iter().zip(other.data()) {
        if l != 0 && o == 1.0 {
            touched[l as usize] = true;
        }
    }
    let voxels: usize = cc
        .sizes
        .iter()
        .enumerate()
        .filter(|&(k, _)| !touched[k + 1])
        .map(|(_, &s)| s)
        .sum();
    Ok(voxels as f64 * source.voxel_volume_ml())
}

/// Total volume (mL) of predicted components that do not overlap the ground truth.
pub fn false_positive_volume(
    pred: &Volume,
    gt: &Volume,
    connectivity: Connectivity,
) -> Result<f64> {
    pred.ensure_same_grid(gt, "false_positive_volume")?;
    unmatched_component_volume(pred, gt, connectivity)
}

/// Total volume (mL) of ground-truth components missed entirely by the prediction.
pub fn false_negative_volume(
    pred: &Volume,
    gt: &Volume,
    connectivity: Connectivity,
) -> Result<f64> {
    pred.ensure_same_grid(gt, "false_negative_volume")?;
    unmatched_component_volume(gt, pred, connectivity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case: String,
    pub dice: f64,
    pub fp_volume_ml: f64,
    pub fn_volume_ml: f64,
}

pub fn evaluate_case(
    case: &str,
    pred: &Volume,
    gt: &Volume,
    connectivity: Connectivity,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        case: case.to_string(),
        dice: dice_score(pred, gt)?,
        fp_volume_ml: false_positive_volume(pred, gt, connectivity)?,
        fn_volume_ml: false_negative_volume(pred, gt, connectivity)?,
    })
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cases: usize,
    pub dice: MeanStd,
    pub fp_volume_ml: MeanStd,
    pub fn_volume_ml: MeanStd,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    let col =
        |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    MetricsSummary {
        cases: reports.len(),
        dice: col(|r| r.dice),
        fp_volume_ml: col(|r| r.fp_volume_ml),
        fn_volume_ml: col(|r| r.fn_volume_ml),
    }
}

pub const CSV_HEADER: &str = "case,dice,fp_volume_ml,fn_volume_ml";

/// Per-case rows under [`CSV_HEADER`].
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.case, r.dice, r.fp_volume_ml, r.fn_volume_ml
        ));
    }
    out
}

/// One JSON object per case followed by a summary object.
pub fn to_json_lines(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    let summary = serde_json::json!({ "summary": summarize(reports) });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}
