//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::Arc;

use petseg_core::tensor::{Graph, Tensor, Var};
use petseg_core::Volume;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Largest relative deviation between the graph gradient and a central
/// finite difference over every element of every input.
///
/// `loss` receives one gradient-tracking leaf per input and must return a
/// scalar.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], loss: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&g, &leaves);
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|v| v.grad().expect("leaf grad"))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let leaves: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        loss(&g, &leaves).value().item().expect("scalar loss")
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].numel() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `sum(x * r)` with fixed random weights `r`, turning any tensor output into
/// a scalar with a non-trivial upstream gradient.
pub fn project<'g>(x: Var<'g, f64>, weights: &Arc<Tensor<f64>>) -> Var<'g, f64> {
    let r = x.graph().constant(weights.clone());
    x.mul(r).expect("projection shape").sum()
}

pub fn uniform_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values in `lo..hi` with magnitude at least `gap`.
pub fn away_from_zero<R: Rng>(shape: &[usize], hi: f64, gap: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Neighbour offsets for 6-, 18- or 26-connectivity by explicit enumeration.
pub fn neighbours(connectivity: u8) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                let keep = match connectivity {
                    6 => nonzero == 1,
                    18 => nonzero == 1 || nonzero == 2,
                    26 => nonzero >= 1,
                    _ => panic!("bad connectivity"),
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill. Components are numbered from 1 in the order
/// their first voxel is met when scanning x fastest, then y, then z.
pub fn flood_fill(mask: &Volume, connectivity: u8) -> Vec<u32> {
    let [nx, ny, nz] = mask.dims();
    let offsets = neighbours(connectivity);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) != 1.0 || labels[idx(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                labels[idx(x, y, z)] = next;
                let mut queue = VecDeque::from([(x, y, z)]);
                while let Some((cx, cy, cz)) = queue.pop_front() {
                    for [dx, dy, dz] in &offsets {
                        let (qx, qy, qz) = (cx as i64 + dx, cy as i64 + dy, cz as i64 + dz);
                        if qx < 0
                            || qy < 0
                            || qz < 0
                            || qx >= nx as i64
                            || qy >= ny as i64
                            || qz >= nz as i64
                        {
                            continue;
                        }
                        let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                        if mask.get(qx, qy, qz) == 1.0 && labels[idx(qx, qy, qz)] == 0 {
                            labels[idx(qx, qy, qz)] = next;
                            queue.push_back((qx, qy, qz));
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Dice from voxel index sets.
pub fn oracle_dice(pred: &Volume, gt: &Volume) -> f64 {
    use std::collections::BTreeSet;
    let set =
        |v: &Volume| -> BTreeSet<usize> { (0..v.len()).filter(|&i| v.data()[i] == 1.0).collect() };
    let (p, g) = (set(pred), set(gt));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

/// Volume (mL) of flood-filled components of `source` disjoint from `other`.
pub fn oracle_unmatched_volume(source: &Volume, other: &Volume, connectivity: u8) -> f64 {
    use std::collections::{BTreeMap, BTreeSet};
    let labels = flood_fill(source, connectivity);
    let mut members: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            members.entry(l).or_default().insert(i);
        }
    }
    let other_set: BTreeSet<usize> = (0..other.len())
        .filter(|&i| other.data()[i] == 1.0)
        .collect();
    let voxels: usize = members
        .values()
        .filter(|m| m.is_disjoint(&other_set))
        .map(|m| m.len())
        .sum();
    voxels as f64 * source.voxel_volume_ml()
}

/// Random binary mask made of a few boxes plus scattered voxels, so that
/// components of every connectivity class appear.
pub fn random_mask<R: Rng>(dims: [usize; 3], spacing: [f64; 3], rng: &mut R) -> Volume {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0f32; n];
    let density = rng.random_range(0.0..0.25);
    for v in data.iter_mut() {
        if rng.random_bool(density) {
            *v = 1.0;
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + rng.random_range(1..6)).min(dims[a]));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    data[x + dims[0] * (y + dims[1] * z)] = 1.0;
                }
            }
        }
    }
    Volume::new(dims, spacing, [0.0; 3], data).expect("valid mask grid")
}
