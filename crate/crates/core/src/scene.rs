//! Synthetic BEV scenes, per-agent observations, the ego-frame warp and
//! ground-truth masks.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{WarpTable, WarpTap};
use crate::config::{FamilySpec, GridConfig, PoseSpec, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{intersection_area, wrap_angle, AgentPose, GtBox};
use crate::tensor::Tensor;

/// Raw observation channels: occupancy, occupancy-weighted cos and sin of
/// the relative heading, in-range indicator.
pub const RAW_CHANNELS: usize = 4;

/// Rejection-sampling budget per object.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Snap distance for sampling coordinates that are integral up to rounding.
const SNAP: f64 = 1e-6;

/// SplitMix64 finalizer over `a ^ b`; used to derive child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<GtBox>,
    pub seed: u64,
}

fn inside_extent(b: &GtBox, grid: &GridConfig) -> bool {
    let (ex, ey) = (grid.extent_x(), grid.extent_y());
    b.corners()
        .iter()
        .all(|&(x, y)| x.abs() <= ex && y.abs() <= ey)
}

fn sample_box(rng: &mut ChaCha8Rng, cfg: &SceneConfig, grid: &GridConfig) -> GtBox {
    let (ex, ey) = (grid.extent_x() as f32, grid.extent_y() as f32);
    let width = rng.random_range(cfg.width_range[0]..=cfg.width_range[1]);
    let length = rng.random_range(cfg.length_range[0]..=cfg.length_range[1]);
    let heading = if rng.random::<f32>() < cfg.axis_aligned_fraction {
        let axis = rng.random_range(0..4u8) as f32 * core::f32::consts::FRAC_PI_2;
        let j = if cfg.heading_jitter > 0.0 {
            rng.random_range(-cfg.heading_jitter..=cfg.heading_jitter)
        } else {
            0.0
        };
        axis + j
    } else {
        rng.random_range(-core::f32::consts::PI..core::f32::consts::PI)
    };
    GtBox {
        x: rng.random_range(-ex..ex),
        y: rng.random_range(-ey..ey),
        width,
        length,
        heading: wrap_angle(heading as f64) as f32,
    }
}

/// Places `n` non-overlapping boxes fully inside the grid extent.
pub fn place_objects(
    n: usize,
    cfg: &SceneConfig,
    grid: &GridConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GtBox>> {
    let margin = cfg.spacing / 2.0;
    let mut placed: Vec<GtBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let b = sample_box(rng, cfg, grid);
            if !inside_extent(&b, grid) {
                continue;
            }
            let grown = b.inflated(margin);
            if placed
                .iter()
                .all(|p| intersection_area(&grown, &p.inflated(margin)) == 0.0)
            {
                ok = Some(b);
                break;
            }
        }
        match ok {
            Some(b) => placed.push(b),
            None => {
                return Err(Error::PlacementFailed {
                    requested: n,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(placed)
}

pub fn generate_scene(cfg: &SceneConfig, grid: &GridConfig, seed: u64) -> Result<Scene> {
    let mut rng = rng_from(mix_seed(seed, 0x5CE4E));
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    Ok(Scene {
        objects: place_objects(n, cfg, grid, &mut rng)?,
        seed,
    })
}

/// One pose per neighbor slot: the nominal placement plus uniform jitter.
pub fn sample_poses(slots: &[PoseSpec], seed: u64) -> Vec<AgentPose> {
    let mut rng = rng_from(mix_seed(seed, 0x9053));
    slots
        .iter()
        .map(|s| {
            let mut u = |a: f64| {
                if a > 0.0 {
                    rng.random_range(-a..=a)
                } else {
                    0.0
                }
            };
            let (dx, dy, dyaw) = (u(s.jitter_xy), u(s.jitter_xy), u(s.jitter_yaw));
            AgentPose {
                x: s.x + dx,
                y: s.y + dy,
                yaw: wrap_angle(s.yaw + dyaw),
            }
        })
        .collect()
}

/// Objects whose center lies within `range` of the agent.
pub fn visible_objects(objects: &[GtBox], pose: &AgentPose, range: f32) -> Vec<GtBox> {
    let inv = pose.inverse();
    objects
        .iter()
        .filter(|b| {
            let (x, y) = inv.apply(b.x as f64, b.y as f64);
            (x * x + y * y).sqrt() <= range as f64
        })
        .copied()
        .collect()
}

/// Family-specific spurious returns in the sensor frame. Fixed per family.
pub fn phantom_boxes(family: &FamilySpec, scene: &SceneConfig) -> Vec<GtBox> {
    let mut rng = rng_from(mix_seed(family.seed, 0xFA27));
    let range = family.sensor.range;
    let mut out: Vec<GtBox> = Vec::with_capacity(family.sensor.phantoms);
    let mut attempts = 0;
    while out.len() < family.sensor.phantoms && attempts < MAX_PLACEMENT_ATTEMPTS {
        attempts += 1;
        let d = rng.random_range(0.35 * range..0.85 * range);
        let a = rng.random_range(-core::f32::consts::PI..core::f32::consts::PI);
        let b = GtBox {
            x: d * a.cos(),
            y: d * a.sin(),
            width: (scene.width_range[0] + scene.width_range[1]) / 2.0,
            length: (scene.length_range[0] + scene.length_range[1]) / 2.0,
            heading: rng.random_range(0..4u8) as f32 * core::f32::consts::FRAC_PI_2
                - core::f32::consts::PI / 2.0,
        };
        let g = b.inflated(scene.spacing);
        if out.iter().all(|p| intersection_area(&g, p) == 0.0) {
            out.push(b);
        }
    }
    out
}

/// An agent's raw sensor raster in its own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_id: u32,
    pub type_id: String,
    /// `[RAW_CHANNELS, H, W]`.
    pub raw: Tensor,
}

/// Renders the scene from `pose` through the family's sensor signature.
pub fn observe(
    scene: &Scene,
    grid: &GridConfig,
    scene_cfg: &SceneConfig,
    pose: &AgentPose,
    family: &FamilySpec,
    agent_id: u32,
    seed: u64,
) -> Observation {
    let (h, w) = (grid.height, grid.width);
    let hw = h * w;
    let s = &family.sensor;
    let res = grid.resolution as f64;
    let phantoms = phantom_boxes(family, scene_cfg);
    let mut raw = vec![0.0f32; RAW_CHANNELS * hw];
    let mut dist = vec![0.0f64; hw];
    for r in 0..h {
        for c in 0..w {
            let (lx, ly) = grid.cell_center(r, c);
            let cell = r * w + c;
            dist[cell] = (lx * lx + ly * ly).sqrt();
            let (mut occ, mut cs, mut sn) = (0.0f64, 0.0f64, 0.0f64);
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let (px, py) = (lx + ox * res, ly + oy * res);
                let (ex, ey) = pose.apply(px, py);
                let hit = scene
                    .objects
                    .iter()
                    .find(|b| b.contains(ex, ey))
                    .map(|b| wrap_angle(b.heading as f64 - pose.yaw))
                    .or_else(|| {
                        phantoms
                            .iter()
                            .find(|b| b.contains(px, py))
                            .map(|b| b.heading as f64)
                    });
                if let Some(theta) = hit {
                    occ += 0.25;
                    cs += 0.25 * theta.cos();
                    sn += 0.25 * theta.sin();
                }
            }
            raw[cell] = occ as f32;
            raw[hw + cell] = cs as f32;
            raw[2 * hw + cell] = sn as f32;
        }
    }
    if s.blur_radius > 0 {
        for ch in 0..3 {
            box_blur(&mut raw[ch * hw..(ch + 1) * hw], h, w, s.blur_radius);
        }
    }
    let mut rng = rng_from(mix_seed(seed, family.seed));
    let range = s.range as f64;
    for cell in 0..hw {
        let d = dist[cell];
        // Draws happen for every cell so the stream does not depend on the scene.
        let noise: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let dropped = rng.random::<f32>() < s.far_dropout && d > range * 2.0 / 3.0;
        if d > range || dropped {
            for ch in 0..RAW_CHANNELS {
                raw[ch * hw + cell] = 0.0;
            }
            continue;
        }
        raw[cell] += (s.range_bias as f64 * d / range) as f32;
        for ch in 0..3 {
            raw[ch * hw + cell] += (noise[ch] * s.noise_std as f64) as f32;
        }
        raw[3 * hw + cell] = 1.0;
        for ch in 0..RAW_CHANNELS {
            raw[ch * hw + cell] *= s.gain[ch];
        }
    }
    Observation {
        agent_id,
        type_id: family.id.clone(),
        raw: Tensor::new(&[RAW_CHANNELS, h, w], raw).expect("observation shape"),
    }
}

/// Mean over the in-bounds `(2r+1)^2` window.
fn box_blur(plane: &mut [f32], h: usize, w: usize, r: usize) {
    let src = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut acc = 0.0f32;
            for yy in y0..=y1 {
                acc += src[yy * w + x0..=yy * w + x1].iter().sum::<f32>();
            }
            plane[y * w + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
        }
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear inverse-warp taps taking an agent-frame grid to the ego grid.
/// Samples outside the source grid read zero.
pub fn warp_table(grid: &GridConfig, pose: &AgentPose) -> WarpTable {
    let (h, w) = (grid.height, grid.width);
    let inv = pose.inverse();
    let mut taps = Vec::with_capacity(4 * h * w);
    for r in 0..h {
        for c in 0..w {
            let (ex, ey) = grid.cell_center(r, c);
            let (ax, ay) = inv.apply(ex, ey);
            let (sr, sc) = grid.to_cell(ax, ay);
            let (sr, sc) = (snap(sr), snap(sc));
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let (rr, cc) = (r0 as i64 + dr, c0 as i64 + dc);
                    let wt = wr * wc;
                    if wt == 0.0 || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    taps.push(WarpTap {
                        out: (r * w + c) as u32,
                        src: (rr as usize * w + cc as usize) as u32,
                        weight: wt,
                    });
                }
            }
        }
    }
    WarpTable {
        in_h: h,
        in_w: w,
        out_h: h,
        out_w: w,
        taps,
    }
}

/// Applies a warp table outside any graph.
pub fn apply_warp(x: &Tensor, table: &WarpTable) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if (h, w) != (table.in_h, table.in_w) {
        return Err(Error::ShapeMismatch {
            op: "warp",
            expected: vec![table.in_h, table.in_w],
            found: vec![h, w],
        });
    }
    let plane = table.out_h * table.out_w;
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        let (sp, op) = (
            &x.data()[ch * h * w..(ch + 1) * h * w],
            &mut out[ch * plane..(ch + 1) * plane],
        );
        for t in &table.taps {
            op[t.out as usize] += t.weight as f32 * sp[t.src as usize];
        }
    }
    Tensor::new(&[c, table.out_h, table.out_w], out)
}

/// One agent's feature map with its metadata. `pose` maps the map's frame
/// into the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeature {
    pub agent_id: u32,
    pub type_id: String,
    pub pose: AgentPose,
    pub map: Tensor,
}

/// Resamples `f` into the frame its pose points to. The identity pose
/// returns the map unchanged.
pub fn warp_to_ego(f: &BevFeature, grid: &GridConfig) -> Result<BevFeature> {
    let map = if f.pose.is_identity() {
        f.map.clone()
    } else {
        apply_warp(&f.map, &warp_table(grid, &f.pose))?
    };
    Ok(BevFeature {
        pose: AgentPose::IDENTITY,
        map,
        ..f.clone()
    })
}

pub fn shared_warp(grid: &GridConfig, pose: &AgentPose) -> Option<Arc<WarpTable>> {
    (!pose.is_identity()).then(|| Arc::new(warp_table(grid, pose)))
}

/// Scale-0 raster `[1, H, W]`: cells whose center lies inside a box.
pub fn raster(objects: &[GtBox], grid: &GridConfig) -> Tensor {
    let (h, w) = (grid.height, grid.width);
    Tensor::from_fn(&[1, h, w], |i| {
        let (x, y) = grid.cell_center(i / w, i % w);
        if objects.iter().any(|b| b.contains(x, y)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Repeated 2x2 max-pooling of a `[1, H, W]` raster; entry `l-1` is scale `l`.
pub fn pool_masks(raster: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (_, h, w) = raster.dims3()?;
    if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
        return Err(Error::Precondition(alloc::format!(
            "grid {h}x{w} not divisible by 2^{levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = raster.clone();
    for _ in 0..levels {
        let (_, ch, cw) = cur.dims3()?;
        let (oh, ow) = (ch / 2, cw / 2);
        let src = cur.data();
        let next = Tensor::from_fn(&[1, oh, ow], |i| {
            let (y, x) = (2 * (i / ow), 2 * (i % ow));
            src[y * cw + x]
                .max(src[y * cw + x + 1])
                .max(src[(y + 1) * cw + x])
                .max(src[(y + 1) * cw + x + 1])
        });
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Binary masks for scales `1..=levels`.
pub fn gt_masks(objects: &[GtBox], grid: &GridConfig, levels: usize) -> Result<Vec<Tensor>> {
    pool_masks(&raster(objects, grid), levels)
}

/// Mean over channels of KL(N_a || N_b) between Gaussian fits of the
/// per-channel statistics of two feature sets. Channels beyond the smaller
/// count are ignored.
pub fn domain_gap_kl(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let stats = |xs: &[Tensor], c: usize| -> Result<(f64, f64)> {
        let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
        for x in xs {
            let (_, h, w) = x.dims3()?;
            for &v in &x.data()[c * h * w..(c + 1) * h * w] {
                s += v as f64;
                s2 += v as f64 * v as f64;
                n += 1;
            }
        }
        let m = s / n as f64;
        Ok((m, (s2 / n as f64 - m * m).max(1e-8)))
    };
    let ca = a.first().ok_or(Error::Empty("domain_gap_kl"))?.dims3()?.0;
    let cb = b.first().ok_or(Error::Empty("domain_gap_kl"))?.dims3()?.0;
    let c = ca.min(cb);
    let mut total = 0.0;
    for ch in 0..c {
        let ((ma, va), (mb, vb)) = (stats(a, ch)?, stats(b, ch)?);
        total += 0.5 * (vb / va).ln() + (va + (ma - mb) * (ma - mb)) / (2.0 * vb) - 0.5;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::geometry::rotated_iou;

    #[test]
    fn same_seed_same_scene() {
        let cfg = ExperimentConfig::desk();
        let a = generate_scene(&cfg.scene, &cfg.grid, 7).unwrap();
        let b = generate_scene(&cfg.scene, &cfg.grid, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&cfg.scene, &cfg.grid, 8).unwrap());
    }

    #[test]
    fn twenty_objects_do_not_overlap() {
        let mut cfg = ExperimentConfig::desk();
        cfg.grid = GridConfig {
            height: 64,
            width: 128,
            resolution: 0.4,
        };
        cfg.scene.min_objects = 20;
        cfg.scene.max_objects = 20;
        for seed in 0..5 {
            let s = generate_scene(&cfg.scene, &cfg.grid, seed).unwrap();
            assert_eq!(s.objects.len(), 20);
            for i in 0..20 {
                assert!(inside_extent(&s.objects[i], &cfg.grid));
                for j in i + 1..20 {
                    assert_eq!(rotated_iou(&s.objects[i], &s.objects[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn crowded_extent_fails_placement() {
        let mut cfg = ExperimentConfig::desk();
        cfg.grid = GridConfig {
            height: 8,
            width: 8,
            resolution: 0.8,
        };
        cfg.scene.min_objects = 30;
        cfg.scene.max_objects = 30;
        assert!(matches!(
            generate_scene(&cfg.scene, &cfg.grid, 1),
            Err(Error::PlacementFailed { .. })
        ));
    }

    #[test]
    fn empty_scene_has_empty_masks() {
        let cfg = ExperimentConfig::desk();
        for m in gt_masks(&[], &cfg.grid, 3).unwrap() {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn object_at_origin_lights_center_cells() {
        let cfg = ExperimentConfig::desk();
        let scene = Scene {
            objects: vec![GtBox {
                x: 0.0,
                y: 0.0,
                width: 2.0,
                length: 4.0,
                heading: 0.0,
            }],
            seed: 0,
        };
        let o = observe(
            &scene,
            &cfg.grid,
            &cfg.scene,
            &AgentPose::IDENTITY,
            cfg.ego().unwrap(),
            0,
            3,
        );
        let (h, w) = (cfg.grid.height, cfg.grid.width);
        for (r, c) in [(h / 2 - 1, w / 2 - 1), (h / 2, w / 2)] {
            assert!(o.raw.get3(0, r, c) > 0.5);
        }
    }

    #[test]
    fn range_limit_zeroes_far_cells() {
        let cfg = ExperimentConfig::desk();
        let scene = generate_scene(&cfg.scene, &cfg.grid, 4).unwrap();
        let fam = cfg.family("m4").unwrap();
        let o = observe(
            &scene,
            &cfg.grid,
            &cfg.scene,
            &AgentPose::IDENTITY,
            fam,
            1,
            9,
        );
        for r in 0..cfg.grid.height {
            for c in 0..cfg.grid.width {
                let (x, y) = cfg.grid.cell_center(r, c);
                if (x * x + y * y).sqrt() > fam.sensor.range as f64 {
                    for ch in 0..RAW_CHANNELS {
                        assert_eq!(o.raw.get3(ch, r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let cfg = ExperimentConfig::desk();
        let map = Tensor::from_fn(&[2, cfg.grid.height, cfg.grid.width], |i| {
            (i as f32 * 0.37).sin()
        });
        let f = BevFeature {
            agent_id: 0,
            type_id: "m1".into(),
            pose: AgentPose::IDENTITY,
            map: map.clone(),
        };
        assert_eq!(warp_to_ego(&f, &cfg.grid).unwrap().map, map);
        let t = warp_table(&cfg.grid, &AgentPose::IDENTITY);
        assert_eq!(apply_warp(&map, &t).unwrap(), map);
    }

    #[test]
    fn integer_translation_shifts_with_zero_fill() {
        let grid = GridConfig {
            height: 8,
            width: 16,
            resolution: 0.8,
        };
        let map = Tensor::from_fn(&[1, 8, 16], |i| 1.0 + i as f32);
        let (k, j) = (3i64, -2i64);
        let pose = AgentPose {
            x: k as f64 * 0.8,
            y: j as f64 * 0.8,
            yaw: 0.0,
        };
        let out = apply_warp(&map, &warp_table(&grid, &pose)).unwrap();
        for r in 0..8i64 {
            for c in 0..16i64 {
                let (sr, sc) = (r - j, c - k);
                let want = if (0..8).contains(&sr) && (0..16).contains(&sc) {
                    map.get3(0, sr as usize, sc as usize)
                } else {
                    0.0
                };
                assert_eq!(out.get3(0, r as usize, c as usize), want);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let n = 12;
        let grid = GridConfig {
            height: n,
            width: n,
            resolution: 0.5,
        };
        let map = Tensor::from_fn(&[2, n, n], |i| ((i * 7919) % 97) as f32 / 97.0);
        let pose = AgentPose {
            x: 0.0,
            y: 0.0,
            yaw: core::f64::consts::FRAC_PI_2,
        };
        let out = apply_warp(&map, &warp_table(&grid, &pose)).unwrap();
        for ch in 0..2 {
            for r in 0..n {
                for c in 0..n {
                    assert!((out.get3(ch, r, c) - map.get3(ch, n - 1 - c, r)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn masks_match_block_oracle() {
        let cfg = ExperimentConfig::desk();
        let scene = generate_scene(&cfg.scene, &cfg.grid, 11).unwrap();
        let base = raster(&scene.objects, &cfg.grid);
        let masks = gt_masks(&scene.objects, &cfg.grid, 3).unwrap();
        for (l, m) in masks.iter().enumerate() {
            let b = 1usize << (l + 1);
            let (_, mh, mw) = m.dims3().unwrap();
            for r in 0..mh {
                for c in 0..mw {
                    let any = (0..b)
                        .any(|dy| (0..b).any(|dx| base.get3(0, r * b + dy, c * b + dx) > 0.0));
                    assert_eq!(m.get3(0, r, c) > 0.0, any);
                }
            }
        }
    }

    #[test]
    fn single_cell_survives_every_scale() {
        let grid = GridConfig {
            height: 16,
            width: 32,
            resolution: 1.0,
        };
        let mut r = Tensor::zeros(&[1, 16, 32]);
        r.data_mut()[5 * 32 + 19] = 1.0;
        for m in pool_masks(&r, 3).unwrap() {
            assert_eq!(m.data().iter().filter(|&&v| v > 0.0).count(), 1);
        }
        assert!(pool_masks(&Tensor::zeros(&[1, grid.height, 12]), 3).is_err());
    }

    #[test]
    fn families_produce_different_rasters() {
        let cfg = ExperimentConfig::desk();
        let scene = generate_scene(&cfg.scene, &cfg.grid, 21).unwrap();
        let a = observe(
            &scene,
            &cfg.grid,
            &cfg.scene,
            &AgentPose::IDENTITY,
            cfg.family("m1").unwrap(),
            0,
            5,
        );
        let b = observe(
            &scene,
            &cfg.grid,
            &cfg.scene,
            &AgentPose::IDENTITY,
            cfg.family("m2").unwrap(),
            0,
            5,
        );
        let (x, y) = (a.raw.data(), b.raw.data());
        let n = x.len() as f64;
        let (mx, my) = (
            x.iter().map(|&v| v as f64).sum::<f64>() / n,
            y.iter().map(|&v| v as f64).sum::<f64>() / n,
        );
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (&p, &q) in x.iter().zip(y) {
            let (dp, dq) = (p as f64 - mx, q as f64 - my);
            sxy += dp * dq;
            sxx += dp * dp;
            syy += dq * dq;
        }
        assert!(sxy / (sxx * syy).sqrt() < 0.95);
    }
}
