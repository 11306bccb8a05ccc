//! Deterministic synthetic scenes.
//!
//! Each scene is a lattice of nadir cameras with axis-aligned rectangular
//! footprints (one scene unit per pixel). The footprint edges split the ground
//! plane into cells; every cell receives a point count proportional to its
//! area, and a point is observed by exactly the cameras whose footprint holds
//! its cell. Geometric similarity is therefore a closed-form sum over shared
//! cells.
//!
//! Feature maps sample a per-scene texture field (a mixture of Gaussian blobs
//! with positive, scene-biased amplitude vectors), so overlapping footprints
//! see similar activations. Base descriptors add a nuisance component along
//! directions shared by all scenes.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::{
    Correspondence, DescriptorSet, FeatureMap, ImageId, ImagePair, ImageRecord, MatchSet, Observation, Point3D,
    PointId, Reconstruction, Scene, SceneId,
};

/// Inlier counts are `round(GS * INLIER_RATIO * (1 + jitter))`.
pub const INLIER_RATIO: f64 = 0.8;
pub const INLIER_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Fraction of a footprint shared with its lattice neighbor, in (0, 1).
    pub overlap: f64,
    /// Points per `step_x * step_y` of covered ground.
    pub points_per_cell: usize,
    /// Feature-map channels and base-descriptor dimension.
    pub descriptor_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub map_height: usize,
    pub map_width: usize,
    /// Number of shared nuisance directions in base descriptors.
    pub nuisance_rank: usize,
    /// Standard deviation of the nuisance coefficients.
    pub nuisance_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 6,
            grid_rows: 4,
            grid_cols: 4,
            overlap: 0.6,
            points_per_cell: 60,
            descriptor_dim: 32,
            noise_sigma: 0.05,
            seed: 0,
            image_width_px: 320,
            image_height_px: 240,
            map_height: 6,
            map_width: 8,
            nuisance_rank: 4,
            nuisance_sigma: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return bad("overlap must lie strictly between 0 and 1");
        }
        if self.scenes == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("scene and grid counts must be positive");
        }
        if self.points_per_cell == 0 || self.descriptor_dim == 0 || self.map_height == 0 || self.map_width == 0 {
            return bad("point, descriptor and map sizes must be positive");
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return bad("image size must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.nuisance_sigma >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }

    fn step(&self) -> (f64, f64) {
        (
            f64::from(self.image_width_px) * (1.0 - self.overlap),
            f64::from(self.image_height_px) * (1.0 - self.overlap),
        )
    }
}

/// Ground rectangle `[x0, x1] x [y0, y1]` seen by one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersection_area(&self, other: &Footprint) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }
}

/// Generator-side truth for one same-scene pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTruth {
    /// Closed-form count of common points.
    pub gs: u32,
    /// Footprint intersection area in scene units.
    pub overlap_area: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub reconstruction: Reconstruction,
    pub matches: MatchSet,
    pub feature_maps: BTreeMap<ImageId, FeatureMap>,
    pub base_descriptors: DescriptorSet,
    pub footprints: BTreeMap<ImageId, Footprint>,
    /// Every same-scene pair with a non-empty footprint intersection.
    pub truth: BTreeMap<ImagePair, PairTruth>,
}

impl SynthOutput {
    pub fn gs(&self, a: ImageId, b: ImageId) -> u32 {
        ImagePair::new(a, b).and_then(|p| self.truth.get(&p)).map_or(0, |t| t.gs)
    }

    pub fn name_of(&self, id: ImageId) -> &str {
        &self.reconstruction.image(id).expect("generated image").name
    }
}

/// One cell of the footprint arrangement.
struct Cell {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    cameras: Vec<usize>,
}

fn breakpoints(starts: impl Iterator<Item = f64>, size: f64) -> Vec<f64> {
    let mut v: Vec<f64> = starts.flat_map(|s| [s, s + size]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn arrangement(footprints: &[Footprint], cfg: &SynthConfig) -> Vec<Cell> {
    let (sx, sy) = cfg.step();
    let xs = breakpoints((0..cfg.grid_cols).map(|c| c as f64 * sx), f64::from(cfg.image_width_px));
    let ys = breakpoints((0..cfg.grid_rows).map(|r| r as f64 * sy), f64::from(cfg.image_height_px));
    let mut cells = Vec::new();
    for wy in ys.windows(2) {
        for wx in xs.windows(2) {
            let (mx, my) = ((wx[0] + wx[1]) / 2.0, (wy[0] + wy[1]) / 2.0);
            let cameras: Vec<usize> = footprints
                .iter()
                .enumerate()
                .filter(|(_, f)| f.contains(mx, my))
                .map(|(i, _)| i)
                .collect();
            if !cameras.is_empty() {
                cells.push(Cell {
                    x0: wx[0],
                    y0: wy[0],
                    x1: wx[1],
                    y1: wy[1],
                    cameras,
                });
            }
        }
    }
    cells
}

/// Positive texture field of one scene.
struct Texture {
    centers: Vec<[f64; 2]>,
    amplitudes: Vec<Vec<f64>>,
    inv_two_sigma_sq: f64,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, cfg: &SynthConfig, extent: [f64; 2]) -> Self {
        let d = cfg.descriptor_dim;
        let (sx, sy) = cfg.step();
        let blobs = (2.0 * extent[0] * extent[1] / (sx * sy)).ceil().max(4.0) as usize;
        let base: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let centers = (0..blobs)
            .map(|_| [rng.random_range(0.0..extent[0]), rng.random_range(0.0..extent[1])])
            .collect();
        let amplitudes = (0..blobs)
            .map(|_| base.iter().map(|b| (b + 0.8 * normal(rng)).powi(2)).collect())
            .collect();
        let sigma = 0.3 * f64::from(cfg.image_width_px.min(cfg.image_height_px));
        Self {
            centers,
            amplitudes,
            inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
        }
    }

    fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, a) in self.centers.iter().zip(&self.amplitudes) {
            let w = (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) * self.inv_two_sigma_sq).exp();
            for (o, ai) in out.iter_mut().zip(a) {
                *o += w * ai;
            }
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Runs the generator. Identical configurations give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sx, sy) = cfg.step();
    let (fw, fh) = (f64::from(cfg.image_width_px), f64::from(cfg.image_height_px));
    let extent = [(cfg.grid_cols - 1) as f64 * sx + fw, (cfg.grid_rows - 1) as f64 * sy + fh];
    let d = cfg.descriptor_dim;
    let nuisance: Vec<Vec<f64>> = (0..cfg.nuisance_rank)
        .map(|_| unit((0..d).map(|_| normal(&mut rng)).collect()))
        .collect();

    let mut scenes = Vec::new();
    let mut images = Vec::new();
    let mut points = Vec::new();
    let mut matches = MatchSet::default();
    let mut feature_maps = BTreeMap::new();
    let mut base = DescriptorSet::new(d).expect("positive dimension");
    let mut footprints = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let per_scene = cfg.grid_rows * cfg.grid_cols;

    for s in 0..cfg.scenes {
        let scene = SceneId(s as u32);
        scenes.push(Scene {
            id: scene,
            name: format!("scene{s:02}"),
        });
        let first = (s * per_scene) as u32;
        let ids: Vec<ImageId> = (0..per_scene as u32).map(|i| ImageId(first + i)).collect();
        let fps: Vec<Footprint> = (0..per_scene)
            .map(|i| {
                let (r, c) = (i / cfg.grid_cols, i % cfg.grid_cols);
                let (x0, y0) = (c as f64 * sx, r as f64 * sy);
                Footprint {
                    x0,
                    y0,
                    x1: x0 + fw,
                    y1: y0 + fh,
                }
            })
            .collect();
        for (i, (&id, fp)) in ids.iter().zip(&fps).enumerate() {
            images.push(ImageRecord {
                id,
                scene,
                name: format!("s{s:02}_r{:02}_c{:02}", i / cfg.grid_cols, i % cfg.grid_cols),
                width_px: cfg.image_width_px,
                height_px: cfg.image_height_px,
            });
            footprints.insert(id, *fp);
        }

        // points, tracks and closed-form GS
        let mut keypoints = vec![0u32; per_scene];
        let mut shared: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut scene_points: Vec<[f64; 3]> = Vec::new();
        let mut gs = vec![vec![0u32; per_scene]; per_scene];
        for cell in arrangement(&fps, cfg) {
            if cell.cameras.len() < 2 {
                continue;
            }
            let area = (cell.x1 - cell.x0) * (cell.y1 - cell.y0);
            let count = (cfg.points_per_cell as f64 * area / (sx * sy)).round() as u32;
            for (a, &i) in cell.cameras.iter().enumerate() {
                for &j in &cell.cameras[a + 1..] {
                    gs[i][j] += count;
                }
            }
            for _ in 0..count {
                let position = [
                    rng.random_range(cell.x0..cell.x1),
                    rng.random_range(cell.y0..cell.y1),
                    rng.random_range(0.0..5.0),
                ];
                let local = scene_points.len();
                scene_points.push(position);
                let track = cell
                    .cameras
                    .iter()
                    .map(|&cam| {
                        keypoints[cam] += 1;
                        Observation {
                            image: ids[cam],
                            keypoint: keypoints[cam] - 1,
                        }
                    })
                    .collect();
                for (a, &i) in cell.cameras.iter().enumerate() {
                    for &j in &cell.cameras[a + 1..] {
                        shared.entry((i, j)).or_default().push(local);
                    }
                }
                points.push(Point3D {
                    id: PointId(points.len() as u64),
                    position,
                    track,
                });
            }
        }

        for i in 0..per_scene {
            for j in i + 1..per_scene {
                let overlap_area = fps[i].intersection_area(&fps[j]);
                if overlap_area <= 0.0 {
                    continue;
                }
                let pair = ImagePair::new(ids[i], ids[j]).expect("distinct ids");
                truth.insert(
                    pair,
                    PairTruth {
                        gs: gs[i][j],
                        overlap_area,
                    },
                );
                let common = shared.get(&(i, j)).map_or(&[][..], Vec::as_slice);
                let jitter = rng.random_range(-INLIER_JITTER..=INLIER_JITTER);
                let n = (f64::from(gs[i][j]) * INLIER_RATIO * (1.0 + jitter)).round().max(0.0) as usize;
                let n = n.min(common.len());
                if n == 0 {
                    continue;
                }
                let mut chosen = index::sample(&mut rng, common.len(), n).into_vec();
                chosen.sort_unstable();
                let corr = chosen
                    .into_iter()
                    .map(|k| {
                        let p = scene_points[common[k]];
                        Correspondence {
                            xi: p[0] - fps[i].x0,
                            yi: p[1] - fps[i].y0,
                            xj: p[0] - fps[j].x0,
                            yj: p[1] - fps[j].y0,
                        }
                    })
                    .collect();
                matches.insert(ids[i], ids[j], corr).expect("fresh in-bounds pair");
            }
        }

        // feature maps and base descriptors
        let texture = Texture::new(&mut rng, cfg, extent);
        let (mh, mw) = (cfg.map_height, cfg.map_width);
        let mut sample = vec![0.0; d];
        for (i, (&id, fp)) in ids.iter().zip(&fps).enumerate() {
            let mut values = vec![0.0; d * mh * mw];
            let mut content = vec![0.0; d];
            for y in 0..mh {
                for x in 0..mw {
                    let gx = fp.x0 + (x as f64 + 0.5) / mw as f64 * fw;
                    let gy = fp.y0 + (y as f64 + 0.5) / mh as f64 * fh;
                    texture.sample(gx, gy, &mut sample);
                    for c in 0..d {
                        content[c] += sample[c];
                        values[c * mh * mw + y * mw + x] = (sample[c] + cfg.noise_sigma * normal(&mut rng)).abs() + 1e-3;
                    }
                }
            }
            feature_maps.insert(id, FeatureMap::new(d, mh, mw, values).expect("consistent shape"));
            let mut desc = unit(content);
            for (v, _) in desc.iter_mut().zip(0..) {
                *v += cfg.noise_sigma * normal(&mut rng);
            }
            for u in &nuisance {
                let z = cfg.nuisance_sigma * normal(&mut rng);
                for (v, ui) in desc.iter_mut().zip(u) {
                    *v += z * ui;
                }
            }
            base.push(images[first as usize + i].name.clone(), desc).expect("dimension");
        }
    }

    let reconstruction = Reconstruction::new(scenes, images, points).expect("generator upholds invariants");
    debug_assert!(matches.validate_against(&reconstruction).is_ok());
    Ok(SynthOutput {
        reconstruction,
        matches,
        feature_maps,
        base_descriptors: base,
        footprints,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::build_covisibility;

    fn small(rows: usize, cols: usize, overlap: f64) -> SynthConfig {
        SynthConfig {
            scenes: 1,
            grid_rows: rows,
            grid_cols: cols,
            overlap,
            descriptor_dim: 4,
            map_height: 2,
            map_width: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn two_camera_strip() {
        let out = generate(&small(1, 2, 0.5)).unwrap();
        let r = &out.reconstruction;
        assert_eq!(r.images().len(), 2);
        // the strip is 160 x 240 while a lattice step cell is 160 x 120
        let expected = 2 * SynthConfig::default().points_per_cell as u32;
        assert_eq!(r.points().len() as u32, expected);
        assert_eq!(out.gs(ImageId(0), ImageId(1)), expected);
        assert_eq!(build_covisibility(r).gs(ImageId(0), ImageId(1)), expected);
        let strip = out.footprints[&ImageId(0)].intersection_area(&out.footprints[&ImageId(1)]);
        assert_eq!(strip, 160.0 * 240.0);
    }

    #[test]
    fn vanishing_overlap_has_no_common_points() {
        let cfg = SynthConfig {
            points_per_cell: 20,
            ..small(3, 3, 0.01)
        };
        let out = generate(&cfg).unwrap();
        assert!(out.truth.values().all(|t| t.gs == 0));
        assert!(out.matches.is_empty());
    }

    #[test]
    fn adjacent_beats_diagonal() {
        for overlap in [0.2, 0.35, 0.45] {
            let out = generate(&small(3, 3, overlap)).unwrap();
            let id = |r: u32, c: u32| ImageId(r * 3 + c);
            let adjacent = out.gs(id(1, 1), id(1, 2)).min(out.gs(id(1, 1), id(2, 1)));
            let diagonal = out.gs(id(1, 1), id(2, 2));
            assert!(adjacent > diagonal, "overlap {overlap}: {adjacent} vs {diagonal}");
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig {
            scenes: 2,
            ..small(2, 3, 0.6)
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.feature_maps, b.feature_maps);
        assert_eq!(a.base_descriptors, b.base_descriptors);
        a.matches.validate_against(&a.reconstruction).unwrap();
        assert!(a.feature_maps.values().all(|m| m.values().iter().all(|&v| v > 0.0)));
        for (pair, t) in &a.truth {
            let n = a.matches.inliers(pair);
            let lo = (f64::from(t.gs) * INLIER_RATIO * (1.0 - INLIER_JITTER)).round() as usize;
            let hi = (f64::from(t.gs) * INLIER_RATIO * (1.0 + INLIER_JITTER)).round() as usize;
            assert!(n >= lo && n <= hi, "{pair}: {n} not in [{lo}, {hi}]");
        }
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.reconstruction, c.reconstruction);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&small(1, 2, 1.0)).is_err());
        assert!(generate(&small(0, 2, 0.5)).is_err());
    }
}
