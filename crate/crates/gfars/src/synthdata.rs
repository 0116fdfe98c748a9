//! Procedural mixed-part-set generator and dataset serialization.
//!
//! Each set mixes the parts of two or three template shapes (chairlike,
//! tablelike, lamplike). Parts within one shape share a latent scale drawn
//! from U(0.6, 1.4), so same-shape parts are geometrically consistent: the
//! legs of one chair have matching lengths, the back slab matches the seat
//! width. That coupling is the grouping signal. Parts live in canonical
//! frames (centered, axis-aligned, unposed); grouping conditions on shape
//! alone.
//!
//! Datasets are JSON lines, one set per line:
//! `{"set_id": str, "parts": [{"part_id", "gt_group", "points"}]}`.
//! Any external export conforming to this schema is accepted unchanged.

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::partenc::PartCloud;
use crate::seeding::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Scale jitter applied independently to every part dimension (fraction).
const DIM_JITTER: f64 = 0.05;
/// Latent per-shape scale range.
const SCALE_RANGE: (f64, f64) = (0.6, 1.4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Chairlike,
    Tablelike,
    Lamplike,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [
        ShapeKind::Chairlike,
        ShapeKind::Tablelike,
        ShapeKind::Lamplike,
    ];

    pub fn part_count(self) -> usize {
        match self {
            ShapeKind::Chairlike => 6,
            ShapeKind::Tablelike => 5,
            ShapeKind::Lamplike => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "gen-train",
            Split::Test => "gen-test",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generation recipe for one dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub split: Split,
    pub sets: usize,
    /// Probability a set mixes 2 shapes; otherwise it mixes 3.
    pub mix2_prob: f64,
    pub points_per_part: usize,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            split: Split::Train,
            sets: 1000,
            mix2_prob: 0.7,
            points_per_part: 64,
            seed: 0,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 {
            return Err(Error::Config("manifest: sets must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix2_prob) {
            return Err(Error::Config(format!(
                "manifest: mix2_prob must lie in [0,1], got {}",
                self.mix2_prob
            )));
        }
        if self.points_per_part < 2 {
            return Err(Error::Config(
                "manifest: points_per_part must be >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// A shuffled mixture of several shapes' parts; the unit of grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPartSet {
    pub set_id: String,
    pub parts: Vec<PartCloud>,
}

impl MixedPartSet {
    pub fn new(set_id: String, parts: Vec<PartCloud>) -> Result<Self> {
        let set = Self { set_id, parts };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.parts.iter().map(|p| p.part_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.parts.len() {
            return Err(Error::Dataset(format!(
                "set {}: duplicate part_id",
                self.set_id
            )));
        }
        let labels: Vec<Option<u32>> = self.parts.iter().map(|p| p.gt_group).collect();
        if labels.iter().any(Option::is_some) {
            if labels.iter().any(Option::is_none) {
                return Err(Error::Dataset(format!(
                    "set {}: gt_group must be present on all parts or none",
                    self.set_id
                )));
            }
            let max = labels.iter().flatten().max().copied().unwrap_or(0);
            for g in 0..=max {
                if !labels.iter().flatten().any(|&l| l == g) {
                    return Err(Error::Dataset(format!(
                        "set {}: gt_group labels skip {g}",
                        self.set_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn part_ids(&self) -> Vec<u32> {
        self.parts.iter().map(|p| p.part_id).collect()
    }

    pub fn is_labeled(&self) -> bool {
        !self.parts.is_empty() && self.parts.iter().all(|p| p.gt_group.is_some())
    }

    /// Ground-truth groups as part_id lists in label order; None when the
    /// set is unlabeled.
    pub fn gt_groups(&self) -> Option<Vec<Vec<u32>>> {
        if !self.is_labeled() {
            return None;
        }
        let max = self
            .parts
            .iter()
            .filter_map(|p| p.gt_group)
            .max()
            .unwrap_or(0);
        let mut groups = vec![Vec::new(); max as usize + 1];
        for p in &self.parts {
            groups[p.gt_group.unwrap() as usize].push(p.part_id);
        }
        Some(groups)
    }
}

enum Primitive {
    /// Full extents (x, y, z).
    Box([f64; 3]),
    /// Radius, height; axis = y, caps included.
    Cylinder(f64, f64),
    /// Bottom radius, top radius, height; axis = y, lateral surface only.
    Frustum(f64, f64, f64),
}

/// Part roles per template: un-scaled primitive dimensions. The repeated
/// role (legs) shares one entry emitted multiple times.
fn template_parts(kind: ShapeKind) -> Vec<Primitive> {
    match kind {
        ShapeKind::Chairlike => vec![
            Primitive::Box([1.0, 0.10, 1.0]),  // seat slab
            Primitive::Box([1.0, 0.80, 0.10]), // back slab, width = seat width
            Primitive::Box([0.08, 0.90, 0.08]),
            Primitive::Box([0.08, 0.90, 0.08]),
            Primitive::Box([0.08, 0.90, 0.08]),
            Primitive::Box([0.08, 0.90, 0.08]),
        ],
        ShapeKind::Tablelike => vec![
            Primitive::Box([1.4, 0.08, 1.0]), // top slab
            Primitive::Box([0.09, 1.10, 0.09]),
            Primitive::Box([0.09, 1.10, 0.09]),
            Primitive::Box([0.09, 1.10, 0.09]),
            Primitive::Box([0.09, 1.10, 0.09]),
        ],
        ShapeKind::Lamplike => vec![
            Primitive::Cylinder(0.35, 0.06), // base disk
            Primitive::Cylinder(0.04, 1.20), // pole
            Primitive::Frustum(0.35, 0.12, 0.35), // shade
        ],
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, e: [f64; 3]) -> [f64; 3] {
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut pick = rng.gen_range(0.0..total);
    let mut axis = 0;
    let mut sign = 1.0;
    'outer: for a in 0..3 {
        for s in [-1.0, 1.0] {
            if pick < areas[a] {
                axis = a;
                sign = s;
                break 'outer;
            }
            pick -= areas[a];
        }
    }
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = if a == axis {
            sign * e[a] / 2.0
        } else {
            rng.gen_range(-0.5..0.5) * e[a]
        };
    }
    p
}

fn sample_cylinder_surface(rng: &mut ChaCha8Rng, r: f64, h: f64) -> [f64; 3] {
    let lateral = 2.0 * std::f64::consts::PI * r * h;
    let cap = std::f64::consts::PI * r * r;
    let pick = rng.gen_range(0.0..lateral + 2.0 * cap);
    let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    if pick < lateral {
        let y = rng.gen_range(-0.5..0.5) * h;
        [r * theta.cos(), y, r * theta.sin()]
    } else {
        let sign = if pick < lateral + cap { -1.0 } else { 1.0 };
        let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
        [rr * theta.cos(), sign * h / 2.0, rr * theta.sin()]
    }
}

fn sample_frustum_lateral(rng: &mut ChaCha8Rng, r0: f64, r1: f64, h: f64) -> [f64; 3] {
    // area density along the axis is proportional to the local radius;
    // invert the linear-density CDF
    let u: f64 = rng.gen_range(0.0..1.0);
    let t = if (r0 - r1).abs() < 1e-12 {
        u
    } else {
        let a = (r1 - r0) / 2.0;
        // solve a t^2 + r0 t = u (a + r0) for t in [0,1]
        let c = u * (a + r0);
        ((r0 * r0 + 4.0 * a * c).sqrt() - r0) / (2.0 * a)
    };
    let r = r0 + (r1 - r0) * t;
    let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    [r * theta.cos(), (t - 0.5) * h, r * theta.sin()]
}

fn jittered(rng: &mut ChaCha8Rng, dim: f64) -> f64 {
    dim * (1.0 + rng.gen_range(-DIM_JITTER..DIM_JITTER))
}

/// Draw the shared latent scale of one shape.
pub fn sample_scale(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1)
}

/// Generate one shape's parts in canonical frames. Part ids are sequential
/// from 0; `gt_group` is unset (assigned when sets are mixed).
pub fn generate_shape(
    kind: ShapeKind,
    scale: f64,
    points_per_part: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PartCloud>> {
    if points_per_part < 2 {
        return Err(Error::domain(
            "generate_shape",
            "points_per_part must be >= 2".to_string(),
        ));
    }
    let mut parts = Vec::new();
    for (idx, proto) in template_parts(kind).into_iter().enumerate() {
        let mut data = Vec::with_capacity(points_per_part * 3);
        match proto {
            Primitive::Box(dims) => {
                let e = [
                    jittered(rng, dims[0] * scale),
                    jittered(rng, dims[1] * scale),
                    jittered(rng, dims[2] * scale),
                ];
                for _ in 0..points_per_part {
                    data.extend_from_slice(&sample_box_surface(rng, e));
                }
            }
            Primitive::Cylinder(r, h) => {
                let r = jittered(rng, r * scale);
                let h = jittered(rng, h * scale);
                for _ in 0..points_per_part {
                    data.extend_from_slice(&sample_cylinder_surface(rng, r, h));
                }
            }
            Primitive::Frustum(r0, r1, h) => {
                let r0 = jittered(rng, r0 * scale);
                let r1 = jittered(rng, r1 * scale);
                let h = jittered(rng, h * scale);
                for _ in 0..points_per_part {
                    data.extend_from_slice(&sample_frustum_lateral(rng, r0, r1, h));
                }
            }
        }
        let points = Tensor::new(vec![points_per_part, 3], data)?;
        parts.push(PartCloud::new(idx as u32, points, None)?);
    }
    Ok(parts)
}

/// Concatenate several shapes' parts into one set: gt_group becomes the
/// source shape index, the order is uniformly shuffled, and part_ids are
/// reassigned sequentially in the shuffled order.
pub fn mix_sets(
    set_id: String,
    shapes: &[Vec<PartCloud>],
    rng: &mut ChaCha8Rng,
) -> Result<MixedPartSet> {
    if shapes.is_empty() {
        return Err(Error::domain(
            "mix_sets",
            "need at least one shape".to_string(),
        ));
    }
    let mut parts = Vec::new();
    for (shape_idx, shape) in shapes.iter().enumerate() {
        for part in shape {
            parts.push(PartCloud::new(
                0, // reassigned below
                part.points.clone(),
                Some(shape_idx as u32),
            )?);
        }
    }
    parts.shuffle(rng);
    for (i, part) in parts.iter_mut().enumerate() {
        part.part_id = i as u32;
    }
    MixedPartSet::new(set_id, parts)
}

fn generate_set(manifest: &DatasetManifest, index: usize) -> Result<MixedPartSet> {
    let mut rng = derive_rng(manifest.seed, manifest.split.tag(), index as u64);
    let n_shapes = if rng.gen_range(0.0..1.0) < manifest.mix2_prob {
        2
    } else {
        3
    };
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = *ShapeKind::ALL.as_slice().choose(&mut rng).unwrap();
        let scale = sample_scale(&mut rng);
        shapes.push(generate_shape(kind, scale, manifest.points_per_part, &mut rng)?);
    }
    let set_id = format!("{}-{:05}", manifest.split.as_str(), index);
    mix_sets(set_id, &shapes, &mut rng)
}

/// Generate the whole split in memory, deterministically in (seed, split).
pub fn build_dataset(manifest: &DatasetManifest) -> Result<Vec<MixedPartSet>> {
    manifest.validate()?;
    (0..manifest.sets).map(|i| generate_set(manifest, i)).collect()
}

#[derive(Serialize, Deserialize)]
struct PartRecord {
    part_id: u32,
    gt_group: Option<u32>,
    points: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    set_id: String,
    parts: Vec<PartRecord>,
}

fn to_record(set: &MixedPartSet) -> SetRecord {
    SetRecord {
        set_id: set.set_id.clone(),
        parts: set
            .parts
            .iter()
            .map(|p| PartRecord {
                part_id: p.part_id,
                gt_group: p.gt_group,
                points: p
                    .points
                    .data()
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect(),
            })
            .collect(),
    }
}

fn from_record(rec: SetRecord) -> Result<MixedPartSet> {
    let parts = rec
        .parts
        .into_iter()
        .map(|p| {
            let n = p.points.len();
            let data: Vec<f64> = p.points.into_iter().flatten().collect();
            let points = Tensor::new(vec![n, 3], data).map_err(|e| {
                Error::Dataset(format!("set {}: part {}: {e}", rec.set_id, p.part_id))
            })?;
            PartCloud::new(p.part_id, points, p.gt_group)
        })
        .collect::<Result<Vec<_>>>()?;
    MixedPartSet::new(rec.set_id, parts)
}

/// Write one set per line, in order.
pub fn write_dataset(sets: &[MixedPartSet], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for set in sets {
        serde_json::to_writer(&mut w, &to_record(set))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSON-lines dataset; errors carry the 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<MixedPartSet>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut sets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::Dataset(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SetRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        sets.push(from_record(rec).map_err(|e| {
            Error::Dataset(format!("{}: line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(sets)
}

/// One whole shape (group 0) plus `n_distractors` stray parts, each a
/// random part of an unrelated shape (groups 1..). Part ids are sequential
/// with the shape first; order carries no information for
/// permutation-equivariant models, and keeping the shape's ids lowest lets
/// id-keyed test oracles select it deterministically.
pub fn build_noisy_set(
    set_id: String,
    kind: ShapeKind,
    n_distractors: usize,
    points_per_part: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MixedPartSet> {
    let scale = sample_scale(rng);
    let shape = generate_shape(kind, scale, points_per_part, rng)?;
    let mut parts = Vec::new();
    for part in &shape {
        parts.push(PartCloud::new(
            parts.len() as u32,
            part.points.clone(),
            Some(0),
        )?);
    }
    for d in 0..n_distractors {
        let other = *ShapeKind::ALL.as_slice().choose(rng).unwrap();
        let other_scale = sample_scale(rng);
        let donor = generate_shape(other, other_scale, points_per_part, rng)?;
        let pick = rng.gen_range(0..donor.len());
        parts.push(PartCloud::new(
            parts.len() as u32,
            donor[pick].points.clone(),
            Some(d as u32 + 1),
        )?);
    }
    MixedPartSet::new(set_id, parts)
}

/// Axis-aligned bounding-box extents of a part's points.
pub fn bbox_extents(points: &Tensor) -> [f64; 3] {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in points.data().chunks_exact(3) {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
}

/// Model-free baseline: connect every part to its nearest neighbor in
/// bounding-box-extent space and emit connected components as groups.
/// Exists to certify the generator's scale-coupling signal is learnable;
/// a trained model must beat it.
pub fn nn_baseline_partition(set: &MixedPartSet) -> Vec<Vec<u32>> {
    let k = set.parts.len();
    if k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![vec![set.parts[0].part_id]];
    }
    let feats: Vec<[f64; 3]> = set.parts.iter().map(|p| bbox_extents(&p.points)).collect();
    let dist = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    };
    // union-find over nearest-neighbor edges
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..k {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            if i != j {
                let d = dist(&feats[i], &feats[j]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, best));
        if ri != rj {
            parent[ri] = rj;
        }
    }
    let mut groups: indexmap::IndexMap<usize, Vec<u32>> = indexmap::IndexMap::new();
    for i in 0..k {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(set.parts[i].part_id);
    }
    groups.into_values().collect()
}
