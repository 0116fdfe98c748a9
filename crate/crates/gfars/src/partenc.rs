//! Per-part point cloud encoder.
//!
//! Each part is a small point cloud in its own canonical frame. A shared
//! per-point MLP (3 -> 64 -> 128 -> D, relu after every layer) lifts points
//! independently; max pooling over the point axis collapses them to one
//! feature row per part. Pooling makes the row invariant to point order and
//! to duplicated points, and row i of a set encoding depends only on part
//! i's points.

use crate::error::{Error, Result};
use crate::ndcore::{ModelParams, NdError, NdResult, ParamVars, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Hidden widths of the shared per-point MLP; the output width is the
/// configurable feature dimension.
const POINT_MLP_HIDDEN: [usize; 2] = [64, 128];

/// One part of a mixed set: an id, a point cloud in the part's canonical
/// frame, and (for training data) the ground-truth group label.
///
/// Poses are deliberately absent: grouping conditions only on shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PartCloud {
    pub part_id: u32,
    /// `[P x 3]` coordinates, P >= 1.
    pub points: Tensor,
    pub gt_group: Option<u32>,
}

impl PartCloud {
    pub fn new(part_id: u32, points: Tensor, gt_group: Option<u32>) -> Result<Self> {
        let (_, cols) = points
            .require_rank2("PartCloud")
            .map_err(|e| Error::Domain {
                op: "PartCloud",
                detail: e.to_string(),
            })?;
        if cols != 3 {
            return Err(Error::domain(
                "PartCloud",
                format!("points must be [P x 3], got {:?}", points.shape()),
            ));
        }
        Ok(Self {
            part_id,
            points,
            gt_group,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.shape()[0]
    }
}

/// Condition features for a whole part set: row i encodes part i.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatures {
    features: Tensor,
}

impl PartFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        features
            .require_rank2("PartFeatures")
            .map_err(Error::from)?;
        Ok(Self { features })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    pub fn num_parts(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Layer widths of the encoder for a given output feature dimension.
fn layer_dims(feature_dim: usize) -> [(usize, usize); 3] {
    [
        (3, POINT_MLP_HIDDEN[0]),
        (POINT_MLP_HIDDEN[0], POINT_MLP_HIDDEN[1]),
        (POINT_MLP_HIDDEN[1], feature_dim),
    ]
}

/// Register freshly initialized encoder parameters under the `enc.*` prefix.
/// Weights use He-style scaling for the relu activations; biases start at 0.
pub fn init_encoder_params(
    params: &mut ModelParams,
    feature_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if feature_dim == 0 {
        return Err(Error::Config("encoder feature_dim must be >= 1".into()));
    }
    for (l, (fan_in, fan_out)) in layer_dims(feature_dim).into_iter().enumerate() {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        params.insert(format!("enc.l{l}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        params.insert(
            format!("enc.l{l}.b"),
            Tensor::vector(vec![0.0; fan_out])?,
        )?;
    }
    Ok(())
}

/// Feature dimension implied by registered encoder parameters.
pub fn encoder_feature_dim(params: &ModelParams) -> Result<usize> {
    Ok(params.get("enc.l2.w")?.shape()[1])
}

/// Encode one part on the tape: shared per-point MLP then column-wise max
/// over points. Returns a length-D vector var.
pub fn encode_part(tape: &Tape, vars: &ParamVars, points: &Tensor) -> NdResult<Var> {
    let (_, cols) = points.require_rank2("encode_part")?;
    if cols != 3 {
        return Err(NdError::Dimension {
            op: "encode_part",
            detail: format!("points must be [P x 3], got {:?}", points.shape()),
        });
    }
    let mut h = tape.leaf(points.clone());
    for l in 0..3 {
        let w = vars.get(&format!("enc.l{l}.w"))?;
        let b = vars.get(&format!("enc.l{l}.b"))?;
        let rows = tape.shape_of(h)[0];
        let pre = tape.matmul(h, w)?;
        let bb = tape.broadcast_rows(b, rows)?;
        h = tape.relu(tape.add(pre, bb)?)?;
    }
    tape.max_over_rows(h)
}

/// Encode every part of a set, stacking the per-part rows in order:
/// `K x [P_i x 3] -> [K x D]`.
pub fn encode_set(tape: &Tape, vars: &ParamVars, parts: &[PartCloud]) -> NdResult<Var> {
    if parts.is_empty() {
        return Err(NdError::EmptyInput("encode_set"));
    }
    let rows = parts
        .iter()
        .map(|p| encode_part(tape, vars, &p.points))
        .collect::<NdResult<Vec<_>>>()?;
    tape.stack_rows(&rows)
}

/// Non-differentiable convenience: encode a set against a parameter snapshot
/// on a throwaway tape.
pub fn encode_set_value(params: &ModelParams, parts: &[PartCloud]) -> Result<PartFeatures> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let out = encode_set(&tape, &vars, parts)?;
    PartFeatures::new(tape.value(out))
}
