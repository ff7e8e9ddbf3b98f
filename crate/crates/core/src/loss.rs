//! The task-training loss: counting term, entropic-OT term with exact
//! dual-potential gradients, and total-variation term over normalized
//! density maps.

use incount_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::sinkhorn::{sinkhorn_ot, CostGrid, OTConfig};
use crate::Result;

/// Dot-map ground truth at feature resolution: entry (i, j) counts the
/// annotated points whose image coordinates fall in the s x s bin (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDensity {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GroundTruthDensity {
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Loss-term weights plus the OT solver configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ot: OTConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.01,
            ot: OTConfig::default(),
        }
    }
}

/// Per-sample loss report. `total = counting + lambda1 * ot + lambda2 * tv`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub counting: f64,
    pub ot: f64,
    pub tv: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
    /// OT/TV were skipped because a map had no mass.
    pub degenerate: bool,
}

/// Bin annotated points into the padded feature frame. Bin index is
/// floor(coord / stride); a coordinate exactly on the far edge clamps into
/// the last bin. Negative coordinates are rejected.
pub fn bin_points(
    points: &[(f64, f64)],
    width: usize,
    height: usize,
    stride: usize,
) -> Result<GroundTruthDensity> {
    let rows = height.div_ceil(stride);
    let cols = width.div_ceil(stride);
    let mut values = vec![0.0; rows * cols];
    for &(x, y) in points {
        if x < 0.0 || y < 0.0 {
            return Err(CoreError::NegativeCoordinate { x, y });
        }
        let mut i = (y / stride as f64).floor() as usize;
        let mut j = (x / stride as f64).floor() as usize;
        if i >= rows {
            if y <= (rows * stride) as f64 {
                i = rows - 1;
            } else {
                return Err(CoreError::Shape(format!(
                    "point ({x}, {y}) outside the padded {width}x{height} frame"
                )));
            }
        }
        if j >= cols {
            if x <= (cols * stride) as f64 {
                j = cols - 1;
            } else {
                return Err(CoreError::Shape(format!(
                    "point ({x}, {y}) outside the padded {width}x{height} frame"
                )));
            }
        }
        values[i * cols + j] += 1.0;
    }
    Ok(GroundTruthDensity { rows, cols, values })
}

/// | ||d||_1 - ||d-hat||_1 |
pub fn counting_loss(gt: &[f64], dhat: &[f64]) -> f64 {
    let a: f64 = gt.iter().map(|v| v.abs()).sum();
    let b: f64 = dhat.iter().map(|v| v.abs()).sum();
    (a - b).abs()
}

/// Entropic OT cost between the normalized maps, plus its gradient with
/// respect to the raw `dhat` entries.
///
/// The gradient comes from the dual potential of the source marginal
/// (envelope theorem), chained through the normalization `a = dhat / S`:
/// `g_k = (u_k - <u, a>) / S` on bins with positive mass, 0 on empty bins.
pub fn ot_loss_and_grad(
    dhat: &[f64],
    gt: &GroundTruthDensity,
    config: &OTConfig,
) -> Result<(f64, Vec<f64>)> {
    if dhat.len() != gt.values.len() {
        return Err(CoreError::Shape(format!(
            "predicted map has {} cells, ground truth {}",
            dhat.len(),
            gt.values.len()
        )));
    }
    let s: f64 = dhat.iter().sum();
    let n = gt.total_mass();
    if s <= 0.0 {
        return Err(CoreError::DegenerateInput(
            "predicted density map has zero mass".into(),
        ));
    }
    if n <= 0.0 {
        return Err(CoreError::DegenerateInput(
            "ground-truth density map has zero mass".into(),
        ));
    }
    let a: Vec<f64> = dhat.iter().map(|v| v / s).collect();
    let b: Vec<f64> = gt.values.iter().map(|v| v / n).collect();
    let cost = CostGrid::squared_distance(gt.rows, gt.cols, config.normalize_cost);
    let sol = sinkhorn_ot(&a, &b, &cost, config)?;

    let inner: f64 = sol
        .u
        .iter()
        .zip(&a)
        .filter(|(_, &ai)| ai > 0.0)
        .map(|(&ui, &ai)| ui * ai)
        .sum();
    let grad: Vec<f64> = sol
        .u
        .iter()
        .zip(&a)
        .map(|(&ui, &ai)| if ai > 0.0 { (ui - inner) / s } else { 0.0 })
        .collect();
    Ok((sol.cost, grad))
}

/// 1/2 * sum | d/||d||_1 - d-hat/||d-hat||_1 |
pub fn tv_loss(dhat: &[f64], gt: &GroundTruthDensity) -> Result<f64> {
    let s: f64 = dhat.iter().sum();
    let n = gt.total_mass();
    if s <= 0.0 || n <= 0.0 {
        return Err(CoreError::DegenerateInput(
            "total-variation term needs positive mass on both maps".into(),
        ));
    }
    Ok(0.5
        * dhat
            .iter()
            .zip(&gt.values)
            .map(|(&p, &q)| (q / n - p / s).abs())
            .sum::<f64>())
}

/// All three terms on plain grids; degenerate inputs propagate as errors.
pub fn dmcount_total(
    dhat: &[f64],
    gt: &GroundTruthDensity,
    lambda1: f64,
    lambda2: f64,
    config: &OTConfig,
) -> Result<LossBreakdown> {
    let counting = counting_loss(&gt.values, dhat);
    let (ot, _) = ot_loss_and_grad(dhat, gt, config)?;
    let tv = tv_loss(dhat, gt)?;
    Ok(LossBreakdown {
        counting,
        ot,
        tv,
        lambda1,
        lambda2,
        total: counting + lambda1 * ot + lambda2 * tv,
        degenerate: false,
    })
}

/// Build the per-sample training loss on the tape.
///
/// `dhat` is the `[1, 1, Hd, Wd]` head output. Counting and TV terms run
/// through the autodiff graph (TV's gradient flows through the mass
/// normalization); the OT term enters as an external scalar carrying its
/// dual-potential gradient. When either map has zero mass the OT and TV
/// terms are skipped and only the counting term trains that sample.
pub fn dmcount_loss_on_graph(
    graph: &Graph<f64>,
    dhat: &Tensor<f64>,
    gt: &GroundTruthDensity,
    lambda1: f64,
    lambda2: f64,
    config: &OTConfig,
) -> Result<(Tensor<f64>, LossBreakdown)> {
    let shape = dhat.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 || shape[2] != gt.rows || shape[3] != gt.cols
    {
        return Err(CoreError::Shape(format!(
            "expected [1,1,{},{}] density map, got {:?}",
            gt.rows, gt.cols, shape
        )));
    }
    let n = gt.total_mass();
    let values = dhat.to_vec();
    let s: f64 = values.iter().sum();

    let s_hat = graph.sum(dhat)?;
    let n_const = Tensor::scalar(n);
    let counting_t = graph.abs(&graph.sub(&s_hat, &n_const)?)?;
    let counting = counting_t.item()?;

    if s <= 0.0 || n <= 0.0 {
        return Ok((
            counting_t,
            LossBreakdown {
                counting,
                ot: 0.0,
                tv: 0.0,
                lambda1,
                lambda2,
                total: counting,
                degenerate: true,
            },
        ));
    }

    let (ot_value, ot_grad) = ot_loss_and_grad(&values, gt, config)?;
    let ot_t = graph.external_scalar(dhat, ot_value, ot_grad)?;

    let gt_norm = Tensor::from_vec(
        shape.clone(),
        gt.values.iter().map(|v| v / n).collect(),
        false,
    )?;
    let a_norm = graph.div_scalar(dhat, &s_hat)?;
    let tv_t = graph.scale(&graph.l1_norm(&graph.sub(&gt_norm, &a_norm)?)?, 0.5)?;
    let tv = tv_t.item()?;

    let total_t = graph.add(
        &counting_t,
        &graph.add(&graph.scale(&ot_t, lambda1)?, &graph.scale(&tv_t, lambda2)?)?,
    )?;
    let total = total_t.item()?;
    Ok((
        total_t,
        LossBreakdown {
            counting,
            ot: ot_value,
            tv,
            lambda1,
            lambda2,
            total,
            degenerate: false,
        },
    ))
}
