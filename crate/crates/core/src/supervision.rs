//! Training objectives and evaluation metrics.
//!
//! All losses take probabilities (clamped to `[EPS, 1 - EPS]` before any
//! logarithm) and are written as positive quantities that vanish at a
//! perfect prediction. By default each term is a per-pixel mean; the `Sum`
//! reduction restores plain sums.

use std::io::Write;
use std::path::Path;

use lcau_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeLossParams {
    /// Labels strictly between 0 and `eta` are ignored.
    pub eta: f64,
    /// Balance factor scaling the negative-pixel weight.
    pub lambda: f64,
    /// Fraction of non-edge pixels; `None` recomputes it for every batch.
    pub beta: Option<f64>,
}

impl Default for EdgeLossParams {
    fn default() -> Self {
        Self { eta: 0.3, lambda: 1.1, beta: None }
    }
}

impl EdgeLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) || self.lambda <= 0.0 {
            return Err(ModelError::Config(format!("edge loss needs eta in [0,1] and lambda > 0, got {self:?}")));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(ModelError::Config(format!("edge loss beta = {b} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.6, lambda2: 0.4, gamma: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub edge: EdgeLossParams,
    pub reduction: Reduction,
    /// Additive smoothing in the Dice ratio.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), edge: EdgeLossParams::default(), reduction: Reduction::Mean, dice_eps: 1.0 }
    }
}

fn check_probabilities<F: Float>(what: &str, t: &Tensor<F>) -> Result<()> {
    match t.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        Some(v) => Err(ModelError::Domain(format!("{what} contains {v}, expected values in [0, 1]"))),
        None => Ok(()),
    }
}

fn check_same<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(lcau_tensor::TensorError::ShapeMismatch { op: "loss", lhs: a.dims().to_vec(), rhs: b.dims().to_vec() }.into());
    }
    Ok(())
}

fn reduce<F: Float>(per_pixel: &Tensor<F>, reduction: Reduction) -> Tensor<F> {
    match reduction {
        Reduction::Mean => per_pixel.mean_all(),
        Reduction::Sum => per_pixel.sum_all(),
    }
}

/// Binary cross-entropy `-(g ln y + (1 - g) ln(1 - y))`.
pub fn bce_loss<F: Float>(prob: &Tensor<F>, gt: &Tensor<F>, reduction: Reduction) -> Result<Tensor<F>> {
    check_same(prob, gt)?;
    check_probabilities("prediction", prob)?;
    let y = prob.clamp(EPS, 1.0 - EPS);
    let pos = gt.mul(&y.ln())?;
    let neg = gt.affine(-1.0, 1.0).mul(&y.affine(-1.0, 1.0).ln())?;
    Ok(reduce(&pos.add(&neg)?.neg(), reduction))
}

/// Soft Dice loss `1 - (2 sum(y g) + eps) / (sum y + sum g + eps)`, computed
/// per image and averaged over the batch (summed with `Reduction::Sum`).
pub fn dice_loss<F: Float>(prob: &Tensor<F>, gt: &Tensor<F>, eps: f64, reduction: Reduction) -> Result<Tensor<F>> {
    check_same(prob, gt)?;
    check_probabilities("prediction", prob)?;
    let b = prob.dims()[0];
    let p = prob.reshape((b, prob.elem_count() / b.max(1)))?;
    let g = gt.reshape((b, gt.elem_count() / b.max(1)))?;
    let inter = p.mul(&g)?.sum_keepdim(&[1])?;
    let total = p.sum_keepdim(&[1])?.add(&g.sum_keepdim(&[1])?)?;
    let ratio = inter.affine(2.0, eps).div(&total.add_scalar(eps))?;
    Ok(reduce(&ratio.affine(-1.0, 1.0), reduction))
}

/// Fraction of pixels labelled exactly zero.
pub fn negative_fraction<F: Float>(edge_gt: &Tensor<F>) -> f64 {
    let n = edge_gt.elem_count().max(1);
    edge_gt.data().iter().filter(|v| v.as_f64() == 0.0).count() as f64 / n as f64
}

/// Per-pixel weights (positive term, negative term) of the edge loss.
fn edge_weights<F: Float>(edge_gt: &Tensor<F>, p: &EdgeLossParams) -> (Tensor<F>, Tensor<F>) {
    let beta = p.beta.unwrap_or_else(|| negative_fraction(edge_gt));
    let alpha = p.lambda * (1.0 - beta);
    let mut wp = Vec::with_capacity(edge_gt.elem_count());
    let mut wn = Vec::with_capacity(edge_gt.elem_count());
    for v in edge_gt.data() {
        let g = v.as_f64();
        let (a, b) = if g == 0.0 {
            (0.0, alpha)
        } else if g < p.eta {
            (0.0, 0.0)
        } else {
            (beta, 0.0)
        };
        wp.push(F::lit(a));
        wn.push(F::lit(b));
    }
    let shape = edge_gt.shape().clone();
    (Tensor::from_vec(wp, shape.clone()).expect("same size"), Tensor::from_vec(wn, shape).expect("same size"))
}

/// Class-balanced edge loss of one side map.
pub fn edge_map_loss<F: Float>(pred: &Tensor<F>, edge_gt: &Tensor<F>, params: &EdgeLossParams, reduction: Reduction) -> Result<Tensor<F>> {
    check_same(pred, edge_gt)?;
    check_probabilities("edge prediction", pred)?;
    check_probabilities("edge label", edge_gt)?;
    let (wp, wn) = edge_weights(edge_gt, params);
    let y = pred.clamp(EPS, 1.0 - EPS);
    let l = wp.mul(&y.ln())?.add(&wn.mul(&y.affine(-1.0, 1.0).ln())?)?.neg();
    Ok(reduce(&l, reduction))
}

/// Edge loss summed over all side maps.
pub fn edge_loss<F: Float>(preds: &[Tensor<F>], edge_gt: &Tensor<F>, params: &EdgeLossParams, reduction: Reduction) -> Result<(Tensor<F>, Vec<f64>)> {
    params.validate()?;
    let mut total: Option<Tensor<F>> = None;
    let mut per_stage = Vec::with_capacity(preds.len());
    for p in preds {
        let l = edge_map_loss(p, edge_gt, params, reduction)?;
        per_stage.push(l.to_scalar()?.as_f64());
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(F::zero())), per_stage))
}

#[derive(Clone, Debug)]
pub struct LossReport<F: Float> {
    pub total: Tensor<F>,
    pub bce: f64,
    pub dice: f64,
    pub edge: f64,
    pub edge_per_stage: Vec<f64>,
}

impl<F: Float> LossReport<F> {
    pub fn total_value(&self) -> f64 {
        self.total.data()[0].as_f64()
    }
}

/// `lambda1 * BCE + lambda2 * Dice + gamma * Edge` on segmentation logits.
pub fn total_loss<F: Float>(
    seg_logits: &Tensor<F>,
    edge_maps: &[Tensor<F>],
    mask_gt: &Tensor<F>,
    edge_gt: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<LossReport<F>> {
    let prob = seg_logits.sigmoid();
    let w = cfg.weights;
    let bce = bce_loss(&prob, mask_gt, cfg.reduction)?;
    let dice = dice_loss(&prob, mask_gt, cfg.dice_eps, cfg.reduction)?;
    let mut total = bce.scale(w.lambda1).add(&dice.scale(w.lambda2))?;
    let (mut edge_v, mut per_stage) = (0.0, vec![]);
    if w.gamma != 0.0 || !edge_maps.is_empty() {
        let (edge, stages) = edge_loss(edge_maps, edge_gt, &cfg.edge, cfg.reduction)?;
        edge_v = edge.to_scalar()?.as_f64();
        per_stage = stages;
        if w.gamma != 0.0 {
            total = total.add(&edge.scale(w.gamma))?;
        }
    }
    Ok(LossReport { bce: bce.to_scalar()?.as_f64(), dice: dice.to_scalar()?.as_f64(), edge: edge_v, edge_per_stage: per_stage, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

fn as_bit(v: f64, what: &str) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(ModelError::Domain(format!("{what} mask holds {v}, expected 0 or 1")))
    }
}

/// Counts over two binary masks of equal length.
pub fn confusion(pred: &[f64], gt: &[f64]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(ModelError::Domain(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (as_bit(p, "predicted")?, as_bit(g, "ground-truth")?) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Probabilities at or above this value count as foreground.
pub const THRESHOLD: f64 = 0.5;

pub fn binarize(prob: &[f64]) -> Vec<f64> {
    prob.iter().map(|&p| if p >= THRESHOLD { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub dice: f64,
    pub iou: f64,
    pub se: f64,
    pub sp: f64,
}

/// `num / den`, or 1.0 / 0.0 when `den == 0` depending on whether the
/// related error count is zero.
fn ratio(num: u64, den: u64, errors: u64) -> f64 {
    if den == 0 {
        if errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// With no positives in the ground truth sensitivity is judged by the
    /// false positives; with no negatives specificity is judged by the false
    /// negatives.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let ConfusionCounts { tp, tn, fp, fn_ } = *c;
        Self {
            acc: ratio(tp + tn, c.total(), fp + fn_),
            dice: ratio(2 * tp, 2 * tp + fp + fn_, fp + fn_),
            iou: ratio(tp, tp + fp + fn_, fp + fn_),
            se: ratio(tp, tp + fn_, fp),
            sp: ratio(tn, tn + fp, fn_),
        }
    }

    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let s = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics { acc: s(|m| m.acc), dice: s(|m| m.dice), iou: s(|m| m.iou), se: s(|m| m.se), sp: s(|m| m.sp) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub acc: f64,
    pub dice: f64,
    pub iou: f64,
    pub se: f64,
    pub sp: f64,
}

impl MetricRow {
    pub fn new(image_id: impl Into<String>, m: Metrics) -> Self {
        Self { image_id: image_id.into(), acc: m.acc, dice: m.dice, iou: m.iou, se: m.se, sp: m.sp }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { acc: self.acc, dice: self.dice, iou: self.iou, se: self.se, sp: self.sp }
    }
}

/// Per-image rows followed by an aggregate row with id `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: MetricRow,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let all: Vec<Metrics> = rows.iter().map(MetricRow::metrics).collect();
        Self { aggregate: MetricRow::new("mean", Metrics::mean(&all)), rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ModelError::Data(e.to_string()))?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            w.serialize(r).map_err(|e| ModelError::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON object per line, aggregate last.
    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            serde_json::to_writer(&mut f, r).map_err(|e| ModelError::Data(e.to_string()))?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}
