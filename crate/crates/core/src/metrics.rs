//! Overlap and boundary-distance metrics: Dice and the 95th-percentile
//! symmetric Hausdorff distance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::field::{argmax, softmax, DenseMask};
use crate::model::UNet;
use crate::scalar::Scalar;

/// Header of every metric CSV.
pub const METRIC_CSV_HEADER: &str = "id,dsc,hd95";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "{} values for a {height}x{width} mask",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    /// Foreground = every nonzero class.
    pub fn foreground(mask: &DenseMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            values: mask.labels().iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Foreground pixels with a background 8-neighbor or on the image edge.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.values[y * w + x] {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                let touches_bg = edge || (y - 1..=y + 1).any(|ny| (x - 1..=x + 1).any(|nx| !self.values[ny * w + nx]));
                if touches_bg {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn diagonal(&self) -> f64 {
        (self.height as f64).hypot(self.width as f64)
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, and 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let both = a.values.iter().zip(&b.values).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Larger of the two directed 95th-percentile boundary distances. Both
/// empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shapes(a, b)?;
    let (ba, bb) = (a.boundary(), b.boundary());
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(a.diagonal()),
        _ => {}
    }
    let ab = percentile(&mut directed(&ba, &bb), 95.0);
    let ba_ = percentile(&mut directed(&bb, &ba), 95.0);
    Ok(ab.max(ba_))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Top,
    Bottom,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Top => "top",
            Branch::Bottom => "bottom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub dsc: f64,
    pub hd95: f64,
}

/// Per-image rows (sorted by id) and their means; `mean_dsc` is scaled by
/// 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub mean_dsc: f64,
    pub mean_hd95: f64,
}

impl Evaluation {
    pub fn from_rows(mut rows: Vec<MetricRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len().max(1) as f64;
        let mean_dsc = 100.0 * rows.iter().map(|r| r.dsc).sum::<f64>() / n;
        let mean_hd95 = rows.iter().map(|r| r.hd95).sum::<f64>() / n;
        Self {
            rows,
            mean_dsc,
            mean_hd95,
        }
    }

    /// `id,dsc,hd95` with DSC scaled by 100, then a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRIC_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.4}", r.id, 100.0 * r.dsc, r.hd95);
        }
        let _ = writeln!(out, "MEAN,{:.4},{:.4}", self.mean_dsc, self.mean_hd95);
        out
    }
}

/// Per-pixel argmax of one branch.
pub fn predict<T: Scalar>(model: &UNet<T>, branch: Branch, sample: &LabeledSample<T>) -> Result<DenseMask> {
    let out = model.forward(&sample.image)?;
    let logits = match branch {
        Branch::Top => out.top,
        Branch::Bottom => out.bottom.ok_or(Error::MissingBranch)?,
    };
    Ok(argmax(&softmax(&logits)))
}

pub fn score(pred: &DenseMask, truth: &DenseMask) -> Result<(f64, f64)> {
    let (p, t) = (BinaryMask::foreground(pred), BinaryMask::foreground(truth));
    Ok((dice(&p, &t)?, hd95(&p, &t)?))
}

pub fn evaluate<T: Scalar>(model: &UNet<T>, branch: Branch, samples: &[LabeledSample<T>]) -> Result<Evaluation> {
    if branch == Branch::Bottom && !model.is_dual() {
        return Err(Error::MissingBranch);
    }
    let rows = samples
        .iter()
        .map(|s| {
            let (dsc, hd) = score(&predict(model, branch, s)?, &s.mask)?;
            Ok(MetricRow {
                id: s.id.clone(),
                dsc,
                hd95: hd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_rows(rows))
}
