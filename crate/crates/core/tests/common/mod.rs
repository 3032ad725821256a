#![allow(dead_code)]

use mixsup::field::{softmax, DenseMask, LogitField, PartialMask, SimplexField, UNLABELED};
use rand::Rng;

pub fn random_logits(rng: &mut impl Rng, h: usize, w: usize, c: usize, scale: f64) -> LogitField<f64> {
    let scores = (0..h * w * c).map(|_| rng.gen_range(-scale..scale)).collect();
    LogitField::new(h, w, c, scores).unwrap()
}

/// Random logits whose per-pixel top two scores differ by at least `gap`.
pub fn untied_logits(rng: &mut impl Rng, h: usize, w: usize, c: usize, gap: f64) -> LogitField<f64> {
    loop {
        let l = random_logits(rng, h, w, c, 3.0);
        let ok = (0..h * w).all(|i| {
            let mut v: Vec<f64> = (0..c).map(|k| l.scores()[k * h * w + i]).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1] > gap
        });
        if ok {
            return l;
        }
    }
}

pub fn random_simplex(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> SimplexField<f64> {
    // Softmax of wide-range scores reaches near the vertices as well as the center.
    softmax(&random_logits(rng, h, w, c, 8.0))
}

pub fn random_dense(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> DenseMask {
    let labels = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();
    DenseMask::new(h, w, c, labels).unwrap()
}

/// Roughly a third of the pixels labeled, at least one.
pub fn random_partial(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> PartialMask {
    let mut labels: Vec<u8> = (0..h * w)
        .map(|_| {
            if rng.gen_bool(0.35) {
                rng.gen_range(0..c as u8)
            } else {
                UNLABELED
            }
        })
        .collect();
    labels[rng.gen_range(0..h * w)] = rng.gen_range(0..c as u8);
    PartialMask::new(h, w, c, labels).unwrap()
}

pub fn with_scores(l: &LogitField<f64>, scores: Vec<f64>) -> LogitField<f64> {
    LogitField::new(l.height(), l.width(), l.num_classes(), scores).unwrap()
}

/// Central finite differences of `f` with respect to every logit.
pub fn numeric_grad(l: &LogitField<f64>, step: f64, f: impl Fn(&LogitField<f64>) -> f64) -> Vec<f64> {
    (0..l.scores().len())
        .map(|i| {
            let mut plus = l.scores().to_vec();
            let mut minus = l.scores().to_vec();
            plus[i] += step;
            minus[i] -= step;
            (f(&with_scores(l, plus)) - f(&with_scores(l, minus))) / (2.0 * step)
        })
        .collect()
}

/// Max-norm relative error between two gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
