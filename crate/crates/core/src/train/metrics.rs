use serde::{Deserialize, Serialize};

use crate::cam::{pseudo_label, ClassActivationMap, PseudoLabelMap};
use crate::error::{Error, Result};

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predicted pixels vs {} truth pixels", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::Contract(format!("label {} outside {} classes", p.max(t), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Per-class IoU (`None` when a class is absent from both prediction
    /// and truth) and their mean over the present classes.
    pub fn report(&self) -> MiouReport {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Index 0 is background.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per class, including background, over a whole set of images.
pub fn evaluate_miou(pred: &[PseudoLabelMap], truth: &[&[u8]], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "evaluate_miou",
            format!("{} predictions for {} masks", pred.len(), truth.len()),
        ));
    }
    let mut conf = Confusion::new(num_classes);
    for (p, t) in pred.iter().zip(truth) {
        conf.add(&p.labels, t)?;
    }
    Ok(conf.report())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSweep {
    pub best_tau: f64,
    pub best_miou: f64,
    pub curve: Vec<TauPoint>,
}

/// `0, step, 2·step, …, 1`; `step` is rounded so the grid ends at 1.
pub fn tau_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Pseudo-label mIoU of normalized image-sized maps at one threshold.
pub fn miou_at(cams: &[ClassActivationMap], truth: &[&[u8]], tau: f64) -> Result<MiouReport> {
    if cams.len() != truth.len() {
        return Err(Error::shape("miou_at", format!("{} maps for {} masks", cams.len(), truth.len())));
    }
    let classes = cams.first().map_or(1, |c| c.num_classes() + 1);
    let mut conf = Confusion::new(classes);
    for (m, t) in cams.iter().zip(truth) {
        let p = pseudo_label(m, tau, m.height(), m.width())?;
        conf.add(&p.labels, t)?;
    }
    Ok(conf.report())
}

/// Evaluates every threshold of `grid`; the best is the lowest τ among
/// those with maximal mIoU.
pub fn tau_sweep(cams: &[ClassActivationMap], truth: &[&[u8]], grid: &[f64]) -> Result<TauSweep> {
    if grid.is_empty() {
        return Err(Error::Config("empty threshold grid".into()));
    }
    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(f64::total_cmp);
    let mut curve = Vec::with_capacity(grid.len());
    let mut best = TauPoint {
        tau: f64::NAN,
        miou: f64::NEG_INFINITY,
    };
    for &tau in &order {
        let miou = miou_at(cams, truth, tau)?.miou;
        curve.push(TauPoint { tau, miou });
        if miou > best.miou {
            best = TauPoint { tau, miou };
        }
    }
    Ok(TauSweep {
        best_tau: best.tau,
        best_miou: best.miou,
        curve,
    })
}
