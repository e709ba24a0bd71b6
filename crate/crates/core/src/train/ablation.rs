use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, EvalCache, RunConfig};
use crate::cam::{BlockRange, Coupling};
use crate::conformer::Conformer;
use crate::data::Sample;
use crate::error::Result;

/// One comparison row to produce.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AblationItem {
    /// Coupling method on the given model, attention over all blocks.
    Coupling(Coupling),
    /// Attention-map product with attention from a block range.
    Range(BlockRange),
    /// Retrain with these logit weights, then score `coupling`.
    Weights { w_conv: f64, w_trans: f64, coupling: Coupling },
}

impl AblationItem {
    /// Coupling methods, block ranges, and the logit-weight sweep over
    /// `{0, 0.1, …, 1}` for both the plain and attention-refined maps.
    pub fn full_suite() -> Vec<AblationItem> {
        let mut items: Vec<AblationItem> = Coupling::ALL.iter().map(|&c| AblationItem::Coupling(c)).collect();
        items.extend(BlockRange::ALL.iter().map(|&r| AblationItem::Range(r)));
        for i in 0..=10 {
            let w_conv = i as f64 / 10.0;
            for coupling in [Coupling::None, Coupling::TransCam] {
                items.push(AblationItem::Weights {
                    w_conv,
                    w_trans: (10 - i) as f64 / 10.0,
                    coupling,
                });
            }
        }
        items
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub range: BlockRange,
    pub w_conv: f64,
    pub w_trans: f64,
    pub best_tau: f64,
    pub miou: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("group,variant,range,w_conv,w_trans,best_tau,miou\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.1},{:.1},{:.2},{:.6}",
            r.group,
            r.variant,
            r.range.label(),
            r.w_conv,
            r.w_trans,
            r.best_tau,
            r.miou
        );
    }
    out
}

/// Best-threshold pseudo-label mIoU for every item. `model` was trained
/// with `cfg`; weight items retrain from scratch with `sweep_epochs`
/// (default `cfg.epochs`) and otherwise identical settings, reusing
/// `model` when nothing differs.
pub fn ablation_runner(
    model: &Conformer,
    cfg: &RunConfig,
    train_set: &[Sample],
    eval: &[Sample],
    items: &[AblationItem],
    sweep_epochs: Option<usize>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let base = EvalCache::build(model, eval, cfg)?;
    let epochs = sweep_epochs.unwrap_or(cfg.epochs);
    let mut retrained: Vec<((u64, u64), Conformer)> = Vec::new();
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let row = match *item {
            AblationItem::Coupling(c) => {
                let s = base.sweep(c, BlockRange::All, cfg.gate_labels, &cfg.tau_grid)?;
                AblationRow {
                    group: "coupling".into(),
                    variant: c.label().into(),
                    range: BlockRange::All,
                    w_conv: cfg.w_conv,
                    w_trans: cfg.w_trans,
                    best_tau: s.best_tau,
                    miou: s.best_miou,
                }
            }
            AblationItem::Range(r) => {
                let s = base.sweep(Coupling::TransCam, r, cfg.gate_labels, &cfg.tau_grid)?;
                AblationRow {
                    group: "range".into(),
                    variant: Coupling::TransCam.label().into(),
                    range: r,
                    w_conv: cfg.w_conv,
                    w_trans: cfg.w_trans,
                    best_tau: s.best_tau,
                    miou: s.best_miou,
                }
            }
            AblationItem::Weights { w_conv, w_trans, coupling } => {
                let key = (w_conv.to_bits(), w_trans.to_bits());
                let run = RunConfig {
                    w_conv,
                    w_trans,
                    epochs,
                    ..cfg.clone()
                };
                let reuse = run == *cfg;
                if !reuse && !retrained.iter().any(|(k, _)| *k == key) {
                    log::info!("retraining with logit weights ({w_conv}, {w_trans}) for {epochs} epochs");
                    let out = train(&run, train_set, &[], |_| {})?;
                    retrained.push((key, out.model));
                }
                let m = if reuse {
                    model
                } else {
                    &retrained.iter().find(|(k, _)| *k == key).expect("trained above").1
                };
                let cache = EvalCache::build(m, eval, &run)?;
                let s = cache.sweep(coupling, cfg.range, cfg.gate_labels, &cfg.tau_grid)?;
                AblationRow {
                    group: "weights".into(),
                    variant: coupling.label().into(),
                    range: cfg.range,
                    w_conv,
                    w_trans,
                    best_tau: s.best_tau,
                    miou: s.best_miou,
                }
            }
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
