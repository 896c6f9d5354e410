use std::collections::BTreeMap;

use crate::error::{invalid, DmmError, Result};
use crate::image::Image;
use crate::morphing::{scale_flow, warp, FlowField, MorphScale};

/// Elementwise mean of the last `k` fields of `history`.
pub fn average_flow(history: &[FlowField], k: usize) -> Result<FlowField> {
    if k == 0 {
        return Err(invalid("flow_window", "must be at least 1"));
    }
    if history.len() < k {
        return Err(DmmError::InsufficientHistory {
            have: history.len(),
            need: k,
        });
    }
    mean_of(&history.iter().collect::<Vec<_>>()[history.len() - k..])
}

fn mean_of(fields: &[&FlowField]) -> Result<FlowField> {
    let first = fields[0];
    let (h, w) = (first.height(), first.width());
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    for f in fields {
        if (f.height(), f.width()) != (h, w) {
            return Err(DmmError::Shape("flow fields differ in size".into()));
        }
        for (a, v) in dx.iter_mut().zip(f.dx()) {
            *a += v;
        }
        for (a, v) in dy.iter_mut().zip(f.dy()) {
            *a += v;
        }
    }
    let n = fields.len() as f64;
    FlowField::new(
        h,
        w,
        dx.iter().map(|v| v / n).collect(),
        dy.iter().map(|v| v / n).collect(),
    )
}

/// Pair-independent field from the flows of the most recent steps: the
/// fields are averaged per pair first, then across pairs in ascending pair
/// order.
pub fn unified_flow(recent: &[Vec<(u32, FlowField)>]) -> Result<FlowField> {
    let mut per_pair: BTreeMap<u32, Vec<&FlowField>> = BTreeMap::new();
    for step in recent {
        for (pair, f) in step {
            per_pair.entry(*pair).or_default().push(f);
        }
    }
    if per_pair.is_empty() {
        return Err(DmmError::InsufficientHistory { have: 0, need: 1 });
    }
    let means = per_pair
        .values()
        .map(|fs| mean_of(fs))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&means.iter().collect::<Vec<_>>())
}

/// Frames `warp(x_S, η·φ)` for each η, in the given order.
pub fn synthesize_sequence(source: &Image, flow: &FlowField, etas: &[f64]) -> Result<Vec<Image>> {
    if etas.is_empty() {
        return Err(invalid(
            "etas",
            "at least one morphing intensity is required",
        ));
    }
    etas.iter()
        .map(|&eta| {
            MorphScale::new(eta)?;
            warp(source, &scale_flow(flow, eta)?)
        })
        .collect()
}
