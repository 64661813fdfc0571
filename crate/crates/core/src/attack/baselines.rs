//! Upload transforms and masks used by the baseline attacks.

use crate::error::{Error, Result};
use crate::nn::{CoordMask, ParamVector};

/// Model replacement: `global + gamma * (local - global)`.
pub fn modrep_amplify(local: &ParamVector, global: &ParamVector, gamma: f32) -> Result<ParamVector> {
    let d = local.delta(global)?;
    let values = global.values().iter().zip(&d).map(|(&g, &d)| g + gamma * d).collect();
    global.with_values(values)
}

/// Projects the update onto the L2 ball of radius `rho` around `global`.
pub fn pgd_project_upload(local: &ParamVector, global: &ParamVector, rho: f32) -> Result<ParamVector> {
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("projection radius must be >= 0, got {rho}")));
    }
    let d = local.delta(global)?;
    let norm = d.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm <= rho as f64 {
        return Ok(local.clone());
    }
    let s = rho as f64 / norm;
    let values = global.values().iter().zip(&d).map(|(&g, &d)| (g as f64 + s * d as f64) as f32).collect();
    global.with_values(values)
}

/// Selects the `ratio` fraction of coordinates with the smallest
/// `|delta|` (ties broken by index). Without a previous delta every
/// coordinate is selected.
pub fn neurotoxin_mask(prev_delta: Option<&[f32]>, len: usize, ratio: f32) -> Result<CoordMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("mask ratio must be in (0, 1], got {ratio}")));
    }
    let Some(delta) = prev_delta else {
        return Ok(CoordMask::all(len));
    };
    if delta.len() != len {
        return Err(Error::Layout(format!("delta has {} coordinates, expected {len}", delta.len())));
    }
    let keep = ((ratio as f64 * len as f64).round() as usize).clamp(1, len);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()).then(a.cmp(&b)));
    let mut mask = CoordMask::none(len);
    for &i in &order[..keep] {
        mask.0[i] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayoutEntry, ParamKind, ParamLayout};
    use std::sync::Arc;

    fn vec(values: Vec<f32>) -> ParamVector {
        let n = values.len();
        let layout = ParamLayout::from_entries(vec![LayoutEntry {
            name: "0.dense.weight".into(),
            kind: ParamKind::Weight,
            offset: 0,
            shape: vec![n],
            layer: 0,
        }])
        .unwrap();
        ParamVector::new(Arc::new(layout), values).unwrap()
    }

    #[test]
    fn modrep_examples() {
        let g = vec(vec![0.5, -1.0, 2.0]);
        let l = vec(vec![0.6, -1.0, 1.0]);
        assert_eq!(modrep_amplify(&l, &g, 1.0).unwrap(), l);
        assert_eq!(modrep_amplify(&g, &g, 10.0).unwrap(), g);
        let z = vec(vec![0.0, 0.0, 0.0]);
        let one = vec(vec![0.1, 0.0, 0.0]);
        let out = modrep_amplify(&one, &z, 10.0).unwrap();
        assert!((out.values()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pgd_examples() {
        let g = vec(vec![1.0, 1.0]);
        let inside = vec(vec![1.3, 0.8]);
        assert_eq!(pgd_project_upload(&inside, &g, 1.0).unwrap(), inside);
        let far = vec(vec![4.0, 5.0]);
        let out = pgd_project_upload(&far, &g, 1.0).unwrap();
        let d = out.delta(&g).unwrap();
        let norm = (d[0] as f64).hypot(d[1] as f64);
        assert!((norm - 1.0).abs() < 1e-6);
        let cos = (d[0] as f64 * 3.0 + d[1] as f64 * 4.0) / (norm * 5.0);
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn neurotoxin_examples() {
        let m = neurotoxin_mask(Some(&[5.0, 1.0, 3.0, 2.0]), 4, 0.25).unwrap();
        assert_eq!(m.0, vec![false, true, false, false]);
        assert_eq!(neurotoxin_mask(Some(&[5.0, -1.0, 3.0]), 3, 1.0).unwrap().count(), 3);
        assert_eq!(neurotoxin_mask(None, 5, 0.1).unwrap().count(), 5);
        assert!(neurotoxin_mask(None, 5, 0.0).is_err());
    }
}
