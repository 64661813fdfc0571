//! Server-side robust aggregation and client-side post-hoc defenses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{CleanObjective, LocalRun, TrainOptions};
use crate::nn::ParamVector;
use crate::tensor::sign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationRule {
    Fedavg,
    Clipavg,
    Multikrum,
    Median,
    Sign,
    /// No defense: plain averaging.
    None,
}

impl AggregationRule {
    pub const ALL: [AggregationRule; 6] = [
        AggregationRule::Fedavg,
        AggregationRule::Clipavg,
        AggregationRule::Multikrum,
        AggregationRule::Median,
        AggregationRule::Sign,
        AggregationRule::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationRule::Fedavg => "fedavg",
            AggregationRule::Clipavg => "clipavg",
            AggregationRule::Multikrum => "multikrum",
            AggregationRule::Median => "median",
            AggregationRule::Sign => "sign",
            AggregationRule::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Whether ClipAvg clamps raw parameters or parameter deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Raw,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostHoc {
    None,
    Finetune(usize),
    SimpleTuning(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub rule: AggregationRule,
    pub clip_threshold: f32,
    pub clip_mode: ClipMode,
    pub krum_f: usize,
    pub krum_select: usize,
    pub sign_step: f32,
    pub posthoc: PostHoc,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            rule: AggregationRule::Fedavg,
            clip_threshold: 1.0,
            clip_mode: ClipMode::Raw,
            krum_f: 1,
            krum_select: 5,
            sign_step: 0.01,
            posthoc: PostHoc::None,
        }
    }
}

/// Output of an aggregation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub params: ParamVector,
    /// Positions (into the upload list) that contributed.
    pub selected: Vec<usize>,
}

impl DefenseSpec {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.clip_threshold > 0.0) {
            out.push(("clip_threshold".into(), format!("must be > 0, got {}", self.clip_threshold)));
        }
        if !(self.sign_step > 0.0) {
            out.push(("sign_step".into(), format!("must be > 0, got {}", self.sign_step)));
        }
        if self.krum_select == 0 {
            out.push(("krum_select".into(), "must be >= 1".into()));
        }
        out
    }

    pub fn aggregate(&self, global: &ParamVector, uploads: &[ParamVector]) -> Result<Aggregate> {
        let all = (0..uploads.len()).collect();
        let params = match self.rule {
            AggregationRule::Fedavg | AggregationRule::None => fedavg(uploads)?,
            AggregationRule::Clipavg => match self.clip_mode {
                ClipMode::Raw => clip_avg(uploads, self.clip_threshold)?,
                ClipMode::Delta => clip_avg_delta(global, uploads, self.clip_threshold)?,
            },
            AggregationRule::Median => coord_median(uploads)?,
            AggregationRule::Sign => sign_agg(global, uploads, self.sign_step)?,
            AggregationRule::Multikrum => return multi_krum(uploads, self.krum_f, self.krum_select),
        };
        Ok(Aggregate { params, selected: all })
    }
}

fn check_uploads(uploads: &[ParamVector]) -> Result<()> {
    let Some(first) = uploads.first() else {
        return Err(Error::TooFewUploads { got: 0, need: 1 });
    };
    for u in &uploads[1..] {
        first.check_layout(u)?;
    }
    Ok(())
}

fn per_coordinate(uploads: &[ParamVector], f: impl Fn(usize, &mut Vec<f32>) -> f32) -> Result<ParamVector> {
    check_uploads(uploads)?;
    let n = uploads[0].len();
    let mut column = Vec::with_capacity(uploads.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        column.clear();
        column.extend(uploads.iter().map(|u| u.values()[i]));
        out.push(f(i, &mut column));
    }
    uploads[0].with_values(out)
}

/// Order-independent mean: sorting makes the f64 sum exact-reproducible
/// under any permutation of the uploads.
fn mean(column: &mut [f32]) -> f32 {
    column.sort_by(f32::total_cmp);
    (column.iter().map(|&v| v as f64).sum::<f64>() / column.len() as f64) as f32
}

/// Coordinate-wise arithmetic mean with uniform weights.
pub fn fedavg(uploads: &[ParamVector]) -> Result<ParamVector> {
    per_coordinate(uploads, |_, c| mean(c))
}

/// Clamps every upload coordinate to `[-t, t]`, then averages.
pub fn clip_avg(uploads: &[ParamVector], t: f32) -> Result<ParamVector> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("clip threshold must be > 0, got {t}")));
    }
    per_coordinate(uploads, |_, c| {
        c.iter_mut().for_each(|v| *v = v.clamp(-t, t));
        mean(c)
    })
}

/// Variant that clamps each update `upload - global` instead.
pub fn clip_avg_delta(global: &ParamVector, uploads: &[ParamVector], t: f32) -> Result<ParamVector> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!("clip threshold must be > 0, got {t}")));
    }
    check_uploads(uploads)?;
    global.check_layout(&uploads[0])?;
    let g = global.values();
    per_coordinate(uploads, |i, c| {
        c.iter_mut().for_each(|v| *v = (*v - g[i]).clamp(-t, t));
        g[i] + mean(c)
    })
}

/// Per-coordinate median; the midpoint of the two central values for even counts.
pub fn coord_median(uploads: &[ParamVector]) -> Result<ParamVector> {
    per_coordinate(uploads, |_, c| {
        c.sort_by(f32::total_cmp);
        let n = c.len();
        if n % 2 == 1 {
            c[n / 2]
        } else {
            ((c[n / 2 - 1] as f64 + c[n / 2] as f64) / 2.0) as f32
        }
    })
}

/// `global + eta * sign(mean(upload - global))`.
pub fn sign_agg(global: &ParamVector, uploads: &[ParamVector], eta: f32) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("sign step must be > 0, got {eta}")));
    }
    check_uploads(uploads)?;
    global.check_layout(&uploads[0])?;
    let g = global.values();
    per_coordinate(uploads, |i, c| {
        let gi = g[i];
        let mut d: Vec<f64> = c.iter().map(|&v| v as f64 - gi as f64).collect();
        d.sort_by(f64::total_cmp);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        gi + eta * sign(m as f32)
    })
}

/// Krum scores: for each upload, the sum of its `n - f - 2` smallest
/// squared distances to the other uploads.
pub fn krum_scores(uploads: &[ParamVector], f: usize) -> Result<Vec<f64>> {
    let n = uploads.len();
    if n < f + 3 {
        return Err(Error::TooFewUploads { got: n, need: f + 3 });
    }
    check_uploads(uploads)?;
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = uploads[i]
                .values()
                .iter()
                .zip(uploads[j].values())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let k = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..k].iter().sum()
        })
        .collect())
}

/// Averages the `m_sel` uploads with the smallest Krum scores. Score ties
/// are broken by comparing the uploads themselves, so the choice does not
/// depend on upload order.
pub fn multi_krum(uploads: &[ParamVector], f: usize, m_sel: usize) -> Result<Aggregate> {
    let scores = krum_scores(uploads, f)?;
    let n = uploads.len();
    if m_sel == 0 || m_sel > n {
        return Err(Error::invalid(format!("cannot select {m_sel} of {n} uploads with f = {f}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a].total_cmp(&scores[b]).then_with(|| {
            let (x, y) = (uploads[a].values(), uploads[b].values());
            x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut selected = order[..m_sel].to_vec();
    let chosen: Vec<ParamVector> = selected.iter().map(|&i| uploads[i].clone()).collect();
    selected.sort_unstable();
    Ok(Aggregate { params: fedavg(&chosen)?, selected })
}

/// Re-draws the classification head, freezes the body and trains the head.
pub fn simple_tuning(run: &LocalRun<'_>, params: &ParamVector, steps: usize, rng: &mut impl Rng) -> Result<ParamVector> {
    let head = run.net.head_mask()?;
    let mut p = params.clone();
    run.net.reinit_where(&mut p, rng, |e| run.net.is_head(e));
    run.train(&mut p, steps, rng, &mut CleanObjective, TrainOptions { mask: Some(&head), prox: None })?;
    Ok(p)
}

/// Applies a post-hoc defense to a personalized model.
pub fn apply_posthoc(posthoc: PostHoc, run: &LocalRun<'_>, params: &ParamVector, rng: &mut impl Rng) -> Result<ParamVector> {
    match posthoc {
        PostHoc::None => Ok(params.clone()),
        PostHoc::Finetune(k) => {
            let mut p = params.clone();
            run.train(&mut p, k, rng, &mut CleanObjective, TrainOptions::default())?;
            Ok(p)
        }
        PostHoc::SimpleTuning(k) => simple_tuning(run, params, k, rng),
    }
}
