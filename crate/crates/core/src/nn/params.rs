//! Flat parameter vectors with a named layer table.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn is_bn(self) -> bool {
        matches!(
            self,
            ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::BnRunningMean | ParamKind::BnRunningVar
        )
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnGamma => 2,
            ParamKind::BnBeta => 3,
            ParamKind::BnRunningMean => 4,
            ParamKind::BnRunningVar => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnGamma,
            3 => ParamKind::BnBeta,
            4 => ParamKind::BnRunningMean,
            5 => ParamKind::BnRunningVar,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn-gamma",
            ParamKind::BnBeta => "bn-beta",
            ParamKind::BnRunningMean => "bn-running-mean",
            ParamKind::BnRunningVar => "bn-running-var",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Index of the owning layer in the network spec.
    pub layer: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous table of parameter entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn from_entries(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut offset = 0;
        for e in &entries {
            if e.offset != offset {
                return Err(Error::Layout(format!(
                    "entry `{}` starts at {} but the previous entry ended at {offset}",
                    e.name, e.offset
                )));
            }
            offset += e.len();
        }
        Ok(Self { entries, total: offset })
    }

    pub fn for_network(spec: &NetworkSpec, shapes: &[Vec<usize>]) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |entries: &mut Vec<LayoutEntry>, layer: usize, tag: &str, kind: ParamKind, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry { name: format!("{layer}.{tag}.{}", kind.name()), kind, offset, shape, layer });
            offset += len;
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &shapes[i];
            match *layer {
                LayerSpec::Dense { out } => {
                    push(&mut entries, i, "dense", ParamKind::Weight, vec![input[0], out]);
                    push(&mut entries, i, "dense", ParamKind::Bias, vec![out]);
                }
                LayerSpec::Conv2d { out_channels, kernel, .. } => {
                    push(&mut entries, i, "conv", ParamKind::Weight, vec![out_channels, input[0], kernel, kernel]);
                    push(&mut entries, i, "conv", ParamKind::Bias, vec![out_channels]);
                }
                LayerSpec::ConvTranspose2d { out_channels, kernel, .. } => {
                    push(&mut entries, i, "deconv", ParamKind::Weight, vec![input[0], out_channels, kernel, kernel]);
                    push(&mut entries, i, "deconv", ParamKind::Bias, vec![out_channels]);
                }
                LayerSpec::BatchNorm => {
                    let c = input[0];
                    for kind in [ParamKind::BnGamma, ParamKind::BnBeta, ParamKind::BnRunningMean, ParamKind::BnRunningVar] {
                        push(&mut entries, i, "bn", kind, vec![c]);
                    }
                }
                LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Flatten => {}
            }
        }
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entry(&self, layer: usize, kind: ParamKind) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind)
    }

    /// Per-coordinate mask built from an entry predicate.
    pub fn mask_where(&self, pred: impl Fn(&LayoutEntry) -> bool) -> CoordMask {
        let mut bits = vec![false; self.total];
        for e in self.entries.iter().filter(|e| pred(e)) {
            bits[e.range()].iter_mut().for_each(|b| *b = true);
        }
        CoordMask(bits)
    }

    /// Coordinates that an optimizer may update.
    pub fn trainable_mask(&self) -> CoordMask {
        self.mask_where(|e| e.kind.is_trainable())
    }
}

/// A boolean selection over parameter coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordMask(pub Vec<bool>);

impl CoordMask {
    pub fn all(n: usize) -> Self {
        CoordMask(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        CoordMask(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn and(&self, other: &CoordMask) -> CoordMask {
        CoordMask(self.0.iter().zip(&other.0).map(|(a, b)| *a && *b).collect())
    }

    pub fn not(&self) -> CoordMask {
        CoordMask(self.0.iter().map(|b| !b).collect())
    }
}

/// Flat parameter storage plus its shared layout table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T = f32> {
    values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Real> ParamVector<T> {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "layout holds {} coordinates but {} values were given",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.len();
        Self { values: vec![T::zero(); n], layout }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, entry: &LayoutEntry) -> &[T] {
        &self.values[entry.range()]
    }

    pub fn slice_mut(&mut self, entry: &LayoutEntry) -> &mut [T] {
        &mut self.values[entry.range()]
    }

    pub fn same_layout(&self, other: &ParamVector<T>) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector<T>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout("parameter vectors have different layouts".into()))
        }
    }

    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// `self - other`, coordinate-wise.
    pub fn delta(&self, other: &ParamVector<T>) -> Result<Vec<T>> {
        self.check_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect())
    }

    pub fn l2_distance(&self, other: &ParamVector<T>) -> Result<f64> {
        Ok(self.delta(other)?.iter().map(|d| d.f64() * d.f64()).sum::<f64>().sqrt())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), layout: self.layout.clone() }
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector { values: self.values.iter().map(|v| U::of(v.f64())).collect(), layout: self.layout.clone() }
    }
}
