//! Flat parameter storage and gradient accumulation.
//!
//! Every differentiable stage in this crate implements its backward pass by
//! hand and writes into a [`GradAccumulator`] congruent with the
//! [`ParamStore`] it read from. The [`Objective`] trait is the common shape of
//! a scalar function of the parameters together with its reverse-mode
//! gradient.

use std::ops::Range;

use crate::math::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradError {
    #[error("adjoint has {got} entries but the recorded output has {expected}")]
    AdjointShape { expected: usize, got: usize },
    #[error("gradient buffer has {got} entries but the parameter store has {expected}")]
    AccumulatorShape { expected: usize, got: usize },
    #[error("backward pass requested before any forward pass was recorded")]
    NotRecorded,
    #[error("unknown parameter segment {0:?}")]
    UnknownSegment(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named, contiguous, non-overlapping segments covering `0..total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment and returns its range.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let seg = Segment { name: name.into(), offset: self.total, len };
        self.total += len;
        let range = seg.range();
        self.segments.push(seg);
        range
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    pub values: Vec<S>,
    layout: Layout,
}

impl<S: Real> ParamStore<S> {
    pub fn zeros(layout: Layout) -> Self {
        Self { values: vec![S::ZERO; layout.total()], layout }
    }

    pub fn from_values(layout: Layout, values: Vec<S>) -> Result<Self, GradError> {
        if values.len() != layout.total() {
            return Err(GradError::AccumulatorShape { expected: layout.total(), got: values.len() });
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&[S], GradError> {
        let seg = self.layout.get(name).ok_or_else(|| GradError::UnknownSegment(name.into()))?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [S], GradError> {
        let seg = self.layout.get(name).ok_or_else(|| GradError::UnknownSegment(name.into()))?.range();
        Ok(&mut self.values[seg])
    }

    /// Same values in a different precision.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            values: self.values.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn zero_grads(&self) -> GradAccumulator<S> {
        GradAccumulator { grads: vec![S::ZERO; self.values.len()] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator<S> {
    pub grads: Vec<S>,
}

impl<S: Real> GradAccumulator<S> {
    pub fn new(len: usize) -> Self {
        Self { grads: vec![S::ZERO; len] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = S::ZERO);
    }

    pub fn check_congruent(&self, params: &ParamStore<S>) -> Result<(), GradError> {
        if self.grads.len() != params.len() {
            return Err(GradError::AccumulatorShape { expected: params.len(), got: self.grads.len() });
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += scale * *b;
        }
    }

    pub fn scale(&mut self, s: S) {
        self.grads.iter_mut().for_each(|g| *g *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.grads.iter().fold(S::ZERO, |m, g| m.max(g.abs()))
    }
}

/// A scalar function of the parameters with a reverse-mode gradient.
pub trait Objective<S: Real> {
    fn value(&self, params: &ParamStore<S>) -> S;

    /// Adds `scale * ∂value/∂θ` into `grads`.
    fn accumulate_gradient(&self, params: &ParamStore<S>, scale: S, grads: &mut GradAccumulator<S>);

    fn gradient(&self, params: &ParamStore<S>) -> GradAccumulator<S> {
        let mut g = params.zero_grads();
        self.accumulate_gradient(params, S::ONE, &mut g);
        g
    }
}

/// `a·f + b·g` for two objectives over the same parameters.
pub struct LinearCombination<'a, S> {
    pub terms: Vec<(S, &'a dyn Objective<S>)>,
}

impl<S: Real> Objective<S> for LinearCombination<'_, S> {
    fn value(&self, params: &ParamStore<S>) -> S {
        self.terms.iter().map(|(w, f)| *w * f.value(params)).sum()
    }

    fn accumulate_gradient(&self, params: &ParamStore<S>, scale: S, grads: &mut GradAccumulator<S>) {
        for (w, f) in &self.terms {
            f.accumulate_gradient(params, scale * *w, grads);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;

    impl Objective<f64> for SumSquares {
        fn value(&self, p: &ParamStore<f64>) -> f64 {
            p.values.iter().map(|v| v * v).sum()
        }
        fn accumulate_gradient(&self, p: &ParamStore<f64>, s: f64, g: &mut GradAccumulator<f64>) {
            for (gi, v) in g.grads.iter_mut().zip(&p.values) {
                *gi += s * 2.0 * v;
            }
        }
    }

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut layout = Layout::new();
        layout.push("a", 2);
        layout.push("b", vals.len() - 2);
        ParamStore::from_values(layout, vals.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_theta() {
        let p = store(&[0.5, -1.0, 2.0, 3.0]);
        let g = SumSquares.gradient(&p);
        assert_eq!(g.grads, vec![1.0, -2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let p = store(&[0.5, -1.0, 2.0]);
        let mut g = p.zero_grads();
        SumSquares.accumulate_gradient(&p, 0.0, &mut g);
        assert!(g.grads.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_segments_cover_without_overlap() {
        let p = store(&[0.0; 7]);
        let segs = p.layout().segments();
        assert_eq!(segs[0].range(), 0..2);
        assert_eq!(segs[1].range(), 2..7);
        assert_eq!(p.layout().total(), 7);
        assert!(matches!(p.segment("c"), Err(GradError::UnknownSegment(_))));
    }

    #[test]
    fn linear_combination_is_linear() {
        let p = store(&[0.3, 0.1, -0.7]);
        let combo = LinearCombination { terms: vec![(2.0, &SumSquares as &dyn Objective<f64>), (-0.5, &SumSquares)] };
        let g = combo.gradient(&p);
        let single = SumSquares.gradient(&p);
        for (a, b) in g.grads.iter().zip(&single.grads) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }
    }
}
