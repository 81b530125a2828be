use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Validates a shape and returns its element count.
pub fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Contiguous row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    /// Builds a grid, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if data.len() != len {
            return Err(Error::Length(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        let grid = Self { shape, data };
        grid.ensure_finite("grid construction")?;
        Ok(grid)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let len = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, &self.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        other.ensure_shape(&self.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: S, other: &Self) -> Result<()> {
        other.ensure_shape(&self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.data.len()).unwrap()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        other.ensure_shape(&self.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        other.ensure_shape(&self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Bitwise equality of every element, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        S: BitRepr,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn cast<T: Scalar>(&self) -> Grid<T> {
        Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from(*v).expect("scalar conversion"))
                .collect(),
        }
    }
}

/// Raw bit access, for exact-equality assertions on floats.
pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

/// N frames of identical `C x H x W` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Video<S> {
    frames: Vec<Grid<S>>,
}

/// Per-frame binary masks, stored as single-channel frames.
pub type MaskSequence<S> = Video<S>;

impl<S: Scalar> Video<S> {
    pub fn new(frames: Vec<Grid<S>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Data("video needs at least one frame".into()))?;
        if first.shape().len() != 3 {
            return Err(Error::InvalidShape(first.shape().to_vec()));
        }
        for f in &frames[1..] {
            f.ensure_shape(first.shape())?;
        }
        Ok(Self { frames })
    }

    /// Masks of all ones (global editing).
    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self {
            frames: (0..n).map(|_| Grid::filled(&[1, h, w], S::one())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Grid<S>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Grid<S> {
        &self.frames[i]
    }

    pub fn into_frames(self) -> Vec<Grid<S>> {
        self.frames
    }

    /// `[C, H, W]` of every frame.
    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    pub fn channels(&self) -> usize {
        self.frame_shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frame_shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frame_shape()[2]
    }

    /// Stacks into one `N x C x H x W` grid.
    pub fn to_grid(&self) -> Grid<S> {
        let mut shape = vec![self.frames.len()];
        shape.extend_from_slice(self.frame_shape());
        let data = self
            .frames
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        Grid { shape, data }
    }

    pub fn from_grid(grid: &Grid<S>) -> Result<Self> {
        if grid.shape().len() != 4 {
            return Err(Error::InvalidShape(grid.shape().to_vec()));
        }
        let frame_shape = grid.shape()[1..].to_vec();
        let per = frame_shape.iter().product::<usize>();
        let frames = grid
            .data()
            .chunks(per)
            .map(|c| Grid::new(frame_shape.clone(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    /// Checks that `masks` are `N x 1 x H x W` for this video.
    pub fn ensure_masks(&self, masks: &MaskSequence<S>) -> Result<()> {
        if masks.len() != self.len() {
            return Err(Error::Data(format!(
                "{} masks for {} frames",
                masks.len(),
                self.len()
            )));
        }
        masks
            .frames[0]
            .ensure_shape(&[1, self.height(), self.width()])
    }

    pub fn is_binary(&self) -> bool {
        self.frames
            .iter()
            .all(|m| m.data().iter().all(|&v| v == S::zero() || v == S::one()))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        S: BitRepr,
    {
        self.frames.len() == other.frames.len()
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Grid::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Grid::<f64>::new(vec![], vec![]).is_err());
        assert!(Grid::<f64>::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Grid::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Grid::new(vec![2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn video_stacks_and_unstacks() {
        let frames: Vec<Grid<f64>> = (0..3)
            .map(|i| Grid::from_fn(&[2, 2, 2], |k| (i * 8 + k) as f64))
            .collect();
        let video = Video::new(frames).unwrap();
        let stacked = video.to_grid();
        assert_eq!(stacked.shape(), &[3, 2, 2, 2]);
        assert_eq!(Video::from_grid(&stacked).unwrap(), video);
    }

    #[test]
    fn video_rejects_mixed_frame_shapes() {
        let frames = vec![Grid::<f64>::zeros(&[1, 2, 2]), Grid::zeros(&[1, 2, 3])];
        assert!(Video::new(frames).is_err());
    }

    #[test]
    fn bitwise_eq_sees_signed_zero() {
        let a = Grid::new(vec![1], vec![0.0f64]).unwrap();
        let b = Grid::new(vec![1], vec![-0.0f64]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }
}
