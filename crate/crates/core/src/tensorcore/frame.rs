use crate::error::{Error, Result};

/// `(channels, height, width)` of one latent frame.
pub type Shape = (usize, usize, usize);

/// One latent frame, stored channel-major (`c`, then row, then column).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentFrame {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let (c, h, w) = shape;
        assert!(c >= 1 && h >= 1 && w >= 1, "latent dimensions must be >= 1");
        Self {
            channels: c,
            height: h,
            width: w,
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::param(format!("latent shape {shape:?} has a zero dimension")));
        }
        if data.len() != c * h * w {
            return Err(Error::param(format!(
                "latent of shape {shape:?} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent data".into()));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let (c, h, w) = shape;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data[(ci * h + y) * w + x] = f(ci, y, x);
                }
            }
        }
        out
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// The `h * w` slice holding channel `c`.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &LatentFrame) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `f(a, b)` over two frames of equal shape.
    pub fn zip_map(&self, other: &LatentFrame, f: impl Fn(f64, f64) -> f64) -> Result<LatentFrame> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(LatentFrame {
            data,
            ..*self
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentFrame {
        LatentFrame {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &LatentFrame, b: f64) -> Result<LatentFrame> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sub(&self, other: &LatentFrame) -> Result<LatentFrame> {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn scale(&self, k: f64) -> LatentFrame {
        self.map(|v| k * v)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentFrame) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Per-pixel mean over channels, row-major `h * w`.
    pub fn channel_mean(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// An ordered, nonempty stack of equally shaped latent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    frames: Vec<LatentFrame>,
}

impl LatentSequence {
    pub fn new(frames: Vec<LatentFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::param("latent sequence must be nonempty"))?;
        for f in &frames[1..] {
            first.ensure_same_shape(f)?;
        }
        Ok(Self { frames })
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[LatentFrame] {
        &self.frames
    }

    pub fn get(&self, i: usize) -> Option<&LatentFrame> {
        self.frames.get(i)
    }

    pub fn first(&self) -> &LatentFrame {
        &self.frames[0]
    }

    pub fn last(&self) -> &LatentFrame {
        self.frames.last().expect("nonempty")
    }

    pub fn into_frames(self) -> Vec<LatentFrame> {
        self.frames
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LatentFrame> {
        self.frames.iter()
    }
}

impl<'a> IntoIterator for &'a LatentSequence {
    type Item = &'a LatentFrame;
    type IntoIter = std::slice::Iter<'a, LatentFrame>;

    fn into_iter(self) -> Self::IntoIter {
        self.frames.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length_and_nan() {
        assert!(LatentFrame::from_vec((1, 2, 2), vec![0.0; 3]).is_err());
        assert!(matches!(
            LatentFrame::from_vec((1, 1, 2), vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn indexing_is_channel_major() {
        let f = LatentFrame::from_fn((2, 2, 3), |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(f.data()[0], 0.0);
        assert_eq!(f.data()[3], 10.0);
        assert_eq!(f.data()[6], 100.0);
        assert_eq!(f.get(1, 1, 2), 112.0);
    }

    #[test]
    fn sequence_requires_uniform_shape() {
        let a = LatentFrame::zeros((1, 2, 2));
        let b = LatentFrame::zeros((1, 2, 3));
        assert!(LatentSequence::new(vec![]).is_err());
        assert!(LatentSequence::new(vec![a.clone(), b]).is_err());
        assert_eq!(LatentSequence::new(vec![a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn channel_mean_averages_planes() {
        let f = LatentFrame::from_fn((2, 1, 2), |c, _, x| if c == 0 { x as f64 } else { 3.0 });
        assert_eq!(f.channel_mean(), vec![1.5, 2.0]);
    }
}
