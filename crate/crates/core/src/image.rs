/// A single-channel image of real values, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be positive (got {height}x{width})")]
    EmptyImage { height: usize, width: usize },
    #[error("expected {expected} values for the image shape, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("image contains a non-finite value at index {0}")]
    NonFinite(usize),
}

impl RealImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyImage { height, width });
        }
        if values.len() != height * width {
            return Err(ImageError::LengthMismatch {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds an image from a function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("from_fn produced an invalid image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` to every value. `f` must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}
