use std::fmt;

/// Tensor shape: 1 to 4 dimensions, row-major layout.
///
/// Rank-4 tensors are (batch, features, height, width); rank-2 are
/// (batch, features). Axis 0 is always the batch axis for model data,
/// axis 1 the feature axis.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 4,
            "shape rank must be 1..=4, got {}",
            dims.len()
        );
        assert!(dims.iter().all(|&d| d > 0), "shape dims must be positive: {dims:?}");
        Shape(dims.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Batch dimension (axis 0).
    pub fn batch(&self) -> usize {
        self.0[0]
    }

    /// Feature dimension (axis 1); 1 for rank-1 tensors.
    pub fn features(&self) -> usize {
        if self.rank() >= 2 {
            self.0[1]
        } else {
            1
        }
    }

    /// Elements per batch row (product of all non-batch dims).
    pub fn per_example(&self) -> usize {
        self.0[1..].iter().product()
    }

    /// (height, width) for rank-4 tensors.
    pub fn hw(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 4, "hw() needs a rank-4 shape, got {self}");
        (self.0[2], self.0[3])
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Same shape except for the feature axis.
    pub fn with_features(&self, f: usize) -> Shape {
        let mut d = self.0.clone();
        d[1] = f;
        Shape(d)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape::new(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accessors() {
        let s = Shape::new(&[2, 3, 4, 5]);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.batch(), 2);
        assert_eq!(s.features(), 3);
        assert_eq!(s.hw(), (4, 5));
        assert_eq!(s.per_example(), 60);
        assert_eq!(s.with_features(8).dims(), &[2, 8, 4, 5]);
    }

    #[test]
    #[should_panic]
    fn zero_dim_rejected() {
        Shape::new(&[2, 0, 4]);
    }
}
