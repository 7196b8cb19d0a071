use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower bound of the valid ground-truth range, meters.
pub const VALID_MIN_M: f32 = 0.1;
/// Upper bound of the valid ground-truth range, meters.
pub const VALID_MAX_M: f32 = 5.0;

/// Single-channel depth in meters. `0` marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty depth map {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self { height, width, values: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { height: self.height, width: self.width, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("dims match")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 channel, got {c}")));
        }
        Self::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn max_abs_diff(&self, other: &DepthMap) -> f32 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Guidance color image stored channel-planar (`[3][H][W]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                3 * height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar values, channel-major.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("dims match")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn all(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![true; height * width] }
    }

    /// Valid where ground truth lies in `[0.1 m, 5 m]`.
    pub fn from_depth_range(gt: &DepthMap) -> Self {
        Self {
            height: gt.height(),
            width: gt.width(),
            values: gt.values().iter().map(|&v| (VALID_MIN_M..=VALID_MAX_M).contains(&v)).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Square, odd-sided, non-negative blur kernel with unit mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    side: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel side {side} must be odd")));
        }
        if values.len() != side * side {
            return Err(Error::Shape(format!("kernel side {side} needs {} values", side * side)));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("kernel entries must be finite and >= 0".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("kernel sums to {sum}, expected 1")));
        }
        Ok(Self { side, values })
    }

    /// Odd-sided kernel with arbitrary finite entries (no mass constraint).
    pub fn unnormalized(side: usize, values: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 || values.len() != side * side {
            return Err(Error::Shape(format!("bad kernel side {side} for {} values", values.len())));
        }
        Ok(Self { side, values })
    }

    pub fn delta() -> Self {
        Self { side: 1, values: vec![1.0] }
    }

    /// Rotated anisotropic Gaussian sampled on a `side x side` grid and normalized.
    /// `angle_deg` rotates the `std_x` axis counter-clockwise.
    pub fn gaussian(side: usize, std_x: f64, std_y: f64, angle_deg: f64) -> Result<Self> {
        if side % 2 == 0 || std_x <= 0.0 || std_y <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian kernel needs odd side and positive stds (side {side}, std {std_x}/{std_y})"
            )));
        }
        let r = (side / 2) as f64;
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let mut values = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 - r, y as f64 - r);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                values.push((-0.5 * (u * u / (std_x * std_x) + v * v / (std_y * std_y))).exp());
            }
        }
        let s: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= s);
        Ok(Self { side, values })
    }

    pub fn isotropic(side: usize, std: f64) -> Result<Self> {
        Self::gaussian(side, std, std, 0.0)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.side + x]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Zero-pad symmetrically to a larger odd side, keeping centers aligned.
    pub fn padded_to(&self, side: usize) -> Result<Self> {
        if side < self.side || side % 2 == 0 {
            return Err(Error::InvalidArgument(format!("cannot pad side {} to {side}", self.side)));
        }
        let off = (side - self.side) / 2;
        let mut values = vec![0.0; side * side];
        for y in 0..self.side {
            for x in 0..self.side {
                values[(y + off) * side + x + off] = self.get(y, x);
            }
        }
        Ok(Self { side, values })
    }
}

/// Mean-centered normalized cross-correlation of two equally sized kernels.
pub fn normalized_cross_correlation(a: &Kernel, b: &Kernel) -> f64 {
    assert_eq!(a.side(), b.side(), "ncc needs equal kernel sizes");
    let n = a.values().len() as f64;
    let ma = a.mass() / n;
    let mb = b.mass() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_validation() {
        assert!(Kernel::new(2, vec![0.25; 4]).is_err());
        assert!(Kernel::new(3, vec![0.1; 9]).is_err());
        assert!(Kernel::new(3, vec![1.0 / 9.0; 9]).is_ok());
        let g = Kernel::gaussian(7, 1.6, 0.8, 30.0).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        // point symmetric
        for y in 0..7 {
            for x in 0..7 {
                assert!((g.get(y, x) - g.get(6 - y, 6 - x)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sensor_mask_rule() {
        let gt = DepthMap::new(1, 5, vec![0.0, 0.1, 2.0, 5.0, 5.5]).unwrap();
        let m = ValidMask::from_depth_range(&gt);
        assert_eq!(m.values(), &[false, true, true, true, false]);
    }

    #[test]
    fn ncc_of_identical_kernels_is_one() {
        let g = Kernel::gaussian(5, 1.0, 0.7, 10.0).unwrap().padded_to(9).unwrap();
        assert!((normalized_cross_correlation(&g, &g) - 1.0).abs() < 1e-12);
    }
}
