use std::fmt;

/// Dimensions of a 4-D tensor in `(batch, channels, height, width)` order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense, row-major `f32` tensor in NCHW layout.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// # Panics
    /// If `data.len()` does not match the shape.
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    ///
    /// # Panics
    /// If the tensor holds more than one element.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Self {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// Slice of one `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &mut self.data[off..off + p]
    }

    /// All channels of batch item `n`, contiguous.
    pub fn item_slice(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Stacks equally shaped tensors along the batch axis.
    ///
    /// # Panics
    /// If `parts` is empty or shapes other than the batch size differ.
    pub fn cat_batch(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cat_batch of nothing");
        let first = parts[0].shape;
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for t in parts {
            let s = t.shape;
            assert!(
                s.c == first.c && s.h == first.h && s.w == first.w,
                "cat_batch shape mismatch: {:?} vs {:?}",
                s,
                first
            );
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    /// Copies out batch items `start..start + len`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape;
        assert!(start + len <= s.n, "narrow_batch out of range");
        let item = s.c * s.plane();
        Tensor::from_vec(
            Shape::new(len, s.c, s.h, s.w),
            self.data[start * item..(start + len) * item].to_vec(),
        )
    }

    /// Copies out channels `start..start + len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape;
        assert!(start + len <= s.c, "narrow_channels out of range");
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)
    }

    /// Concatenates two tensors along the channel axis.
    pub fn cat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        let (sa, sb) = (a.shape, b.shape);
        assert!(
            sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
            "cat_channels shape mismatch: {:?} vs {:?}",
            sa,
            sb
        );
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..sa.n {
            data.extend_from_slice(a.item_slice(n));
            data.extend_from_slice(b.item_slice(n));
        }
        Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
    }

    /// Nearest-neighbour upsampling by an integer factor of two.
    pub fn upsample_nearest2x(&self) -> Tensor {
        let s = self.shape;
        let (oh, ow) = (s.h * 2, s.w * 2);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..oh {
                    let srow = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                    let drow = &mut dst[y * ow..(y + 1) * ow];
                    for (x, d) in drow.iter_mut().enumerate() {
                        *d = srow[x / 2];
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample_nearest2x`]: sums each 2×2 block.
    pub fn sum_pool2x(&self) -> Tensor {
        let s = self.shape;
        assert!(s.h % 2 == 0 && s.w % 2 == 0, "sum_pool2x needs even sides");
        let (oh, ow) = (s.h / 2, s.w / 2);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for x in 0..s.w {
                        dst[(y / 2) * ow + x / 2] += src[y * s.w + x];
                    }
                }
            }
        }
        out
    }

    /// Mirror padding without edge repetition (`numpy.pad(mode="reflect")`).
    ///
    /// # Panics
    /// If a pad amount is not smaller than the side it mirrors.
    pub fn reflect_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
        let s = self.shape;
        assert!(
            top < s.h && bottom < s.h && left < s.w && right < s.w,
            "reflect pad ({top},{bottom},{left},{right}) too large for {:?}",
            s
        );
        let (oh, ow) = (s.h + top + bottom, s.w + left + right);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len {
                i = 2 * (len - 1) - i;
            }
            i as usize
        };
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..oh {
                    let sy = reflect(y as isize - top as isize, s.h);
                    for x in 0..ow {
                        let sx = reflect(x as isize - left as isize, s.w);
                        dst[y * ow + x] = src[sy * s.w + sx];
                    }
                }
            }
        }
        out
    }

    /// Spatial crop of `height × width` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Tensor {
        let s = self.shape;
        assert!(top + height <= s.h && left + width <= s.w, "crop out of range");
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, height, width));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..height {
                    let so = (top + y) * s.w + left;
                    dst[y * width..(y + 1) * width].copy_from_slice(&src[so..so + width]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|v| v as f32).collect())
    }

    #[test]
    fn upsample_then_pool_scales_by_four() {
        let t = ramp(Shape::new(2, 3, 3, 5));
        let back = t.upsample_nearest2x().sum_pool2x();
        assert_eq!(back, t.map(|v| 4.0 * v));
    }

    #[test]
    fn reflect_pad_matches_numpy_convention() {
        let t = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.reflect_pad(0, 0, 2, 3);
        assert_eq!(p.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn crop_inverts_pad() {
        let t = ramp(Shape::new(1, 2, 5, 7));
        let p = t.reflect_pad(1, 2, 3, 4);
        assert_eq!(p.shape(), Shape::new(1, 2, 8, 14));
        assert_eq!(p.crop(1, 3, 5, 7), t);
    }

    #[test]
    fn channel_concat_and_narrow_round_trip() {
        let a = ramp(Shape::new(2, 2, 2, 2));
        let b = ramp(Shape::new(2, 3, 2, 2)).map(|v| -v);
        let ab = Tensor::cat_channels(&a, &b);
        assert_eq!(ab.narrow_channels(0, 2), a);
        assert_eq!(ab.narrow_channels(2, 3), b);
    }
}
