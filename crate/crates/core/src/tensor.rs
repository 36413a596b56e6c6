//! Dense 4-D tensors in `(batch, channels, height, width)` layout.

use std::fmt;
use std::fmt::Write as _;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self([batch, channels, height, width])
    }

    /// Shape of a scalar held as a tensor.
    pub fn scalar() -> Self {
        Self([1, 1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one `(height, width)` plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self([self.0[0], channels, self.0[2], self.0[3]])
    }

    pub fn with_spatial(self, height: usize, width: usize) -> Self {
        Self([self.0[0], self.0[1], height, width])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "({b}, {c}, {h}, {w})")
    }
}

/// Dense row-major tensor. Gradient state lives on the [`Tape`](crate::Tape)
/// node or the [`Parameter`](crate::Parameter) that owns the value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f(b, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [nb, nc, nh, nw] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..nb {
            for c in 0..nc {
                for y in 0..nh {
                    for x in 0..nw {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, nc, nh, nw] = self.shape.0;
        ((b * nc + c) * nh + y) * nw + x
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("expected a scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Copies channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [nb, nc, nh, nw] = self.shape.0;
        if start + len > nc || len == 0 {
            return Err(arg_err(
                "slice_channels",
                format!("range {start}..{} outside {nc} channels", start + len),
            ));
        }
        let plane = nh * nw;
        let mut data = Vec::with_capacity(nb * len * plane);
        for b in 0..nb {
            let from = (b * nc + start) * plane;
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Self {
            shape: Shape::new(nb, len, nh, nw),
            data,
        })
    }

    /// Copies batch item `index` as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let per = self.shape.numel() / self.shape.batch().max(1);
        if index >= self.shape.batch() {
            return Err(arg_err("batch_item", format!("index {index} out of range")));
        }
        Ok(Self {
            shape: Shape::new(1, self.shape.channels(), self.shape.height(), self.shape.width()),
            data: self.data[index * per..(index + 1) * per].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| arg_err("stack_batch", "no tensors to stack"))?;
        let inner = first.shape;
        let mut data = Vec::with_capacity(inner.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.0[1..] != inner.0[1..] {
                return Err(shape_err("stack_batch", format!("{} vs {}", t.shape, inner)));
            }
            batch += t.shape.batch();
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: Shape([batch, inner.0[1], inner.0[2], inner.0[3]]),
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Text dump: `tensor B C H W` header, then one line per `(b, c, y)` row
    /// with values at 17 significant digits (exact round trip for `f64`).
    pub fn dump(&self) -> String {
        let [nb, nc, nh, nw] = self.shape.0;
        let mut out = format!("tensor {nb} {nc} {nh} {nw}\n");
        for row in self.data.chunks(nw.max(1)) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{:.16e}", v.as_f64());
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Tensor::dump`].
    pub fn parse_dump(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: "tensor dump".into(),
            location: format!("line {line}"),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty input".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("tensor") {
            return Err(parse_err(1, "missing `tensor` header".into()));
        }
        let dims: Vec<usize> = fields
            .map(|f| f.parse().map_err(|e| parse_err(1, format!("bad dimension {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        let dims: [usize; 4] = dims
            .try_into()
            .map_err(|_| parse_err(1, "expected four dimensions".into()))?;
        let shape = Shape(dims);
        let mut data = Vec::with_capacity(shape.numel());
        for (i, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| parse_err(i + 2, format!("bad value {tok:?}: {e}")))?;
                data.push(T::lit(v));
            }
        }
        Self::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn dump_round_trips_exactly() {
        let t = Tensor::from_fn(Shape::new(2, 3, 2, 3), |b, c, y, x| {
            (b as f64 + 0.1) * std::f64::consts::PI / (1.0 + c as f64 * 7.0 + y as f64) - x as f64 * 1e-300
        });
        let back = Tensor::<f64>::parse_dump(&t.dump()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn dump_rejects_garbage() {
        assert!(Tensor::<f64>::parse_dump("tensr 1 1 1 1\n0").is_err());
        assert!(Tensor::<f64>::parse_dump("tensor 1 1 1 2\n0 x").is_err());
        assert!(Tensor::<f64>::parse_dump("tensor 1 1 1 2\n0").is_err());
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::full(Shape::new(1, 2, 2, 2), 1.0f64);
        let b = Tensor::full(Shape::new(1, 2, 2, 2), 2.0f64);
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert_eq!(s.batch_item(0).unwrap(), a);
    }
}
