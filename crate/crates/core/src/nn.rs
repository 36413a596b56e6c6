//! Layer building blocks backed by a [`ParamStore`].

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// 2-D convolution layer with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight`, drawn uniformly in `±sqrt(6 / (C_in · k · k))`
    /// (He initialization for ReLU networks), and a zero `{name}.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let weight = store.add_uniform(
            &format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            bound,
            seed,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_channels, 1, 1)))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// 3×3, stride 1, padding 1.
    pub fn same3<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Self::new(store, name, cin, cout, 3, 1, 1, seed)
    }

    /// 3×3, stride 2, padding 1.
    pub fn down3<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Self::new(store, name, cin, cout, 3, 2, 1, seed)
    }

    /// 1×1 projection.
    pub fn point<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, 1, 0, seed)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    /// `C_out · C_in · k² + C_out` when biased.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}
