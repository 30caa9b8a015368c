use rand::Rng;

use super::params::{he_uniform, ParamSet, Role};
use crate::error::Result;
use crate::tensor::{Padding, Real, Tensor, Var};

/// Convolution or transposed convolution with bias and optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: Padding,
    transpose: bool,
    relu: bool,
}

pub struct ConvSpec<'a> {
    pub name: &'a str,
    pub role: Role,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
    pub transpose: bool,
    pub relu: bool,
    pub zero_init: bool,
}

impl<'a> ConvSpec<'a> {
    pub fn conv(name: &'a str, role: Role, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            name,
            role,
            cin,
            cout,
            k,
            stride,
            padding: Padding::Same,
            transpose: false,
            relu: true,
            zero_init: false,
        }
    }

    pub fn up(name: &'a str, role: Role, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            transpose: true,
            ..Self::conv(name, role, cin, cout, k, stride)
        }
    }

    pub fn valid(self) -> Self {
        ConvSpec {
            padding: Padding::Valid,
            ..self
        }
    }

    pub fn linear(self) -> Self {
        ConvSpec { relu: false, ..self }
    }

    pub fn zeroed(self) -> Self {
        ConvSpec {
            zero_init: true,
            ..self
        }
    }
}

impl Conv {
    pub fn new<T: Real>(spec: ConvSpec<'_>, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Self {
        let (shape, fan_in) = if spec.transpose {
            // Each output of a stride-s transpose sees about cin·k²/s² inputs.
            let fan = (spec.cin * spec.k * spec.k / (spec.stride * spec.stride)).max(1);
            ([spec.cin, spec.cout, spec.k, spec.k], fan)
        } else {
            ([spec.cout, spec.cin, spec.k, spec.k], spec.cin * spec.k * spec.k)
        };
        let w = if spec.zero_init {
            Tensor::zeros(&shape)
        } else {
            he_uniform(&shape, fan_in, rng)
        };
        let weight = params.push(format!("{}.weight", spec.name), spec.role, w);
        let bias = params.push(
            format!("{}.bias", spec.name),
            spec.role,
            Tensor::zeros(&[1, spec.cout, 1, 1]),
        );
        Conv {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            transpose: spec.transpose,
            relu: spec.relu,
        }
    }

    pub fn forward<'t, T: Real>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = vars[self.weight];
        let y = if self.transpose {
            x.conv_transpose2d(w, self.stride, self.padding)?
        } else {
            x.conv2d(w, self.stride, self.padding)?
        };
        let y = y.add(vars[self.bias])?;
        Ok(if self.relu { y.relu() } else { y })
    }
}
