use rand::Rng;

use crate::error::Result;
use crate::tensor::{Float, Graph, Init, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Swish,
}

pub(crate) fn activate<T: Float>(g: &mut Graph<T>, x: Var, act: Act) -> Var {
    match act {
        Act::Relu => g.relu(x),
        Act::Swish => g.swish(x),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialized kernel, zero bias; `zero` gives an all-zero kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::He {
                fan_in: cin * k * k,
            }
        };
        Self {
            w: ps.add(format!("{name}.w"), &[cout, cin, k, k], init, rng),
            b: ps.add(format!("{name}.b"), &[cout], Init::Zeros, rng),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_act<T: Float>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        act: Act,
    ) -> Result<Var> {
        let y = self.forward(g, ps, x)?;
        Ok(activate(g, y, act))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        Self {
            w: ps.add(
                format!("{name}.w"),
                &[fout, fin],
                Init::He { fan_in: fin },
                rng,
            ),
            b: ps.add(format!("{name}.b"), &[fout], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, Some(b))
    }
}

/// `relu(conv(relu(conv(x))) + shortcut(x))`, with a strided 1×1
/// projection when the shape changes.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    c1: Conv,
    c2: Conv,
    proj: Option<Conv>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let proj = (stride != 1 || cin != cout).then(|| {
            Conv::new(
                ps,
                rng,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                stride,
                false,
            )
        });
        Self {
            c1: Conv::new(ps, rng, &format!("{name}.c1"), cin, cout, 3, stride, false),
            c2: Conv::new(ps, rng, &format!("{name}.c2"), cout, cout, 3, 1, false),
            proj,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.c1.forward_act(g, ps, x, Act::Relu)?;
        let h = self.c2.forward(g, ps, h)?;
        let s = match &self.proj {
            Some(p) => p.forward(g, ps, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}
