//! Parameterized building blocks shared by the attention and model code.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// A graph being recorded together with the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub params: &'g ParamStore,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, params: &'g ParamStore) -> Self {
        Self { graph, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        self.graph.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }
}

/// How a freshly registered weight is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot/Xavier uniform.
    Xavier,
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; count],
        Init::Xavier => {
            let fan_in = shape[0] as f64;
            let fan_out = *shape.last().unwrap() as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..count).map(|_| dist.sample(rng)).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..count).map(|_| dist.sample(rng)).collect()
        }
    };
    Tensor::new(shape, data).expect("init shape")
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let weight = store.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], init, rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g>, x: Var<'g>) -> Result<Var<'g>, NumericsError> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.param(b)),
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. The last layer uses `last_init`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        last_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Xavier };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], true, init, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g>, mut x: Var<'g>) -> Result<Var<'g>, NumericsError> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g>, x: Var<'g>) -> Result<Var<'g>, NumericsError> {
        x.layer_norm(LAYER_NORM_EPS).mul(ctx.param(self.gain))?.add(ctx.param(self.shift))
    }
}

/// Sets every entry of a bias parameter to `value`.
pub fn fill_param(store: &mut ParamStore, id: ParamId, value: f64) {
    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}
