use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::Rng as SeededRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

pub const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Truncated normal (±2σ) with σ = 0.02.
    pub fn add_trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut SeededRng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * INIT_STD;
                }
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("positive shape"))
    }

    /// Xavier/Glorot uniform for a `[fan_in × fan_out]` weight.
    pub fn add_xavier_uniform(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("positive shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// A tape with every parameter bound as a leaf.
#[derive(Debug)]
pub struct Ctx {
    pub tape: Tape,
    params: Vec<Var>,
}

impl Ctx {
    pub fn new(store: &ParamStore, requires_grad: bool) -> Self {
        Self::from_values(store.params.iter().map(|p| &p.value), requires_grad)
    }

    /// Binds substitute values, in store order, in place of the stored ones.
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a Tensor>, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        let params = values
            .into_iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect();
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients for every parameter after `tape.backward`, zero where the
    /// parameter did not influence the loss.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&v| self.tape.grad(v).unwrap_or_else(|| Tensor::zeros(self.tape.shape(v))))
            .collect()
    }
}
