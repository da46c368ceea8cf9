//! Named parameter storage with deterministic, per-name initialisation.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::Real;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimiser treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Ordinary weight, subject to decoupled weight decay.
    Weight,
    Bias,
    /// Normalisation gain.
    Gain,
    /// SSM log-decay rates and skip coefficients; never decayed.
    Dynamics,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub role: ParamRole,
    pub value: Arc<Array2<R>>,
}

/// Initialisation rule for a freshly declared parameter.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Explicit values in row-major order.
    Values(Vec<f64>),
}

/// Ordered parameter collection; the order is the declaration order and is
/// what checkpoints and optimiser state follow.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<R: Real> {
    params: Vec<Param<R>>,
}

/// FNV-1a, used to derive a per-parameter stream from its name.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Declares a parameter. The initial values depend only on `seed` and
    /// `name`, never on declaration order.
    pub fn declare(
        &mut self,
        seed: u64,
        name: impl Into<String>,
        shape: (usize, usize),
        role: ParamRole,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        let n = shape.0 * shape.1;
        let data: Vec<R> = match init {
            Init::Zeros => vec![R::zero(); n],
            Init::Ones => vec![R::one(); n],
            Init::Const(c) => vec![R::of(c); n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
                (0..n)
                    .map(|_| R::of(rng.gen_range(-bound..=bound)))
                    .collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "{name}: init values do not match shape");
                v.into_iter().map(R::of).collect()
            }
        };
        self.params.push(Param {
            name,
            role,
            value: Arc::new(Array2::from_shape_vec(shape, data).expect("shape")),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<R> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<R> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<R>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf_shared(Arc::clone(&p.value)))
                .collect(),
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: Arc::new(p.value.mapv(|v| S::of(v.f64()))),
                })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
