use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Feature width `d`, hidden size `H` and number of auxiliary attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 32,
            hidden: 64,
            heads: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::config(
                "H",
                format!("must be a positive even number, got {}", self.hidden),
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("must divide H={}, got {}", self.hidden, self.heads),
            ));
        }
        Ok(())
    }
}

macro_rules! params {
    ($($variant:ident => $name:literal,)*) => {
        /// Every named tensor of the model, in checkpoint order.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Param {
            $($variant,)*
        }

        impl Param {
            pub const ALL: &'static [Param] = &[$(Param::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Param::$variant => $name,)*
                }
            }
        }
    };
}

params! {
    OfaWq => "ofa.w_q",
    OfaWk => "ofa.w_k",
    OfaWv => "ofa.w_v",
    OfaWo => "ofa.w_o",
    RefineW1 => "refine.w1",
    RefineB1 => "refine.b1",
    RefineW2 => "refine.w2",
    RefineB2 => "refine.b2",
    Gru1Wz => "gru1.w_z",
    Gru1Wr => "gru1.w_r",
    Gru1Wh => "gru1.w_h",
    Gru1Uz => "gru1.u_z",
    Gru1Ur => "gru1.u_r",
    Gru1Uh => "gru1.u_h",
    Gru1Bz => "gru1.b_z",
    Gru1Br => "gru1.b_r",
    Gru1Bh => "gru1.b_h",
    Gru2Wz => "gru2.w_z",
    Gru2Wr => "gru2.w_r",
    Gru2Wh => "gru2.w_h",
    Gru2Uz => "gru2.u_z",
    Gru2Ur => "gru2.u_r",
    Gru2Uh => "gru2.u_h",
    Gru2Bz => "gru2.b_z",
    Gru2Br => "gru2.b_r",
    Gru2Bh => "gru2.b_h",
    HeadW1 => "head.w1",
    HeadB1 => "head.b1",
    HeadW2 => "head.w2",
    HeadB2 => "head.b2",
    AuxWq => "aux_mha.w_q",
    AuxWk => "aux_mha.w_k",
    AuxWv => "aux_mha.w_v",
    AuxWo => "aux_mha.w_o",
    AuxW1 => "aux_mlp.w1",
    AuxB1 => "aux_mlp.b1",
    AuxW2 => "aux_mlp.w2",
    AuxB2 => "aux_mlp.b2",
    Rho1 => "rho1",
    Rho2 => "rho2",
}

/// Which of the two recurrent layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GruLayer {
    First,
    Second,
}

impl GruLayer {
    /// `[w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h]`
    pub fn params(self) -> [Param; 9] {
        use Param::*;
        match self {
            GruLayer::First => [Gru1Wz, Gru1Wr, Gru1Wh, Gru1Uz, Gru1Ur, Gru1Uh, Gru1Bz, Gru1Br, Gru1Bh],
            GruLayer::Second => [Gru2Wz, Gru2Wr, Gru2Wh, Gru2Uz, Gru2Ur, Gru2Uh, Gru2Bz, Gru2Br, Gru2Bh],
        }
    }

    pub fn input_dim(self, dims: &ModelDims) -> usize {
        match self {
            GruLayer::First => 2 * dims.d,
            GruLayer::Second => dims.hidden,
        }
    }
}

impl Param {
    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_rho(self) -> bool {
        matches!(self, Param::Rho1 | Param::Rho2)
    }

    pub fn is_gru2(self) -> bool {
        GruLayer::Second.params().contains(&self)
    }

    /// `[rows, cols]`; weights map row vectors, `y = x·W + b`.
    pub fn shape(self, dims: &ModelDims) -> [usize; 2] {
        use Param::*;
        let (d, h) = (dims.d, dims.hidden);
        match self {
            OfaWq | OfaWk | OfaWv | OfaWo | RefineW1 | RefineW2 => [d, d],
            RefineB1 | RefineB2 => [1, d],
            Gru1Wz | Gru1Wr | Gru1Wh => [2 * d, h],
            Gru2Wz | Gru2Wr | Gru2Wh => [h, h],
            Gru1Uz | Gru1Ur | Gru1Uh | Gru2Uz | Gru2Ur | Gru2Uh => [h, h],
            Gru1Bz | Gru1Br | Gru1Bh | Gru2Bz | Gru2Br | Gru2Bh => [1, h],
            HeadW1 | AuxWq | AuxWk | AuxWv | AuxWo | AuxW1 => [h, h],
            HeadB1 | AuxB1 => [1, h],
            HeadW2 | AuxW2 => [h, 1],
            HeadB2 | AuxB2 | Rho1 | Rho2 => [1, 1],
        }
    }

    /// Input width of the layer the tensor belongs to.
    pub fn fan_in(self, dims: &ModelDims) -> usize {
        use Param::*;
        match self {
            RefineB1 | RefineB2 => dims.d,
            Gru1Bz | Gru1Br | Gru1Bh => 2 * dims.d,
            Gru2Bz | Gru2Br | Gru2Bh | HeadB1 | HeadB2 | AuxB1 | AuxB2 => dims.hidden,
            Rho1 | Rho2 => 1,
            p => p.shape(dims)[0],
        }
    }
}

/// All trainable weights `θ`, including the uncertainty coefficients `ρ₁, ρ₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    tensors: Vec<Tensor>,
    pub mu1: f64,
    pub mu2: f64,
    pub seed: u64,
}

impl ModelParams {
    /// Assembles parameters from tensors in `Param::ALL` order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>, mu: (f64, f64), seed: u64) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != Param::ALL.len() {
            return Err(Error::config(
                "params",
                format!("expected {} tensors, got {}", Param::ALL.len(), tensors.len()),
            ));
        }
        for (&p, t) in Param::ALL.iter().zip(&tensors) {
            let want = p.shape(&dims);
            if t.shape() != want {
                return Err(Error::Shape {
                    op: "params",
                    lhs: want.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if !(mu.0 > 0.0 && mu.1 > 0.0) {
            return Err(Error::config("mu", "loss weights must be positive"));
        }
        let params = ModelParams {
            dims,
            tensors,
            mu1: mu.0,
            mu2: mu.1,
            seed,
        };
        if !(params.rho1() > 0.0 && params.rho2() > 0.0) {
            return Err(Error::config("rho", "uncertainty coefficients must be positive"));
        }
        Ok(params)
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.tensors[p.index()]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (Param, &Tensor)> {
        Param::ALL.iter().copied().zip(&self.tensors)
    }

    pub fn rho1(&self) -> f64 {
        self.get(Param::Rho1).item()
    }

    pub fn rho2(&self) -> f64 {
        self.get(Param::Rho2).item()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Maps a flat coordinate (concatenation in `Param::ALL` order) to
    /// `(param, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(Param, usize)> {
        for (p, t) in self.iter() {
            if flat < t.len() {
                return Some((p, flat));
            }
            flat -= t.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over dims, loss weights and the bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.dims.d, self.dims.hidden, self.dims.heads] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.mu1.to_bits().to_le_bytes());
        h.update(self.mu2.to_bits().to_le_bytes());
        for (p, t) in self.iter() {
            h.update(p.name().as_bytes());
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Errors unless `other` has the same architecture.
    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape {
                op: "params",
                lhs: vec![self.dims.d, self.dims.hidden, self.dims.heads],
                rhs: vec![other.dims.d, other.dims.hidden, other.dims.heads],
            });
        }
        Ok(())
    }
}

/// Uniform `±1/√fan_in` weights, `ρ₁ = ρ₂ = 1`, `μ₁ = μ₂ = 1`.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = Param::ALL
        .iter()
        .map(|&p| {
            let shape = p.shape(&dims);
            if p.is_rho() {
                return Tensor::full(&shape, 1.0);
            }
            let bound = 1.0 / (p.fan_in(&dims) as f64).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        })
        .collect();
    ModelParams::from_tensors(dims, tensors, (1.0, 1.0), seed)
}

/// Parameters recorded on a tape, either as differentiable leaves or constants.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, p: Param) -> Var {
        self.vars[p.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebinds `p` to another tape variable of the same shape.
    pub fn set(&mut self, p: Param, v: Var) {
        self.vars[p.index()] = v;
    }

    /// Gradient of every parameter after a backward pass (zeros where none
    /// reached).
    pub fn grads(&self, tape: &Tape, params: &ModelParams) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Records every parameter on `tape`; `trainable(p)` selects leaves.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: impl Fn(Param) -> bool) -> BoundParams {
    let vars = params
        .iter()
        .map(|(p, t)| {
            if trainable(p) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    BoundParams { vars }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_are_unique() {
        for &p in Param::ALL {
            assert_eq!(Param::from_name(p.name()), Some(p));
        }
        let mut names: Vec<_> = Param::ALL.iter().map(|p| p.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), Param::ALL.len());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = ModelDims {
            d: 4,
            hidden: 6,
            heads: 2,
        };
        let a = init_params(dims, 5).unwrap();
        assert_eq!(a, init_params(dims, 5).unwrap());
        assert_ne!(a.checksum(), init_params(dims, 6).unwrap().checksum());
        assert_eq!((a.rho1(), a.rho2()), (1.0, 1.0));
        for (p, t) in a.iter().filter(|(p, _)| !p.is_rho()) {
            let bound = 1.0 / (p.fan_in(&dims) as f64).sqrt();
            assert!(t.data().iter().all(|x| x.abs() <= bound), "{}", p.name());
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        let odd = ModelDims {
            d: 4,
            hidden: 5,
            heads: 1,
        };
        assert!(matches!(init_params(odd, 0), Err(Error::InvalidConfig { field, .. }) if field == "H"));
        let heads = ModelDims {
            d: 4,
            hidden: 6,
            heads: 4,
        };
        assert!(matches!(init_params(heads, 0), Err(Error::InvalidConfig { field, .. }) if field == "heads"));
    }

    #[test]
    fn locate_walks_the_flat_layout() {
        let p = init_params(
            ModelDims {
                d: 2,
                hidden: 2,
                heads: 1,
            },
            0,
        )
        .unwrap();
        assert_eq!(p.locate(0), Some((Param::OfaWq, 0)));
        assert_eq!(p.locate(4), Some((Param::OfaWk, 0)));
        assert_eq!(p.locate(p.num_scalars() - 1), Some((Param::Rho2, 0)));
        assert_eq!(p.locate(p.num_scalars()), None);
    }
}
