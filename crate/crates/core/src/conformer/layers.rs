use crate::error::Result;
use crate::numerics::rng::Rng;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Forward-pass context: tape, parameters and optional dropout randomness.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub dropout: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Fwd<'a> {
    /// Deterministic forward pass without dropout.
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, dropout: f64, rng: &'a mut Rng) -> Self {
        Self {
            tape,
            store,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.tape.param_by_name(self.store, name)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b)
    }

    pub fn drop(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, r),
            _ => x,
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Parameter initialisers shared by every model in the crate.
pub mod init {
    use crate::error::Result;
    use crate::numerics::rng::Rng;
    use crate::numerics::{ParamStore, Tensor};

    pub fn linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, r: &mut Rng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, r))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(())
    }

    pub fn layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
        store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0))?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
        Ok(())
    }
}

/// `table[t][2i] = sin(t / 10000^(2i/d))`, `table[t][2i+1] = cos(...)` for the given positions.
pub fn sinusoid_table(positions: &[f64], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(positions.len(), dim, data).expect("sized by construction")
}
