use super::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRank {
    Bev,
    Voxel,
}

/// Zero-padded, stride-1 convolution with bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub rank: ConvRank,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rank: ConvRank,
        cin: usize,
        cout: usize,
        kernel: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut shape = vec![cout, cin];
        let taps = match rank {
            ConvRank::Bev => {
                shape.extend([kernel, kernel]);
                kernel * kernel
            }
            ConvRank::Voxel => {
                shape.extend([kernel, kernel, kernel]);
                kernel * kernel * kernel
            }
        };
        let fan_in = cin * taps;
        let weight = store.add_uniform(format!("{name}/weight"), &shape, fan_in, seed)?;
        let bias = store.add_uniform(format!("{name}/bias"), &[cout], fan_in, seed)?;
        Ok(Self { weight, bias, rank })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        match self.rank {
            ConvRank::Bev => tape.conv2d(x, w, b),
            ConvRank::Voxel => tape.conv3d(x, w, b),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, seed: u64) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}/weight"), &[dout, din], din, seed)?;
        let bias = store.add_uniform(format!("{name}/bias"), &[dout], din, seed)?;
        Ok(Self { weight, bias })
    }

    /// `x [n, din] -> [n, dout]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Single-hidden-layer perceptron with a relu hidden activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: LinearLayer,
    pub out: LinearLayer,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            hidden: LinearLayer::new(store, &format!("{name}/hidden"), din, hidden, seed)?,
            out: LinearLayer::new(store, &format!("{name}/out"), hidden, dout, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, store, h)
    }

    /// Sets both layers to the identity map (square layers only).
    pub fn set_identity(&self, store: &mut ParamStore) {
        for layer in [&self.hidden, &self.out] {
            let shape = store.value(layer.weight).shape().to_vec();
            *store.value_mut(layer.weight) =
                Array::from_fn(&shape, |i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 });
            *store.value_mut(layer.bias) = Array::zeros(&[shape[0]]);
        }
    }
}

/// Overwrites every listed parameter with zeros.
pub fn zero_params(store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>) {
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
