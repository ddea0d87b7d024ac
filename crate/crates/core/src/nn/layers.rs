use super::params::{Binding, ParamId, ParamKind, ParameterStore, Tag};
use super::NnError;
use crate::autodiff::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        Ok(match self {
            Activation::None => x,
            Activation::Tanh => tape.tanh(x)?,
            Activation::Sigmoid => tape.sigmoid(x)?,
            Activation::Softplus => tape.softplus(x)?,
        })
    }
}

/// `activation(W·x + b)` with `W: [out×in]`, `b: [out]`.
///
/// Inputs are either a single vector `[in]` or a batch `[m×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        tag: Tag,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let weight = store.register(
            format!("{name}.w"),
            tag,
            &[out_dim, in_dim],
            ParamKind::Weight {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = store.register(format!("{name}.b"), tag, &[out_dim], ParamKind::Bias)?;
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var, NnError> {
        let shape = tape.shape(x).to_vec();
        let batched = match shape.as_slice() {
            [n] if *n == self.in_dim => false,
            [_, n] if *n == self.in_dim => true,
            _ => {
                return Err(NnError::Dim {
                    what: "dense input",
                    expected: self.in_dim,
                    got: shape.last().copied().unwrap_or(0),
                })
            }
        };
        let x2 = if batched {
            x
        } else {
            tape.reshape(x, vec![1, self.in_dim])?
        };
        let wx = tape.matmul_t(x2, params.var(self.weight))?;
        let pre = tape.add(wx, params.var(self.bias))?;
        let y = self.activation.apply(tape, pre)?;
        if batched {
            Ok(y)
        } else {
            Ok(tape.reshape(y, vec![self.out_dim])?)
        }
    }
}

/// A stack of dense layers; an empty stack is the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Layers `dims[0]→dims[1]→…`, all with `hidden` activation except the
    /// last, which uses `output`.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        tag: Tag,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Result<Self, NnError> {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(
                    store,
                    &format!("{name}.{i}"),
                    tag,
                    dims[i],
                    dims[i + 1],
                    act,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Mlp { layers })
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var, NnError> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, params, h))
    }
}
