//! Small network blocks that register their weights in a [`ParamSet`] and
//! evaluate on a [`Graph`]. Activations are `batch x features`.

use rand::Rng;

use super::params::ParamSet;
use super::tape::{Graph, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        params.insert_glorot(&weight, inputs, outputs, rng)?;
        params.insert_zeros(&bias, &[outputs])?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Scale the initial weights, e.g. to start a residual head near zero.
    pub fn shrink(&self, params: &mut ParamSet, factor: f64) {
        if let Some(w) = params.get_mut(&self.weight) {
            for v in w.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let w = g.param(params, &self.weight);
        let b = g.param(params, &self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Two-layer perceptron with a tanh hidden layer and linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::init(params, &format!("{name}.l1"), inputs, hidden, rng)?,
            out: Linear::init(params, &format!("{name}.l2"), hidden, outputs, rng)?,
        })
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let h = self.hidden.forward(g, params, x);
        let h = g.tanh(h);
        self.out.forward(g, params, h)
    }
}

/// Gated recurrent cell: update gate `u`, reset gate `r`, tanh candidate.
///
/// `h' = (1 - u) * n + u * h` with `n = tanh(x Wn + (r * h) Un + bn)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    w_in: String,
    u_gates: String,
    u_cand: String,
    bias: String,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(params: &mut ParamSet, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let cell = Self {
            w_in: format!("{name}.w_in"),
            u_gates: format!("{name}.u_gates"),
            u_cand: format!("{name}.u_cand"),
            bias: format!("{name}.b"),
            inputs,
            hidden,
        };
        params.insert_glorot(&cell.w_in, inputs, 3 * hidden, rng)?;
        params.insert_glorot(&cell.u_gates, hidden, 2 * hidden, rng)?;
        params.insert_glorot(&cell.u_cand, hidden, hidden, rng)?;
        params.insert_zeros(&cell.bias, &[3 * hidden])?;
        Ok(cell)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var, h: Var) -> Var {
        let hs = self.hidden;
        let w_in = g.param(params, &self.w_in);
        let u_gates = g.param(params, &self.u_gates);
        let u_cand = g.param(params, &self.u_cand);
        let b = g.param(params, &self.bias);

        let xw = g.matmul(x, w_in);
        let xw = g.add_row(xw, b);
        let hu = g.matmul(h, u_gates);
        let x_gates = g.slice_cols(xw, 0, 2 * hs);
        let gates = g.add(x_gates, hu);
        let gates = g.sigmoid(gates);
        let update = g.slice_cols(gates, 0, hs);
        let reset = g.slice_cols(gates, hs, hs);

        let rh = g.mul(reset, h);
        let rhu = g.matmul(rh, u_cand);
        let x_cand = g.slice_cols(xw, 2 * hs, hs);
        let cand = g.add(x_cand, rhu);
        let cand = g.tanh(cand);

        // n + u * (h - n)
        let diff = g.sub(h, cand);
        let gated = g.mul(update, diff);
        g.add(cand, gated)
    }
}
