//! Layer building blocks. A layer owns its parameters as plain tensors;
//! per step they are bound onto a fresh tape through a [`ParamReg`], which
//! keeps the binding order so gradients can be exported back and the
//! optimizer state stays aligned.

use rand::RngCore;
use rand_chacha::ChaCha12Rng;

use super::{NodeId, Result, Tape, Tensor, TensorError};

pub const WEIGHT_INIT_STD: f32 = 0.02;

/// Records bound parameter node ids in order.
#[derive(Default)]
pub struct ParamReg {
    ids: Vec<NodeId>,
}

impl ParamReg {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape<f32>, t: &Tensor<f32>) -> NodeId {
        let id = tape.leaf(t);
        self.ids.push(id);
        id
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Copy gradients from the tape into the parameters, in binding order.
    pub fn export_grads(&self, tape: &Tape<f32>, params: &mut [&mut Tensor<f32>]) -> Result<()> {
        if params.len() != self.ids.len() {
            return Err(TensorError::Invalid {
                op: "export_grads",
                msg: format!("{} bindings vs {} parameters", self.ids.len(), params.len()),
            });
        }
        for (&id, p) in self.ids.iter().zip(params.iter_mut()) {
            tape.export_grad(id, p)?;
        }
        Ok(())
    }
}

/// Per-forward context: trainable nets bind through `reg`; frozen nets bind
/// as frozen leaves. Dropout draws its mask seed from `rng` in train mode.
pub struct FwdCtx<'a> {
    pub reg: Option<&'a mut ParamReg>,
    pub train: bool,
    pub rng: &'a mut ChaCha12Rng,
}

impl<'a> FwdCtx<'a> {
    pub fn bind(&mut self, tape: &mut Tape<f32>, t: &Tensor<f32>) -> NodeId {
        match self.reg.as_deref_mut() {
            Some(reg) => reg.bind(tape, t),
            None => tape.leaf_frozen(t),
        }
    }

    pub fn dropout_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            w: Tensor::trunc_normal(vec![d_in, d_out], WEIGHT_INIT_STD, rng),
            b: Tensor::zeros(vec![d_out]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, x: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
        let w = ctx.bind(tape, &self.w);
        let b = ctx.bind(tape, &self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        vec![&self.w, &self.b]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            w: Tensor::trunc_normal(vec![c_out, c_in, k, k], WEIGHT_INIT_STD, rng),
            b: Tensor::zeros(vec![c_out]).with_grad(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, x: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
        let w = ctx.bind(tape, &self.w);
        let b = ctx.bind(tape, &self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        tape.add(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        vec![&self.w, &self.b]
    }
}

#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvT2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            w: Tensor::trunc_normal(vec![c_in, c_out, k, k], WEIGHT_INIT_STD, rng),
            b: Tensor::zeros(vec![c_out]).with_grad(),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, x: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
        let w = ctx.bind(tape, &self.w);
        let b = ctx.bind(tape, &self.b);
        let y = tape.conv2d_transposed(x, w, self.stride, self.pad, self.out_pad)?;
        tape.add(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        vec![&self.w, &self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_trains_toward_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut layer = Linear::new(2, 1, &mut rng);
        let mut adam = super::super::Adam::new(0.05, 0.9, 0.999).unwrap();
        let x = Tensor::from_vec(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let t = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        let mut last = f32::MAX;
        for _ in 0..200 {
            let mut tape = Tape::new();
            let mut reg = ParamReg::new();
            let xid = tape.leaf(&x);
            let tid = tape.leaf(&t);
            let mut ctx = FwdCtx { reg: Some(&mut reg), train: true, rng: &mut rng };
            let y = layer.forward(&mut tape, xid, &mut ctx).unwrap();
            let loss = tape.mse_loss(y, tid).unwrap();
            last = tape.value(loss)[0];
            tape.backward(loss).unwrap();
            reg.export_grads(&tape, &mut layer.params_mut()).unwrap();
            adam.step(&mut layer.params_mut()).unwrap();
        }
        assert!(last < 1e-3, "final loss {last}");
    }
}
