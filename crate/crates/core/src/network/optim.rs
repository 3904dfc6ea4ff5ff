use serde::{Deserialize, Serialize};

use super::{Gradients, SegNet};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &SegNet, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut SegNet, grads: &Gradients, lr: f32) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.0.len() || params.len() != self.velocity.len() {
            return Err(Error::shape("optimizer state does not match the network"));
        }
        for ((w, g), v) in params.iter_mut().zip(&grads.0).zip(self.velocity.iter_mut()) {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}
