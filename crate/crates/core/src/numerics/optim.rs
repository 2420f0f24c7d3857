use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

/// Momentum buffers for one parameter group, in the group's visiting order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdSlots {
    pub velocity: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdStep {
    /// One SGD update with coupled weight decay and heavy-ball momentum:
    /// `v = μ v + (g + λ p)`, `p -= lr v`.
    pub fn apply(&self, params: Vec<&mut Matrix>, grads: &[Matrix], slots: &mut SgdSlots) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if slots.velocity.len() != params.len() {
            slots.velocity = params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut slots.velocity) {
            let pv = p.as_mut_slice();
            for ((w, &gw), vel) in pv.iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                let d = gw + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= self.lr * *vel;
            }
        }
    }
}
