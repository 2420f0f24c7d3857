//! Dense `f64` computation substrate shared by every model component.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;

pub use gradcheck::grad_check;
pub use layers::{BoundLinear, BoundMlp, LinearLayer, Mlp, Parameterized};
pub use matrix::{argmax, Matrix};
pub use ops::{cross_entropy, mse_uniform, softmax, softmax_rows};
pub use optim::{SgdSlots, SgdStep};
pub use rng::{RngState, SeededRng};
pub use tape::{Gradients, Tape, Var};
