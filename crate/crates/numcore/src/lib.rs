//! Dense tensor arithmetic with reverse-mode gradients, a finite-difference
//! oracle, an explicit seeded RNG stream, and the QTNS tensor container.
//!
//! Everything downstream (the toy vision-language model, the attack
//! optimizers, the evaluation harness) builds on this crate. There is no
//! hidden global randomness anywhere: every random draw goes through an
//! [`RngStream`] owned by the caller.

mod error;
mod fdiff;
mod qtns;
mod rng;
mod tape;
mod tensor;

pub use error::NumError;
pub use fdiff::finite_diff_grad;
pub use qtns::{read_qtns, read_qtns_f32, read_qtns_f64, write_qtns, DTYPE_F32, DTYPE_F64};
pub use rng::{fork_seed, RngStream, RNG_ALGORITHM};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
