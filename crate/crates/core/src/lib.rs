pub mod archive;
pub mod autodiff;
pub mod error;
pub mod grammar;
pub mod graph_data;
pub mod loss_check;
pub mod loss_expr;
pub mod loss_zoo;
pub mod search;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
