pub mod ablation;
pub mod category;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tokenization;
pub mod trainer;

pub use category::Category;
pub use error::{CoreError, Result};
