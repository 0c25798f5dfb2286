//! Recurrent encoders, the task-adaptive block and the stacked network.

pub mod attention;
pub mod block;
pub mod count;
pub mod htan;
pub mod lstm;

pub use attention::{attention_step, AttentionCell};
pub use block::{block_forward, BlockParams, BlockTrace, EncoderKind};
pub use count::{crossover, parameter_count, ParamCount};
pub use htan::{htan_forward, htan_forward_var, Htan, HtanConfig, HtanVars};
pub use lstm::{lstm_step, LstmCell};
