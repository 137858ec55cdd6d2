//! Teacher/student CNNs with named feature taps and the Conv-LSTM sequence
//! predictor.

mod cnn;
mod convlstm;
mod init;

pub use cnn::{argmax_rows, Cnn, CnnOutput, CnnSpec, FeatureTap, Role};
pub use convlstm::{ConvLstm, ConvLstmConfig, ConvLstmState, GATE_PARAMS};
pub use init::Initializer;
