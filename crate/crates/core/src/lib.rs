pub mod codec;
pub mod corpus;
pub mod tensor;
pub mod metrics;
pub mod joint;
pub mod decoding;
pub mod model;
pub mod rnn;
pub mod transformer;
pub mod training;
pub mod synthetic;
