pub mod checkpoint;
pub mod codec;
pub mod geometry;
pub mod image;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod segmenter;
pub mod synthdoc;
pub mod tensor;
pub mod train;
