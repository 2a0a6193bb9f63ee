//! File formats: `MRSW` checkpoints, `MRST` tensors and JSON-lines records.

mod checkpoint;
mod records;
mod tensor_file;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use records::{parse_records, read_detections, read_ground_truth, write_detections};
pub use tensor_file::{load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes, TENSOR_MAGIC, TENSOR_VERSION};
