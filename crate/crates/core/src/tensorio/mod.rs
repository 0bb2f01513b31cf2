//! Array containers and the on-disk formats shared by every pipeline stage.
//!
//! * LMT1: `b"LMT1"`, `u8` ndim, `ndim x u32` dims, f32 payload, little-endian.
//! * PGM (P5, maxval 255) label maps, where 255 is the unlabeled sentinel.
//! * PPM (P6) colour images and label overlays.

mod netpbm;
mod tensor;

pub use netpbm::{
    default_palette, read_image, read_label_map, write_color_overlay, write_image, write_label_map, ImageRgb, LabelMap,
    BACKGROUND, SENTINEL_GRAY, UNLABELED_PGM,
};
pub use tensor::{read_tensor, write_tensor, Tensor, MAX_DIMS, TENSOR_MAGIC};
