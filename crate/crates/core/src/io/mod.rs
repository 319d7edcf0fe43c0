//! File formats: Netpbm images and the flat key=value run config.

pub mod config;
pub mod pnm;

pub use config::{HeadKind, RunConfig};
pub use pnm::{decode_pnm, encode_pnm, read_image, write_image, write_image_as, PnmEncoding};
