//! File formats and rendering.

pub mod boxes;
pub mod colormap;
pub mod container;
pub mod render;
pub mod tensor_file;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::LinearHead;
use crate::gapnet::GapNet;
use crate::synthdata::{Dataset, Sample};
use crate::tensor::Tensor;

pub use boxes::{parse_boxes, write_boxes, BoxRow};
pub use container::{decode_checkpoint, decode_head, decode_split, encode_checkpoint, encode_head, encode_split, Container};
pub use render::{contact_sheet, render_overlay, DEFAULT_ALPHA};
pub use tensor_file::{decode_any, decode_f32, decode_f64, encode, AnyTensor};

pub const TRAIN_FILE: &str = "train.camd";
pub const TEST_FILE: &str = "test.camd";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_f32(&read_file(path)?)
}

pub fn save_checkpoint(path: &Path, net: &GapNet<f32>) -> Result<()> {
    write_file(path, &encode_checkpoint(net))
}

pub fn load_checkpoint(path: &Path) -> Result<GapNet<f32>> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_head(path: &Path, head: &LinearHead) -> Result<()> {
    write_file(path, &encode_head(head))
}

pub fn load_head(path: &Path) -> Result<LinearHead> {
    decode_head(&read_file(path)?)
}

pub fn split_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(TRAIN_FILE), dir.join(TEST_FILE))
}

/// Writes `dir/train.camd` and `dir/test.camd`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let (train, test) = split_paths(dir);
    write_file(&train, &encode_split(&data.train)?)?;
    write_file(&test, &encode_split(&data.test)?)
}

pub fn load_split(path: &Path) -> Result<Vec<Sample>> {
    decode_split(&read_file(path)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (train, test) = split_paths(dir);
    Ok(Dataset {
        train: load_split(&train)?,
        test: load_split(&test)?,
    })
}
