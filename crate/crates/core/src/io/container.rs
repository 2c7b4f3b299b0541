//! Named-tensor container: a length-prefixed UTF-8 header followed by a
//! count-prefixed list of `(name, tensor)` entries. Checkpoints, dataset
//! splits and linear heads are all stored this way.

use std::collections::HashSet;

use super::tensor_file::{read_any, AnyTensor, Reader};
use crate::error::{Error, FormatError, Result};
use crate::features::LinearHead;
use crate::gapnet::{build_gapnet, ArchConfig, GapNet};
use crate::localize::BBox;
use crate::synthdata::{Sample, SampleMeta};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub entries: Vec<(String, AnyTensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, 0);
        let header = read_str(&mut r)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.offset();
            let name = read_str(&mut r)?;
            if !seen.insert(name.clone()) {
                return Err(r.invalid(at, format!("duplicate entry {name:?}")).into());
            }
            entries.push((name, read_any(&mut r)?));
        }
        if r.remaining() != 0 {
            return Err(r.invalid(r.offset(), "trailing bytes after last entry").into());
        }
        Ok(Self { header, entries })
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("container has no entry {name:?}")))
    }

    fn get_f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::invalid(format!("entry {name:?} is not 32-bit"))),
        }
    }

    fn get_f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.get(name)? {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::invalid(format!("entry {name:?} is not 64-bit"))),
        }
    }
}

fn read_str(r: &mut Reader<'_>) -> Result<String, FormatError> {
    let len = r.u32()? as usize;
    let at = r.offset();
    let raw = r.take(len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| r.invalid(at, "string is not UTF-8"))
}

pub fn encode_checkpoint(net: &GapNet<f32>) -> Vec<u8> {
    Container {
        header: net.arch().to_descriptor(),
        entries: net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, AnyTensor::F32(t.clone())))
            .collect(),
    }
    .encode()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GapNet<f32>> {
    let c = Container::decode(bytes)?;
    let arch = ArchConfig::from_descriptor(&c.header)?;
    let mut net = build_gapnet(&arch, 0)?;
    let tensors = c
        .entries
        .into_iter()
        .map(|(n, t)| match t {
            AnyTensor::F32(t) => Ok((n, t)),
            AnyTensor::F64(_) => Err(Error::invalid(format!("parameter {n:?} is not 32-bit"))),
        })
        .collect::<Result<Vec<_>>>()?;
    net.load_named(tensors)?;
    Ok(net)
}

const DATASET_MAGIC: &str = "camkit-dataset v1";
const META_COLUMNS: usize = 6;

/// One dataset split. Images are stored as `N×C×H×W` 32-bit floats; labels,
/// boxes and placement metadata as 64-bit floats, which hold every value
/// exactly.
pub fn encode_split(samples: &[Sample]) -> Result<Vec<u8>> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot store an empty split"))?;
    let img_shape = first.image.shape().to_vec();
    let n = samples.len();
    let mut images = Vec::with_capacity(n * first.image.len());
    let mut labels = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n * 4);
    let mut meta = Vec::with_capacity(n * META_COLUMNS);
    for s in samples {
        s.image.expect_shape("dataset image", &img_shape)?;
        images.extend_from_slice(s.image.data());
        labels.push(s.label as f64);
        let b = s.gt_box;
        boxes.extend([b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v as f64));
        let m = s.meta;
        meta.extend([
            m.seed as f64,
            m.scale as f64,
            m.origin.0 as f64,
            m.origin.1 as f64,
            m.variant as f64,
            m.clutter as f64,
        ]);
    }
    let mut shape = vec![n];
    shape.extend(&img_shape);
    Ok(Container {
        header: DATASET_MAGIC.to_string(),
        entries: vec![
            ("images".into(), Tensor::new(&shape, images)?.into()),
            ("labels".into(), Tensor::new(&[n], labels)?.into()),
            ("boxes".into(), Tensor::new(&[n, 4], boxes)?.into()),
            ("meta".into(), Tensor::new(&[n, META_COLUMNS], meta)?.into()),
        ],
    }
    .encode())
}

fn exact_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("{what} {v} is not a non-negative integer")))
    }
}

pub fn decode_split(bytes: &[u8]) -> Result<Vec<Sample>> {
    let c = Container::decode(bytes)?;
    if c.header != DATASET_MAGIC {
        return Err(Error::invalid(format!("not a dataset file (header {:?})", c.header)));
    }
    let images = c.get_f32("images")?;
    let labels = c.get_f64("labels")?;
    let boxes = c.get_f64("boxes")?;
    let meta = c.get_f64("meta")?;
    let n = labels.len();
    if images.ndim() < 2 || images.shape()[0] != n {
        return Err(Error::shape("dataset images", &[n], images.shape()));
    }
    boxes.expect_shape("dataset boxes", &[n, 4])?;
    meta.expect_shape("dataset meta", &[n, META_COLUMNS])?;
    let img_shape = &images.shape()[1..];
    let per = images.len() / n;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b: Vec<usize> = boxes.data()[i * 4..i * 4 + 4]
            .iter()
            .map(|&v| exact_usize(v, "box coordinate"))
            .collect::<Result<_>>()?;
        let m = &meta.data()[i * META_COLUMNS..(i + 1) * META_COLUMNS];
        out.push(Sample {
            image: Tensor::new(img_shape, images.data()[i * per..(i + 1) * per].to_vec())?,
            label: exact_usize(labels.data()[i], "label")?,
            gt_box: BBox::new(b[0], b[1], b[2], b[3])?,
            meta: SampleMeta {
                seed: exact_usize(m[0], "seed")? as u64,
                scale: m[1] as f32,
                origin: (m[2] as f32, m[3] as f32),
                variant: exact_usize(m[4], "variant")? as u8,
                clutter: exact_usize(m[5], "clutter")? as u8,
            },
        });
    }
    Ok(out)
}

const HEAD_MAGIC: &str = "camkit-linear-head v1";

pub fn encode_head(head: &LinearHead) -> Vec<u8> {
    Container {
        header: format!("{HEAD_MAGIC}\nlambda {:?}\nlabels {}", head.lambda, head.label_set),
        entries: vec![("weights".into(), head.weights.clone().into())],
    }
    .encode()
}

pub fn decode_head(bytes: &[u8]) -> Result<LinearHead> {
    let c = Container::decode(bytes)?;
    let mut lines = c.header.lines();
    if lines.next() != Some(HEAD_MAGIC) {
        return Err(Error::invalid("not a linear head file"));
    }
    let lambda = lines
        .next()
        .and_then(|l| l.strip_prefix("lambda "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::invalid("linear head file lacks a lambda line"))?;
    let label_set = lines
        .next()
        .and_then(|l| l.strip_prefix("labels "))
        .ok_or_else(|| Error::invalid("linear head file lacks a labels line"))?
        .to_string();
    let weights = c.get_f32("weights")?.clone();
    if weights.ndim() != 2 {
        return Err(Error::invalid("head weights must be C×K"));
    }
    Ok(LinearHead {
        weights,
        label_set,
        lambda,
    })
}
