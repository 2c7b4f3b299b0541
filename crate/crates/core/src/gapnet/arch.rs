//! Architecture descriptors and their versioned text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::ConvGeometry;

/// Smallest accepted mapping resolution on either axis.
pub const MIN_MAPPING_RESOLUTION: usize = 4;

const DESCRIPTOR_MAGIC: &str = "camkit-gapnet v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingKind {
    Gap,
    Gmp,
}

impl PoolingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Gap => "gap",
            PoolingKind::Gmp => "gmp",
        }
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(PoolingKind::Gap),
            "gmp" => Ok(PoolingKind::Gmp),
            other => Err(Error::invalid(format!("unknown pooling kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool,
}

/// Backbone layers followed by the head: a 3×3/stride-1/pad-1 convolution with
/// `head_units` output maps and ReLU, a global pooling and a bias-free linear
/// softmax over `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// `(channels, height, width)` of the input image.
    pub input: (usize, usize, usize),
    pub backbone: Vec<LayerSpec>,
    pub head_units: usize,
    pub pooling: PoolingKind,
    pub classes: usize,
}

impl ArchConfig {
    /// 3×3 same-padded conv+ReLU blocks with the given widths. The first
    /// `maxpools` blocks are followed by a 2×2 max pool; extra pools are
    /// appended after the last block.
    pub fn conv_stack(
        input: (usize, usize, usize),
        widths: &[usize],
        maxpools: usize,
        head_units: usize,
        classes: usize,
        pooling: PoolingKind,
    ) -> Self {
        let mut backbone = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            backbone.push(LayerSpec::Conv {
                out_channels: w,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            backbone.push(LayerSpec::Relu);
            if i < maxpools {
                backbone.push(LayerSpec::MaxPool);
            }
        }
        backbone.extend((widths.len()..maxpools).map(|_| LayerSpec::MaxPool));
        Self {
            input,
            backbone,
            head_units,
            pooling,
            classes,
        }
    }

    /// The desk-scale network: 64×64 grayscale input, conv widths 8 and 16
    /// with a max pool after the first, 32 head units, 5 classes. Mapping
    /// resolution 32×32.
    pub fn desk(pooling: PoolingKind) -> Self {
        Self::conv_stack((1, 64, 64), &[8, 16], 1, 32, 5, pooling)
    }

    /// Spatial shape after each backbone layer, then the head conv, validating
    /// every layer along the way.
    pub(crate) fn trace_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Architecture(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        if self.head_units == 0 || self.classes == 0 {
            return Err(Error::Architecture(
                "head_units and classes must be positive".into(),
            ));
        }
        let mut shapes = Vec::with_capacity(self.backbone.len() + 1);
        for (i, layer) in self.backbone.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 {
                        return Err(Error::Architecture(format!("layer {i}: zero channels")));
                    }
                    let g = ConvGeometry {
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    };
                    (h, w) = g
                        .output_size(h, w)
                        .map_err(|e| Error::Architecture(format!("layer {i}: {e}")))?;
                    c = out_channels;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Architecture(format!(
                            "layer {i}: max pool on odd spatial size {h}x{w}"
                        )));
                    }
                    (h, w) = (h / 2, w / 2);
                }
            }
            shapes.push((c, h, w));
        }
        shapes.push((self.head_units, h, w));
        Ok(shapes)
    }

    /// `(h, w)` of the head conv output; rejects anything below
    /// [`MIN_MAPPING_RESOLUTION`].
    pub fn mapping_resolution(&self) -> Result<(usize, usize)> {
        let &(_, h, w) = self.trace_shapes()?.last().expect("head shape");
        if h < MIN_MAPPING_RESOLUTION || w < MIN_MAPPING_RESOLUTION {
            return Err(Error::Architecture(format!(
                "mapping resolution {h}x{w} is below the {MIN_MAPPING_RESOLUTION}x{MIN_MAPPING_RESOLUTION} floor"
            )));
        }
        Ok((h, w))
    }

    pub fn to_descriptor(&self) -> String {
        let mut s = String::new();
        let (c, h, w) = self.input;
        writeln!(s, "{DESCRIPTOR_MAGIC}").unwrap();
        writeln!(s, "input {c} {h} {w}").unwrap();
        for layer in &self.backbone {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => writeln!(s, "conv {out_channels} {kernel} {stride} {pad}").unwrap(),
                LayerSpec::Relu => writeln!(s, "relu").unwrap(),
                LayerSpec::MaxPool => writeln!(s, "maxpool").unwrap(),
            }
        }
        writeln!(s, "head {} {}", self.head_units, self.pooling.as_str()).unwrap();
        writeln!(s, "classes {}", self.classes).unwrap();
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| {
            Error::Architecture(format!("descriptor line {}: {msg}", line + 1))
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == DESCRIPTOR_MAGIC => {}
            _ => return Err(bad(0, "missing version header")),
        }
        let mut input = None;
        let mut backbone = Vec::new();
        let mut head = None;
        let mut classes = None;
        for (n, line) in lines {
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or_default();
            let nums: Vec<&str> = words.collect();
            let ints = || -> Result<Vec<usize>> {
                nums.iter()
                    .map(|t| t.parse::<usize>().map_err(|_| bad(n, "expected integer")))
                    .collect()
            };
            match key {
                "input" => match ints()?[..] {
                    [c, h, w] => input = Some((c, h, w)),
                    _ => return Err(bad(n, "input needs 3 integers")),
                },
                "conv" => match ints()?[..] {
                    [out_channels, kernel, stride, pad] => backbone.push(LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    }),
                    _ => return Err(bad(n, "conv needs 4 integers")),
                },
                "relu" => backbone.push(LayerSpec::Relu),
                "maxpool" => backbone.push(LayerSpec::MaxPool),
                "head" => match nums[..] {
                    [units, kind] => {
                        let units = units.parse().map_err(|_| bad(n, "expected integer"))?;
                        head = Some((units, kind.parse::<PoolingKind>()?));
                    }
                    _ => return Err(bad(n, "head needs units and pooling kind")),
                },
                "classes" => match ints()?[..] {
                    [c] => classes = Some(c),
                    _ => return Err(bad(n, "classes needs 1 integer")),
                },
                other => return Err(bad(n, &format!("unknown entry {other:?}"))),
            }
        }
        let (head_units, pooling) = head.ok_or_else(|| bad(0, "missing head"))?;
        Ok(Self {
            input: input.ok_or_else(|| bad(0, "missing input"))?,
            backbone,
            head_units,
            pooling,
            classes: classes.ok_or_else(|| bad(0, "missing classes"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let one = ArchConfig::conv_stack((1, 64, 64), &[8, 16], 1, 32, 5, PoolingKind::Gap);
        assert_eq!(one.mapping_resolution().unwrap(), (32, 32));
        let two = ArchConfig::conv_stack((1, 64, 64), &[8, 16], 2, 32, 5, PoolingKind::Gap);
        assert_eq!(two.mapping_resolution().unwrap(), (16, 16));
        let six = ArchConfig::conv_stack((1, 64, 64), &[8, 16], 6, 32, 5, PoolingKind::Gap);
        assert!(matches!(six.mapping_resolution(), Err(Error::Architecture(_))));
    }

    #[test]
    fn descriptor_roundtrip() {
        let a = ArchConfig::desk(PoolingKind::Gmp);
        let text = a.to_descriptor();
        assert_eq!(ArchConfig::from_descriptor(&text).unwrap(), a);
    }

    #[test]
    fn descriptor_rejects_garbage() {
        assert!(ArchConfig::from_descriptor("hello").is_err());
        let mut text = ArchConfig::desk(PoolingKind::Gap).to_descriptor();
        text.push_str("dropout 0.5\n");
        assert!(ArchConfig::from_descriptor(&text).is_err());
    }

    #[test]
    fn odd_pooling_rejected() {
        let a = ArchConfig::conv_stack((1, 6, 6), &[2], 2, 4, 2, PoolingKind::Gap);
        assert!(a.mapping_resolution().is_err());
    }
}
