//! Versioned binary checkpoint.
//!
//! ```text
//! "PCNN" | u16 version | u32 in_c, in_h, in_w, num_classes, group_size | u32 n_layers
//! per layer: u8 tag (0 conv, 1 avgpool, 2 gap, 3 fc)
//!   conv: u8 kind (0 standard, 1 grouped, 2 pointwise, 3 parallel),
//!         u32 d_k, d_m, d_n, groups, u8 bias
//!   fc:   u32 inputs, num_classes
//! then every parameter as little-endian f32, in Model::parameters order
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::model::{ConvLayer, FcLayer, Layer, Model};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{ConvKind, ConvLayerSpec, Tensor};

pub const MAGIC: &[u8; 4] = b"PCNN";
pub const FORMAT_VERSION: u16 = 1;

fn kind_tag(kind: ConvKind) -> u8 {
    match kind {
        ConvKind::Standard => 0,
        ConvKind::Grouped => 1,
        ConvKind::Pointwise => 2,
        ConvKind::Parallel => 3,
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for v in spec.input_shape {
        put(&mut out, v);
    }
    put(&mut out, spec.num_classes);
    put(&mut out, spec.group_size);
    put(&mut out, spec.layers.len());
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv(c) => {
                out.push(0);
                out.push(kind_tag(c.kind));
                for v in [c.d_k, c.d_m, c.d_n, c.groups] {
                    put(&mut out, v);
                }
                out.push(c.bias as u8);
            }
            LayerSpec::AvgPool => out.push(1),
            LayerSpec::GlobalAvgPool => out.push(2),
            LayerSpec::FullyConnected {
                inputs,
                num_classes,
            } => {
                out.push(3);
                put(&mut out, *inputs);
                put(&mut out, *num_classes);
            }
        }
    }
    for p in model.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let bytes = self.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version: expected {FORMAT_VERSION}, found {version}"
        )));
    }
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let num_classes = r.u32()?;
    let group_size = r.u32()?;
    let n_layers = r.u32()?;
    if n_layers > 1 << 16 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(match r.u8()? {
            0 => {
                let kind = match r.u8()? {
                    0 => ConvKind::Standard,
                    1 => ConvKind::Grouped,
                    2 => ConvKind::Pointwise,
                    3 => ConvKind::Parallel,
                    t => return Err(Error::Format(format!("layer {i}: unknown conv kind {t}"))),
                };
                let (d_k, d_m, d_n, groups) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let bias = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(Error::Format(format!("layer {i}: bad bias flag {b}"))),
                };
                LayerSpec::Conv(ConvLayerSpec {
                    kind,
                    d_k,
                    d_m,
                    d_n,
                    groups,
                    stride: 1,
                    padding: d_k.saturating_sub(1) / 2,
                    bias,
                })
            }
            1 => LayerSpec::AvgPool,
            2 => LayerSpec::GlobalAvgPool,
            3 => LayerSpec::FullyConnected {
                inputs: r.u32()?,
                num_classes: r.u32()?,
            },
            t => return Err(Error::Format(format!("layer {i}: unknown layer tag {t}"))),
        });
    }
    let spec = NetworkSpec {
        input_shape,
        num_classes,
        group_size,
        layers,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("invalid layer manifest: {e}")))?;

    let mut built = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        built.push(match *ls {
            LayerSpec::Conv(c) => {
                let weight = r.tensor(&c.kernel_shape())?;
                let pointwise = match c.kind {
                    ConvKind::Parallel => Some(r.tensor(&c.pointwise_shape())?),
                    _ => None,
                };
                let bias = if c.bias {
                    Some(r.tensor(&[c.d_n])?)
                } else {
                    None
                };
                Layer::Conv(ConvLayer {
                    spec: c,
                    weight,
                    pointwise,
                    bias,
                })
            }
            LayerSpec::AvgPool => Layer::AvgPool,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::FullyConnected {
                inputs,
                num_classes,
            } => Layer::FullyConnected(FcLayer {
                weight: r.tensor(&[num_classes, inputs])?,
                bias: r.tensor(&[num_classes])?,
            }),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after weights",
            bytes.len() - r.pos
        )));
    }
    Model::from_parts(spec, built)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model {
        let spec = NetworkSpec::from_stages(&[&[4, 8], &[8]], ConvKind::Parallel, 2, [1, 8, 8], 7)
            .unwrap();
        Model::build(&spec, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_model();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back, m);
        let x = Tensor::from_fn([2, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        let a = m.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pcnn");
        let m = small_model();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn truncated() {
        let bytes = encode_model(&small_model());
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_model(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes() {
        let mut bytes = encode_model(&small_model());
        bytes.push(0);
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_names_both() {
        let mut bytes = encode_model(&small_model());
        bytes[4..6].copy_from_slice(&7u16.to_le_bytes());
        let msg = decode_model(&bytes).unwrap_err().to_string();
        assert!(
            msg.contains("expected 1") && msg.contains("found 7"),
            "{msg}"
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_model(&small_model());
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }
}
