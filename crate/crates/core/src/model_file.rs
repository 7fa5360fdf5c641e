//! Binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "BLKREW01"            8-byte magic
//! payload_len: u64
//! payload
//! crc32(payload): u32
//! ```
//!
//! The payload holds the layer table followed by one record per
//! parameterized layer. Each record stores its block scheme, its bias and
//! exactly one weight representation: dense, masked (group bitsets plus the
//! surviving values in row-major order) or reordered (group bitsets, row
//! order and group-contiguous compact weights). Bitsets pack 64 groups per
//! `u64` word.

use std::fs;
use std::path::Path;

use log::warn;

use crate::blocks::{apply_mask, BlockScheme, Direction, LayerMask, SparseMask};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::reorder::{pack_bits, reorder, unpack_bits, ReorderedModel, RowGroup};
use crate::tensor::{ConvSpec, Tensor};

pub const MAGIC: &[u8; 8] = b"BLKREW01";

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(Tensor),
    /// `weights` is already zero wherever the mask removes an element.
    Masked {
        mask: LayerMask,
        weights: Tensor,
    },
    Reordered {
        mask: LayerMask,
        model: ReorderedModel,
    },
}

impl LayerWeights {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerWeights::Dense(_) => "dense",
            LayerWeights::Masked { .. } => "masked",
            LayerWeights::Reordered { .. } => "reordered",
        }
    }

    /// The dense GEMM-form matrix, zeros included.
    pub fn to_dense(&self) -> Tensor {
        match self {
            LayerWeights::Dense(w) | LayerWeights::Masked { weights: w, .. } => w.clone(),
            LayerWeights::Reordered { model, .. } => model.reconstruct(),
        }
    }

    pub fn mask(&self) -> Option<&LayerMask> {
        match self {
            LayerWeights::Dense(_) => None,
            LayerWeights::Masked { mask, .. } | LayerWeights::Reordered { mask, .. } => Some(mask),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub scheme: BlockScheme,
    pub bias: Vec<f64>,
    pub weights: LayerWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamLayer>,
}

impl ModelFile {
    /// Dense representation; `schemes` defaults to one block per layer.
    pub fn dense(net: &Network, schemes: Option<&[BlockScheme]>) -> Result<Self> {
        let params = net
            .weights()
            .iter()
            .zip(net.biases())
            .enumerate()
            .map(|(i, (w, b))| {
                let scheme = match schemes {
                    Some(s) => s[i],
                    None => BlockScheme::whole(w.rows(), w.cols())?,
                };
                Ok(ParamLayer {
                    scheme,
                    bias: b.clone(),
                    weights: LayerWeights::Dense(w.clone()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers: net.layers().to_vec(),
            params,
        })
    }

    pub fn masked(net: &Network, mask: &SparseMask) -> Result<Self> {
        if mask.layers.len() != net.weights().len() {
            return Err(Error::Shape(format!(
                "mask has {} layers, network {}",
                mask.layers.len(),
                net.weights().len()
            )));
        }
        let params = net
            .weights()
            .iter()
            .zip(net.biases())
            .zip(&mask.layers)
            .map(|((w, b), m)| {
                Ok(ParamLayer {
                    scheme: *m.scheme(),
                    bias: b.clone(),
                    weights: LayerWeights::Masked {
                        mask: m.clone(),
                        weights: apply_mask(w, m)?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers: net.layers().to_vec(),
            params,
        })
    }

    /// Dense network view of the stored weights.
    pub fn to_network(&self) -> Result<Network> {
        Network::from_parts(
            self.layers.clone(),
            self.params.iter().map(|p| p.weights.to_dense()).collect(),
            self.params.iter().map(|p| p.bias.clone()).collect(),
        )
    }

    /// The stored mask, treating dense layers as fully alive.
    pub fn sparse_mask(&self) -> SparseMask {
        SparseMask {
            layers: self
                .params
                .iter()
                .map(|p| {
                    p.weights
                        .mask()
                        .cloned()
                        .unwrap_or_else(|| LayerMask::dense(p.scheme))
                })
                .collect(),
        }
    }

    /// Convert every layer to the reordered representation. Layers that are
    /// already reordered are left untouched; dense layers become a single
    /// group and a warning is logged. Every conversion is checked by
    /// reconstructing the dense matrix.
    pub fn reorder(&self, fuzzy: Option<usize>) -> Result<Self> {
        let mut out = self.clone();
        for (i, p) in out.params.iter_mut().enumerate() {
            let (mask, dense) = match &p.weights {
                LayerWeights::Reordered { .. } => continue,
                LayerWeights::Dense(w) => {
                    warn!(
                        "layer {} has no mask; reordering it as a single dense group",
                        i
                    );
                    (LayerMask::dense(p.scheme), w.clone())
                }
                LayerWeights::Masked { mask, weights } => (mask.clone(), weights.clone()),
            };
            let model = reorder(&dense, &mask, fuzzy)?;
            if model.reconstruct() != dense {
                return Err(Error::Format(format!(
                    "layer {} does not survive reordering",
                    i
                )));
            }
            p.weights = LayerWeights::Reordered { mask, model };
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.layers.len() as u64);
        for l in &self.layers {
            write_layer_spec(&mut w, l);
        }
        w.u64(self.params.len() as u64);
        for p in &self.params {
            write_param(&mut w, p);
        }
        let payload = w.buf;
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing BLKREW01 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + len + 4 {
            return Err(Error::Format(format!(
                "payload length {} does not match file size {}",
                len,
                bytes.len()
            )));
        }
        let payload = &bytes[16..16 + len];
        let stored = u32::from_le_bytes(bytes[16 + len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader {
            buf: payload,
            pos: 0,
        };
        let n = r.len()?;
        let layers = (0..n)
            .map(|_| read_layer_spec(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let np = r.len()?;
        let params = (0..np)
            .map(|_| read_param(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                payload.len() - r.pos
            )));
        }
        let model = Self { layers, params };
        // Validates the layer chain and every weight shape.
        model.to_network()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn words(&mut self, ws: &[u64]) {
        for v in ws {
            self.u64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count or index; bounded by the payload size so corrupt files cannot
    /// request huge allocations.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.buf.len() as u64 * 64 {
            return Err(Error::Format(format!("implausible count {}", v)));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn words(&mut self, n: usize) -> Result<Vec<u64>> {
        (0..n).map(|_| self.u64()).collect()
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("bad flag byte {}", v))),
        }
    }
}

const KIND_FC: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_SOFTMAX: u8 = 3;

const REPR_DENSE: u8 = 0;
const REPR_MASKED: u8 = 1;
const REPR_REORDERED: u8 = 2;

fn write_layer_spec(w: &mut Writer, l: &LayerSpec) {
    match *l {
        LayerSpec::FullyConnected {
            inputs,
            outputs,
            bias,
        } => {
            w.u8(KIND_FC);
            w.u64(inputs as u64);
            w.u64(outputs as u64);
            w.u8(bias as u8);
        }
        LayerSpec::Conv2d {
            conv,
            height,
            width,
            bias,
        } => {
            w.u8(KIND_CONV);
            for v in [
                conv.in_channels,
                conv.out_channels,
                conv.kernel_h,
                conv.kernel_w,
                conv.stride,
                conv.padding,
                height,
                width,
            ] {
                w.u64(v as u64);
            }
            w.u8(bias as u8);
        }
        LayerSpec::Relu => w.u8(KIND_RELU),
        LayerSpec::SoftmaxXent => w.u8(KIND_SOFTMAX),
    }
}

fn read_layer_spec(r: &mut Reader) -> Result<LayerSpec> {
    Ok(match r.u8()? {
        KIND_FC => LayerSpec::FullyConnected {
            inputs: r.len()?,
            outputs: r.len()?,
            bias: r.bool()?,
        },
        KIND_CONV => {
            let mut v = [0usize; 8];
            for x in &mut v {
                *x = r.len()?;
            }
            LayerSpec::Conv2d {
                conv: ConvSpec {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel_h: v[2],
                    kernel_w: v[3],
                    stride: v[4],
                    padding: v[5],
                },
                height: v[6],
                width: v[7],
                bias: r.bool()?,
            }
        }
        KIND_RELU => LayerSpec::Relu,
        KIND_SOFTMAX => LayerSpec::SoftmaxXent,
        k => return Err(Error::Format(format!("unknown layer kind {}", k))),
    })
}

fn write_mask(w: &mut Writer, m: &LayerMask) {
    for d in [Direction::Row, Direction::Column] {
        w.words(&pack_bits(m.alive(d).iter().copied()));
    }
}

fn read_mask(r: &mut Reader, s: BlockScheme) -> Result<LayerMask> {
    let mut alive = Vec::new();
    for d in [Direction::Row, Direction::Column] {
        let count = s.group_count(d);
        let words = r.words(count.div_ceil(64))?;
        alive.push(unpack_bits(&words, count));
    }
    let col = alive.pop().unwrap();
    let row = alive.pop().unwrap();
    LayerMask::from_groups(s, row, col)
}

fn write_param(w: &mut Writer, p: &ParamLayer) {
    let s = &p.scheme;
    for v in [s.rows(), s.cols(), s.m(), s.n()] {
        w.u64(v as u64);
    }
    w.u64(p.bias.len() as u64);
    w.f64s(&p.bias);
    match &p.weights {
        LayerWeights::Dense(t) => {
            w.u8(REPR_DENSE);
            w.f64s(t.data());
        }
        LayerWeights::Masked { mask, weights } => {
            w.u8(REPR_MASKED);
            write_mask(w, mask);
            let keep = mask.elements();
            let vals: Vec<f64> = weights
                .data()
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .collect();
            w.f64s(&vals);
        }
        LayerWeights::Reordered { mask, model } => {
            w.u8(REPR_REORDERED);
            write_mask(w, mask);
            for &o in &model.order {
                w.u64(o as u64);
            }
            w.u64(model.zero_rows as u64);
            w.u64(model.groups.len() as u64);
            for g in &model.groups {
                w.u64(g.rows.start as u64);
                w.u64(g.rows.end as u64);
                w.u64(g.gather.len() as u64);
                for &c in &g.gather {
                    w.u64(c as u64);
                }
                w.f64s(&g.weights);
            }
        }
    }
}

fn read_param(r: &mut Reader) -> Result<ParamLayer> {
    let (rows, cols, m, n) = (r.len()?, r.len()?, r.len()?, r.len()?);
    let scheme = BlockScheme::partition(rows, cols, m, n)?;
    let nb = r.len()?;
    let bias = r.f64s(nb)?;
    let weights = match r.u8()? {
        REPR_DENSE => LayerWeights::Dense(Tensor::matrix(rows, cols, r.f64s(rows * cols)?)?),
        REPR_MASKED => {
            let mask = read_mask(r, scheme)?;
            let keep = mask.elements();
            let vals = r.f64s(keep.iter().filter(|k| **k).count())?;
            let mut it = vals.into_iter();
            let data = keep
                .iter()
                .map(|k| if *k { it.next().unwrap() } else { 0.0 })
                .collect();
            LayerWeights::Masked {
                mask,
                weights: Tensor::matrix(rows, cols, data)?,
            }
        }
        REPR_REORDERED => {
            let mask = read_mask(r, scheme)?;
            let order = (0..rows).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let mut seen = vec![false; rows];
            for &o in &order {
                if o >= rows || std::mem::replace(&mut seen[o], true) {
                    return Err(Error::Format("row order is not a permutation".into()));
                }
            }
            let zero_rows = r.len()?;
            let ng = r.len()?;
            let mut groups = Vec::with_capacity(ng.min(rows));
            let mut next = 0;
            for _ in 0..ng {
                let (start, end) = (r.len()?, r.len()?);
                if start != next || end < start || end > rows {
                    return Err(Error::Format("row groups are not contiguous".into()));
                }
                next = end;
                let gl = r.len()?;
                let gather = (0..gl).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                if gather.iter().any(|c| *c >= cols) || gather.windows(2).any(|p| p[0] >= p[1]) {
                    return Err(Error::Format("gather indices out of order or range".into()));
                }
                let weights = r.f64s((end - start) * gl)?;
                groups.push(RowGroup {
                    rows: start..end,
                    gather,
                    weights,
                });
            }
            if next + zero_rows != rows {
                return Err(Error::Format("row groups do not cover the matrix".into()));
            }
            LayerWeights::Reordered {
                mask,
                model: ReorderedModel {
                    rows,
                    cols,
                    order,
                    groups,
                    zero_rows,
                },
            }
        }
        k => {
            return Err(Error::Format(format!(
                "unknown weight representation {}",
                k
            )))
        }
    };
    Ok(ParamLayer {
        scheme,
        bias,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp;
    use crate::prune::{prune_threshold, PruneConfig};
    use crate::Directions;

    fn conv_net() -> Network {
        let conv = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 1,
        };
        let layers = vec![
            LayerSpec::Conv2d {
                conv,
                height: 4,
                width: 4,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                inputs: 75,
                outputs: 4,
                bias: false,
            },
            LayerSpec::SoftmaxXent,
        ];
        Network::init(layers, 3).unwrap()
    }

    fn pruned(net: &Network) -> (Network, SparseMask) {
        let mut net = net.clone();
        let schemes: Vec<_> = net
            .weights()
            .iter()
            .map(|w| BlockScheme::clamped(w.rows(), w.cols(), 2, 3).unwrap().0)
            .collect();
        let cfg = PruneConfig {
            tau: 0.7,
            ..Default::default()
        };
        let mask = prune_threshold(&mut net, &schemes, Directions::Both, &cfg).unwrap();
        (net, mask)
    }

    #[test]
    fn all_representations_round_trip_bit_identically() {
        for net in [
            conv_net(),
            Network::init(mlp(&[5, 70, 3], true), 1).unwrap(),
        ] {
            let (p, mask) = pruned(&net);
            let masked = ModelFile::masked(&p, &mask).unwrap();
            for model in [
                ModelFile::dense(&net, None).unwrap(),
                masked.clone(),
                masked.reorder(None).unwrap(),
            ] {
                let bytes = model.encode();
                let back = ModelFile::decode(&bytes).unwrap();
                assert_eq!(back, model);
                assert_eq!(back.encode(), bytes);
                let a: Vec<u64> = model
                    .to_network()
                    .unwrap()
                    .weights()
                    .iter()
                    .flat_map(|w| w.data().iter().map(|v| v.to_bits()))
                    .collect();
                let b: Vec<u64> = back
                    .to_network()
                    .unwrap()
                    .weights()
                    .iter()
                    .flat_map(|w| w.data().iter().map(|v| v.to_bits()))
                    .collect();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn tampering_is_detected() {
        let (p, mask) = pruned(&conv_net());
        let bytes = ModelFile::masked(&p, &mask).unwrap().encode();
        for pos in [20, bytes.len() / 2, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(
                matches!(ModelFile::decode(&bad), Err(Error::Checksum { .. })),
                "byte {}",
                pos
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::decode(&bad), Err(Error::Format(_))));
        assert!(ModelFile::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn reorder_is_idempotent_and_lossless() {
        let (p, mask) = pruned(&Network::init(mlp(&[6, 20, 3], true), 4).unwrap());
        let masked = ModelFile::masked(&p, &mask).unwrap();
        let once = masked.reorder(None).unwrap();
        assert_eq!(once.reorder(None).unwrap(), once);
        assert_eq!(once.to_network().unwrap(), masked.to_network().unwrap());
        assert_eq!(once.sparse_mask(), mask);
        let dense = ModelFile::dense(&p, None).unwrap().reorder(None).unwrap();
        for layer in &dense.params {
            match &layer.weights {
                LayerWeights::Reordered { model, .. } => assert!(model.groups.len() <= 1),
                other => panic!("{}", other.kind()),
            }
        }
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.blkrew");
        let model = ModelFile::dense(&conv_net(), None).unwrap();
        model.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), model);
        assert!(matches!(
            ModelFile::load(&dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }
}
