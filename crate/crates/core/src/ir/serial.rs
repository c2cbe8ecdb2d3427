//! MCE model file format.
//!
//! ```text
//! magic      "MCE1"
//! version    u16 (= 1)
//! precision  u16 (0 original, 1 fp32, 2 fp16, 3 int8)
//! nodes      u32 count
//! node table per node, ascending id:
//!              id u32 | op u8 | arity u8 | inputs u32 x arity | attr_len u32 | attrs
//! spec table per node, same order: tensor spec
//! graph      name str | u32 n_inputs | (id u32, name str, spec)* | u32 n_outputs | (id u32, name str)*
//! weights    u32 blob count | (len u64, raw bytes)* for each Const in node order
//! crc32      u32 over every preceding byte
//!
//! str  = u32 byte length | utf-8 bytes
//! spec = dtype u8 | rank u8 | dims u32 x rank | has_quant u8 | [scale f64 | zero_point i32]
//! ```
//!
//! All integers little-endian.

use super::{
    Attrs, DType, Graph, GraphInput, GraphOutput, IrError, Metadata, Node, OpKind, Padding, Precision, QuantParams,
    TensorSpec,
};

pub const MAGIC: &[u8; 4] = b"MCE1";
pub const FORMAT_VERSION: u16 = 1;

/// Bytes a stored quant-param pair occupies (f64 scale + i32 zero point).
const QUANT_BYTES: usize = 12;

/// Raw weight bytes plus the quant params stored alongside INT8 weights.
pub fn weight_payload_bytes(graph: &Graph) -> usize {
    graph
        .nodes()
        .filter_map(|n| {
            let payload = n.payload.as_ref()?;
            Some(payload.len() + if n.spec.quant.is_some() { QUANT_BYTES } else { 0 })
        })
        .sum()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn spec(&mut self, spec: &TensorSpec) {
        self.u8(spec.dtype.code());
        self.u8(spec.shape.len() as u8);
        for &d in &spec.shape {
            self.u32(d as u32);
        }
        match spec.quant {
            Some(q) => {
                self.u8(1);
                self.buf.extend_from_slice(&q.scale.to_le_bytes());
                self.buf.extend_from_slice(&q.zero_point.to_le_bytes());
            }
            None => self.u8(0),
        }
    }
}

fn encode_attrs(attrs: &Attrs) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    match attrs {
        Attrs::None => {}
        Attrs::Conv { strides, padding } => {
            w.u32(strides[0]);
            w.u32(strides[1]);
            w.u8(match padding {
                Padding::Same => 0,
                Padding::Valid => 1,
            });
        }
        Attrs::Pad { amounts } => {
            w.u8(amounts.len() as u8);
            for [before, after] in amounts {
                w.u32(*before);
                w.u32(*after);
            }
        }
        Attrs::Mean { axes } => {
            w.u8(axes.len() as u8);
            for &a in axes {
                w.u32(a);
            }
        }
        Attrs::Cast { to } => w.u8(to.code()),
    }
    w.buf
}

pub fn serialize(graph: &Graph) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(graph.precision().tag());
    w.u32(graph.node_count() as u32);

    for node in graph.nodes() {
        w.u32(node.id);
        w.u8(node.kind.code());
        w.u8(node.inputs.len() as u8);
        for &i in &node.inputs {
            w.u32(i);
        }
        let attrs = encode_attrs(&node.attrs);
        w.u32(attrs.len() as u32);
        w.buf.extend_from_slice(&attrs);
    }

    for node in graph.nodes() {
        w.spec(&node.spec);
    }

    w.str(graph.name());
    w.u32(graph.inputs().len() as u32);
    for input in graph.inputs() {
        w.u32(input.id);
        w.str(&input.name);
        w.spec(&input.spec);
    }
    w.u32(graph.outputs().len() as u32);
    for output in graph.outputs() {
        w.u32(output.id);
        w.str(&output.name);
    }

    let blobs: Vec<&Vec<u8>> = graph.nodes().filter_map(|n| n.payload.as_ref()).collect();
    w.u32(blobs.len() as u32);
    for blob in blobs {
        w.u64(blob.len() as u64);
        w.buf.extend_from_slice(blob);
    }

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IrError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(IrError::Truncated(self.section))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], IrError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, IrError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, IrError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, IrError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, IrError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String, IrError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IrError::Malformed(format!("{} string", self.section)))
    }
    fn spec(&mut self) -> Result<TensorSpec, IrError> {
        let dtype = DType::from_code(self.u8()?)?;
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let quant = match self.u8()? {
            0 => None,
            1 => {
                let scale = f64::from_le_bytes(self.array()?);
                let zero_point = i32::from_le_bytes(self.array()?);
                Some(QuantParams { scale, zero_point })
            }
            other => return Err(IrError::Malformed(format!("quant flag {other}"))),
        };
        Ok(TensorSpec { shape, dtype, quant })
    }
}

fn decode_attrs(kind: OpKind, bytes: &[u8]) -> Result<Attrs, IrError> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        section: "attribute",
    };
    let attrs = match kind {
        OpKind::Conv2D | OpKind::DepthwiseConv2dNative => {
            let strides = [r.u32()?, r.u32()?];
            let padding = match r.u8()? {
                0 => Padding::Same,
                1 => Padding::Valid,
                other => return Err(IrError::Malformed(format!("padding mode {other}"))),
            };
            Attrs::Conv { strides, padding }
        }
        OpKind::Pad => {
            let n = r.u8()?;
            let amounts = (0..n)
                .map(|_| Ok([r.u32()?, r.u32()?]))
                .collect::<Result<_, IrError>>()?;
            Attrs::Pad { amounts }
        }
        OpKind::Mean => {
            let n = r.u8()?;
            Attrs::Mean {
                axes: (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?,
            }
        }
        OpKind::Cast => Attrs::Cast {
            to: DType::from_code(r.u8()?)?,
        },
        _ => Attrs::None,
    };
    if r.pos != bytes.len() {
        return Err(IrError::Malformed(format!(
            "{} trailing attribute bytes on {kind}",
            bytes.len() - r.pos
        )));
    }
    Ok(attrs)
}

pub fn deserialize(bytes: &[u8]) -> Result<Graph, IrError> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        section: "header",
    };
    if r.take(4).map_err(|_| IrError::BadMagic)? != MAGIC {
        return Err(IrError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(IrError::VersionMismatch(version));
    }
    let precision = Precision::from_tag(r.u16()?)?;
    let count = r.u32()? as usize;

    r.section = "node table";
    let mut nodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u32()?;
        let kind = OpKind::from_code(r.u8()?)?;
        let arity = r.u8()? as usize;
        let inputs = (0..arity).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let attr_len = r.u32()? as usize;
        let attrs = decode_attrs(kind, r.take(attr_len)?)?;
        let placeholder = TensorSpec::new(Vec::new(), DType::F32);
        nodes.push(Node::op(id, kind, inputs, attrs, placeholder));
    }

    r.section = "tensor spec";
    for node in &mut nodes {
        node.spec = r.spec()?;
    }

    r.section = "graph";
    let name = r.str()?;
    let n_inputs = r.u32()?;
    let mut inputs = Vec::new();
    for _ in 0..n_inputs {
        inputs.push(GraphInput {
            id: r.u32()?,
            name: r.str()?,
            spec: r.spec()?,
        });
    }
    let n_outputs = r.u32()?;
    let mut outputs = Vec::new();
    for _ in 0..n_outputs {
        outputs.push(GraphOutput {
            id: r.u32()?,
            name: r.str()?,
        });
    }

    r.section = "weight";
    let blob_count = r.u32()? as usize;
    let const_count = nodes.iter().filter(|n| n.kind == OpKind::Const).count();
    if blob_count != const_count {
        return Err(IrError::Malformed(format!(
            "{blob_count} weight blobs for {const_count} Const nodes"
        )));
    }
    for node in nodes.iter_mut().filter(|n| n.kind == OpKind::Const) {
        let len = usize::try_from(r.u64()?).map_err(|_| IrError::Truncated("weight"))?;
        node.payload = Some(r.take(len)?.to_vec());
    }

    r.section = "checksum";
    let body_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(IrError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(IrError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    Ok(Graph::from_parts(Metadata { name, precision }, inputs, nodes, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_mobilenet_v2, MobileNetConfig};

    fn small() -> Graph {
        build_mobilenet_v2(&MobileNetConfig {
            resolution: 32,
            width: 0.35,
            num_outputs: 1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let g = small();
        let bytes = serialize(&g);
        assert_eq!(deserialize(&bytes).unwrap(), g);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = serialize(&small());
        bytes[0] = b'X';
        assert_eq!(deserialize(&bytes), Err(IrError::BadMagic));
        assert_eq!(deserialize(b"MC"), Err(IrError::BadMagic));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = serialize(&small());
        bytes[4] = 2;
        assert_eq!(deserialize(&bytes), Err(IrError::VersionMismatch(2)));
    }

    #[test]
    fn truncated() {
        let bytes = serialize(&small());
        assert_eq!(deserialize(&bytes[..20]), Err(IrError::Truncated("node table")));
        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 100]),
            Err(IrError::Truncated("weight"))
        ));
        assert_eq!(
            deserialize(&bytes[..bytes.len() - 2]),
            Err(IrError::Truncated("checksum"))
        );
    }

    #[test]
    fn unknown_op_code() {
        let mut bytes = serialize(&small());
        // first node record: id at 12..16, op code at 16
        bytes[16] = 42;
        assert_eq!(deserialize(&bytes), Err(IrError::UnknownOpCode(42)));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = serialize(&small());
        let n = bytes.len();
        bytes[n - 6] ^= 0xff; // inside the last weight blob
        assert!(matches!(deserialize(&bytes), Err(IrError::Checksum { .. })));
    }
}
