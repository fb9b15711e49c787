//! Binary wire protocol between the controller and an external diffusion
//! host.
//!
//! Every frame is `"ADPE" | version u8 | msg_type u8 | payload_len u32 |
//! payload`, integers little-endian. Tensors are `rank u8 | dims u32×rank |
//! f32 data`, row-major. Strings are `len u32 | UTF-8 bytes`. Lists of
//! layer tensors are `count u16 | (layer_id u16, tensor)×count`.
//!
//! | type | message   | payload                                                  |
//! |------|-----------|----------------------------------------------------------|
//! | 0x01 | INIT      | T u16, w f32, seed u64, prompt, edit, null prompt        |
//! | 0x81 | INIT_OK   | count u16, (id u16, height u16, width u16, heads u16)×n  |
//! | 0x02 | STEP      | t u16, branch u8, injected layer tensors                 |
//! | 0x82 | STEP_OUT  | noise tensor, map layer tensors, feature layer tensors   |
//! | 0x03 | DECODE    | branch u8                                                |
//! | 0x83 | IMAGE     | PNG bytes (rest of payload)                              |
//! | 0x0F | CLOSE     | empty                                                    |
//! | 0x8F | CLOSED    | empty                                                    |
//! | 0x7F | ERR       | code u16, UTF-8 message (rest of payload)                |

use std::io::{Read, Write};

use super::{LayerFeatures, LayerId, LayerInfo, LayerMaps, StepOutput};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"ADPE";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Upper bound on accepted payloads; larger lengths are treated as corrupt.
pub const MAX_PAYLOAD: u32 = 1 << 30;
pub const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

pub const ERR_MALFORMED: u16 = 0x0001;
pub const ERR_UNKNOWN_LAYER: u16 = 0x0002;
pub const ERR_CAPACITY: u16 = 0x0003;

pub mod msg {
    pub const INIT: u8 = 0x01;
    pub const INIT_OK: u8 = 0x81;
    pub const STEP: u8 = 0x02;
    pub const STEP_OUT: u8 = 0x82;
    pub const DECODE: u8 = 0x03;
    pub const IMAGE: u8 = 0x83;
    pub const CLOSE: u8 = 0x0F;
    pub const CLOSED: u8 = 0x8F;
    pub const ERR: u8 = 0x7F;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let n: u64 = dims.iter().map(|&d| u64::from(d)).product();
        if dims.len() > usize::from(u8::MAX) || n != data.len() as u64 {
            return Err(Error::Protocol(format!(
                "tensor dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.as_slice().to_vec(),
        }
    }

    /// Stacks equally shaped matrices into a rank-3 tensor.
    pub fn stack(ms: &[Matrix]) -> Self {
        let (r, c) = ms.first().map_or((0, 0), Matrix::shape);
        let mut data = Vec::with_capacity(ms.len() * r * c);
        for m in ms {
            data.extend_from_slice(m.as_slice());
        }
        Self {
            dims: vec![ms.len() as u32, r as u32, c as u32],
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r as usize, c as usize, self.data.clone()),
            _ => Err(Error::Protocol(format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    /// Splits a rank-3 tensor along its first axis.
    pub fn unstack(&self) -> Result<Vec<Matrix>> {
        match self.dims[..] {
            [n, r, c] => {
                let len = r as usize * c as usize;
                (0..n as usize)
                    .map(|i| Matrix::from_vec(r as usize, c as usize, self.data[i * len..(i + 1) * len].to_vec()))
                    .collect()
            }
            [r, c] => Ok(vec![Matrix::from_vec(r as usize, c as usize, self.data.clone())?]),
            _ => Err(Error::Protocol(format!("expected rank 3, got {:?}", self.dims))),
        }
    }

    fn byte_len(&self) -> usize {
        1 + 4 * self.dims.len() + 4 * self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Init {
        steps: u16,
        guidance: f32,
        seed: u64,
        prompt: String,
        edit: String,
        null_prompt: String,
    },
    InitOk {
        layers: Vec<LayerInfo>,
    },
    Step {
        t: u16,
        branch: u8,
        injected: Vec<(LayerId, Tensor)>,
    },
    StepOut {
        noise_pred: Tensor,
        maps: Vec<(LayerId, Tensor)>,
        features: Vec<(LayerId, Tensor)>,
    },
    Decode {
        branch: u8,
    },
    Image {
        png: Vec<u8>,
    },
    Close,
    Closed,
    Err {
        code: u16,
        message: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Init { .. } => msg::INIT,
            Message::InitOk { .. } => msg::INIT_OK,
            Message::Step { .. } => msg::STEP,
            Message::StepOut { .. } => msg::STEP_OUT,
            Message::Decode { .. } => msg::DECODE,
            Message::Image { .. } => msg::IMAGE,
            Message::Close => msg::CLOSE,
            Message::Closed => msg::CLOSED,
            Message::Err { .. } => msg::ERR,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            Message::Init {
                steps,
                guidance,
                seed,
                prompt,
                edit,
                null_prompt,
            } => {
                w.u16(*steps);
                w.f32(*guidance);
                w.u64(*seed);
                w.string(prompt);
                w.string(edit);
                w.string(null_prompt);
            }
            Message::InitOk { layers } => {
                w.u16(layers.len() as u16);
                for l in layers {
                    w.u16(l.id);
                    w.u16(l.height);
                    w.u16(l.width);
                    w.u16(l.heads);
                }
            }
            Message::Step { t, branch, injected } => {
                w.u16(*t);
                w.u8(*branch);
                w.layer_tensors(injected);
            }
            Message::StepOut {
                noise_pred,
                maps,
                features,
            } => {
                w.tensor(noise_pred);
                w.layer_tensors(maps);
                w.layer_tensors(features);
            }
            Message::Decode { branch } => w.u8(*branch),
            Message::Image { png } => w.buf.extend_from_slice(png),
            Message::Close | Message::Closed => {}
            Message::Err { code, message } => {
                w.u16(*code);
                w.buf.extend_from_slice(message.as_bytes());
            }
        }
        w.buf
    }

    /// Full frame bytes.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let m = match msg_type {
            msg::INIT => Message::Init {
                steps: r.u16()?,
                guidance: r.f32()?,
                seed: r.u64()?,
                prompt: r.string()?,
                edit: r.string()?,
                null_prompt: r.string()?,
            },
            msg::INIT_OK => {
                let n = r.u16()?;
                let layers = (0..n)
                    .map(|_| {
                        Ok(LayerInfo {
                            id: r.u16()?,
                            height: r.u16()?,
                            width: r.u16()?,
                            heads: r.u16()?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Message::InitOk { layers }
            }
            msg::STEP => Message::Step {
                t: r.u16()?,
                branch: r.u8()?,
                injected: r.layer_tensors()?,
            },
            msg::STEP_OUT => Message::StepOut {
                noise_pred: r.tensor()?,
                maps: r.layer_tensors()?,
                features: r.layer_tensors()?,
            },
            msg::DECODE => Message::Decode { branch: r.u8()? },
            msg::IMAGE => Message::Image { png: r.rest().to_vec() },
            msg::CLOSE => Message::Close,
            msg::CLOSED => Message::Closed,
            msg::ERR => Message::Err {
                code: r.u16()?,
                message: String::from_utf8(r.rest().to_vec())
                    .map_err(|_| Error::Protocol("error message is not UTF-8".into()))?,
            },
            other => return Err(Error::Protocol(format!("unknown message type {other:#04x}"))),
        };
        if !r.is_done() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message {msg_type:#04x}",
                r.remaining()
            )));
        }
        Ok(m)
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        let (msg_type, len) = parse_header(
            frame
                .get(..HEADER_LEN)
                .ok_or_else(|| Error::Protocol(format!("frame shorter than {HEADER_LEN}-byte header")))?,
        )?;
        let payload = &frame[HEADER_LEN..];
        if payload.len() != len as usize {
            return Err(Error::Protocol(format!(
                "payload length {} does not match header {len}",
                payload.len()
            )));
        }
        Self::decode_payload(msg_type, payload)
    }
}

fn parse_header(h: &[u8]) -> Result<(u8, u32)> {
    if h[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported version {}", h[4])));
    }
    let len = u32::from_le_bytes([h[6], h[7], h[8], h[9]]);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} too large")));
    }
    Ok((h[5], len))
}

pub fn write_message(w: &mut impl Write, m: &Message) -> Result<()> {
    w.write_all(&m.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end-of-stream before any header byte yields
/// `Ok(None)`.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(Error::Protocol("stream ended inside frame header".into())),
            n => filled += n,
        }
    }
    let (msg_type, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Protocol(format!("truncated payload: {e}")))?;
    Message::decode_payload(msg_type, &payload).map(Some)
}

impl StepOutput {
    pub fn to_message(&self) -> Message {
        Message::StepOut {
            noise_pred: Tensor::from_matrix(&self.noise_pred),
            maps: self.maps.iter().map(|m| (m.layer, Tensor::stack(&m.heads))).collect(),
            features: self
                .features
                .iter()
                .map(|f| (f.layer, Tensor::from_matrix(&f.features)))
                .collect(),
        }
    }

    pub fn from_parts(noise_pred: &Tensor, maps: &[(LayerId, Tensor)], features: &[(LayerId, Tensor)]) -> Result<Self> {
        Ok(StepOutput {
            noise_pred: noise_pred.to_matrix().or_else(|_| flatten_latent(noise_pred))?,
            maps: layer_maps_from_tensors(maps)?,
            features: features
                .iter()
                .map(|(layer, t)| {
                    Ok(LayerFeatures {
                        layer: *layer,
                        features: t.to_matrix()?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

pub fn layer_maps_from_tensors(ts: &[(LayerId, Tensor)]) -> Result<Vec<LayerMaps>> {
    ts.iter()
        .map(|(layer, t)| {
            Ok(LayerMaps {
                layer: *layer,
                heads: t.unstack()?,
            })
        })
        .collect()
}

pub fn layer_maps_to_tensors(maps: &[LayerMaps]) -> Vec<(LayerId, Tensor)> {
    maps.iter().map(|m| (m.layer, Tensor::stack(&m.heads))).collect()
}

/// Latents of other ranks (e.g. `channels × h × w`) flattened to one row.
fn flatten_latent(t: &Tensor) -> Result<Matrix> {
    Matrix::from_vec(1, t.data.len(), t.data.clone())
}

#[derive(Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub(crate) fn tensor(&mut self, t: &Tensor) {
        self.buf.reserve(t.byte_len());
        self.u8(t.dims.len() as u8);
        for &d in &t.dims {
            self.u32(d);
        }
        for &v in &t.data {
            self.f32(v);
        }
    }
    pub(crate) fn layer_tensors(&mut self, ts: &[(LayerId, Tensor)]) {
        self.u16(ts.len() as u16);
        for (id, t) in ts {
            self.u16(*id);
            self.tensor(t);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "need {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.remaining()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Protocol("string is not UTF-8".into()))
    }
    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| Error::Protocol(format!("tensor dims {dims:?} exceed payload")))?;
        let bytes = self.take(4 * n)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }
    pub(crate) fn layer_tensors(&mut self) -> Result<Vec<(LayerId, Tensor)>> {
        let n = self.u16()?;
        (0..n).map(|_| Ok((self.u16()?, self.tensor()?))).collect()
    }
    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub(crate) fn is_done(&self) -> bool {
        self.remaining() == 0
    }
}
