//! Shared test fixtures: a tiny deterministic backend and wire transcripts.
#![allow(dead_code)]

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use adapedit::align::{tokenize, Vocabulary, WordVocab};
use adapedit::backend::loopback::serve_connection;
use adapedit::backend::protocol::HEADER_LEN;
use adapedit::backend::{Backend, Branch, LayerFeatures, LayerInfo, LayerMaps, SessionSpec, StepOutput};
use adapedit::tensor::{softmax_rows, Matrix};
use adapedit::{Error, Result};
use image::RgbImage;

pub const MINI_SIDE: usize = 4;
pub const MINI_LAYER: LayerInfo = LayerInfo {
    id: 3,
    height: MINI_SIDE as u16,
    width: MINI_SIDE as u16,
    heads: 2,
};

/// 4×4 latent, one two-head layer, word-level tokens. Small enough that a
/// whole session fits in a few kilobytes on the wire.
#[derive(Default)]
pub struct MiniBackend {
    spec: Option<SessionSpec>,
    latents: [Vec<f32>; 2],
    ids: [Vec<u32>; 2],
}

impl MiniBackend {
    fn context(prompt: &str) -> Result<Vec<u32>> {
        let p = tokenize(prompt, &WordVocab)?;
        Ok(p.padded_ids(WordVocab.context_len(), WordVocab.pad()))
    }
}

impl Backend for MiniBackend {
    fn vocabulary(&self) -> &dyn Vocabulary {
        &WordVocab
    }

    fn init(&mut self, spec: &SessionSpec) -> Result<Vec<LayerInfo>> {
        let n = MINI_SIDE * MINI_SIDE * 4;
        let z0: Vec<f32> = (0..n)
            .map(|i| (spec.seed as f32 * 0.618 + i as f32 * 1.37).sin())
            .collect();
        self.latents = [z0.clone(), z0];
        self.ids = [Self::context(&spec.prompt)?, Self::context(&spec.edit)?];
        self.spec = Some(spec.clone());
        Ok(vec![MINI_LAYER])
    }

    fn step(&mut self, t: usize, branch: Branch, injected: &[LayerMaps]) -> Result<StepOutput> {
        if self.spec.is_none() {
            return Err(Error::State("not initialized".into()));
        }
        let b = usize::from(branch.code());
        let pixels = MINI_SIDE * MINI_SIDE;
        let z = &self.latents[b];
        let ids = &self.ids[b];
        let mut maps = Vec::new();
        for h in 0..usize::from(MINI_LAYER.heads) {
            let logits: Vec<f32> = (0..pixels * ids.len())
                .map(|i| {
                    let (p, q) = (i / ids.len(), i % ids.len());
                    let tok = (ids[q] % 97) as f32;
                    3.0 * (0.3 * tok + z[p * 4 + h] + 0.7 * h as f32 + 0.05 * t as f32).sin()
                })
                .collect();
            maps.push(softmax_rows(&Matrix::from_vec(pixels, ids.len(), logits)?)?);
        }
        if let Some(inj) = injected.iter().find(|m| m.layer == MINI_LAYER.id) {
            if inj.heads.len() != maps.len() || inj.heads.iter().any(|m| m.shape() != maps[0].shape()) {
                return Err(Error::Contract("injected map shape mismatch".into()));
            }
            maps = inj.heads.clone();
        }
        let mut eps = vec![0f32; pixels * 4];
        for m in &maps {
            for p in 0..pixels {
                for (q, &a) in m.row(p).iter().enumerate() {
                    let v = ((ids[q] % 13) as f32 * 0.1).cos();
                    for c in 0..4 {
                        eps[p * 4 + c] += a * v * (c as f32 + 1.0) * 0.25;
                    }
                }
            }
        }
        let z: Vec<f32> = z.iter().zip(&eps).map(|(x, e)| 0.9 * x + 0.1 * e).collect();
        self.latents[b] = z.clone();
        let features: Vec<f32> = z.iter().flat_map(|&v| [v, v * v]).collect();
        Ok(StepOutput {
            noise_pred: Matrix::from_vec(pixels, 4, eps)?,
            maps: vec![LayerMaps {
                layer: MINI_LAYER.id,
                heads: maps,
            }],
            features: vec![LayerFeatures {
                layer: MINI_LAYER.id,
                features: Matrix::from_vec(pixels, 8, features)?,
            }],
        })
    }

    fn decode(&mut self, branch: Branch) -> Result<RgbImage> {
        let z = &self.latents[usize::from(branch.code())];
        Ok(RgbImage::from_fn(MINI_SIDE as u32, MINI_SIDE as u32, |x, y| {
            let p = (y as usize * MINI_SIDE + x as usize) * 4;
            let q = |v: f32| (127.5 + 100.0 * v).clamp(0.0, 255.0).round() as u8;
            image::Rgb([q(z[p]), q(z[p + 1]), q(z[p + 2])])
        }))
    }

    fn close(&mut self) -> Result<()> {
        self.spec = None;
        Ok(())
    }
}

/// Request and reply byte streams of one connection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub client: Vec<u8>,
    pub host: Vec<u8>,
}

pub fn transcript_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mini_session.bin")
}

pub fn save_transcript(path: &Path, sessions: &[Session]) -> io::Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(sessions.len() as u32).to_le_bytes());
    for s in sessions {
        for part in [&s.client, &s.host] {
            out.extend_from_slice(&(part.len() as u32).to_le_bytes());
            out.extend_from_slice(part);
        }
    }
    std::fs::write(path, out)
}

pub fn load_transcript(path: &Path) -> io::Result<Vec<Session>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;
    let mut take = |n: usize| -> io::Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated transcript"))?;
        pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut sessions = Vec::new();
    for _ in 0..count {
        let mut part = || -> io::Result<Vec<u8>> {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            Ok(take(n)?.to_vec())
        };
        let client = part()?;
        let host = part()?;
        sessions.push(Session { client, host });
    }
    Ok(sessions)
}

/// Splits a byte stream into whole frames using the header length field.
pub fn split_frames(mut bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    while bytes.len() >= HEADER_LEN {
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let end = (HEADER_LEN + len).min(bytes.len());
        out.push(bytes[..end].to_vec());
        bytes = &bytes[end..];
    }
    out
}

struct Tee<T> {
    inner: T,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<T: Read> Read for Tee<T> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl<T: Write> Write for Tee<T> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Serves `MiniBackend` sessions and logs every byte in both directions.
/// The handle yields the sessions in connection order once `sessions`
/// connections have closed.
pub fn recording_host(sessions: usize) -> (SocketAddr, JoinHandle<Vec<Session>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let mut out = Vec::new();
        for _ in 0..sessions {
            let (stream, _) = listener.accept().unwrap();
            let (rx, tx) = (Arc::new(Mutex::new(Vec::new())), Arc::new(Mutex::new(Vec::new())));
            let reader = Tee {
                inner: stream.try_clone().unwrap(),
                log: rx.clone(),
            };
            let writer = Tee {
                inner: stream,
                log: tx.clone(),
            };
            serve_connection(reader, writer, &mut MiniBackend::default()).unwrap();
            let client = rx.lock().unwrap().clone();
            let host = tx.lock().unwrap().clone();
            out.push(Session { client, host });
        }
        out
    });
    (addr, handle)
}

#[derive(Debug, Default)]
pub struct ReplayReport {
    pub frames_checked: usize,
    pub mismatch: Option<String>,
}

fn read_frame(s: &mut TcpStream) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    match s.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + len, 0);
    s.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

/// Plays back recorded host replies. Each incoming request must equal the
/// recorded one byte for byte; the first divergence stops the replay.
pub fn replay_host(sessions: Vec<Session>) -> (SocketAddr, JoinHandle<ReplayReport>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let mut report = ReplayReport::default();
        for (i, s) in sessions.iter().enumerate() {
            let (mut stream, _) = listener.accept().unwrap();
            let requests = split_frames(&s.client);
            let replies = split_frames(&s.host);
            for (j, (want, reply)) in requests.iter().zip(&replies).enumerate() {
                match read_frame(&mut stream) {
                    Ok(Some(got)) if &got == want => {
                        report.frames_checked += 1;
                        stream.write_all(reply).unwrap();
                    }
                    other => {
                        report.mismatch = Some(format!(
                            "session {i} frame {j}: expected {} bytes of type {:#04x}, got {:?}",
                            want.len(),
                            want[5],
                            other.map(|f| f.map(|f| (f.len(), f.get(5).copied())))
                        ));
                        return report;
                    }
                }
            }
        }
        report
    });
    (addr, handle)
}
