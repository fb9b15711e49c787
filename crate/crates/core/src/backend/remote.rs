//! Client side of the wire protocol: a [`Backend`] whose denoiser runs on
//! an external host.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use image::RgbImage;

use super::protocol::{self, layer_maps_to_tensors, Message, PNG_MAGIC};
use super::{Backend, Branch, LayerInfo, LayerMaps, SessionSpec, StepOutput};
use crate::align::{Vocabulary, WordVocab};
use crate::error::{Error, Result};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn open(addr: &str) -> Result<Self> {
        let unreachable = |source| Error::Unreachable {
            addr: addr.to_string(),
            source,
        };
        let sock = addr
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| unreachable(std::io::Error::other("no address resolved")))?;
        let stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(unreachable)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn call(&mut self, request: &Message) -> Result<Message> {
        protocol::write_message(&mut self.writer, request)?;
        match protocol::read_message(&mut self.reader)? {
            Some(Message::Err { code, message }) => Err(Error::Remote { code, message }),
            Some(reply) => Ok(reply),
            None => Err(Error::Protocol("host closed the connection".into())),
        }
    }
}

/// Backend speaking the binary protocol over TCP. Each `init` opens a fresh
/// connection (one session per connection).
pub struct RemoteBackend {
    addr: String,
    vocab: WordVocab,
    conn: Option<Connection>,
    layers: Vec<LayerInfo>,
}

impl RemoteBackend {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            vocab: WordVocab,
            conn: None,
            layers: Vec::new(),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn conn(&mut self) -> Result<&mut Connection> {
        self.conn
            .as_mut()
            .ok_or_else(|| Error::State("remote session not initialized".into()))
    }

    fn unexpected(what: &str, m: &Message) -> Error {
        Error::Protocol(format!("expected {what}, got message type {:#04x}", m.msg_type()))
    }
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the wire format")))
}

impl Backend for RemoteBackend {
    fn vocabulary(&self) -> &dyn Vocabulary {
        &self.vocab
    }

    fn init(&mut self, spec: &SessionSpec) -> Result<Vec<LayerInfo>> {
        if self.conn.is_some() {
            self.close()?;
        }
        let mut conn = Connection::open(&self.addr)?;
        let reply = conn.call(&Message::Init {
            steps: to_u16(spec.steps, "step count")?,
            guidance: spec.guidance,
            seed: spec.seed,
            prompt: spec.prompt.clone(),
            edit: spec.edit.clone(),
            null_prompt: spec.null_prompt.clone(),
        })?;
        let Message::InitOk { layers } = reply else {
            return Err(Self::unexpected("INIT_OK", &reply));
        };
        if layers.is_empty() {
            return Err(Error::Protocol("host reported an empty layer catalog".into()));
        }
        self.conn = Some(conn);
        self.layers = layers.clone();
        Ok(layers)
    }

    fn step(&mut self, t: usize, branch: Branch, injected: &[LayerMaps]) -> Result<StepOutput> {
        let request = Message::Step {
            t: to_u16(t, "step")?,
            branch: branch.code(),
            injected: layer_maps_to_tensors(injected),
        };
        let reply = self.conn()?.call(&request)?;
        match &reply {
            Message::StepOut {
                noise_pred,
                maps,
                features,
            } => StepOutput::from_parts(noise_pred, maps, features),
            other => Err(Self::unexpected("STEP_OUT", other)),
        }
    }

    fn decode(&mut self, branch: Branch) -> Result<RgbImage> {
        let reply = self.conn()?.call(&Message::Decode { branch: branch.code() })?;
        let Message::Image { png } = reply else {
            return Err(Self::unexpected("IMAGE", &reply));
        };
        if !png.starts_with(&PNG_MAGIC) {
            return Err(Error::Protocol("IMAGE payload is not a PNG".into()));
        }
        Ok(image::load_from_memory_with_format(&png, image::ImageFormat::Png)?.to_rgb8())
    }

    fn close(&mut self) -> Result<()> {
        if let Some(mut conn) = self.conn.take() {
            let reply = conn.call(&Message::Close)?;
            if reply != Message::Closed {
                return Err(Self::unexpected("CLOSED", &reply));
            }
        }
        Ok(())
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
