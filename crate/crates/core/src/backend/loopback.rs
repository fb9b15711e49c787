//! Serves any local [`Backend`] over the wire protocol. Used to exercise the
//! remote client end to end without an external host.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::thread::{self, JoinHandle};

use super::protocol::{self, layer_maps_from_tensors, Message, ERR_MALFORMED, ERR_UNKNOWN_LAYER};
use super::{Backend, Branch, LayerInfo, SessionSpec};
use crate::error::{Error, Result};

fn err(code: u16, message: impl Into<String>) -> Message {
    Message::Err {
        code,
        message: message.into(),
    }
}

/// Handles one session until CLOSE, end of stream, or a malformed frame.
pub fn serve_connection<R: Read, W: Write>(reader: R, writer: W, backend: &mut dyn Backend) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let mut layers: Vec<LayerInfo> = Vec::new();
    loop {
        let request = match protocol::read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) => {
                protocol::write_message(&mut writer, &err(ERR_MALFORMED, e.to_string()))?;
                return Ok(());
            }
        };
        let reply = match request {
            Message::Init {
                steps,
                guidance,
                seed,
                prompt,
                edit,
                null_prompt,
            } => {
                let spec = SessionSpec {
                    steps: usize::from(steps),
                    guidance,
                    seed,
                    prompt,
                    edit,
                    null_prompt,
                };
                match backend.init(&spec) {
                    Ok(cat) => {
                        layers = cat.clone();
                        Message::InitOk { layers: cat }
                    }
                    Err(e) => err(ERR_MALFORMED, e.to_string()),
                }
            }
            Message::Step { t, branch, injected } => {
                if let Some((id, _)) = injected.iter().find(|(id, _)| !layers.iter().any(|l| l.id == *id)) {
                    err(ERR_UNKNOWN_LAYER, format!("unknown layer {id}"))
                } else {
                    let result = Branch::from_code(branch)
                        .ok_or_else(|| Error::Protocol(format!("unknown branch {branch}")))
                        .and_then(|b| {
                            let maps = layer_maps_from_tensors(&injected)?;
                            backend.step(usize::from(t), b, &maps)
                        });
                    match result {
                        Ok(out) => out.to_message(),
                        Err(e) => err(ERR_MALFORMED, e.to_string()),
                    }
                }
            }
            Message::Decode { branch } => {
                let result = Branch::from_code(branch)
                    .ok_or_else(|| Error::Protocol(format!("unknown branch {branch}")))
                    .and_then(|b| backend.decode(b))
                    .and_then(|img| {
                        let mut png = Vec::new();
                        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
                        Ok(png)
                    });
                match result {
                    Ok(png) => Message::Image { png },
                    Err(e) => err(ERR_MALFORMED, e.to_string()),
                }
            }
            Message::Close => {
                backend.close()?;
                protocol::write_message(&mut writer, &Message::Closed)?;
                return Ok(());
            }
            other => err(
                ERR_MALFORMED,
                format!("unexpected request type {:#04x}", other.msg_type()),
            ),
        };
        protocol::write_message(&mut writer, &reply)?;
    }
}

/// Binds `addr` and serves every incoming connection on its own thread with
/// a fresh backend from `make`. Returns the bound address.
pub fn spawn_host<F, B>(addr: &str, make: F) -> Result<(SocketAddr, JoinHandle<()>)>
where
    F: Fn() -> B + Send + 'static,
    B: Backend + 'static,
{
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let handle = thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut backend = make();
            thread::spawn(move || {
                let Ok(read_half) = stream.try_clone() else { return };
                if let Err(e) = serve_connection(read_half, stream, &mut backend) {
                    log::debug!("loopback session ended: {e}");
                }
            });
        }
    });
    Ok((local, handle))
}
