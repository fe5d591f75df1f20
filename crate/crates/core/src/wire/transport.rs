//! Reliable ordered message transports.

use std::collections::VecDeque;
use std::io::{Read, Write};

use thiserror::Error;

use super::frame::FrameDecoder;
use super::message::Message;
use super::provider::Provider;
use crate::error::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec error: {0}")]
    Codec(#[from] Error),
}

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Message, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        (**self).send(msg)
    }
    fn recv(&mut self) -> Result<Message, TransportError> {
        (**self).recv()
    }
}

/// In-process transport that hands each message straight to a provider.
/// Messages still pass through the frame codec.
pub struct Loopback<'a> {
    provider: &'a mut Provider,
    inbox: VecDeque<Vec<u8>>,
}

impl<'a> Loopback<'a> {
    pub fn new(provider: &'a mut Provider) -> Self {
        Loopback { provider, inbox: VecDeque::new() }
    }
}

impl Transport for Loopback<'_> {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let decoded = Message::decode(&msg.encode()?)?;
        for reply in self.provider.handle(decoded) {
            self.inbox.push_back(reply.encode()?);
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        let frame = self.inbox.pop_front().ok_or(TransportError::Closed)?;
        Ok(Message::decode(&frame)?)
    }
}

/// Framed messages over any blocking byte stream, e.g. a `TcpStream`.
pub struct StreamTransport<S> {
    stream: S,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport { stream, decoder: FrameDecoder::new(), buf: vec![0; 64 * 1024] }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.stream.write_all(&msg.encode()?)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, TransportError> {
        loop {
            if let Some(m) = self.decoder.next_message()? {
                return Ok(m);
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return Err(TransportError::Closed);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}

/// Serves one blocking connection until the peer closes it.
pub fn serve_stream<S: Read + Write>(provider: &mut Provider, stream: S) -> Result<(), TransportError> {
    let mut t = StreamTransport::new(stream);
    loop {
        let msg = match t.recv() {
            Ok(m) => m,
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        for reply in provider.handle(msg) {
            t.send(&reply)?;
        }
    }
}
