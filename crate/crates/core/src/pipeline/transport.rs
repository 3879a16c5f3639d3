use std::io::{BufReader, BufWriter, Write};
use std::mem;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use crossbeam::channel::{unbounded, Receiver, Sender};

use crate::codec::{read_frame, write_frame, CompressedFrame};
use crate::error::{Error, Result};

/// One side of an ordered, reliable, bidirectional frame link between two
/// adjacent stages.
pub trait Endpoint: Send {
    fn send(&mut self, frame: &CompressedFrame) -> Result<()>;
    fn recv(&mut self) -> Result<CompressedFrame>;
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn send(&mut self, frame: &CompressedFrame) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<CompressedFrame> {
        (**self).recv()
    }
}

/// In-process link. Frames travel serialized so both transports exercise the
/// same byte layout.
pub struct ChannelEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelEndpoint, ChannelEndpoint) {
    let (a_tx, b_rx) = unbounded();
    let (b_tx, a_rx) = unbounded();
    (
        ChannelEndpoint { tx: a_tx, rx: a_rx },
        ChannelEndpoint { tx: b_tx, rx: b_rx },
    )
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, frame: &CompressedFrame) -> Result<()> {
        self.tx
            .send(frame.serialize())
            .map_err(|_| Error::Disconnected("peer stage hung up".into()))
    }

    fn recv(&mut self) -> Result<CompressedFrame> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| Error::Disconnected("peer stage hung up".into()))?;
        CompressedFrame::deserialize(&bytes)
    }
}

/// TCP link: each frame is a `u64` little-endian length followed by the
/// frame bytes.
pub struct TcpEndpoint {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpEndpoint {
    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Self::from_stream(TcpStream::connect(addr)?)
    }

    pub fn accept(listener: &TcpListener) -> Result<Self> {
        Self::from_stream(listener.accept()?.0)
    }
}

/// Binds `addr`, connects to it and returns `(upstream side, downstream side)`.
pub fn tcp_pair(addr: &str) -> Result<(TcpEndpoint, TcpEndpoint)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let client = TcpEndpoint::connect(local)?;
    let server = TcpEndpoint::accept(&listener)?;
    Ok((client, server))
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, frame: &CompressedFrame) -> Result<()> {
        write_frame(&mut self.writer, frame)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<CompressedFrame> {
        read_frame(&mut self.reader)?
            .ok_or_else(|| Error::Disconnected("peer closed the connection".into()))
    }
}

/// Shared buffer that records every frame passing through a [`Tee`].
#[derive(Clone, Debug, Default)]
pub struct FrameLog(Arc<Mutex<Vec<u8>>>);

impl FrameLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns everything logged so far and empties the buffer.
    pub fn drain(&self) -> Vec<u8> {
        self.0
            .lock()
            .map(|mut b| mem::take(&mut *b))
            .unwrap_or_default()
    }
}

/// Endpoint wrapper that appends each sent frame, length-prefixed, to a log.
pub struct Tee<E> {
    inner: E,
    log: FrameLog,
}

impl<E: Endpoint> Tee<E> {
    pub fn new(inner: E, log: FrameLog) -> Self {
        Self { inner, log }
    }
}

impl<E: Endpoint> Endpoint for Tee<E> {
    fn send(&mut self, frame: &CompressedFrame) -> Result<()> {
        {
            let mut log = self
                .log
                .0
                .lock()
                .map_err(|_| Error::Protocol("frame log poisoned".into()))?;
            write_frame(&mut *log, frame)?;
        }
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<CompressedFrame> {
        self.inner.recv()
    }
}

/// A stage's connections: `up` towards stage `s - 1`, `down` towards `s + 1`.
#[derive(Default)]
pub struct Links {
    pub up: Option<Box<dyn Endpoint>>,
    pub down: Option<Box<dyn Endpoint>>,
}
