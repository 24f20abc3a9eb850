//! Server-side message links to the client actors: in-process, threaded
//! and TCP, all carrying the same encoded frames.

use std::collections::VecDeque;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{self, Control, ControlKind, WireMessage, HEADER_LEN};
use crate::error::{Error, Result};

/// A client actor: consumes one message, emits its replies.
pub trait Endpoint {
    fn handle(&mut self, msg: WireMessage) -> Vec<WireMessage>;
}

fn is_shutdown(msg: &WireMessage) -> bool {
    matches!(msg, WireMessage::Control(c) if c.kind == ControlKind::Shutdown)
}

/// Delivery of encoded frames between the server and `n` clients.
pub trait Link {
    fn n_clients(&self) -> usize;
    fn send_frame(&mut self, to: u32, frame: Vec<u8>) -> Result<()>;
    /// Next frame from any client.
    fn recv_frame(&mut self) -> Result<(u32, Vec<u8>)>;
}

/// Payload accounting for one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionBytes {
    pub frames: u64,
    /// Tensor value bytes.
    pub value: u64,
    /// Headers, ids, labels, names and dims.
    pub overhead: u64,
    /// Value bytes carried by model checkpoints.
    pub model_value: u64,
}

impl DirectionBytes {
    fn add(&mut self, msg: &WireMessage, frame_len: usize) -> Result<()> {
        let v = msg.value_bytes()? as u64;
        self.frames += 1;
        self.value += v;
        self.overhead += frame_len as u64 - v;
        if matches!(msg, WireMessage::ModelUp(_) | WireMessage::ModelDown(_)) {
            self.model_value += v;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.value + self.overhead
    }

    pub fn merge(&mut self, o: &DirectionBytes) {
        self.frames += o.frames;
        self.value += o.value;
        self.overhead += o.overhead;
        self.model_value += o.model_value;
    }
}

/// Bytes exchanged with one client. "Up" is client to server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub up: DirectionBytes,
    pub down: DirectionBytes,
}

impl Traffic {
    pub fn value(&self) -> u64 {
        self.up.value + self.down.value
    }
}

/// Per-client byte counters, updated on every frame the server sends or
/// receives.
#[derive(Debug, Clone, Default)]
pub struct ByteCounter {
    per_client: Vec<Traffic>,
}

impl ByteCounter {
    pub fn new(n_clients: usize) -> Self {
        Self {
            per_client: vec![Traffic::default(); n_clients],
        }
    }

    pub fn per_client(&self) -> &[Traffic] {
        &self.per_client
    }

    pub fn total(&self) -> Traffic {
        let mut t = Traffic::default();
        for c in &self.per_client {
            t.up.merge(&c.up);
            t.down.merge(&c.down);
        }
        t
    }

    /// Returns the counts so far and starts again from zero.
    pub fn take(&mut self) -> Vec<Traffic> {
        let n = self.per_client.len();
        std::mem::replace(&mut self.per_client, vec![Traffic::default(); n])
    }
}

/// Encodes, counts and forwards messages over a [`Link`].
pub struct CountingLink<L: Link> {
    inner: L,
    counter: ByteCounter,
}

impl<L: Link> CountingLink<L> {
    pub fn new(inner: L) -> Self {
        let n = inner.n_clients();
        Self {
            inner,
            counter: ByteCounter::new(n),
        }
    }

    pub fn n_clients(&self) -> usize {
        self.inner.n_clients()
    }

    pub fn counter(&self) -> &ByteCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut ByteCounter {
        &mut self.counter
    }

    pub fn send(&mut self, to: u32, msg: &WireMessage) -> Result<()> {
        let slot = self
            .counter
            .per_client
            .get_mut(to as usize)
            .ok_or_else(|| Error::Transport(format!("no client {to}")))?;
        let frame = wire::encode(msg)?;
        slot.down.add(msg, frame.len())?;
        self.inner.send_frame(to, frame)
    }

    pub fn recv(&mut self) -> Result<(u32, WireMessage)> {
        let (from, frame) = self.inner.recv_frame()?;
        let msg = wire::decode(&frame)?;
        let slot = self
            .counter
            .per_client
            .get_mut(from as usize)
            .ok_or_else(|| Error::Transport(format!("frame from unknown client {from}")))?;
        slot.up.add(&msg, frame.len())?;
        Ok((from, msg))
    }

    pub fn into_inner(self) -> L {
        self.inner
    }
}

/// Single-threaded link: a send runs the client's handler immediately and
/// queues its replies.
pub struct LocalLink<E: Endpoint> {
    clients: Vec<E>,
    inbox: VecDeque<(u32, Vec<u8>)>,
}

impl<E: Endpoint> LocalLink<E> {
    pub fn new(clients: Vec<E>) -> Self {
        Self {
            clients,
            inbox: VecDeque::new(),
        }
    }

    pub fn clients(&self) -> &[E] {
        &self.clients
    }
}

impl<E: Endpoint> Link for LocalLink<E> {
    fn n_clients(&self) -> usize {
        self.clients.len()
    }

    fn send_frame(&mut self, to: u32, frame: Vec<u8>) -> Result<()> {
        let client = self
            .clients
            .get_mut(to as usize)
            .ok_or_else(|| Error::Transport(format!("no client {to}")))?;
        for reply in client.handle(wire::decode(&frame)?) {
            self.inbox.push_back((to, wire::encode(&reply)?));
        }
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<(u32, Vec<u8>)> {
        self.inbox
            .pop_front()
            .ok_or_else(|| Error::Transport("no client message pending".into()))
    }
}

fn endpoint_loop<E: Endpoint>(
    id: u32,
    mut endpoint: E,
    rx: Receiver<Vec<u8>>,
    tx: Sender<(u32, Vec<u8>)>,
) {
    while let Ok(frame) = rx.recv() {
        let replies = match wire::decode(&frame) {
            Ok(msg) => {
                let stop = is_shutdown(&msg);
                let r = endpoint.handle(msg);
                if stop {
                    return;
                }
                r
            }
            Err(e) => vec![failed(id, &e)],
        };
        for r in replies {
            let Ok(f) = wire::encode(&r) else { return };
            if tx.send((id, f)).is_err() {
                return;
            }
        }
    }
}

pub(crate) fn failed(id: u32, e: &Error) -> WireMessage {
    let mut c = Control::new(ControlKind::Failed, id, 0);
    c.detail = e.to_string().chars().take(1000).collect();
    WireMessage::Control(c)
}

fn recv_with_timeout<T>(rx: &Receiver<T>, timeout: Option<Duration>) -> Result<T> {
    match timeout {
        None => rx
            .recv()
            .map_err(|_| Error::Transport("all clients disconnected".into())),
        Some(t) => rx.recv_timeout(t).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout(t.as_millis() as u64),
            RecvTimeoutError::Disconnected => Error::Transport("all clients disconnected".into()),
        }),
    }
}

/// One thread per client, connected by channels.
pub struct ThreadedLink {
    to_clients: Vec<Sender<Vec<u8>>>,
    from_clients: Receiver<(u32, Vec<u8>)>,
    handles: Vec<JoinHandle<()>>,
    timeout: Option<Duration>,
}

impl ThreadedLink {
    pub fn spawn<E: Endpoint + Send + 'static>(
        endpoints: Vec<E>,
        timeout: Option<Duration>,
    ) -> Self {
        let (tx, from_clients) = mpsc::channel();
        let mut to_clients = Vec::new();
        let mut handles = Vec::new();
        for (id, e) in endpoints.into_iter().enumerate() {
            let (ctx, crx) = mpsc::channel();
            let tx = tx.clone();
            to_clients.push(ctx);
            handles.push(std::thread::spawn(move || {
                endpoint_loop(id as u32, e, crx, tx)
            }));
        }
        Self {
            to_clients,
            from_clients,
            handles,
            timeout,
        }
    }

    /// Waits for every client thread to finish.
    pub fn join(self) {
        drop(self.to_clients);
        for h in self.handles {
            let _ = h.join();
        }
    }
}

impl Link for ThreadedLink {
    fn n_clients(&self) -> usize {
        self.to_clients.len()
    }

    fn send_frame(&mut self, to: u32, frame: Vec<u8>) -> Result<()> {
        self.to_clients
            .get(to as usize)
            .ok_or_else(|| Error::Transport(format!("no client {to}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("client {to} has stopped")))
    }

    fn recv_frame(&mut self) -> Result<(u32, Vec<u8>)> {
        recv_with_timeout(&self.from_clients, self.timeout)
    }
}

/// Client id requested in a `Hello` when any id will do.
pub const ANY_CLIENT: u32 = u32::MAX;

/// Server end of TCP connections, one per client. The `Hello`/`Assign`
/// handshake happens before counting starts.
pub struct SocketLink {
    streams: Vec<TcpStream>,
    from_clients: Receiver<(u32, Vec<u8>)>,
    readers: Vec<JoinHandle<()>>,
    timeout: Option<Duration>,
}

impl SocketLink {
    /// Accepts `n` clients. A client asking for a free id in its `Hello`
    /// gets it; others get the lowest free id.
    pub fn accept(listener: &TcpListener, n: usize, timeout: Option<Duration>) -> Result<Self> {
        let mut slots: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            let (mut stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(timeout)?;
            let hello = wire::decode(&wire::read_frame(&mut stream)?)?;
            let wanted = match hello {
                WireMessage::Control(c) if c.kind == ControlKind::Hello => c.client_id,
                other => {
                    return Err(Error::Transport(format!(
                        "expected hello, got {}",
                        other.name()
                    )));
                }
            };
            let id = if (wanted as usize) < n && slots[wanted as usize].is_none() {
                wanted as usize
            } else {
                slots
                    .iter()
                    .position(Option::is_none)
                    .ok_or_else(|| Error::Transport("no free client slot".into()))?
            };
            let assign = WireMessage::Control(Control::new(ControlKind::Assign, id as u32, 0));
            wire::write_frame(&mut stream, &wire::encode(&assign)?)?;
            stream.set_read_timeout(None)?;
            slots[id] = Some(stream);
        }
        let streams: Vec<TcpStream> = slots
            .into_iter()
            .map(|s| s.expect("all slots filled"))
            .collect();
        let (tx, from_clients) = mpsc::channel();
        let mut readers = Vec::new();
        for (id, s) in streams.iter().enumerate() {
            let mut reader = BufReader::new(s.try_clone()?);
            let tx = tx.clone();
            readers.push(std::thread::spawn(move || {
                while let Ok(frame) = wire::read_frame(&mut reader) {
                    if tx.send((id as u32, frame)).is_err() {
                        return;
                    }
                }
            }));
        }
        Ok(Self {
            streams,
            from_clients,
            readers,
            timeout,
        })
    }

    pub fn close(self) {
        for s in &self.streams {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for r in self.readers {
            let _ = r.join();
        }
    }
}

impl Link for SocketLink {
    fn n_clients(&self) -> usize {
        self.streams.len()
    }

    fn send_frame(&mut self, to: u32, frame: Vec<u8>) -> Result<()> {
        let s = self
            .streams
            .get_mut(to as usize)
            .ok_or_else(|| Error::Transport(format!("no client {to}")))?;
        wire::write_frame(s, &frame)
    }

    fn recv_frame(&mut self) -> Result<(u32, Vec<u8>)> {
        recv_with_timeout(&self.from_clients, self.timeout)
    }
}

/// Connects to a server, performs the handshake and returns the stream
/// with the assigned client id.
pub fn connect<A: ToSocketAddrs>(addr: A, wanted: u32) -> Result<(TcpStream, u32)> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let hello = WireMessage::Control(Control::new(ControlKind::Hello, wanted, 0));
    wire::write_frame(&mut stream, &wire::encode(&hello)?)?;
    match wire::decode(&wire::read_frame(&mut stream)?)? {
        WireMessage::Control(c) if c.kind == ControlKind::Assign => Ok((stream, c.client_id)),
        other => Err(Error::Transport(format!(
            "expected an id assignment, got {}",
            other.name()
        ))),
    }
}

/// Serves one client over an established connection until `Shutdown`.
pub fn serve<E: Endpoint>(stream: TcpStream, id: u32, endpoint: &mut E) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let frame = wire::read_frame(&mut reader)?;
        if frame.len() < HEADER_LEN {
            return Err(Error::Wire("short frame".into()));
        }
        let replies = match wire::decode(&frame) {
            Ok(msg) => {
                if is_shutdown(&msg) {
                    endpoint.handle(msg);
                    return Ok(());
                }
                endpoint.handle(msg)
            }
            Err(e) => vec![failed(id, &e)],
        };
        for r in replies {
            wire::write_frame(&mut writer, &wire::encode(&r)?)?;
        }
    }
}

/// Binds a listener on an ephemeral localhost port.
pub fn local_listener() -> Result<(TcpListener, SocketAddr)> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let addr = l.local_addr()?;
    Ok((l, addr))
}
