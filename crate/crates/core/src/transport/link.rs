//! Byte-frame links: in-process queues and TCP streams.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};

use super::frame::{Header, HEADER_LEN};
use super::{Channel, Instruments, Role};
use crate::error::{Error, Result};

/// Frames a sender may have in flight per direction before `send` blocks.
/// Keeps a fast producer (the dealer) at most this far ahead of its reader.
pub const LINK_DEPTH: usize = 8;

fn send_bounded(tx: &Sender<Vec<u8>>, frame: Vec<u8>, timeout: Duration) -> Result<()> {
    tx.send_timeout(frame, timeout).map_err(|e| match e {
        SendTimeoutError::Timeout(_) => Error::Timeout(format!("queue space after {:?}", timeout)),
        SendTimeoutError::Disconnected(_) => Error::ChannelClosed("peer endpoint dropped".into()),
    })
}

/// Moves whole frames between two endpoints, FIFO.
pub trait Link: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>>;
}

struct QueueLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl Link for QueueLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        send_bounded(&self.tx, frame, self.timeout)
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout(format!("frame after {:?}", timeout)),
            RecvTimeoutError::Disconnected => Error::ChannelClosed("peer endpoint dropped".into()),
        })
    }
}

/// Connected in-process endpoints for roles `a` and `b`.
pub fn in_process_pair(a: Role, b: Role, inst: Instruments) -> (Channel, Channel) {
    let (tx_ab, rx_ab) = bounded(LINK_DEPTH);
    let (tx_ba, rx_ba) = bounded(LINK_DEPTH);
    let timeout = inst.timeout;
    (
        Channel::new(Box::new(QueueLink { tx: tx_ab, rx: rx_ba, timeout }), a, b, inst.clone()),
        Channel::new(Box::new(QueueLink { tx: tx_ba, rx: rx_ab, timeout }), b, a, inst),
    )
}

/// TCP link. Writes go through a dedicated thread so two peers sending
/// large frames to each other at once cannot block on full socket buffers.
struct TcpLink {
    reader: TcpStream,
    writer: Option<Sender<Vec<u8>>>,
    write_errors: Receiver<std::io::Error>,
    handle: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl TcpLink {
    fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        let mut out = stream.try_clone()?;
        let (tx, rx) = bounded::<Vec<u8>>(LINK_DEPTH);
        let (etx, erx) = bounded(1);
        let handle = std::thread::spawn(move || {
            for frame in rx {
                if let Err(e) = out.write_all(&frame) {
                    let _ = etx.send(e);
                    return;
                }
            }
            let _ = out.flush();
            let _ = out.shutdown(std::net::Shutdown::Write);
        });
        Ok(Self { reader: stream, writer: Some(tx), write_errors: erx, handle: Some(handle), timeout })
    }

    fn read_exact_until(&mut self, buf: &mut [u8], deadline: Instant) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Timeout("tcp frame".into()));
            }
            self.reader.set_read_timeout(Some(left))?;
            match self.reader.read(&mut buf[filled..]) {
                Ok(0) => return Err(Error::ChannelClosed("tcp peer closed the connection".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(Error::Timeout("tcp frame".into()))
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

impl Link for TcpLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        if let Ok(e) = self.write_errors.try_recv() {
            return Err(Error::ChannelClosed(format!("tcp write failed: {}", e)));
        }
        send_bounded(self.writer.as_ref().expect("writer lives until drop"), frame, self.timeout)
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut head = [0u8; HEADER_LEN];
        self.read_exact_until(&mut head, deadline)?;
        let header = Header::decode(&head)?;
        let mut frame = vec![0u8; HEADER_LEN + header.len as usize];
        frame[..HEADER_LEN].copy_from_slice(&head);
        self.read_exact_until(&mut frame[HEADER_LEN..], deadline)?;
        Ok(frame)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        self.writer.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

// Raw, uncounted identification exchanged once per connection.
const HELLO: [u8; 4] = *b"SFH1";

fn hello(stream: &mut TcpStream, me: Role) -> Result<Role> {
    let mut msg = HELLO.to_vec();
    msg.push(me as u8);
    stream.write_all(&msg)?;
    let mut buf = [0u8; 5];
    stream.read_exact(&mut buf)?;
    if buf[..4] != HELLO {
        return Err(Error::FrameCorrupt("bad connection greeting".into()));
    }
    Role::from_u8(buf[4])
}

/// Connects to `addr`, retrying until `timeout`, and identifies as `local`.
pub fn connect_tcp(addr: impl ToSocketAddrs, local: Role, peer: Role, inst: Instruments) -> Result<Channel> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let deadline = Instant::now() + inst.timeout;
    let mut stream = loop {
        match addrs.iter().find_map(|a| TcpStream::connect(a).ok()) {
            Some(s) => break s,
            None if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            None => return Err(Error::Timeout(format!("connecting to {:?}", addrs))),
        }
    };
    stream.set_read_timeout(Some(inst.timeout))?;
    let got = hello(&mut stream, local)?;
    if got != peer {
        return Err(Error::UnexpectedMessage(format!("expected {} at the other end, found {}", peer, got)));
    }
    Ok(Channel::new(Box::new(TcpLink::new(stream, inst.timeout)?), local, peer, inst))
}

/// Accepts one connection on `listener` and returns it with the peer's role.
pub fn accept_tcp(listener: &TcpListener, local: Role, inst: Instruments) -> Result<Channel> {
    let (mut stream, _) = listener.accept()?;
    stream.set_read_timeout(Some(inst.timeout))?;
    let peer = hello(&mut stream, local)?;
    Ok(Channel::new(Box::new(TcpLink::new(stream, inst.timeout)?), local, peer, inst))
}

/// Connected TCP endpoints over loopback.
pub fn tcp_pair(a: Role, b: Role, inst: Instruments) -> Result<(Channel, Channel)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let inst_b = inst.clone();
    let acceptor = std::thread::spawn(move || accept_tcp(&listener, b, inst_b));
    let ca = connect_tcp(addr, a, b, inst)?;
    let cb = acceptor.join().expect("accept thread panicked")?;
    if cb.peer() != a {
        return Err(Error::UnexpectedMessage(format!("accepted {} instead of {}", cb.peer(), a)));
    }
    Ok((ca, cb))
}
