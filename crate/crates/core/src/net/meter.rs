use std::collections::HashMap;
use std::fmt;
use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::{TcpListener, TcpStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Edge,
    Backend,
    Provider,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Edge => "edge",
            Party::Backend => "backend",
            Party::Provider => "provider",
        })
    }
}

/// Bytes read and written on one side of a set of connections.
#[derive(Debug, Default)]
pub struct ByteCounter {
    read: AtomicU64,
    written: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCount {
    pub read: u64,
    pub written: u64,
}

impl ByteCount {
    pub fn total(&self) -> u64 {
        self.read + self.written
    }
}

impl std::ops::Add for ByteCount {
    type Output = ByteCount;

    fn add(self, rhs: ByteCount) -> ByteCount {
        ByteCount {
            read: self.read + rhs.read,
            written: self.written + rhs.written,
        }
    }
}

impl ByteCounter {
    pub fn snapshot(&self) -> ByteCount {
        ByteCount {
            read: self.read.load(Ordering::SeqCst),
            written: self.written.load(Ordering::SeqCst),
        }
    }
}

/// Application-layer byte accounting for a loopback deployment.
///
/// Servers count at their listener; clients count per `(from, to)` link.
/// Destinations are recognised by socket address, so every listener must be
/// registered before clients connect to it.
#[derive(Debug, Default)]
pub struct TrafficMeter {
    listeners: Mutex<HashMap<Party, Arc<ByteCounter>>>,
    addresses: Mutex<HashMap<SocketAddr, Party>>,
    links: Mutex<HashMap<(Party, Party), Arc<ByteCounter>>>,
}

impl TrafficMeter {
    pub fn new() -> Arc<Self> {
        Arc::new(TrafficMeter::default())
    }

    pub fn listener(&self, party: Party) -> Arc<ByteCounter> {
        self.listeners
            .lock()
            .unwrap()
            .entry(party)
            .or_default()
            .clone()
    }

    pub fn register(&self, addr: SocketAddr, party: Party) {
        self.addresses.lock().unwrap().insert(addr, party);
    }

    pub fn party_at(&self, addr: &SocketAddr) -> Option<Party> {
        self.addresses.lock().unwrap().get(addr).copied()
    }

    pub fn link(&self, from: Party, to: Party) -> Arc<ByteCounter> {
        self.links
            .lock()
            .unwrap()
            .entry((from, to))
            .or_default()
            .clone()
    }

    /// Server-side view: `read` is what reached the party's listener.
    pub fn served(&self, party: Party) -> ByteCount {
        self.listeners
            .lock()
            .unwrap()
            .get(&party)
            .map(|c| c.snapshot())
            .unwrap_or_default()
    }

    /// Client-side view of one link: `written` is what `from` sent to `to`.
    pub fn sent(&self, from: Party, to: Party) -> ByteCount {
        self.links
            .lock()
            .unwrap()
            .get(&(from, to))
            .map(|c| c.snapshot())
            .unwrap_or_default()
    }

    /// Sum of every outbound link opened by `from`.
    pub fn outbound(&self, from: Party) -> ByteCount {
        self.links
            .lock()
            .unwrap()
            .iter()
            .filter(|((f, _), _)| *f == from)
            .fold(ByteCount::default(), |acc, (_, c)| acc + c.snapshot())
    }

    /// Listener counts that disagree with the sum of client-side link counts
    /// towards that listener. Only meaningful once all traffic has settled.
    pub fn conservation_violations(&self) -> Vec<String> {
        let links: Vec<((Party, Party), ByteCount)> = self
            .links
            .lock()
            .unwrap()
            .iter()
            .map(|(k, c)| (*k, c.snapshot()))
            .collect();
        let listeners: Vec<(Party, ByteCount)> = self
            .listeners
            .lock()
            .unwrap()
            .iter()
            .map(|(p, c)| (*p, c.snapshot()))
            .collect();

        let mut out = Vec::new();
        for (party, served) in listeners {
            let inbound = links
                .iter()
                .filter(|((_, to), _)| *to == party)
                .fold(ByteCount::default(), |acc, (_, c)| acc + *c);
            if served.read != inbound.written {
                out.push(format!(
                    "{party}: listener read {} but clients sent {}",
                    served.read, inbound.written
                ));
            }
            if served.written != inbound.read {
                out.push(format!(
                    "{party}: listener wrote {} but clients received {}",
                    served.written, inbound.read
                ));
            }
        }
        out
    }
}

/// A stream that adds every transferred byte to a counter.
#[derive(Debug)]
pub struct Counted<S> {
    inner: S,
    counter: Arc<ByteCounter>,
}

impl<S> Counted<S> {
    pub fn new(inner: S, counter: Arc<ByteCounter>) -> Self {
        Counted { inner, counter }
    }
}

impl<S: AsyncRead + Unpin> AsyncRead for Counted<S> {
    fn poll_read(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut ReadBuf<'_>,
    ) -> Poll<io::Result<()>> {
        let before = buf.filled().len();
        let res = Pin::new(&mut self.inner).poll_read(cx, buf);
        if let Poll::Ready(Ok(())) = res {
            let n = (buf.filled().len() - before) as u64;
            self.counter.read.fetch_add(n, Ordering::SeqCst);
        }
        res
    }
}

impl<S: AsyncWrite + Unpin> AsyncWrite for Counted<S> {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<io::Result<usize>> {
        let res = Pin::new(&mut self.inner).poll_write(cx, buf);
        if let Poll::Ready(Ok(n)) = res {
            self.counter.written.fetch_add(n as u64, Ordering::SeqCst);
        }
        res
    }

    fn poll_write_vectored(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        bufs: &[io::IoSlice<'_>],
    ) -> Poll<io::Result<usize>> {
        let res = Pin::new(&mut self.inner).poll_write_vectored(cx, bufs);
        if let Poll::Ready(Ok(n)) = res {
            self.counter.written.fetch_add(n as u64, Ordering::SeqCst);
        }
        res
    }

    fn is_write_vectored(&self) -> bool {
        self.inner.is_write_vectored()
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

/// TCP listener whose accepted connections are metered.
pub struct CountingListener {
    inner: TcpListener,
    counter: Arc<ByteCounter>,
}

impl CountingListener {
    pub fn new(inner: TcpListener, counter: Arc<ByteCounter>) -> Self {
        CountingListener { inner, counter }
    }
}

impl axum::serve::Listener for CountingListener {
    type Io = Counted<TcpStream>;
    type Addr = SocketAddr;

    async fn accept(&mut self) -> (Self::Io, Self::Addr) {
        loop {
            match self.inner.accept().await {
                Ok((stream, addr)) => {
                    let _ = stream.set_nodelay(true);
                    return (Counted::new(stream, self.counter.clone()), addr);
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                }
            }
        }
    }

    fn local_addr(&self) -> io::Result<Self::Addr> {
        self.inner.local_addr()
    }
}
