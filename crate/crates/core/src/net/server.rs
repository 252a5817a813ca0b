use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::meter::{ByteCounter, CountingListener, Party, TrafficMeter};

/// A running axum service.
#[derive(Debug)]
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting and waits for open connections to drain.
    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match (&mut self.task).await {
            Ok(result) => result,
            Err(e) => Err(io::Error::other(e)),
        }
    }

    /// Stops immediately, dropping open connections.
    pub fn abort(self) {
        self.task.abort();
    }

    /// Resolves when the server exits on its own.
    pub async fn wait(mut self) -> io::Result<()> {
        match (&mut self.task).await {
            Ok(result) => result,
            Err(e) => Err(io::Error::other(e)),
        }
    }
}

/// Binds `listen` and serves `router`. With a meter, the listener's address is
/// registered under `party` and all accepted traffic is counted.
pub async fn spawn_service(
    listen: &str,
    router: Router,
    meter: Option<(&Arc<TrafficMeter>, Party)>,
) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let counter = match meter {
        Some((meter, party)) => {
            meter.register(addr, party);
            meter.listener(party)
        }
        None => Arc::new(ByteCounter::default()),
    };
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(CountingListener::new(listener, counter), router)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        task,
    })
}
