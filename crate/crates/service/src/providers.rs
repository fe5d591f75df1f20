//! Framed TCP providers hosted by the service.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tracecommit_api::{LocalProvider, ProviderInfo};
use tracecommit_core::wire::{FrameDecoder, Provider};

use crate::error::ApiError;

struct Hosted {
    info: ProviderInfo,
    provider: Arc<Mutex<Provider>>,
    task: JoinHandle<()>,
}

#[derive(Default)]
pub struct ProviderRegistry {
    next_id: AtomicU64,
    hosted: Mutex<HashMap<u64, Hosted>>,
}

impl ProviderRegistry {
    pub async fn start(
        &self,
        provider: Provider,
        seed: u64,
        behaviour: LocalProvider,
        listen: &str,
    ) -> Result<ProviderInfo, ApiError> {
        let listener = TcpListener::bind(listen)
            .await
            .map_err(|e| ApiError::BadRequest(format!("cannot listen on {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| ApiError::Internal(e.to_string()))?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let provider = Arc::new(Mutex::new(provider));
        let task = tokio::spawn(accept_loop(listener, provider.clone()));
        let info = ProviderInfo { id, addr: addr.to_string(), seed, provider: behaviour, stats: Default::default() };
        tracing::info!(id, %addr, strategy = %behaviour.strategy, "provider listening");
        self.hosted.lock().expect("registry lock").insert(id, Hosted { info: info.clone(), provider, task });
        Ok(info)
    }

    pub fn list(&self) -> Vec<ProviderInfo> {
        let hosted = self.hosted.lock().expect("registry lock");
        let mut out: Vec<ProviderInfo> = hosted.values().map(Hosted::snapshot).collect();
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn get(&self, id: u64) -> Result<ProviderInfo, ApiError> {
        let hosted = self.hosted.lock().expect("registry lock");
        hosted.get(&id).map(Hosted::snapshot).ok_or_else(|| not_found(id))
    }

    pub fn stop(&self, id: u64) -> Result<ProviderInfo, ApiError> {
        let h = self.hosted.lock().expect("registry lock").remove(&id).ok_or_else(|| not_found(id))?;
        h.task.abort();
        tracing::info!(id, "provider stopped");
        Ok(h.snapshot())
    }
}

impl Drop for ProviderRegistry {
    fn drop(&mut self) {
        for h in self.hosted.get_mut().expect("registry lock").values() {
            h.task.abort();
        }
    }
}

impl Hosted {
    fn snapshot(&self) -> ProviderInfo {
        ProviderInfo { stats: self.provider.lock().expect("provider lock").stats(), ..self.info.clone() }
    }
}

fn not_found(id: u64) -> ApiError {
    ApiError::NotFound(format!("no provider with id {id}"))
}

async fn accept_loop(listener: TcpListener, provider: Arc<Mutex<Provider>>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let provider = provider.clone();
                tokio::spawn(async move {
                    if let Err(e) = serve_connection(provider, stream).await {
                        tracing::warn!(%peer, "provider connection ended: {e}");
                    }
                });
            }
            Err(e) => tracing::warn!("accept failed: {e}"),
        }
    }
}

/// Reads frames until the peer closes; the provider lock is held only while
/// one message is handled.
async fn serve_connection(provider: Arc<Mutex<Provider>>, mut stream: TcpStream) -> anyhow::Result<()> {
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        while let Some(msg) = decoder.next_message()? {
            let provider = provider.clone();
            let replies =
                tokio::task::spawn_blocking(move || provider.lock().expect("provider lock").handle(msg)).await?;
            for reply in replies {
                stream.write_all(&reply.encode()?).await?;
            }
        }
        let n = stream.read(&mut buf).await?;
        if n == 0 {
            return Ok(());
        }
        decoder.push(&buf[..n]);
    }
}
