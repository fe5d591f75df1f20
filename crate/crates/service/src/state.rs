use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use tracecommit_api::DeploymentRef;
use tracecommit_core::merkle::sha256;
use tracecommit_core::synth::{Deployment, NoiseScales};

use crate::error::ApiError;
use crate::providers::ProviderRegistry;

/// Calibrated deployments kept between requests.
const MAX_CACHED_DEPLOYMENTS: usize = 16;

type DeploymentKey = (u64, Option<[u8; 32]>);

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    deployments: Mutex<HashMap<DeploymentKey, Arc<Deployment>>>,
    providers: ProviderRegistry,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn providers(&self) -> &ProviderRegistry {
        &self.inner.providers
    }

    /// Builds, or fetches from the cache, the deployment a request names.
    /// Blocking; call from a blocking task.
    pub(crate) fn deployment(&self, r: &DeploymentRef) -> Result<Arc<Deployment>, ApiError> {
        let digest = match &r.library {
            Some(lib) => Some(sha256(lib.to_json()?.as_bytes())),
            None => None,
        };
        let key = (r.seed, digest);
        if let Some(d) = self.inner.deployments.lock().expect("cache lock").get(&key) {
            return Ok(d.clone());
        }
        let built = Arc::new(match &r.library {
            Some(lib) => Deployment::from_reference(r.seed, lib, NoiseScales::default())?,
            None => Deployment::build(r.seed)?,
        });
        tracing::info!(seed = r.seed, custom_library = r.library.is_some(), tau = built.threshold.tau, "deployment calibrated");
        let mut cache = self.inner.deployments.lock().expect("cache lock");
        if cache.len() >= MAX_CACHED_DEPLOYMENTS {
            cache.clear();
        }
        Ok(cache.entry(key).or_insert(built).clone())
    }
}
