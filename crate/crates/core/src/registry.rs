//! Name-keyed factories for pluggable strategies.
//!
//! Generation backends and embedding providers are selected at run time by
//! the `kind` string in the pipeline config. Builtins:
//!
//! | registry              | name              | strategy                       |
//! |-----------------------|-------------------|--------------------------------|
//! | [`BackendRegistry`]   | `http`            | [`HttpChatBackend`]            |
//! |                       | `mock`            | [`MockParaphraser`]            |
//! |                       | `corrupting-mock` | [`CorruptingMock`]             |
//! | [`EmbedderRegistry`]  | `http`            | [`HttpEmbeddingProvider`]      |
//! |                       | `mock`            | [`HashedBagOfWords`]           |
//!
//! Additional strategies can be registered under new names.

use std::collections::BTreeMap;
use std::time::Duration;

use crate::augment::{CorruptingMock, GenerationBackend, HttpChatBackend, MockParaphraser};
use crate::filter::{EmbeddingProvider, HashedBagOfWords, HttpEmbeddingProvider};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown strategy {name:?}; available: {available}")]
    Unknown { name: String, available: String },
    #[error("strategy {0:?} is already registered")]
    Duplicate(String),
    #[error("strategy {name:?}: {message}")]
    Construction { name: String, message: String },
}

/// Settings handed to a factory. Secrets never live here; HTTP strategies
/// read their key from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSettings {
    pub endpoint: Option<String>,
    pub model_name: String,
    pub seed: u64,
    pub timeout: Duration,
    /// Output dimension for embedders that take one.
    pub dim: Option<usize>,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            model_name: String::new(),
            seed: 0,
            timeout: Duration::from_secs(60),
            dim: None,
        }
    }
}

pub type Factory<T> = Box<dyn Fn(&ProviderSettings) -> Result<Box<T>, String> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    factories: BTreeMap<String, Factory<T>>,
}

pub type BackendRegistry = Registry<dyn GenerationBackend>;
pub type EmbedderRegistry = Registry<dyn EmbeddingProvider>;

impl<T: ?Sized> Default for Registry<T> {
    fn default() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }
}

impl<T: ?Sized> Registry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<(), RegistryError>
    where
        F: Fn(&ProviderSettings) -> Result<Box<T>, String> + Send + Sync + 'static,
    {
        if self.factories.contains_key(name) {
            return Err(RegistryError::Duplicate(name.to_string()));
        }
        self.factories.insert(name.to_string(), Box::new(factory));
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, settings: &ProviderSettings) -> Result<Box<T>, RegistryError> {
        let factory = self.factories.get(name).ok_or_else(|| RegistryError::Unknown {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(settings).map_err(|message| RegistryError::Construction {
            name: name.to_string(),
            message,
        })
    }
}

fn require_endpoint(settings: &ProviderSettings) -> Result<String, String> {
    settings
        .endpoint
        .clone()
        .filter(|e| !e.is_empty())
        .ok_or_else(|| "an endpoint URL is required".to_string())
}

impl Registry<dyn GenerationBackend> {
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        registry
            .register("mock", |s| Ok(Box::new(MockParaphraser::new(s.seed))))
            .expect("fresh registry");
        registry
            .register("corrupting-mock", |s| Ok(Box::new(CorruptingMock::new(s.seed))))
            .expect("fresh registry");
        registry
            .register("http", |s| {
                let backend = HttpChatBackend::from_env(require_endpoint(s)?).map_err(|e| e.message)?;
                Ok(Box::new(backend))
            })
            .expect("fresh registry");
        registry
    }
}

impl Registry<dyn EmbeddingProvider> {
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        registry
            .register("mock", |s| {
                let dim = s.dim.unwrap_or(HashedBagOfWords::DEFAULT_DIM);
                if dim == 0 {
                    return Err("dim must be positive".into());
                }
                Ok(Box::new(HashedBagOfWords::new(dim)))
            })
            .expect("fresh registry");
        registry
            .register("http", |s| {
                let provider = HttpEmbeddingProvider::from_env(require_endpoint(s)?, s.model_name.clone(), s.timeout)
                    .map_err(|e| e.to_string())?;
                Ok(Box::new(provider))
            })
            .expect("fresh registry");
        registry
    }
}
