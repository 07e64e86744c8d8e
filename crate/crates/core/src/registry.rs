//! Name-keyed registries of interchangeable strategies.
//!
//! A registry maps a stable string name to a factory that builds a boxed
//! trait object from a shared context (for example a provider config).
//! Config files and CLI flags select strategies by name at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<C, T> = Box<dyn Fn(&C) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<C, T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<&'static str, Factory<C, T>>,
}

impl<C, T: ?Sized> Registry<C, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Adds or replaces the factory for `name`.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn(&C) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name, Box::new(factory));
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(ctx)
    }
}
