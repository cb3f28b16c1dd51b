use std::collections::BTreeMap;
use std::sync::RwLock;

use super::{EndpointTriplet, NameError, PortName};

/// The name → endpoint map. Shared by every connection the server handles.
#[derive(Debug, Default)]
pub struct Registry {
    entries: RwLock<BTreeMap<PortName, EndpointTriplet>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registering the same endpoint again is a no-op success.
    pub fn register(&self, name: PortName, endpoint: EndpointTriplet) -> Result<(), NameError> {
        let mut map = self.entries.write().unwrap();
        match map.get(&name) {
            Some(existing) if *existing != endpoint => Err(NameError::AlreadyRegistered),
            Some(_) => Ok(()),
            None => {
                map.insert(name, endpoint);
                Ok(())
            }
        }
    }

    pub fn lookup(&self, name: &PortName) -> Option<EndpointTriplet> {
        self.entries.read().unwrap().get(name).copied()
    }

    pub fn unregister(&self, name: &PortName) {
        self.entries.write().unwrap().remove(name);
    }

    pub fn list(&self) -> Vec<(PortName, EndpointTriplet)> {
        self.entries
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::CarrierId;

    fn ep(port: u16) -> EndpointTriplet {
        EndpointTriplet::new("127.0.0.1".parse().unwrap(), port, CarrierId::Tcp).unwrap()
    }

    fn name(s: &str) -> PortName {
        s.parse().unwrap()
    }

    #[test]
    fn store_and_load() {
        let r = Registry::new();
        r.register(name("/publisher1"), ep(10002)).unwrap();
        assert_eq!(r.lookup(&name("/publisher1")), Some(ep(10002)));
    }

    #[test]
    fn conflicting_registration_rejected() {
        let r = Registry::new();
        r.register(name("/p"), ep(1)).unwrap();
        assert!(matches!(
            r.register(name("/p"), ep(2)),
            Err(NameError::AlreadyRegistered)
        ));
        r.register(name("/p"), ep(1)).unwrap();
        assert_eq!(r.lookup(&name("/p")), Some(ep(1)));
    }

    #[test]
    fn unregister_is_idempotent() {
        let r = Registry::new();
        r.unregister(&name("/ghost"));
        r.register(name("/a"), ep(1)).unwrap();
        r.unregister(&name("/a"));
        r.unregister(&name("/a"));
        assert_eq!(r.lookup(&name("/a")), None);
        assert!(r.list().is_empty());
    }

    #[test]
    fn hundred_distinct_entries() {
        let r = Registry::new();
        for i in 0..100 {
            r.register(name(&format!("/n{i}")), ep(1000 + i)).unwrap();
        }
        let all = r.list();
        assert_eq!(all.len(), 100);
        let mut names: Vec<_> = all.iter().map(|(n, _)| n.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), 100);
    }
}
