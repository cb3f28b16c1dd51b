//! Python bindings: name server, ports, admin commands and the emulated benchmark.

use std::net::SocketAddr;
use std::sync::Mutex;
use std::time::Duration;

use prioport_core::bench::{run_scenario_emulated, BenchReport, Scenario, ScenarioConfig};
use prioport_core::{
    CarrierId, NameClient, NameServer as CoreNameServer, Port as CorePort, PortConfig, PortError,
    PortName, PriorityClass,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn port_name(s: &str) -> PyResult<PortName> {
    PortName::new(s).map_err(value_err)
}

fn sock_addr(s: &str) -> PyResult<SocketAddr> {
    s.parse().map_err(value_err)
}

fn parse_carrier(s: &str) -> PyResult<CarrierId> {
    s.parse().map_err(value_err)
}

#[pyclass(module = "prioport")]
struct NameServer {
    inner: Mutex<Option<CoreNameServer>>,
    addr: SocketAddr,
}

#[pymethods]
impl NameServer {
    #[new]
    #[pyo3(signature = (listen = "127.0.0.1:0"))]
    fn new(listen: &str) -> PyResult<Self> {
        let ns = CoreNameServer::start(sock_addr(listen)?).map_err(runtime_err)?;
        Ok(NameServer {
            addr: ns.local_addr(),
            inner: Mutex::new(Some(ns)),
        })
    }

    #[getter]
    fn address(&self) -> String {
        self.addr.to_string()
    }

    /// Registered names as (name, host, port, carrier) tuples.
    fn names(&self) -> PyResult<Vec<(String, String, u16, String)>> {
        let listed = NameClient::new(self.addr).list().map_err(runtime_err)?;
        Ok(listed
            .into_iter()
            .map(|(n, e)| {
                (
                    n.to_string(),
                    e.host.to_string(),
                    e.port_number,
                    e.carrier.to_string(),
                )
            })
            .collect())
    }

    fn shutdown(&self) {
        if let Some(ns) = self.inner.lock().unwrap().take() {
            ns.shutdown();
        }
    }
}

#[pyclass(module = "prioport")]
struct Port {
    inner: Mutex<Option<CorePort>>,
}

impl Port {
    fn with<T>(&self, f: impl FnOnce(&CorePort) -> PyResult<T>) -> PyResult<T> {
        match self.inner.lock().unwrap().as_ref() {
            Some(p) => f(p),
            None => Err(runtime_err("port is closed")),
        }
    }
}

#[pymethods]
impl Port {
    /// Opens a port; with no name server it runs unregistered.
    #[new]
    #[pyo3(signature = (name, nameserver = None))]
    fn new(py: Python<'_>, name: &str, nameserver: Option<&str>) -> PyResult<Self> {
        let name = port_name(name)?;
        let cfg = match nameserver {
            Some(a) => PortConfig::default().with_nameserver(sock_addr(a)?),
            None => PortConfig::default().unregistered(),
        };
        let port = py
            .detach(|| CorePort::open(name, cfg))
            .map_err(runtime_err)?;
        Ok(Port {
            inner: Mutex::new(Some(port)),
        })
    }

    #[getter]
    fn name(&self) -> PyResult<String> {
        self.with(|p| Ok(p.name().to_string()))
    }

    #[getter]
    fn address(&self) -> PyResult<String> {
        self.with(|p| Ok(p.local_addr().to_string()))
    }

    /// Connects through the name server.
    #[pyo3(signature = (peer, carrier = "tcp"))]
    fn connect(&self, peer: &str, carrier: &str) -> PyResult<()> {
        let (peer, c) = (port_name(peer)?, parse_carrier(carrier)?);
        self.with(|p| p.connect(&peer, c).map_err(runtime_err))
    }

    /// Connects straight to another port object, bypassing the name server.
    #[pyo3(signature = (other, carrier = "tcp"))]
    fn connect_to(&self, other: &Port, carrier: &str) -> PyResult<()> {
        let c = parse_carrier(carrier)?;
        let (peer, endpoint) = other.with(|o| Ok((o.name().clone(), o.endpoint())))?;
        self.with(|p| p.connect_endpoint(&peer, &endpoint, c).map_err(runtime_err))
    }

    fn disconnect(&self, peer: &str) -> PyResult<()> {
        let peer = port_name(peer)?;
        self.with(|p| p.disconnect(&peer).map_err(runtime_err))
    }

    /// Publishes to every output channel; returns how many accepted it.
    fn publish(&self, payload: Vec<u8>) -> PyResult<usize> {
        self.with(|p| Ok(p.publish_bytes(payload).len()))
    }

    /// Waits up to `timeout` seconds; returns (peer, payload) or None.
    #[pyo3(signature = (timeout = 1.0))]
    fn read<'py>(
        &self,
        py: Python<'py>,
        timeout: f64,
    ) -> PyResult<Option<(String, Bound<'py, PyBytes>)>> {
        let wait = Duration::try_from_secs_f64(timeout).map_err(value_err)?;
        let got = self.with(|p| match py.detach(|| p.read(true, Some(wait))) {
            Err(PortError::Timeout) => Ok(None),
            other => other.map_err(runtime_err),
        })?;
        Ok(got.map(|m| (m.peer.to_string(), PyBytes::new(py, &m.message.payload))))
    }

    /// Runs one admin command and returns the reply text.
    fn admin(&self, command: &str) -> PyResult<String> {
        self.with(|p| Ok(p.handle_admin(command)))
    }

    fn set_priority(&self, peer: &str, class_name: &str) -> PyResult<()> {
        let peer = port_name(peer)?;
        let class: PriorityClass = class_name.parse().map_err(value_err)?;
        self.with(|p| {
            p.set_channel_packet_priority(&peer, class)
                .map(drop)
                .map_err(runtime_err)
        })
    }

    /// The TOS byte on the output channel to `peer`.
    fn tos(&self, peer: &str) -> PyResult<u8> {
        let peer = port_name(peer)?;
        self.with(|p| Ok(p.output_info(&peer).map_err(runtime_err)?.tos))
    }

    fn close(&self) {
        if let Some(p) = self.inner.lock().unwrap().take() {
            p.close();
        }
    }
}

/// Runs one emulated scenario and returns its CSV report.
#[pyfunction]
#[pyo3(signature = (scenario = "nic", load = 0.7, qos = true, probe_carrier = "tcp", load_carrier = "tcp", count = 500, warmup = 100, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn bench_emulated(
    py: Python<'_>,
    scenario: &str,
    load: f64,
    qos: bool,
    probe_carrier: &str,
    load_carrier: &str,
    count: usize,
    warmup: usize,
    seed: u64,
) -> PyResult<String> {
    let scenario: Scenario = scenario.parse().map_err(value_err)?;
    let mut cfg = ScenarioConfig::new(
        scenario,
        qos,
        load,
        parse_carrier(probe_carrier)?,
        parse_carrier(load_carrier)?,
    );
    cfg.probe.count = count;
    cfg.probe.warmup = warmup;
    cfg.seed = seed;
    let result = py
        .detach(|| run_scenario_emulated(&cfg))
        .map_err(value_err)?;
    let mut report = BenchReport::new();
    report.push(&result);
    Ok(report.to_csv_string())
}

#[pymodule]
fn prioport(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<NameServer>()?;
    m.add_class::<Port>()?;
    m.add_function(wrap_pyfunction!(bench_emulated, m)?)?;
    Ok(())
}
