use std::io;

use super::topology::{EmuTopology, TraceRecord};

pub const TRACE_HEADER: [&str; 12] = [
    "packet_id",
    "message",
    "flow",
    "link",
    "tos",
    "band",
    "size_bytes",
    "enqueue_ns",
    "dequeue_ns",
    "delivery_ns",
    "lower_band_wait_ns",
    "dropped",
];

/// Writes one CSV row per packet hop. Missing times are left empty.
pub fn write_trace_csv<W: io::Write>(
    topology: &EmuTopology,
    records: &[TraceRecord],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    let opt = |v: Option<u64>| v.map(|t| t.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.packet_id.to_string(),
            r.message.to_string(),
            r.flow.to_string(),
            topology.link_name(r.link),
            format!("0x{:02x}", r.tos),
            r.band.index().to_string(),
            r.size_bytes.to_string(),
            r.enqueue_ns.to_string(),
            opt(r.dequeue_ns),
            opt(r.delivery_ns),
            r.lower_band_wait_ns.to_string(),
            u8::from(r.dropped).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
