use super::BenchError;

/// One acknowledged probe, timed on the sender's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttSample {
    pub message_id: u64,
    pub send_ns: u64,
    pub ack_ns: u64,
}

impl RttSample {
    pub fn rtt_ns(&self) -> u64 {
        self.ack_ns.saturating_sub(self.send_ns)
    }
}

/// Mean and population standard deviation of a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub n: usize,
}

pub fn summarize(samples: &[RttSample]) -> Result<Summary, BenchError> {
    summarize_values(samples.iter().map(|s| s.rtt_ns() as f64))
}

pub fn summarize_values(values: impl IntoIterator<Item = f64>) -> Result<Summary, BenchError> {
    let values: Vec<f64> = values.into_iter().collect();
    if values.is_empty() {
        return Err(BenchError::EmptySampleSet);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Summary {
        mean_ns: mean,
        stddev_ns: var.sqrt(),
        n: values.len(),
    })
}
