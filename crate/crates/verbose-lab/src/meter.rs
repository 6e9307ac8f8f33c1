//! Energy meters and timing sources.
//!
//! Hardware counters are deliberately not a dependency: the default meter
//! converts measured latency to joules through a configured power draw, and
//! an external-command meter can shell out to whatever counter the host
//! has. The simulated timing source exists for byte-reproducible reports.

use std::process::Command;
use std::time::Instant;

/// How decode energy is accounted.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeterSpec {
    /// `joules = watts × latency`.
    PowerProxy { watts: f64 },
    /// Run a shell command after the decode and parse the first float on
    /// its stdout as joules. Any failure yields "energy absent".
    ExternalCommand { command: String },
    /// No energy accounting.
    Null,
}

impl Default for MeterSpec {
    fn default() -> Self {
        MeterSpec::PowerProxy { watts: 50.0 }
    }
}

impl MeterSpec {
    /// Energy for one decode of measured latency, if the meter can say.
    pub fn energy_joules(&self, latency_s: f64) -> Option<f64> {
        match self {
            MeterSpec::PowerProxy { watts } => Some(watts * latency_s),
            MeterSpec::Null => None,
            MeterSpec::ExternalCommand { command } => {
                let output = Command::new("sh").arg("-c").arg(command).output().ok()?;
                if !output.status.success() {
                    return None;
                }
                let text = String::from_utf8_lossy(&output.stdout);
                text.split_whitespace()
                    .find_map(|tok| tok.parse::<f64>().ok())
                    .filter(|j| *j >= 0.0)
            }
        }
    }
}

/// Where latency numbers come from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimingSpec {
    /// Wall-clock time around the decode.
    Wall,
    /// Deterministic cost model: `base_s + per_token_s × tokens`. Makes
    /// evaluation reports byte-identical across re-runs.
    Simulated { base_s: f64, per_token_s: f64 },
}

impl Default for TimingSpec {
    fn default() -> Self {
        TimingSpec::Wall
    }
}

impl TimingSpec {
    /// Time `f`, returning (result, latency seconds). The simulated source
    /// derives latency from the token count the closure reports.
    pub fn time<R>(&self, f: impl FnOnce() -> (R, usize)) -> (R, f64) {
        match self {
            TimingSpec::Wall => {
                let start = Instant::now();
                let (out, _tokens) = f();
                (out, start.elapsed().as_secs_f64().max(1e-9))
            }
            TimingSpec::Simulated { base_s, per_token_s } => {
                let (out, tokens) = f();
                (out, base_s + per_token_s * tokens as f64)
            }
        }
    }
}
