//! Layerwise timing, memory and parameter attribution.

pub mod memory;
pub mod timer;

pub use memory::{measure_peak_memory, measure_peak_memory_limited, PeakMemory};
pub use timer::{calibrate_overhead, region, with_timer, Clock, FakeClock, MonotonicClock, TimerTree};

use crate::breakdown::CostBreakdown;
use crate::modelzoo::EncoderModel;
use crate::taxonomy::Mode;

/// Parameter counts per tag from the model's actual tensors.
pub fn param_report(model: &EncoderModel) -> CostBreakdown {
    let mut out = CostBreakdown::new(Mode::Inference);
    for p in model.params() {
        out.add_params(p.tag, p.tensor.numel() as u64);
    }
    out
}
