//! Host/device memory tiers, the decode timeline and footprint accounting.

pub mod footprint;
pub mod pool;
pub mod timeline;

pub use footprint::{hybrid_footprint, memory_footprint, write_footprint_csv, FootprintMethod, FootprintParams, FootprintRow};
pub use pool::{CriticalKeys, DeviceBuffers, HostPool, LinkModel, SlotState, Transfer};
pub use timeline::{
    build_timeline, simulate, BufferAccess, BufferMode, EventKind, LayerBreakdown, LayerCosts, SimulationReport,
    TimelineEvent, TransferTimeline,
};
