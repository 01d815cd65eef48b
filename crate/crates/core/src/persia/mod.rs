//! PersiaLite: a deterministic top-down tile world with traps, plates, doors and keys.

mod env;
mod level;
mod reach;

pub use env::{room_texture, transition, EnvState, PersiaLite, Renderer, DEFAULT_OBS_SIZE, SNAPSHOT_VERSION};
pub use level::{LevelSpec, ParseError, Pos, RoomBox, Tile};
pub use reach::{coverage, reachable_units, reachable_units_capped, StateCapExceeded, DEFAULT_STATE_CAP};

/// Levels shipped with the crate.
pub mod bundled {
    pub const L1: &str = include_str!("../../levels/L1.txt");
    pub const TWIN: &str = include_str!("../../levels/twin.txt");

    /// Look up a bundled level by name.
    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "L1" => Some(L1),
            "twin" => Some(TWIN),
            _ => None,
        }
    }
}
