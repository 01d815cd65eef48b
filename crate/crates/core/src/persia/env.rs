use std::sync::Arc;

use crate::persia::level::{LevelSpec, Pos, Tile};
use crate::pmdp::{Action, EnvError, Observation, PersistentMdp, Snapshot, StepResult, UnitId};

pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_LEN: usize = 8 + 2 + 2 + 8 + 8 + 8 + 1 + 8;

pub const DEFAULT_OBS_SIZE: usize = 24;

// Intensity bands.
const WALL: f32 = 0.0;
const TRAP: f32 = 0.12;
const FLOOR: f32 = 0.30;
const OPEN_DOOR: f32 = 0.22;
const PLATE: f32 = 0.45;
const PLATE_PRESSED: f32 = 0.52;
const DOOR_CLOSED: f32 = 0.62;
const LOCKED_CLOSED: f32 = 0.68;
const KEY: f32 = 0.76;
const EXIT: f32 = 0.86;
const AGENT: f32 = 1.0;
const HALO: f32 = 0.12;
const MAX_TEXTURE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub pos: Pos,
    pub doors_open: u64,
    pub plates_pressed: u64,
    pub keys_held: u64,
    pub alive: bool,
    pub steps: u64,
}

impl EnvState {
    pub fn initial(spec: &LevelSpec) -> Self {
        EnvState {
            pos: spec.init(),
            doors_open: 0,
            plates_pressed: 0,
            keys_held: 0,
            alive: true,
            steps: 0,
        }
    }

    pub fn door_open(&self, door: usize) -> bool {
        self.doors_open >> door & 1 == 1
    }

    pub fn key_held(&self, key: usize) -> bool {
        self.keys_held >> key & 1 == 1
    }

    pub fn plate_pressed(&self, plate: usize) -> bool {
        self.plates_pressed >> plate & 1 == 1
    }
}

/// Pure successor function of the tile dynamics.
pub fn transition(spec: &LevelSpec, state: &EnvState, action: Action) -> EnvState {
    let mut next = *state;
    next.steps += 1;
    let delta = match action {
        Action::LEFT => Some((0, -1)),
        Action::RIGHT => Some((0, 1)),
        Action::UP => Some((-1, 0)),
        Action::DOWN => Some((1, 0)),
        _ => None,
    };
    if let Some((dr, dc)) = delta {
        let (r, c) = (state.pos.row as isize + dr, state.pos.col as isize + dc);
        if let Some(tile) = spec.tile_at(r, c) {
            let target = Pos::new(r as usize, c as usize);
            if passable(spec, &next, target, tile) {
                next.pos = target;
                enter(spec, &mut next, target, tile);
            }
        }
    } else if action == Action::A && next.keys_held != 0 {
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (r, c) = (state.pos.row as isize + dr, state.pos.col as isize + dc);
            if spec.tile_at(r, c) == Some(Tile::Locked) {
                let door = spec.door_at(Pos::new(r as usize, c as usize)).expect("door indexed");
                next.doors_open |= 1 << door;
            }
        }
    }
    next
}

fn passable(spec: &LevelSpec, state: &EnvState, pos: Pos, tile: Tile) -> bool {
    match tile {
        Tile::Wall => false,
        Tile::Door | Tile::Locked => state.door_open(spec.door_at(pos).expect("door indexed")),
        _ => true,
    }
}

fn enter(spec: &LevelSpec, state: &mut EnvState, pos: Pos, tile: Tile) {
    match tile {
        Tile::Trap => state.alive = false,
        Tile::Plate => {
            let plate = spec.plate_at(pos).expect("plate indexed");
            state.plates_pressed |= 1 << plate;
            for &door in spec.doors_of_plate(plate) {
                state.doors_open |= 1 << door;
            }
        }
        Tile::Key => state.keys_held |= 1 << spec.key_at(pos).expect("key indexed"),
        _ => {}
    }
}

/// Per-room floor offset in `[0, 0.1)`, from a 64-bit mix of the room index.
pub fn room_texture(room: usize) -> f32 {
    let mut z = (room as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    MAX_TEXTURE * ((z >> 40) as f32 / (1u64 << 24) as f32)
}

/// Renders the agent's current room plus a status row of door/plate/key bits.
#[derive(Clone, Debug)]
pub struct Renderer {
    height: usize,
    width: usize,
    /// Upscaling factor per room.
    scales: Vec<usize>,
}

impl Renderer {
    pub fn new(spec: &LevelSpec, height: usize, width: usize) -> Result<Self, String> {
        let status = spec.doors().len() + spec.plates().len() + spec.keys().len();
        if height < 2 || width < 1 {
            return Err(format!("observation {height}x{width} is too small"));
        }
        if status > width {
            return Err(format!(
                "{status} door/plate/key status cells do not fit in width {width}"
            ));
        }
        let mut scales = Vec::with_capacity(spec.rooms().len());
        for (i, room) in spec.rooms().iter().enumerate() {
            let scale = ((height - 1) / room.height).min(width / room.width);
            if scale == 0 {
                return Err(format!(
                    "room {i} ({}x{} tiles with walls) does not fit a {}x{} observation",
                    room.height,
                    room.width,
                    height - 1,
                    width
                ));
            }
            scales.push(scale);
        }
        Ok(Renderer {
            height,
            width,
            scales,
        })
    }

    pub fn render(&self, spec: &LevelSpec, state: &EnvState) -> Observation {
        let mut values = vec![0.0f32; self.height * self.width];
        let room = spec.room_of(state.pos).expect("agent stands on an open tile");
        let rbox = spec.rooms()[room];
        let scale = self.scales[room];
        let mut tile_value = vec![WALL; rbox.height * rbox.width];
        for dr in 0..rbox.height {
            for dc in 0..rbox.width {
                let pos = Pos::new(rbox.top + dr, rbox.left + dc);
                tile_value[dr * rbox.width + dc] = self.tile_intensity(spec, state, pos);
            }
        }
        let (ar, ac) = (state.pos.row - rbox.top, state.pos.col - rbox.left);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (r, c) = (ar as isize + dr, ac as isize + dc);
                if r < 0 || c < 0 || r as usize >= rbox.height || c as usize >= rbox.width {
                    continue;
                }
                let v = &mut tile_value[r as usize * rbox.width + c as usize];
                if (dr, dc) == (0, 0) {
                    *v = AGENT;
                } else if *v > WALL {
                    *v = (*v + HALO).min(0.99);
                }
            }
        }
        for tr in 0..rbox.height {
            for tc in 0..rbox.width {
                let v = tile_value[tr * rbox.width + tc];
                for sr in 0..scale {
                    let row = (tr * scale + sr) * self.width;
                    values[row + tc * scale..row + (tc + 1) * scale].fill(v);
                }
            }
        }
        let status = &mut values[(self.height - 1) * self.width..];
        let mut cell = 0;
        for d in 0..spec.doors().len() {
            status[cell] = if state.door_open(d) { 1.0 } else { 0.0 };
            cell += 1;
        }
        for p in 0..spec.plates().len() {
            status[cell] = if state.plate_pressed(p) { 1.0 } else { 0.0 };
            cell += 1;
        }
        for k in 0..spec.keys().len() {
            status[cell] = if state.key_held(k) { 1.0 } else { 0.0 };
            cell += 1;
        }
        Observation::new(self.height, self.width, values).expect("rendered values are in range")
    }

    fn tile_intensity(&self, spec: &LevelSpec, state: &EnvState, pos: Pos) -> f32 {
        let floor = || FLOOR + spec.room_of(pos).map_or(0.0, room_texture);
        match spec.tile(pos) {
            Tile::Wall => WALL,
            Tile::Floor | Tile::Init => floor(),
            Tile::Trap => TRAP,
            Tile::Plate => {
                if state.plate_pressed(spec.plate_at(pos).expect("plate")) {
                    PLATE_PRESSED
                } else {
                    PLATE
                }
            }
            Tile::Door | Tile::Locked => {
                let door = spec.door_at(pos).expect("door");
                if state.door_open(door) {
                    OPEN_DOOR
                } else if spec.tile(pos) == Tile::Door {
                    DOOR_CLOSED
                } else {
                    LOCKED_CLOSED
                }
            }
            Tile::Key => {
                if state.key_held(spec.key_at(pos).expect("key")) {
                    floor()
                } else {
                    KEY
                }
            }
            Tile::Exit => EXIT,
        }
    }
}

/// Deterministic multi-room tile world.
#[derive(Clone, Debug)]
pub struct PersiaLite {
    spec: Arc<LevelSpec>,
    renderer: Arc<Renderer>,
    state: EnvState,
    total_steps: u64,
}

impl PersiaLite {
    pub fn new(spec: Arc<LevelSpec>) -> Result<Self, String> {
        Self::with_observation_size(spec, DEFAULT_OBS_SIZE, DEFAULT_OBS_SIZE)
    }

    pub fn with_observation_size(
        spec: Arc<LevelSpec>,
        height: usize,
        width: usize,
    ) -> Result<Self, String> {
        let renderer = Arc::new(Renderer::new(&spec, height, width)?);
        let state = EnvState::initial(&spec);
        Ok(PersiaLite {
            spec,
            renderer,
            state,
            total_steps: 0,
        })
    }

    /// A fresh instance sharing this one's level and renderer.
    pub fn fresh(&self) -> Self {
        PersiaLite {
            spec: Arc::clone(&self.spec),
            renderer: Arc::clone(&self.renderer),
            state: EnvState::initial(&self.spec),
            total_steps: 0,
        }
    }

    pub fn spec(&self) -> &Arc<LevelSpec> {
        &self.spec
    }

    /// Privileged state accessor for tests and metrics.
    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation_shape(&self) -> (usize, usize) {
        (self.renderer.height, self.renderer.width)
    }

    pub fn render_state(&self, state: &EnvState) -> Observation {
        self.renderer.render(&self.spec, state)
    }

    pub fn encode_state(&self, state: &EnvState) -> Snapshot {
        let mut bytes = Vec::with_capacity(SNAPSHOT_LEN);
        bytes.extend_from_slice(&self.spec.fingerprint().to_le_bytes());
        bytes.extend_from_slice(&(state.pos.row as u16).to_le_bytes());
        bytes.extend_from_slice(&(state.pos.col as u16).to_le_bytes());
        bytes.extend_from_slice(&state.doors_open.to_le_bytes());
        bytes.extend_from_slice(&state.plates_pressed.to_le_bytes());
        bytes.extend_from_slice(&state.keys_held.to_le_bytes());
        bytes.push(state.alive as u8);
        bytes.extend_from_slice(&state.steps.to_le_bytes());
        Snapshot::new(SNAPSHOT_VERSION, bytes)
    }

    pub fn decode_state(&self, snapshot: &Snapshot) -> Result<EnvState, EnvError> {
        if snapshot.version() != SNAPSHOT_VERSION {
            return Err(EnvError::SnapshotVersion {
                expected: SNAPSHOT_VERSION,
                found: snapshot.version(),
            });
        }
        let b = snapshot.bytes();
        if b.len() != SNAPSHOT_LEN {
            return Err(EnvError::CorruptSnapshot(format!(
                "length {} != {SNAPSHOT_LEN}",
                b.len()
            )));
        }
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let u16_at = |i: usize| u16::from_le_bytes(b[i..i + 2].try_into().unwrap()) as usize;
        if u64_at(0) != self.spec.fingerprint() {
            return Err(EnvError::CorruptSnapshot(
                "snapshot was taken on a different level".into(),
            ));
        }
        let pos = Pos::new(u16_at(8), u16_at(10));
        let state = EnvState {
            pos,
            doors_open: u64_at(12),
            plates_pressed: u64_at(20),
            keys_held: u64_at(28),
            alive: match b[36] {
                0 => false,
                1 => true,
                v => return Err(EnvError::CorruptSnapshot(format!("alive flag {v}"))),
            },
            steps: u64_at(37),
        };
        let spec = &self.spec;
        if pos.row >= spec.height() || pos.col >= spec.width() {
            return Err(EnvError::CorruptSnapshot(format!("position {pos} out of bounds")));
        }
        let tile = spec.tile(pos);
        if tile.is_wall() {
            return Err(EnvError::CorruptSnapshot(format!("agent inside wall at {pos}")));
        }
        if tile.is_door() && !state.door_open(spec.door_at(pos).unwrap()) {
            return Err(EnvError::CorruptSnapshot(format!("agent inside closed door at {pos}")));
        }
        if state.alive == (tile == Tile::Trap) {
            return Err(EnvError::CorruptSnapshot("alive flag inconsistent with tile".into()));
        }
        let fits = |bits: u64, n: usize| n >= 64 || bits >> n == 0;
        if !fits(state.doors_open, spec.doors().len())
            || !fits(state.plates_pressed, spec.plates().len())
            || !fits(state.keys_held, spec.keys().len())
        {
            return Err(EnvError::CorruptSnapshot("state bits out of range".into()));
        }
        Ok(state)
    }

    fn result(&self, consumed: u64) -> StepResult {
        StepResult {
            observation: self.observe(),
            terminated: !self.state.alive,
            env_steps_consumed: consumed,
        }
    }
}

impl PersistentMdp for PersiaLite {
    fn reset(&mut self) -> StepResult {
        self.state = EnvState::initial(&self.spec);
        self.result(0)
    }

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if !self.state.alive {
            return Err(EnvError::Terminated);
        }
        self.state = transition(&self.spec, &self.state, action);
        self.total_steps += 1;
        Ok(self.result(1))
    }

    fn save_snapshot(&self) -> Snapshot {
        self.encode_state(&self.state)
    }

    fn restore_snapshot(&mut self, snapshot: &Snapshot) -> Result<StepResult, EnvError> {
        self.state = self.decode_state(snapshot)?;
        Ok(self.result(0))
    }

    fn observe(&self) -> Observation {
        self.renderer.render(&self.spec, &self.state)
    }

    fn unit(&self) -> Result<UnitId, EnvError> {
        if !self.state.alive {
            return Err(EnvError::Dead);
        }
        Ok(self.spec.unit_of(self.state.pos).expect("agent on walkable tile"))
    }

    fn total_steps(&self) -> u64 {
        self.total_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(text: &str) -> PersiaLite {
        PersiaLite::new(Arc::new(LevelSpec::parse(text).unwrap())).unwrap()
    }

    #[test]
    fn reset_places_agent_on_init() {
        let mut e = env("#####\n#...#\n#..I#\n#####\n");
        let r = e.reset();
        assert!(!r.terminated);
        assert_eq!(e.state().pos, Pos::new(2, 3));
        assert_eq!(e.reset().observation, r.observation);
    }

    #[test]
    fn noop_keeps_position_and_counts_step() {
        let mut e = env("...\n.I.\n...\n");
        e.reset();
        e.step(Action::NOOP).unwrap();
        assert_eq!(e.state().pos, Pos::new(1, 1));
        assert_eq!(e.state().steps, 1);
        e.step(Action::B).unwrap();
        assert_eq!(e.state().pos, Pos::new(1, 1));
    }

    #[test]
    fn walls_block_movement() {
        let mut e = env("###\n#I#\n###\n");
        e.reset();
        let r = e.step(Action::RIGHT).unwrap();
        assert!(!r.terminated);
        assert_eq!(e.state().pos, Pos::new(1, 1));
    }

    #[test]
    fn trap_kills_and_blocks_further_steps() {
        let mut e = env("I\nT\n");
        e.reset();
        assert!(e.step(Action::DOWN).unwrap().terminated);
        assert_eq!(e.step(Action::NOOP), Err(EnvError::Terminated));
        assert_eq!(e.unit(), Err(EnvError::Dead));
    }

    #[test]
    fn plate_opens_linked_door_permanently() {
        let mut e = env("IPD.\nlink: (0,1)->(0,2)\n");
        e.reset();
        let before = e.step(Action::NOOP).unwrap().observation;
        let snap = e.save_snapshot();
        e.step(Action::RIGHT).unwrap();
        assert!(e.state().door_open(0));
        e.step(Action::RIGHT).unwrap();
        e.step(Action::RIGHT).unwrap();
        assert_eq!(e.state().pos, Pos::new(0, 3));
        e.step(Action::LEFT).unwrap();
        e.step(Action::LEFT).unwrap();
        e.step(Action::LEFT).unwrap();
        assert!(e.state().door_open(0));
        // Rolling back closes it again.
        let r = e.restore_snapshot(&snap).unwrap();
        assert!(!e.state().door_open(0));
        assert_eq!(r.observation, before);
    }

    #[test]
    fn key_unlocks_adjacent_door_with_use_action() {
        let mut e = env("IKL.\n");
        e.reset();
        e.step(Action::RIGHT).unwrap();
        assert!(e.state().key_held(0));
        e.step(Action::RIGHT).unwrap();
        assert_eq!(e.state().pos, Pos::new(0, 1));
        e.step(Action::A).unwrap();
        e.step(Action::RIGHT).unwrap();
        e.step(Action::RIGHT).unwrap();
        assert_eq!(e.state().pos, Pos::new(0, 3));
    }

    #[test]
    fn use_without_key_does_nothing() {
        let mut e = env("I.\nLK\n");
        e.reset();
        e.step(Action::A).unwrap();
        assert!(!e.state().door_open(0));
    }

    #[test]
    fn restore_after_death_resumes_play() {
        let mut e = env("I.\n.T\n");
        e.reset();
        e.step(Action::RIGHT).unwrap();
        let snap = e.save_snapshot();
        assert!(e.step(Action::DOWN).unwrap().terminated);
        let r = e.restore_snapshot(&snap).unwrap();
        assert!(!r.terminated);
        assert!(e.step(Action::LEFT).is_ok());
    }

    #[test]
    fn snapshot_round_trip_is_byte_stable() {
        let mut e = env("I..\n...\n");
        e.reset();
        e.step(Action::DOWN).unwrap();
        let snap = e.save_snapshot();
        e.restore_snapshot(&snap).unwrap();
        assert_eq!(e.save_snapshot(), snap);
        assert_eq!(e.decode_state(&snap).unwrap(), *e.state());
    }

    #[test]
    fn snapshot_decode_rejects_bad_input() {
        let mut e = env("I..\n");
        e.reset();
        let snap = e.save_snapshot();
        let wrong_version = Snapshot::new(SNAPSHOT_VERSION + 1, snap.bytes().to_vec());
        assert!(matches!(
            e.restore_snapshot(&wrong_version),
            Err(EnvError::SnapshotVersion { .. })
        ));
        let truncated = Snapshot::new(SNAPSHOT_VERSION, snap.bytes()[..10].to_vec());
        assert!(matches!(
            e.restore_snapshot(&truncated),
            Err(EnvError::CorruptSnapshot(_))
        ));
        let other = env("I.\n");
        assert!(other.decode_state(&snap).is_err());
    }

    #[test]
    fn twin_rooms_render_differently() {
        // Two rooms with identical layouts and the agent at the same local tile.
        let text = "#########\n#...#...#\n#.I.....#\n#...#...#\n#########\n";
        let spec = Arc::new(LevelSpec::parse(text).unwrap());
        let e = PersiaLite::new(Arc::clone(&spec)).unwrap();
        assert_eq!(spec.rooms().len(), 2);
        let mut a = EnvState::initial(&spec);
        a.pos = Pos::new(2, 1);
        let mut b = a;
        b.pos = Pos::new(2, 6);
        assert_ne!(spec.room_of(a.pos), spec.room_of(b.pos));
        assert_ne!(e.render_state(&a), e.render_state(&b));
    }

    #[test]
    fn room_textures_are_bounded() {
        for r in 0..100 {
            let t = room_texture(r);
            assert!((0.0..MAX_TEXTURE).contains(&t));
        }
    }
}
