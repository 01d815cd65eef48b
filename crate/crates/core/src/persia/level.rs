//! Plain-text level files.
//!
//! One character per tile, then `link: (r1,c1)->(r2,c2)` lines binding plates to
//! doors. Lines starting with `//` are comments and blank lines are ignored; both
//! are preserved so that [`LevelSpec::to_text`] reproduces the input exactly.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::pmdp::UnitId;

/// Bit sets in the environment state are `u64`.
pub const MAX_DOORS: usize = 64;
pub const MAX_PLATES: usize = 64;
pub const MAX_KEYS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tile {
    Wall,
    Floor,
    Init,
    Trap,
    Plate,
    Door,
    Key,
    Locked,
    Exit,
}

impl Tile {
    pub fn from_char(c: char) -> Option<Tile> {
        Some(match c {
            '#' => Tile::Wall,
            '.' => Tile::Floor,
            'I' => Tile::Init,
            'T' => Tile::Trap,
            'P' => Tile::Plate,
            'D' => Tile::Door,
            'K' => Tile::Key,
            'L' => Tile::Locked,
            'X' => Tile::Exit,
            _ => return None,
        })
    }

    pub fn to_char(self) -> char {
        match self {
            Tile::Wall => '#',
            Tile::Floor => '.',
            Tile::Init => 'I',
            Tile::Trap => 'T',
            Tile::Plate => 'P',
            Tile::Door => 'D',
            Tile::Key => 'K',
            Tile::Locked => 'L',
            Tile::Exit => 'X',
        }
    }

    pub fn is_wall(self) -> bool {
        self == Tile::Wall
    }

    pub fn is_door(self) -> bool {
        matches!(self, Tile::Door | Tile::Locked)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("level parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Line {
    Blank(String),
    Comment(String),
    Row(usize),
    Link(usize),
}

/// Inclusive tile bounding box of a room, widened by one tile for its walls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoomBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    name: String,
    height: usize,
    width: usize,
    tiles: Vec<Tile>,
    links: Vec<(Pos, Pos)>,
    lines: Vec<Line>,
    trailing_newline: bool,

    init: Pos,
    doors: Vec<Pos>,
    plates: Vec<Pos>,
    keys: Vec<Pos>,
    /// Door indices opened by each plate.
    plate_doors: Vec<Vec<usize>>,
    door_index: Vec<Option<usize>>,
    plate_index: Vec<Option<usize>>,
    key_index: Vec<Option<usize>>,
    room_of: Vec<Option<usize>>,
    rooms: Vec<RoomBox>,
    unit_of: Vec<Option<UnitId>>,
    units: Vec<Pos>,
}

impl LevelSpec {
    pub fn parse(text: &str) -> Result<LevelSpec, ParseError> {
        let mut lines = Vec::new();
        let mut rows: Vec<Vec<Tile>> = Vec::new();
        let mut links = Vec::new();
        let mut name = None;
        let mut seen_link = false;

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                lines.push(Line::Blank(line.to_string()));
                continue;
            }
            if let Some(comment) = line.strip_prefix("//") {
                if let Some(n) = comment.trim().strip_prefix("name:") {
                    name.get_or_insert_with(|| n.trim().to_string());
                }
                lines.push(Line::Comment(line.to_string()));
                continue;
            }
            if let Some(rest) = line.strip_prefix("link:") {
                let (plate, door) = parse_link(rest, lineno, "link:".len())?;
                seen_link = true;
                lines.push(Line::Link(links.len()));
                links.push((plate, door));
                continue;
            }
            if seen_link {
                return Err(ParseError::new(lineno, 1, "grid row after link lines"));
            }
            let mut row = Vec::with_capacity(line.len());
            for (j, c) in line.chars().enumerate() {
                let tile = Tile::from_char(c).ok_or_else(|| {
                    ParseError::new(lineno, j + 1, format!("unknown tile code {c:?}"))
                })?;
                row.push(tile);
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(ParseError::new(
                        lineno,
                        row.len().min(first.len()) + 1,
                        format!(
                            "grid is not rectangular: row has {} tiles, expected {}",
                            row.len(),
                            first.len()
                        ),
                    ));
                }
            }
            lines.push(Line::Row(rows.len()));
            rows.push(row);
        }

        if rows.is_empty() {
            return Err(ParseError::new(1, 1, "level has no grid"));
        }
        let height = rows.len();
        let width = rows[0].len();
        let tiles: Vec<Tile> = rows.into_iter().flatten().collect();

        let row_line = |r: usize| {
            lines
                .iter()
                .enumerate()
                .find(|(_, l)| **l == Line::Row(r))
                .map(|(i, _)| i + 1)
                .unwrap_or(1)
        };
        let link_line = |k: usize| {
            lines
                .iter()
                .enumerate()
                .find(|(_, l)| **l == Line::Link(k))
                .map(|(i, _)| i + 1)
                .unwrap_or(1)
        };

        let mut init = None;
        let mut doors = Vec::new();
        let mut plates = Vec::new();
        let mut keys = Vec::new();
        let mut door_index = vec![None; tiles.len()];
        let mut plate_index = vec![None; tiles.len()];
        let mut key_index = vec![None; tiles.len()];
        for (idx, &tile) in tiles.iter().enumerate() {
            let pos = Pos::new(idx / width, idx % width);
            match tile {
                Tile::Init => {
                    if init.is_some() {
                        return Err(ParseError::new(
                            row_line(pos.row),
                            pos.col + 1,
                            "multiple 'I' tiles",
                        ));
                    }
                    init = Some(pos);
                }
                Tile::Door | Tile::Locked => {
                    door_index[idx] = Some(doors.len());
                    doors.push(pos);
                }
                Tile::Plate => {
                    plate_index[idx] = Some(plates.len());
                    plates.push(pos);
                }
                Tile::Key => {
                    key_index[idx] = Some(keys.len());
                    keys.push(pos);
                }
                _ => {}
            }
        }
        let init = init.ok_or_else(|| ParseError::new(1, 1, "level has no 'I' tile"))?;
        for (what, count, max) in [
            ("doors", doors.len(), MAX_DOORS),
            ("plates", plates.len(), MAX_PLATES),
            ("keys", keys.len(), MAX_KEYS),
        ] {
            if count > max {
                return Err(ParseError::new(1, 1, format!("too many {what}: {count} > {max}")));
            }
        }

        let mut plate_doors = vec![Vec::new(); plates.len()];
        let mut door_has_plate = vec![false; doors.len()];
        for (k, &(plate, door)) in links.iter().enumerate() {
            let at = |p: Pos| {
                (p.row < height && p.col < width).then(|| tiles[p.row * width + p.col])
            };
            if at(plate) != Some(Tile::Plate) {
                return Err(ParseError::new(
                    link_line(k),
                    1,
                    format!("link source {plate} is not a plate"),
                ));
            }
            if at(door) != Some(Tile::Door) {
                return Err(ParseError::new(
                    link_line(k),
                    1,
                    format!("link target {door} is not a door"),
                ));
            }
            let p = plate_index[plate.row * width + plate.col].expect("plate indexed");
            let d = door_index[door.row * width + door.col].expect("door indexed");
            if !plate_doors[p].contains(&d) {
                plate_doors[p].push(d);
            }
            door_has_plate[d] = true;
        }
        for (d, &pos) in doors.iter().enumerate() {
            let tile = tiles[pos.row * width + pos.col];
            let opened = match tile {
                Tile::Door => door_has_plate[d],
                _ => !keys.is_empty(),
            };
            if !opened {
                return Err(ParseError::new(
                    row_line(pos.row),
                    pos.col + 1,
                    format!("door at {pos} has no opener"),
                ));
            }
        }

        let mut unit_of = vec![None; tiles.len()];
        let mut units = Vec::new();
        for (idx, tile) in tiles.iter().enumerate() {
            if !tile.is_wall() {
                unit_of[idx] = Some(UnitId(units.len() as u32));
                units.push(Pos::new(idx / width, idx % width));
            }
        }

        let (room_of, rooms) = partition_rooms(&tiles, height, width);

        Ok(LevelSpec {
            name: name.unwrap_or_else(|| "unnamed".to_string()),
            height,
            width,
            tiles,
            links,
            lines,
            trailing_newline: text.ends_with('\n'),
            init,
            doors,
            plates,
            keys,
            plate_doors,
            door_index,
            plate_index,
            key_index,
            room_of,
            rooms,
            unit_of,
            units,
        })
    }

    /// Serialize back to the level-file format. Round-trips parsed text byte-for-byte
    /// (up to `\r\n` line endings, which are normalized).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            match line {
                Line::Blank(s) | Line::Comment(s) => out.push_str(s),
                Line::Row(r) => out.extend(
                    self.tiles[r * self.width..(r + 1) * self.width]
                        .iter()
                        .map(|t| t.to_char()),
                ),
                Line::Link(k) => {
                    let (p, d) = self.links[*k];
                    out.push_str(&format!("link: {p}->{d}"));
                }
            }
        }
        if self.trailing_newline {
            out.push('\n');
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tile(&self, pos: Pos) -> Tile {
        self.tiles[pos.row * self.width + pos.col]
    }

    pub fn tile_at(&self, row: isize, col: isize) -> Option<Tile> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            None
        } else {
            Some(self.tiles[row as usize * self.width + col as usize])
        }
    }

    pub fn init(&self) -> Pos {
        self.init
    }

    pub fn links(&self) -> &[(Pos, Pos)] {
        &self.links
    }

    pub fn doors(&self) -> &[Pos] {
        &self.doors
    }

    pub fn plates(&self) -> &[Pos] {
        &self.plates
    }

    pub fn keys(&self) -> &[Pos] {
        &self.keys
    }

    pub fn doors_of_plate(&self, plate: usize) -> &[usize] {
        &self.plate_doors[plate]
    }

    pub fn door_at(&self, pos: Pos) -> Option<usize> {
        self.door_index[pos.row * self.width + pos.col]
    }

    pub fn plate_at(&self, pos: Pos) -> Option<usize> {
        self.plate_index[pos.row * self.width + pos.col]
    }

    pub fn key_at(&self, pos: Pos) -> Option<usize> {
        self.key_index[pos.row * self.width + pos.col]
    }

    pub fn room_of(&self, pos: Pos) -> Option<usize> {
        self.room_of[pos.row * self.width + pos.col]
    }

    pub fn rooms(&self) -> &[RoomBox] {
        &self.rooms
    }

    pub fn unit_of(&self, pos: Pos) -> Option<UnitId> {
        self.unit_of[pos.row * self.width + pos.col]
    }

    /// Every walkable tile, indexed by `UnitId`.
    pub fn units(&self) -> &[Pos] {
        &self.units
    }

    pub fn unit_pos(&self, unit: UnitId) -> Pos {
        self.units[unit.0 as usize]
    }

    /// Integer value of a `// key: value` comment, if present.
    pub fn header_value(&self, key: &str) -> Option<i64> {
        self.lines.iter().find_map(|l| match l {
            Line::Comment(s) => {
                let body = s.trim_start_matches('/').trim();
                let (k, v) = body.split_once(':')?;
                (k.trim() == key).then(|| v.trim().parse().ok()).flatten()
            }
            _ => None,
        })
    }

    /// Stable 64-bit FNV-1a digest of the canonical tile grid and links.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for b in (self.height as u32).to_le_bytes() {
            feed(b);
        }
        for b in (self.width as u32).to_le_bytes() {
            feed(b);
        }
        for t in &self.tiles {
            feed(t.to_char() as u8);
        }
        for (p, d) in &self.links {
            for v in [p.row, p.col, d.row, d.col] {
                for b in (v as u32).to_le_bytes() {
                    feed(b);
                }
            }
        }
        h
    }
}

fn parse_link(rest: &str, line: usize, offset: usize) -> Result<(Pos, Pos), ParseError> {
    let err = |msg: &str| ParseError::new(line, offset + 1, msg.to_string());
    let (a, b) = rest
        .split_once("->")
        .ok_or_else(|| err("expected '(r1,c1)->(r2,c2)'"))?;
    Ok((parse_pos(a).ok_or_else(|| err("bad plate coordinate"))?,
        parse_pos(b).ok_or_else(|| err("bad door coordinate"))?))
}

fn parse_pos(s: &str) -> Option<Pos> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    let (r, c) = inner.split_once(',')?;
    Some(Pos::new(r.trim().parse().ok()?, c.trim().parse().ok()?))
}

/// Rooms are connected regions of open tiles. Doors and doorway tiles (open
/// tiles squeezed between two walls on opposite sides) separate rooms and are
/// attached to the nearest room afterwards, ties going to the lower room index.
fn partition_rooms(tiles: &[Tile], height: usize, width: usize) -> (Vec<Option<usize>>, Vec<RoomBox>) {
    let wall = |r: isize, c: isize| {
        r < 0 || c < 0 || r as usize >= height || c as usize >= width
            || tiles[r as usize * width + c as usize].is_wall()
    };
    let separator: Vec<bool> = (0..tiles.len())
        .map(|idx| {
            let (r, c) = ((idx / width) as isize, (idx % width) as isize);
            let t = tiles[idx];
            !t.is_wall()
                && (t.is_door()
                    || (wall(r - 1, c) && wall(r + 1, c))
                    || (wall(r, c - 1) && wall(r, c + 1)))
        })
        .collect();
    let neighbors = |idx: usize| {
        let (r, c) = (idx / width, idx % width);
        let mut out = Vec::with_capacity(4);
        if r > 0 {
            out.push(idx - width);
        }
        if r + 1 < height {
            out.push(idx + width);
        }
        if c > 0 {
            out.push(idx - 1);
        }
        if c + 1 < width {
            out.push(idx + 1);
        }
        out
    };

    let mut room_of: Vec<Option<usize>> = vec![None; tiles.len()];
    let mut count = 0;
    let flood = |room_of: &mut Vec<Option<usize>>, start: usize, room: usize, pass: &dyn Fn(usize) -> bool| {
        let mut queue = VecDeque::from([start]);
        room_of[start] = Some(room);
        while let Some(i) = queue.pop_front() {
            for n in neighbors(i) {
                if room_of[n].is_none() && pass(n) {
                    room_of[n] = Some(room);
                    queue.push_back(n);
                }
            }
        }
    };
    let interior = |i: usize| !tiles[i].is_wall() && !separator[i];
    for idx in 0..tiles.len() {
        if room_of[idx].is_none() && interior(idx) {
            flood(&mut room_of, idx, count, &interior);
            count += 1;
        }
    }

    // Multi-source BFS from room tiles; equal distances go to the lower room index.
    let mut dist = vec![usize::MAX; tiles.len()];
    let mut queue = VecDeque::new();
    for idx in 0..tiles.len() {
        if room_of[idx].is_some() {
            dist[idx] = 0;
            queue.push_back(idx);
        }
    }
    while let Some(i) = queue.pop_front() {
        for n in neighbors(i) {
            if !separator[n] {
                continue;
            }
            let cand = room_of[i];
            if dist[n] == usize::MAX {
                dist[n] = dist[i] + 1;
                room_of[n] = cand;
                queue.push_back(n);
            } else if dist[n] == dist[i] + 1 && cand < room_of[n] {
                room_of[n] = cand;
            }
        }
    }
    // Separators with no room in reach form rooms of their own.
    let sep_open = |i: usize| separator[i];
    for idx in 0..tiles.len() {
        if room_of[idx].is_none() && separator[idx] {
            flood(&mut room_of, idx, count, &sep_open);
            count += 1;
        }
    }

    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); count];
    for (idx, room) in room_of.iter().enumerate() {
        if let Some(room) = room {
            let (r, c) = (idx / width, idx % width);
            let b = &mut bounds[*room];
            b.0 = b.0.min(r);
            b.1 = b.1.min(c);
            b.2 = b.2.max(r);
            b.3 = b.3.max(c);
        }
    }
    let rooms = bounds
        .into_iter()
        .map(|(r0, c0, r1, c1)| {
            let top = r0.saturating_sub(1);
            let left = c0.saturating_sub(1);
            let bottom = (r1 + 1).min(height - 1);
            let right = (c1 + 1).min(width - 1);
            RoomBox {
                top,
                left,
                height: bottom - top + 1,
                width: right - left + 1,
            }
        })
        .collect();
    (room_of, rooms)
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPEN3: &str = "...\n.I.\n...\n";

    #[test]
    fn minimal_level_has_nine_units() {
        let spec = LevelSpec::parse(OPEN3).unwrap();
        assert_eq!(spec.units().len(), 9);
        assert_eq!(spec.init(), Pos::new(1, 1));
        assert_eq!(spec.rooms().len(), 1);
    }

    #[test]
    fn rejects_unknown_tile_with_location() {
        let err = LevelSpec::parse("...\n.I?\n").unwrap_err();
        assert_eq!((err.line, err.column), (2, 3));
    }

    #[test]
    fn rejects_missing_or_duplicate_init() {
        assert!(LevelSpec::parse("...\n").unwrap_err().message.contains("no 'I'"));
        let err = LevelSpec::parse("I.I\n").unwrap_err();
        assert!(err.message.contains("multiple"));
        assert_eq!((err.line, err.column), (1, 3));
    }

    #[test]
    fn rejects_ragged_grid() {
        assert!(LevelSpec::parse("I..\n..\n").is_err());
    }

    #[test]
    fn rejects_link_to_missing_door() {
        let err = LevelSpec::parse("IP.\n...\nlink: (0,1)->(1,2)\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("not a door"));
    }

    #[test]
    fn rejects_door_without_opener() {
        assert!(LevelSpec::parse("I#.\n.D.\n").unwrap_err().message.contains("no opener"));
        assert!(LevelSpec::parse("I#.\n.L.\n").is_err());
        assert!(LevelSpec::parse("IK.\n.L.\n").is_ok());
    }

    #[test]
    fn serializer_round_trips() {
        let text = "// name: demo\n#####\n#I.P#\n##D##\n#..K#\n#####\n\nlink: (1,3)->(2,2)\n// trailing\n";
        let spec = LevelSpec::parse(text).unwrap();
        assert_eq!(spec.to_text(), text);
        assert_eq!(spec.name(), "demo");
        assert_eq!(LevelSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn doorway_splits_rooms() {
        let text = "#######\n#..#..#\n#I....#\n#..#..#\n#######\n";
        let spec = LevelSpec::parse(text).unwrap();
        assert_eq!(spec.rooms().len(), 2);
        assert_eq!(spec.room_of(Pos::new(2, 3)), Some(0));
        assert_eq!(spec.room_of(Pos::new(1, 5)), Some(1));
    }

    #[test]
    fn header_values_are_read_from_comments() {
        let spec = LevelSpec::parse("// units: 3\nI..\n").unwrap();
        assert_eq!(spec.header_value("units"), Some(3));
        assert_eq!(spec.header_value("missing"), None);
    }
}
