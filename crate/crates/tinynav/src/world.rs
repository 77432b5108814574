//! JSON world files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tinynav_core::sim::{Pose, Segment, SimWorld, DEFAULT_WALL_HEIGHT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub walls: Vec<[f64; 4]>,
    pub spawn: [f64; 3],
    #[serde(default)]
    pub checkpoints: Vec<[f64; 4]>,
    #[serde(default = "default_wall_height")]
    pub wall_height: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_wall_height() -> f64 {
    DEFAULT_WALL_HEIGHT
}

fn seg(s: &[f64; 4]) -> Segment {
    Segment::new(s[0], s[1], s[2], s[3])
}

fn quad(s: &Segment) -> [f64; 4] {
    [s.x1, s.y1, s.x2, s.y2]
}

impl WorldFile {
    pub fn from_world(w: &SimWorld) -> Self {
        Self {
            walls: w.walls.iter().map(quad).collect(),
            spawn: [w.spawn.x, w.spawn.y, w.spawn.heading],
            checkpoints: w.checkpoints.iter().map(quad).collect(),
            wall_height: w.wall_height,
            seed: w.seed,
        }
    }

    pub fn into_world(self, name: &str) -> Result<SimWorld> {
        let world = SimWorld {
            name: name.to_string(),
            walls: self.walls.iter().map(seg).collect(),
            spawn: Pose::new(self.spawn[0], self.spawn[1], self.spawn[2]),
            checkpoints: self.checkpoints.iter().map(seg).collect(),
            wall_height: self.wall_height,
            seed: self.seed,
        };
        world.validate()?;
        Ok(world)
    }
}

pub fn parse_world(json: &str, name: &str) -> Result<SimWorld> {
    let file: WorldFile = serde_json::from_str(json).map_err(|e| Error::Json { path: name.into(), source: e })?;
    file.into_world(name)
}

/// Pretty JSON with one segment per line.
pub fn world_to_json(world: &SimWorld) -> String {
    let f = WorldFile::from_world(world);
    let row = |v: &[f64]| serde_json::to_string(v).expect("finite numbers serialize").replace(',', ", ");
    let list = |items: &[[f64; 4]]| {
        if items.is_empty() {
            return "[]".to_string();
        }
        let body: Vec<String> = items.iter().map(|s| format!("    {}", row(s))).collect();
        format!("[\n{}\n  ]", body.join(",\n"))
    };
    format!(
        "{{\n  \"walls\": {},\n  \"spawn\": {},\n  \"checkpoints\": {},\n  \"wall_height\": {},\n  \"seed\": {}\n}}",
        list(&f.walls),
        row(&f.spawn),
        list(&f.checkpoints),
        serde_json::to_string(&f.wall_height).expect("finite"),
        f.seed
    )
}

pub fn load_world(path: impl AsRef<Path>) -> Result<SimWorld> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let file: WorldFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    file.into_world(&name).map_err(|e| match e {
        Error::Core(c) => {
            Error::Format { path: path.into(), source: crate::error::FormatError::Invalid(c.to_string()) }
        }
        other => other,
    })
}

/// A path to a world file, or the name of a bundled world when no such file
/// exists.
pub fn resolve_world(spec: &str) -> Result<SimWorld> {
    let path = Path::new(spec);
    if path.exists() {
        return load_world(path);
    }
    SimWorld::builtin(spec).ok_or_else(|| Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
}

pub fn save_world(path: impl AsRef<Path>, world: &SimWorld) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, world_to_json(world) + "\n").map_err(|e| Error::io(path, e))
}
