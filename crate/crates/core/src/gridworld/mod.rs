//! Synthetic grid scenes with templated questions and referring expressions.
//!
//! A scene is a `K × K` grid with at most one object per cell. Coordinates
//! use one cell as the unit, `x` along columns and `y` along rows, so cell
//! `(row, col)` covers `[col, col + 1] × [row, row + 1]`.

mod dataset;
mod templates;
mod words;

pub use dataset::{
    generate_dataset, read_dataset, read_lines, write_dataset, write_lines, Dataset, DatasetSpec, Record, Split,
};
pub use templates::{generate_task, Family, LayoutStep, TaskKind, TaskRecord};
pub use words::{Phrase, Relation, Vocabulary, ANSWERS, WORDS};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modules::FeatureMap;

/// Channels of a rendered cell: 3 colors, 3 shapes, 2 sizes, presence, then
/// the normalized row and column of the cell center.
pub const FEATURES: usize = 11;

/// Largest center displacement of a box inside its cell.
pub const BOX_JITTER: f64 = 0.1;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

attribute!(Color { Red => "red", Green => "green", Blue => "blue" });
attribute!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
attribute!(Size { Small => "small", Large => "large" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
    /// `(x_min, y_min, x_max, y_max)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<Object>,
    pub seed: u64,
}

impl Scene {
    pub fn object_at(&self, row: usize, col: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.row == row && o.col == col)
    }
}

/// Places `n` objects in distinct random cells, deterministically in `seed`.
pub fn generate_scene(grid: usize, n: usize, seed: u64) -> Result<Scene> {
    if n > grid * grid {
        return Err(Error::Generation(format!("{n} objects do not fit a {grid}x{grid} grid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut rng);
    let mut chosen = cells[..n].to_vec();
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|cell| {
            let (row, col) = (cell / grid, cell % grid);
            let color = *Color::ALL.choose(&mut rng).unwrap();
            let shape = *Shape::ALL.choose(&mut rng).unwrap();
            let size = *Size::ALL.choose(&mut rng).unwrap();
            let side = match size {
                Size::Small => 0.5,
                Size::Large => 0.8,
            } * rng.gen_range(0.9..1.1);
            let cx = col as f64 + 0.5 + rng.gen_range(-BOX_JITTER..BOX_JITTER);
            let cy = row as f64 + 0.5 + rng.gen_range(-BOX_JITTER..BOX_JITTER);
            Object {
                row,
                col,
                color,
                shape,
                size,
                bbox: [cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0],
            }
        })
        .collect();
    Ok(Scene { grid, objects, seed })
}

pub fn render_features(scene: &Scene) -> FeatureMap {
    let k = scene.grid;
    let mut data = vec![0.0; k * k * FEATURES];
    for i in 0..k {
        for j in 0..k {
            let cell = &mut data[(i * k + j) * FEATURES..(i * k + j + 1) * FEATURES];
            cell[9] = (i as f64 + 0.5) / k as f64;
            cell[10] = (j as f64 + 0.5) / k as f64;
        }
    }
    for o in &scene.objects {
        let cell = &mut data[(o.row * k + o.col) * FEATURES..(o.row * k + o.col + 1) * FEATURES];
        cell[o.color.index()] = 1.0;
        cell[3 + o.shape.index()] = 1.0;
        cell[6 + o.size.index()] = 1.0;
        cell[8] = 1.0;
    }
    FeatureMap {
        height: k,
        width: k,
        depth: FEATURES,
        data,
    }
}

#[cfg(test)]
mod tests;
