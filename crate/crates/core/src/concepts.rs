//! The synthetic world: a fixed list of (shape, colour) categories.
//!
//! Category 0 is a neutral grey background. Every other category has its own
//! colour from an 8-hue × 4-shade grid, so a colour alone identifies it.

pub const NUM_CONCEPTS: u32 = 32;
pub const BACKGROUND: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Fill,
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub id: u32,
    pub name: String,
    pub shape: Shape,
    pub color: [f32; 3],
}

const HUES: [&str; 8] = [
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta",
];
const SHADES: [(&str, f32, f32); 4] = [
    ("", 0.9, 0.95),
    ("pale ", 0.45, 0.95),
    ("dark ", 0.9, 0.55),
    ("dusky ", 0.45, 0.55),
];

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Looks up a category; `None` outside `0..NUM_CONCEPTS`.
pub fn concept(id: u32) -> Option<Concept> {
    if id >= NUM_CONCEPTS {
        return None;
    }
    if id == BACKGROUND {
        return Some(Concept {
            id,
            name: "background".into(),
            shape: Shape::Fill,
            color: [0.5, 0.5, 0.5],
        });
    }
    let k = (id - 1) as usize;
    let (hue, shade) = (k % 8, k / 8);
    let (prefix, s, v) = SHADES[shade];
    let shape = if (hue + shade) % 2 == 0 {
        Shape::Rect
    } else {
        Shape::Ellipse
    };
    let noun = match shape {
        Shape::Rect => "box",
        _ => "disc",
    };
    Some(Concept {
        id,
        name: format!("{prefix}{} {noun}", HUES[hue]),
        shape,
        color: hsv(hue as f32 / 8.0, s, v),
    })
}

pub fn all() -> Vec<Concept> {
    (0..NUM_CONCEPTS).filter_map(concept).collect()
}
