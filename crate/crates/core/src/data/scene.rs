use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }
    };
}

attribute!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
attribute!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});
attribute!(Size { Small => "small", Large => "large" });
attribute!(Position {
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
    Center => "center",
});
attribute!(Background { Black => "black", Gray => "gray", White => "white" });

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 200],
            Color::Orange => [240, 140, 30],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [0, 0, 0],
            Background::Gray => [128, 128, 128],
            Background::White => [255, 255, 255],
        }
    }
}

impl Position {
    /// Center in 32×32 pixel coordinates.
    pub fn center(self) -> (i32, i32) {
        match self {
            Position::Left => (8, 16),
            Position::Right => (24, 16),
            Position::Top => (16, 8),
            Position::Bottom => (16, 24),
            Position::Center => (16, 16),
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Position::Left => "on the left",
            Position::Right => "on the right",
            Position::Top => "at the top",
            Position::Bottom => "at the bottom",
            Position::Center => "in the center",
        }
    }
}

impl Size {
    /// Radius in 32×32 pixel units.
    pub fn radius(self) -> i32 {
        match self {
            Size::Small => 5,
            Size::Large => 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
}

impl Object {
    fn phrase(&self) -> String {
        format!("a {} {} {}", self.size.word(), self.color.word(), self.shape.word())
    }

    fn random(rng: &mut Rng, position: Position) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            position,
        }
    }
}

/// One or two objects on a plain background. Two objects always sit on
/// opposite sides (left/right or top/bottom), stored left/top first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub background: Background,
}

/// Fixed width of an encoded scene.
pub const SCENE_BYTES: usize = 10;

impl Scene {
    pub fn random(rng: &mut Rng) -> Self {
        let background = Background::ALL[rng.random_range(0..Background::ALL.len())];
        let objects = if rng.random_bool(0.5) {
            let pos = Position::ALL[rng.random_range(0..Position::ALL.len())];
            vec![Object::random(rng, pos)]
        } else if rng.random_bool(0.5) {
            vec![Object::random(rng, Position::Left), Object::random(rng, Position::Right)]
        } else {
            vec![Object::random(rng, Position::Top), Object::random(rng, Position::Bottom)]
        };
        Self { objects, background }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.objects.as_slice() {
            [_] => true,
            [a, b] => matches!(
                (a.position, b.position),
                (Position::Left, Position::Right) | (Position::Top, Position::Bottom)
            ),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("scene", format!("unsupported layout {:?}", self.objects)))
        }
    }

    pub fn caption(&self) -> String {
        match self.objects.as_slice() {
            [a] => format!("{} {}", a.phrase(), a.position.phrase()),
            [a, b] if a.position == Position::Left => format!("{} left of {}", a.phrase(), b.phrase()),
            [a, b] => format!("{} above {}", a.phrase(), b.phrase()),
            _ => String::new(),
        }
    }

    pub fn encode(&self) -> [u8; SCENE_BYTES] {
        let mut out = [0u8; SCENE_BYTES];
        out[0] = self.objects.len() as u8;
        out[1] = self.background.index() as u8;
        for (i, o) in self.objects.iter().enumerate() {
            let b = &mut out[2 + 4 * i..6 + 4 * i];
            b[0] = o.shape.index() as u8;
            b[1] = o.color.index() as u8;
            b[2] = o.size.index() as u8;
            b[3] = o.position.index() as u8;
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::invalid("scene", format!("bad encoding {bytes:?}"));
        if bytes.len() != SCENE_BYTES || !(1..=2).contains(&bytes[0]) {
            return Err(bad());
        }
        let background = Background::from_index(bytes[1] as usize).ok_or_else(bad)?;
        let objects = (0..bytes[0] as usize)
            .map(|i| {
                let b = &bytes[2 + 4 * i..6 + 4 * i];
                Some(Object {
                    shape: Shape::from_index(b[0] as usize)?,
                    color: Color::from_index(b[1] as usize)?,
                    size: Size::from_index(b[2] as usize)?,
                    position: Position::from_index(b[3] as usize)?,
                })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let scene = Self { objects, background };
        scene.validate()?;
        Ok(scene)
    }
}
