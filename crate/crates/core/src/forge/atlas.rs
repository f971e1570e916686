use std::collections::HashMap;
use std::sync::OnceLock;

/// Monochrome glyph bitmaps rasterized once from DejaVu Sans Bold and kept as
/// text so the rendered pixels never depend on a font engine.
const ATLAS_SRC: &str = include_str!("glyphs.txt");

#[derive(Debug)]
pub(crate) struct Glyph {
    pub width: usize,
    pub height: usize,
    ink: Vec<bool>,
}

impl Glyph {
    pub fn ink(&self, row: usize, col: usize) -> bool {
        self.ink[row * self.width + col]
    }
}

pub(crate) struct Atlas {
    glyphs: HashMap<char, Glyph>,
    pub height: usize,
}

impl Atlas {
    pub fn get(&self, c: char) -> Option<&Glyph> {
        self.glyphs.get(&c)
    }

    pub fn mean_width(&self) -> f64 {
        self.glyphs.values().map(|g| g.width as f64).sum::<f64>() / self.glyphs.len() as f64
    }
}

fn parse(src: &str) -> Atlas {
    let mut lines = src.lines().filter(|l| !l.starts_with(';'));
    let height: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("height "))
        .and_then(|h| h.parse().ok())
        .expect("atlas height line");
    let mut glyphs = HashMap::new();
    while let Some(header) = lines.next() {
        let (c, width) = header.split_once(' ').expect("glyph header");
        let c = c.chars().next().expect("glyph char");
        let width: usize = width.parse().expect("glyph width");
        let mut ink = Vec::with_capacity(width * height);
        for row in lines.by_ref().take(height) {
            assert_eq!(row.len(), width, "glyph {c:?} row width");
            ink.extend(row.bytes().map(|b| b == b'#'));
        }
        assert_eq!(ink.len(), width * height, "glyph {c:?} truncated");
        glyphs.insert(c, Glyph { width, height, ink });
    }
    Atlas { glyphs, height }
}

pub(crate) fn atlas() -> &'static Atlas {
    static ATLAS: OnceLock<Atlas> = OnceLock::new();
    ATLAS.get_or_init(|| parse(ATLAS_SRC))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DEFAULT_CHARS;

    #[test]
    fn covers_default_alphabet() {
        let a = atlas();
        for c in DEFAULT_CHARS.chars() {
            let g = a.get(c).unwrap_or_else(|| panic!("missing glyph {c:?}"));
            assert_eq!(g.height, a.height);
            assert!((0..g.height).any(|r| (0..g.width).any(|k| g.ink(r, k))));
        }
        assert_eq!(a.glyphs.len(), 62);
    }
}
