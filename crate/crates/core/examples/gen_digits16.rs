//! Regenerates `assets/digits16.bin` from the ASCII glyphs below.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "DG16"
//! version  u16      1
//! count    u16      number of glyphs (10)
//! height   u16      16
//! width    u16      16
//! pixels   u8 × count × height × width, row-major, 0 = background
//! ```
//!
//! Glyph strokes are 2 px wide; a 3×3 box blur (center weight 4) softens edges.

use std::fs;
use std::path::PathBuf;

const GLYPHS: [[&str; 16]; 10] = [
    [
        "................",
        "................",
        ".....######.....",
        "....########....",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "....########....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        ".......##.......",
        "......###.......",
        ".....####.......",
        "....##.##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".......##.......",
        ".....######.....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        ".....######.....",
        "....########....",
        "...##......##...",
        "...........##...",
        "..........##....",
        ".........##.....",
        "........##......",
        ".......##.......",
        "......##........",
        ".....##.........",
        "...##########...",
        "...##########...",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        "....#########...",
        "....#########...",
        "..........##....",
        ".........##.....",
        "........##......",
        "......#####.....",
        "......######....",
        "...........##...",
        "...........##...",
        "...##......##...",
        "....########....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        ".........##.....",
        "........###.....",
        ".......####.....",
        "......##.##.....",
        ".....##..##.....",
        "....##...##.....",
        "...##....##.....",
        "...###########..",
        "...###########..",
        ".........##.....",
        ".........##.....",
        ".........##.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        "...##########...",
        "...##########...",
        "...##...........",
        "...##...........",
        "...########.....",
        "...#########....",
        "...........##...",
        "...........##...",
        "...........##...",
        "...##......##...",
        "....########....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        "......######....",
        ".....##.........",
        "....##..........",
        "...##...........",
        "...##...........",
        "...#########....",
        "...##########...",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "....########....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        "...##########...",
        "...##########...",
        "...........##...",
        "..........##....",
        ".........##.....",
        "........##......",
        ".......##.......",
        "......##........",
        "......##........",
        "......##........",
        "......##........",
        "......##........",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        ".....######.....",
        "....########....",
        "...##......##...",
        "...##......##...",
        "....##....##....",
        ".....######.....",
        ".....######.....",
        "....##....##....",
        "...##......##...",
        "...##......##...",
        "....########....",
        ".....######.....",
        "................",
        "................",
    ],
    [
        "................",
        "................",
        ".....######.....",
        "....########....",
        "...##......##...",
        "...##......##...",
        "...##......##...",
        "....#########...",
        ".....########...",
        "...........##...",
        "...........##...",
        "..........##....",
        ".........##.....",
        "....######......",
        "................",
        "................",
    ],
];

fn main() {
    let (h, w) = (16usize, 16usize);
    let mut out = Vec::new();
    out.extend_from_slice(b"DG16");
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(GLYPHS.len() as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for glyph in &GLYPHS {
        let on = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                return 0.0;
            }
            let row = glyph[r as usize].as_bytes();
            assert_eq!(row.len(), w);
            if row[c as usize] == b'#' {
                1.0
            } else {
                0.0
            }
        };
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = 4.0 * on(r, c);
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                    acc += on(r + dr, c + dc);
                }
                let v = (acc / 12.0).min(1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/digits16.bin");
    fs::write(&path, out).expect("write asset");
    println!("wrote {}", path.display());
}
