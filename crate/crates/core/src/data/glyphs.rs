//! Built-in 5x7 dot glyphs for every symbol the generator emits.

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;

/// Symbols the generator can emit, in atlas order.
pub const SYMBOLS: [&str; 27] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "k", "n", "x", "y", "z", "+", "-", "=", "(", ")",
    r"\alpha", r"\beta", r"\pi", r"\theta",
];

const ATLAS: [[&str; GLYPH_HEIGHT]; 27] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
    [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"],
    ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."],
    [".....", ".....", ".###.", "#....", "#....", "#...#", ".###."],
    ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."],
    [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."],
    [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"],
    [".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."],
    [".....", ".....", ".....", "#####", ".....", ".....", "....."],
    [".....", ".....", "#####", ".....", "#####", ".....", "....."],
    ["...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."],
    [".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."],
    [".....", ".....", ".##.#", "#..#.", "#..#.", "#..#.", ".##.#"],
    [".##..", "#..#.", "#.#..", "#..#.", "#...#", "##..#", "#.##."],
    [".....", ".....", "#####", ".#.#.", ".#.#.", ".#.#.", ".#..#"],
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", ".###."],
];

pub fn symbol_index(symbol: &str) -> Option<usize> {
    SYMBOLS.iter().position(|s| *s == symbol)
}

/// Whether the dot at (`col`, `row`) of a glyph is inked.
pub fn dot(symbol: usize, col: usize, row: usize) -> bool {
    ATLAS[symbol][row].as_bytes()[col] == b'#'
}

/// Nearest-neighbour scaling of a glyph to a `width x height` cell; returns
/// ink flags in row-major order.
pub fn render(symbol: usize, width: usize, height: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let row = y * GLYPH_HEIGHT / height;
        for x in 0..width {
            out.push(dot(symbol, x * GLYPH_WIDTH / width, row));
        }
    }
    out
}
