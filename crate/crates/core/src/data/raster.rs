//! Deterministic layout and rendering of [`ExprNode`] trees.

use super::bitmap::{Bitmap, INK};
use super::expr::ExprNode;
use super::glyphs::{self, GLYPH_HEIGHT, GLYPH_WIDTH, SYMBOLS};
use crate::error::{Error, Result};

pub const SCRIPT_SCALE: f64 = 0.7;
pub const SCRIPT_SHIFT: f64 = 0.4;
pub const MARGIN: usize = 4;
pub const DEFAULT_GLYPH_PX: usize = 14;

#[derive(Clone, Debug)]
enum Item {
    Glyph { symbol: usize, x: i32, y: i32, w: i32, h: i32 },
    Rule { x: i32, y: i32, w: i32, h: i32 },
}

/// A laid-out box; item coordinates are relative to the left edge and the
/// baseline (negative y is above the baseline).
#[derive(Clone, Debug, Default)]
struct LayoutBox {
    width: i32,
    ascent: i32,
    descent: i32,
    items: Vec<Item>,
}

impl LayoutBox {
    fn place(&mut self, other: LayoutBox, dx: i32, dy: i32) {
        for item in other.items {
            self.items.push(match item {
                Item::Glyph { symbol, x, y, w, h } => Item::Glyph { symbol, x: x + dx, y: y + dy, w, h },
                Item::Rule { x, y, w, h } => Item::Rule { x: x + dx, y: y + dy, w, h },
            });
        }
    }
}

fn glyph_size(px: f64) -> (i32, i32) {
    let h = px.round().max(1.0) as i32;
    let w = (px * GLYPH_WIDTH as f64 / GLYPH_HEIGHT as f64).round().max(1.0) as i32;
    (w, h)
}

fn layout(node: &ExprNode, px: f64) -> Result<LayoutBox> {
    let (gw, gh) = glyph_size(px);
    Ok(match node {
        ExprNode::Symbol(s) => {
            if *s >= SYMBOLS.len() {
                return Err(Error::UnknownGlyph(format!("#{s}")));
            }
            LayoutBox {
                width: gw,
                ascent: gh,
                descent: 0,
                items: vec![Item::Glyph { symbol: *s, x: 0, y: -gh, w: gw, h: gh }],
            }
        }
        ExprNode::Sequence(children) => {
            let gap = ((gw as f64) / 5.0).round().max(1.0) as i32;
            let mut out = LayoutBox::default();
            for (i, child) in children.iter().enumerate() {
                let b = layout(child, px)?;
                if i > 0 {
                    out.width += gap;
                }
                let x = out.width;
                out.width += b.width;
                out.ascent = out.ascent.max(b.ascent);
                out.descent = out.descent.max(b.descent);
                out.place(b, x, 0);
            }
            out
        }
        ExprNode::Superscript(base, script) | ExprNode::Subscript(base, script) => {
            let up = matches!(node, ExprNode::Superscript(..));
            let b = layout(base, px)?;
            let s = layout(script, px * SCRIPT_SCALE)?;
            let shift = (SCRIPT_SHIFT * gh as f64).round() as i32;
            let dy = if up { -shift } else { shift };
            let mut out = LayoutBox {
                width: b.width + 1 + s.width,
                ascent: b.ascent.max(s.ascent - dy),
                descent: b.descent.max(s.descent + dy),
                items: Vec::new(),
            };
            let sx = b.width + 1;
            out.place(b, 0, 0);
            out.place(s, sx, dy);
            out
        }
        ExprNode::Fraction(num, den) => {
            let n = layout(num, px)?;
            let d = layout(den, px)?;
            let pad = (px / 7.0).round().max(1.0) as i32;
            let gap = pad;
            let thickness = (px / 14.0).round().max(1.0) as i32;
            let width = n.width.max(d.width) + 2 * pad;
            let bar_top = -(gh / 2) - thickness / 2;
            // Numerator sits above the bar; denominator hangs below it.
            let num_base = bar_top - gap - n.descent;
            let den_base = bar_top + thickness + gap + d.ascent;
            let mut out = LayoutBox {
                width,
                ascent: -(num_base - n.ascent),
                descent: den_base + d.descent,
                items: vec![Item::Rule { x: 0, y: bar_top, w: width, h: thickness }],
            };
            let (nx, dx) = ((width - n.width) / 2, (width - d.width) / 2);
            out.place(n, nx, num_base);
            out.place(d, dx, den_base);
            out
        }
    })
}

/// Renders `expr` with base glyphs `glyph_px` pixels tall, crops to the ink
/// and adds a [`MARGIN`]-pixel border.
pub fn rasterize(expr: &ExprNode, glyph_px: usize) -> Result<Bitmap> {
    let b = layout(expr, glyph_px as f64)?;
    let (w, h) = (b.width.max(1) as usize, (b.ascent + b.descent).max(1) as usize);
    let mut canvas = Bitmap::blank(w, h);
    let ox = 0;
    let oy = b.ascent;
    for item in &b.items {
        match *item {
            Item::Glyph { symbol, x, y, w: gw, h: gh } => {
                let dots = glyphs::render(symbol, gw as usize, gh as usize);
                for yy in 0..gh {
                    for xx in 0..gw {
                        if dots[(yy * gw + xx) as usize] {
                            canvas.set((ox + x + xx) as usize, (oy + y + yy) as usize, INK);
                        }
                    }
                }
            }
            Item::Rule { x, y, w: rw, h: rh } => {
                for yy in 0..rh {
                    for xx in 0..rw {
                        canvas.set((ox + x + xx) as usize, (oy + y + yy) as usize, INK);
                    }
                }
            }
        }
    }
    let cropped = match canvas.ink_bounds() {
        Some((x0, y0, x1, y1)) => canvas.crop(x0, y0, x1, y1),
        None => Bitmap::blank(0, 0),
    };
    Ok(cropped.embed(cropped.width + 2 * MARGIN, cropped.height + 2 * MARGIN, MARGIN, MARGIN))
}

/// Resolves a token to its glyph, for callers that build trees by hand.
pub fn symbol(token: &str) -> Result<ExprNode> {
    glyphs::symbol_index(token).map(ExprNode::Symbol).ok_or_else(|| Error::UnknownGlyph(token.to_string()))
}
