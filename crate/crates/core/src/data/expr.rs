use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::glyphs::SYMBOLS;

/// Layout tree of a synthetic expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExprNode {
    /// Index into [`SYMBOLS`].
    Symbol(usize),
    Sequence(Vec<ExprNode>),
    Superscript(Box<ExprNode>, Box<ExprNode>),
    Subscript(Box<ExprNode>, Box<ExprNode>),
    Fraction(Box<ExprNode>, Box<ExprNode>),
}

impl ExprNode {
    pub fn depth(&self) -> usize {
        match self {
            ExprNode::Symbol(_) => 0,
            ExprNode::Sequence(items) => items.iter().map(ExprNode::depth).max().unwrap_or(0),
            ExprNode::Superscript(a, b) | ExprNode::Subscript(a, b) | ExprNode::Fraction(a, b) => {
                1 + a.depth().max(b.depth())
            }
        }
    }

    /// Canonical token serialization: fractions as `\frac{..}{..}`, scripts as
    /// `^{..}` / `_{..}` after their base.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.write_tokens(&mut out);
        out
    }

    fn write_tokens(&self, out: &mut Vec<String>) {
        let braced = |node: &ExprNode, out: &mut Vec<String>| {
            out.push("{".into());
            node.write_tokens(out);
            out.push("}".into());
        };
        match self {
            ExprNode::Symbol(s) => out.push(SYMBOLS[*s].to_string()),
            ExprNode::Sequence(items) => items.iter().for_each(|n| n.write_tokens(out)),
            ExprNode::Superscript(base, exp) => {
                base.write_tokens(out);
                out.push("^".into());
                braced(exp, out);
            }
            ExprNode::Subscript(base, sub) => {
                base.write_tokens(out);
                out.push("_".into());
                braced(sub, out);
            }
            ExprNode::Fraction(num, den) => {
                out.push(r"\frac".into());
                braced(num, out);
                braced(den, out);
            }
        }
    }
}

/// Production probabilities and size bounds of the expression generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    /// Maximum nesting of fractions and scripts; 0 yields a single symbol.
    pub max_depth: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Length bound for sequences inside a fraction or script.
    pub inner_max_items: usize,
    pub p_fraction: f64,
    pub p_superscript: f64,
    pub p_subscript: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            max_depth: 2,
            min_items: 2,
            max_items: 7,
            inner_max_items: 3,
            p_fraction: 0.15,
            p_superscript: 0.15,
            p_subscript: 0.12,
        }
    }
}

/// Samples a tree and its canonical tokens from a seed.
pub fn generate_expr(seed: u64, grammar: &GrammarConfig) -> (ExprNode, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node = sample_tree(&mut rng, grammar);
    let tokens = node.tokens();
    (node, tokens)
}

pub(crate) fn sample_tree<R: Rng>(rng: &mut R, g: &GrammarConfig) -> ExprNode {
    if g.max_depth == 0 {
        return symbol(rng);
    }
    let n = rng.random_range(g.min_items.max(1)..=g.max_items.max(g.min_items.max(1)));
    ExprNode::Sequence((0..n).map(|_| sample_item(rng, g, g.max_depth)).collect())
}

fn symbol<R: Rng>(rng: &mut R) -> ExprNode {
    ExprNode::Symbol(rng.random_range(0..SYMBOLS.len()))
}

fn sample_item<R: Rng>(rng: &mut R, g: &GrammarConfig, depth: usize) -> ExprNode {
    if depth == 0 {
        return symbol(rng);
    }
    let r: f64 = rng.random();
    if r < g.p_fraction {
        let num = sample_inner(rng, g, depth - 1);
        let den = sample_inner(rng, g, depth - 1);
        ExprNode::Fraction(Box::new(num), Box::new(den))
    } else if r < g.p_fraction + g.p_superscript {
        let base = symbol(rng);
        ExprNode::Superscript(Box::new(base), Box::new(sample_inner(rng, g, depth - 1)))
    } else if r < g.p_fraction + g.p_superscript + g.p_subscript {
        let base = symbol(rng);
        ExprNode::Subscript(Box::new(base), Box::new(sample_inner(rng, g, depth - 1)))
    } else {
        symbol(rng)
    }
}

fn sample_inner<R: Rng>(rng: &mut R, g: &GrammarConfig, depth: usize) -> ExprNode {
    let n = rng.random_range(1..=g.inner_max_items.max(1));
    ExprNode::Sequence((0..n).map(|_| sample_item(rng, g, depth)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize::{detokenize, tokenize};

    #[test]
    fn depth_zero_is_one_symbol() {
        let g = GrammarConfig { max_depth: 0, ..Default::default() };
        for seed in 0..20 {
            let (node, tokens) = generate_expr(seed, &g);
            assert!(matches!(node, ExprNode::Symbol(_)));
            assert_eq!(tokens.len(), 1);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let g = GrammarConfig::default();
        assert_eq!(generate_expr(42, &g), generate_expr(42, &g));
        assert_ne!(generate_expr(42, &g).1, generate_expr(43, &g).1);
    }

    #[test]
    fn depth_bounded_and_round_trips() {
        let g = GrammarConfig::default();
        for seed in 0..500 {
            let (node, tokens) = generate_expr(seed, &g);
            assert!(node.depth() <= g.max_depth);
            assert_eq!(tokenize(&detokenize(&tokens)).unwrap(), tokens);
        }
    }

    #[test]
    fn serialization_forms() {
        let x = || Box::new(ExprNode::Symbol(SYMBOLS.iter().position(|s| *s == "x").unwrap()));
        let two = || Box::new(ExprNode::Symbol(SYMBOLS.iter().position(|s| *s == "2").unwrap()));
        assert_eq!(ExprNode::Superscript(x(), two()).tokens(), ["x", "^", "{", "2", "}"]);
        assert_eq!(ExprNode::Subscript(x(), two()).tokens(), ["x", "_", "{", "2", "}"]);
        assert_eq!(ExprNode::Fraction(x(), two()).tokens(), [r"\frac", "{", "x", "}", "{", "2", "}"]);
    }
}
