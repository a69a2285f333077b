//! Tokenization, vocabularies, the synthetic expression corpus and bucketed
//! image padding.

mod bitmap;
mod bucket;
mod corpus;
mod expr;
mod glyphs;
mod raster;
mod tokenize;
mod vocab;

pub use bitmap::{Bitmap, BACKGROUND, INK};
pub use bucket::{bucket_and_pad, select_bucket, Bucket, DEFAULT_BUCKETS, LARGE_BUCKETS};
pub(crate) use corpus::mix_seed;
pub use corpus::{
    build_corpus, load_corpus, load_corpus_with_vocab, CorpusOptions, CorpusSummary, Dataset, Sample, SPLITS,
};
pub use expr::{generate_expr, ExprNode, GrammarConfig};
pub use glyphs::{symbol_index, SYMBOLS};
pub use raster::{rasterize, symbol, DEFAULT_GLYPH_PX, MARGIN};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, END_ID, PAD_ID, RESERVED, START_ID, UNK_ID};
