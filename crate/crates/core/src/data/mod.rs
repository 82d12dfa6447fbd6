//! Corpus ingestion, tokenization, word alignment and synthetic data.

mod conllu;
mod corpus;
mod grammar;
mod reading;
mod repeated;
mod tokenizer;

pub use conllu::{load_conllu, parse_conllu, DepAnnotatedText, DepArc, Head, Sentence};
pub use corpus::{
    load_pretokenized, save_pretokenized, split_documents, PretokenizedManifest, TrainingCorpus, Window,
};
pub use grammar::{
    generate_sentence, generate_synthetic_corpus, grammar_vocabulary, SyntheticCorpus, SyntheticCorpusConfig,
};
pub use reading::{
    aggregate_word_surprisals, align_word_features, AlignedFeatures, FeatureRow, FrequencyTable, ReadingRow,
    ReadingTable, SpilloverMode,
};
pub use repeated::{generate_repeated_sequences, pm_map, RepeatedSequence, SyntheticSpec};
pub use tokenizer::{check_partition, Piece, TokenizedCorpus, Tokenizer, VocabPolicy, SEP_TOKEN, UNK_TOKEN};
