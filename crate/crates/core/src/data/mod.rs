//! The (image, query, response) data model, files and prompt text.

mod io;
mod prompt;
mod types;

pub use io::{
    load_dataset, load_library, load_queries, save_dataset, save_library, save_queries, DATASET_FORMAT,
    FORMAT_VERSION, LIBRARY_FORMAT, QUERIES_FORMAT,
};
pub use prompt::{assemble_prompt, InstPosition};
pub use types::{
    inverse_permutation, permute_sequence, DemoLibrary, Demonstration, IclSequence, Meta, QuerySample,
    SequenceDataset,
};
