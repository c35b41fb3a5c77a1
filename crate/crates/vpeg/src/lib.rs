pub use vpeg_core as core;
