//! Runs the guide's code blocks as doc-tests.
//!
//! mdbook cannot link snippets against workspace crates, so each chapter is
//! included as the docs of an empty module and `cargo test --doc` compiles
//! and runs every block.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}

#[doc = include_str!("../../../book/src/components.md")]
pub mod components {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/switching.md")]
pub mod switching {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[cfg(test)]
mod tests {
    use std::path::Path;

    fn book_dir() -> &'static Path {
        Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../book/src"))
    }

    /// Every chapter listed in SUMMARY.md is included above, and vice versa.
    #[test]
    fn every_chapter_is_tested() {
        let summary = std::fs::read_to_string(book_dir().join("SUMMARY.md")).unwrap();
        let lib = include_str!("lib.rs");
        let mut chapters = 0;
        for part in summary.split("](").skip(1) {
            let file = part.split(')').next().unwrap();
            assert!(book_dir().join(file).exists(), "{file} missing");
            assert!(lib.contains(&format!("book/src/{file}\")")), "{file} is not included");
            chapters += 1;
        }
        assert_eq!(chapters, 8);
    }

    fn first_rust_block(text: &str) -> &str {
        let start = text.find("```rust\n").expect("a rust block") + "```rust\n".len();
        let end = start + text[start..].find("```").expect("closing fence");
        &text[start..end]
    }

    /// The crate-level example in the library docs is the quick-start block.
    #[test]
    fn crate_docs_match_quickstart() {
        let quickstart = std::fs::read_to_string(book_dir().join("quickstart.md")).unwrap();
        let lib_rs = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/src/lib.rs")).unwrap();
        let crate_docs: String = lib_rs
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.strip_prefix("//! ").unwrap_or(l.trim_start_matches("//!")))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(first_rust_block(&crate_docs), first_rust_block(&quickstart));
    }
}
