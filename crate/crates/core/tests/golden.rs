//! Prompt renderings pinned to committed files. Set `UPDATE_GOLDEN=1` to rewrite them.

mod common;

use std::fs;

#[test]
fn prompts_match_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let dir = common::golden_dir();
    for (name, text) in common::golden_prompts() {
        let path = dir.join(name);
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &text).unwrap();
            continue;
        }
        let expected =
            fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1", path.display()));
        assert!(expected == text, "{name} differs from its golden file");
    }
}

#[test]
fn golden_prompts_are_stable_within_a_run() {
    assert_eq!(common::golden_prompts(), common::golden_prompts());
}
