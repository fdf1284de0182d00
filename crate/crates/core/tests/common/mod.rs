#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use mam_core::backends::{Backends, ChatBackend, FixtureSearch, ScriptedChat};
use mam_core::evaluation::load_dataset;
use mam_core::MedicalCase;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn cases() -> Vec<MedicalCase> {
    load_dataset(&fixtures().join("dataset.jsonl")).expect("fixture dataset loads")
}

pub fn case(id: &str) -> MedicalCase {
    cases().into_iter().find(|c| c.id == id).expect("fixture case")
}

pub fn script() -> Arc<ScriptedChat> {
    Arc::new(ScriptedChat::from_file(&fixtures().join("chat_script.json")).expect("chat script"))
}

pub fn backends() -> Backends {
    backends_with(script())
}

pub fn backends_with(chat: Arc<dyn ChatBackend>) -> Backends {
    let search = FixtureSearch::from_file(&fixtures().join("search_fixture.json")).expect("search fixture");
    Backends::new(chat, Arc::new(search)).with_media_root(fixtures())
}
