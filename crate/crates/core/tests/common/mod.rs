#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dialogen::dataset::{read_dataset, ConversationRecord};
use dialogen::schema::{read_catalog, read_pools, SchemaCatalog, SlotValuePool};

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn catalog() -> Arc<SchemaCatalog> {
    Arc::new(read_catalog(&root().join("assets/catalog/catalog.jsonl")).unwrap())
}

pub fn pools() -> Vec<SlotValuePool> {
    read_pools(&root().join("assets/catalog/pools.jsonl")).unwrap()
}

pub fn records(name: &str) -> Vec<ConversationRecord> {
    read_dataset(&fixture(name)).unwrap()
}
