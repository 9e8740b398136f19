//! Holds the workspace acceptance suite (`cargo test -p qm-verify --test acceptance`).
//! The suite shares its corpus helpers with the `qm-core` integration tests.
