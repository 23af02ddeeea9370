//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

pub mod event_oracle;
pub mod scenarios;
pub mod shadow_cache;
