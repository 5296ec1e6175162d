#![allow(dead_code)]

pub mod random_logs;
