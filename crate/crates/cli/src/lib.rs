//! Run bookkeeping shared by the `vitp` binary and its tests.

pub mod manifest;
