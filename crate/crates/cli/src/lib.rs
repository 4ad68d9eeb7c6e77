// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats and rendering behind the `dave` command.

pub mod manifest;
pub mod mapfile;
pub mod ppm;
pub mod render;
