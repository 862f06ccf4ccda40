pub mod autodiff;
pub mod decoder;
pub mod aware3d;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod losses;
pub mod params;
pub mod renderer;
pub mod teacher;
pub mod trainer;
pub mod triplane;

pub use error::{Error, Result};
