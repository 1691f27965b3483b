pub mod chunk;
pub mod recurrence;
pub mod sampling;
pub mod tensor;
pub mod theory;
pub mod autodiff;
pub mod tasks;
pub mod bench;
