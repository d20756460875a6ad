pub use vergepipe_core as core;
