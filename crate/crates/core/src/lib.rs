pub mod cli;
pub mod estimators;
pub mod lasso;
pub mod nodewise;
pub mod numkit;
pub mod orthomoments;
pub mod penalty;
pub mod simkit;
