pub mod offline;
pub mod reports;
pub mod serve;
pub mod sim;
