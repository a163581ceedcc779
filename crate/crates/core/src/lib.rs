pub mod data;
pub mod digest;
pub mod prompt;
pub mod sim;
pub mod oracle;
pub mod knowledge;
pub mod report;
