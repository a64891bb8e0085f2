pub mod corpus;
pub mod evaluation;
pub mod exec;
pub mod llm;
pub mod pipeline;
pub mod planner;
pub mod reasoning;
pub mod retrieval_tree;
pub mod sim;
pub mod synthesis;
pub mod text;
