//! Grammar-constrained AST decoder.

mod grammar;
mod model;

pub use grammar::{actions_to_ast, ast_to_actions, Action, Frontier, NonTerminal, Production, SqlGrammar, Symbol};
pub use model::*;
