use std::collections::HashSet;

use crate::data::Adjacency;
use crate::error::{Error, Result};

const BASE: &str = "This region represents the";
const NEIGHBORS: &str = "Neighboring structures include";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPrompt {
    pub name: String,
    pub base: String,
    pub augmented: String,
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: Vec<ClassPrompt>,
    adjacency: Adjacency,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrompt> {
        self.prompts.get(class)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassPrompt> {
        self.prompts.iter()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.prompts.iter().map(|p| p.name.clone()).collect()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }
}

/// Base and neighbor-augmented prompt for every class; class 0 is background
/// and never receives a neighbor clause.
pub fn build_prompts(class_names: &[String], adjacency: &Adjacency) -> Result<PromptSet> {
    if class_names.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if adjacency.num_classes() != class_names.len() {
        return Err(Error::ClassCountMismatch {
            expected: class_names.len(),
            found: adjacency.num_classes(),
        });
    }
    let mut seen = HashSet::new();
    for name in class_names {
        if name.trim().is_empty() {
            return Err(Error::InvalidArgument("empty class name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateClassName(name.clone()));
        }
    }
    let prompts = class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let base = format!("{BASE} {name}.");
            let neighbors: Vec<&str> = adjacency
                .neighbors(i)
                .iter()
                .filter(|&&j| j != 0)
                .map(|&j| class_names[j].as_str())
                .collect();
            let augmented = if i == 0 || neighbors.is_empty() {
                base.clone()
            } else {
                format!("{base} {NEIGHBORS} {}.", neighbors.join(", "))
            };
            ClassPrompt {
                name: name.clone(),
                base,
                augmented,
            }
        })
        .collect();
    Ok(PromptSet {
        prompts,
        adjacency: adjacency.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn neighbor_clause_lists_in_class_order() {
        let n = names(&["background", "liver", "right kidney", "stomach", "spleen"]);
        let adj = Adjacency::from_pairs(5, &[[1, 3], [1, 2], [3, 4]]).unwrap();
        let p = build_prompts(&n, &adj).unwrap();
        assert_eq!(
            p.get(1).unwrap().augmented,
            "This region represents the liver. Neighboring structures include right kidney, stomach."
        );
        assert_eq!(p.get(0).unwrap().base, "This region represents the background.");
        assert_eq!(p.get(0).unwrap().augmented, p.get(0).unwrap().base);
    }

    #[test]
    fn isolated_class_keeps_base_prompt() {
        let adj = Adjacency::empty(2);
        let p = build_prompts(&names(&["background", "liver"]), &adj).unwrap();
        assert_eq!(p.get(1).unwrap().augmented, p.get(1).unwrap().base);
    }

    #[test]
    fn duplicate_names_rejected() {
        let adj = Adjacency::empty(3);
        assert!(matches!(
            build_prompts(&names(&["background", "liver", "liver"]), &adj),
            Err(Error::DuplicateClassName(_))
        ));
    }
}
