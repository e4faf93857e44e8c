//! The fixed entity-framing role hierarchy: three main roles, 22 fine-grained
//! roles, and the definition texts shared with the model.

use std::collections::HashMap;
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

/// Coarse framing label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MainRole {
    Protagonist,
    Antagonist,
    Innocent,
}

impl MainRole {
    pub const ALL: [MainRole; 3] = [
        MainRole::Protagonist,
        MainRole::Antagonist,
        MainRole::Innocent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MainRole::Protagonist => "Protagonist",
            MainRole::Antagonist => "Antagonist",
            MainRole::Innocent => "Innocent",
        }
    }
}

impl fmt::Display for MainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fine-grained framing label. Each value belongs to exactly one [`MainRole`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineRole {
    // Protagonist
    Guardian,
    Martyr,
    Peacemaker,
    Rebel,
    Underdog,
    Virtuous,
    // Antagonist
    Instigator,
    Conspirator,
    Tyrant,
    ForeignAdversary,
    Traitor,
    Spy,
    Saboteur,
    Corrupt,
    Incompetent,
    Terrorist,
    Deceiver,
    Bigot,
    // Innocent
    Forgotten,
    Exploited,
    Victim,
    Scapegoat,
}

impl FineRole {
    pub const ALL: [FineRole; 22] = [
        FineRole::Guardian,
        FineRole::Martyr,
        FineRole::Peacemaker,
        FineRole::Rebel,
        FineRole::Underdog,
        FineRole::Virtuous,
        FineRole::Instigator,
        FineRole::Conspirator,
        FineRole::Tyrant,
        FineRole::ForeignAdversary,
        FineRole::Traitor,
        FineRole::Spy,
        FineRole::Saboteur,
        FineRole::Corrupt,
        FineRole::Incompetent,
        FineRole::Terrorist,
        FineRole::Deceiver,
        FineRole::Bigot,
        FineRole::Forgotten,
        FineRole::Exploited,
        FineRole::Victim,
        FineRole::Scapegoat,
    ];

    /// Canonical display name (singular, title case).
    pub fn name(self) -> &'static str {
        match self {
            FineRole::Guardian => "Guardian",
            FineRole::Martyr => "Martyr",
            FineRole::Peacemaker => "Peacemaker",
            FineRole::Rebel => "Rebel",
            FineRole::Underdog => "Underdog",
            FineRole::Virtuous => "Virtuous",
            FineRole::Instigator => "Instigator",
            FineRole::Conspirator => "Conspirator",
            FineRole::Tyrant => "Tyrant",
            FineRole::ForeignAdversary => "Foreign Adversary",
            FineRole::Traitor => "Traitor",
            FineRole::Spy => "Spy",
            FineRole::Saboteur => "Saboteur",
            FineRole::Corrupt => "Corrupt",
            FineRole::Incompetent => "Incompetent",
            FineRole::Terrorist => "Terrorist",
            FineRole::Deceiver => "Deceiver",
            FineRole::Bigot => "Bigot",
            FineRole::Forgotten => "Forgotten",
            FineRole::Exploited => "Exploited",
            FineRole::Victim => "Victim",
            FineRole::Scapegoat => "Scapegoat",
        }
    }

    pub fn parent(self) -> MainRole {
        match self {
            FineRole::Guardian
            | FineRole::Martyr
            | FineRole::Peacemaker
            | FineRole::Rebel
            | FineRole::Underdog
            | FineRole::Virtuous => MainRole::Protagonist,
            FineRole::Instigator
            | FineRole::Conspirator
            | FineRole::Tyrant
            | FineRole::ForeignAdversary
            | FineRole::Traitor
            | FineRole::Spy
            | FineRole::Saboteur
            | FineRole::Corrupt
            | FineRole::Incompetent
            | FineRole::Terrorist
            | FineRole::Deceiver
            | FineRole::Bigot => MainRole::Antagonist,
            FineRole::Forgotten | FineRole::Exploited | FineRole::Victim | FineRole::Scapegoat => {
                MainRole::Innocent
            }
        }
    }
}

impl fmt::Display for FineRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("unknown main role label {0:?}")]
    UnknownMainRole(String),
    #[error("unknown fine-grained role label {0:?}")]
    UnknownFineRole(String),
    #[error("fine-grained role {fine} is not a child of {main}")]
    NotAChild { main: MainRole, fine: FineRole },
}

/// Case-insensitive, whitespace-trimmed main role lookup.
pub fn parse_main_role(s: &str) -> Result<MainRole, LabelError> {
    let needle = s.trim();
    MainRole::ALL
        .into_iter()
        .find(|role| role.name().eq_ignore_ascii_case(needle))
        .ok_or_else(|| LabelError::UnknownMainRole(s.to_string()))
}

/// Case-insensitive, whitespace-trimmed fine role lookup. Accepts the plural
/// "Guardians" used in the definition texts as an alias for Guardian.
pub fn parse_fine_role(s: &str) -> Result<FineRole, LabelError> {
    let needle = s.trim();
    if needle.eq_ignore_ascii_case("Guardians") {
        return Ok(FineRole::Guardian);
    }
    FineRole::ALL
        .into_iter()
        .find(|role| role.name().eq_ignore_ascii_case(needle))
        .ok_or_else(|| LabelError::UnknownFineRole(s.to_string()))
}

/// Which definition texts to include in a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefinitionLevel {
    MainOnly,
    MainAndFine,
}

const DEFINITIONS_MAIN: &str = include_str!("../prompts/definitions_main.txt");
const DEFINITIONS_PROTAGONIST: &str = include_str!("../prompts/definitions_protagonist.txt");
const DEFINITIONS_ANTAGONIST: &str = include_str!("../prompts/definitions_antagonist.txt");
const DEFINITIONS_INNOCENT: &str = include_str!("../prompts/definitions_innocent.txt");

/// (name, content) of every embedded definition resource, for provenance.
pub fn definition_resources() -> [(&'static str, &'static str); 4] {
    [
        ("definitions_main.txt", DEFINITIONS_MAIN),
        ("definitions_protagonist.txt", DEFINITIONS_PROTAGONIST),
        ("definitions_antagonist.txt", DEFINITIONS_ANTAGONIST),
        ("definitions_innocent.txt", DEFINITIONS_INNOCENT),
    ]
}

/// The immutable role hierarchy plus the definition texts used in prompts.
///
/// The in-prompt definition wording keeps the original task phrasing verbatim
/// (including the plural "Guardians" header), while canonical display names
/// stay singular.
pub struct Taxonomy {
    main_definitions: HashMap<MainRole, String>,
    fine_definitions: HashMap<FineRole, String>,
    fine_definition_order: HashMap<MainRole, Vec<FineRole>>,
}

static SHARED: LazyLock<Taxonomy> = LazyLock::new(Taxonomy::new);

impl Taxonomy {
    pub fn new() -> Self {
        let mut main_definitions = HashMap::new();
        for line in DEFINITIONS_MAIN.lines() {
            let name = line
                .split(':')
                .next()
                .expect("definition line has a role prefix");
            let role = parse_main_role(name).expect("main definition resource names a known role");
            main_definitions.insert(role, line.trim_end().to_string());
        }
        assert_eq!(main_definitions.len(), 3, "one definition per main role");

        let mut fine_definitions = HashMap::new();
        let mut fine_definition_order = HashMap::new();
        let blocks = [
            (MainRole::Protagonist, DEFINITIONS_PROTAGONIST),
            (MainRole::Antagonist, DEFINITIONS_ANTAGONIST),
            (MainRole::Innocent, DEFINITIONS_INNOCENT),
        ];
        for (main, block) in blocks {
            let mut order = Vec::new();
            for line in block.lines() {
                let name = line
                    .split(':')
                    .next()
                    .expect("definition line has a role prefix");
                let role =
                    parse_fine_role(name).expect("fine definition resource names a known role");
                assert_eq!(
                    role.parent(),
                    main,
                    "definition listed under the wrong main role"
                );
                fine_definitions.insert(role, line.trim_end().to_string());
                order.push(role);
            }
            fine_definition_order.insert(main, order);
        }
        assert_eq!(fine_definitions.len(), 22, "one definition per fine role");

        Taxonomy {
            main_definitions,
            fine_definitions,
            fine_definition_order,
        }
    }

    /// Globally shared instance; the hierarchy is fixed, so one is enough.
    pub fn shared() -> &'static Taxonomy {
        &SHARED
    }

    /// Children of a main role, in canonical listing order.
    pub fn fine_roles_of(&self, main: MainRole) -> Vec<FineRole> {
        FineRole::ALL
            .into_iter()
            .filter(|r| r.parent() == main)
            .collect()
    }

    pub fn parent(&self, fine: FineRole) -> MainRole {
        fine.parent()
    }

    pub fn main_definition(&self, main: MainRole) -> &str {
        &self.main_definitions[&main]
    }

    pub fn fine_definition(&self, fine: FineRole) -> &str {
        &self.fine_definitions[&fine]
    }

    /// One-line hierarchy listing for the `{taxonomy}` prompt slot, optionally
    /// restricted to a single main role for the second multi-step stage.
    pub fn listing(&self, restrict_to: Option<MainRole>) -> String {
        let mains: Vec<MainRole> = match restrict_to {
            Some(m) => vec![m],
            None => MainRole::ALL.to_vec(),
        };
        mains
            .into_iter()
            .map(|m| {
                let children: Vec<&str> = self
                    .fine_roles_of(m)
                    .into_iter()
                    .map(|r| r.name())
                    .collect();
                format!("{}: {}.", m.name(), children.join(", "))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Definition texts for the `{label_definitions}` prompt slot, one per line.
    ///
    /// With `restrict_to` set, only that main role's fine-grained definitions
    /// are emitted (the second multi-step stage already knows the main role).
    pub fn definitions_block(
        &self,
        level: DefinitionLevel,
        restrict_to: Option<MainRole>,
    ) -> String {
        let mut lines: Vec<&str> = Vec::new();
        match (level, restrict_to) {
            (DefinitionLevel::MainOnly, None) => {
                for m in MainRole::ALL {
                    lines.push(self.main_definition(m));
                }
            }
            (DefinitionLevel::MainOnly, Some(m)) => lines.push(self.main_definition(m)),
            (DefinitionLevel::MainAndFine, None) => {
                for m in MainRole::ALL {
                    lines.push(self.main_definition(m));
                }
                for m in MainRole::ALL {
                    for r in &self.fine_definition_order[&m] {
                        lines.push(self.fine_definition(*r));
                    }
                }
            }
            (DefinitionLevel::MainAndFine, Some(m)) => {
                for r in &self.fine_definition_order[&m] {
                    lines.push(self.fine_definition(*r));
                }
            }
        }
        lines.join("\n")
    }

    /// JSON view of the hierarchy and definitions, for inspection.
    pub fn to_json(&self) -> serde_json::Value {
        let roles: Vec<serde_json::Value> = MainRole::ALL
            .into_iter()
            .map(|m| {
                let fine: Vec<serde_json::Value> = self
                    .fine_roles_of(m)
                    .into_iter()
                    .map(|r| {
                        serde_json::json!({
                            "name": r.name(),
                            "definition": self.fine_definition(r),
                        })
                    })
                    .collect();
                serde_json::json!({
                    "name": m.name(),
                    "definition": self.main_definition(m),
                    "fine_roles": fine,
                })
            })
            .collect();
        serde_json::json!({ "main_roles": roles })
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::new()
    }
}
