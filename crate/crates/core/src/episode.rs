use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub speaker: String,
    pub text: String,
}

/// One dialogue example: context turns plus whatever references the source
/// dataset provides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEpisode {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personas: Option<Vec<Persona>>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
}

impl DialogueEpisode {
    pub fn new(example_id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            example_id: example_id.into(),
            topic: None,
            personas: None,
            turns,
            gold_knowledge: None,
            gold_response: None,
            gold_answers: None,
        }
    }

    pub fn with_topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn with_gold_knowledge(mut self, knowledge: impl Into<String>) -> Self {
        self.gold_knowledge = Some(knowledge.into());
        self
    }

    pub fn with_gold_response(mut self, response: impl Into<String>) -> Self {
        self.gold_response = Some(response.into());
        self
    }

    pub fn with_gold_answers<I, S>(mut self, answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.gold_answers = Some(answers.into_iter().map(Into::into).collect());
        self
    }

    pub fn has_references(&self) -> bool {
        self.gold_knowledge.is_some() || self.gold_response.is_some() || self.gold_answers.is_some()
    }
}
