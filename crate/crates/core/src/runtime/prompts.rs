//! Fixed prompt templates. Every provider call made by the runtime is built here.

use crate::model::{render_value, AgentDef, Value};
use crate::provider::{ChatMessage, Role};

use super::state::{Speaker, TranscriptEntry};

/// Template identifiers, as recorded in the `purpose` field of `llm_call` events.
pub const TEMPLATE_IDS: &[&str] = &[
    "nl_judge",
    "nl_classify",
    "select",
    "first_success_judge",
    "best_of_n_judge",
    "fallback",
    "kb_synthesis",
    "guardrail",
    "agent",
    "exit_judge",
];

pub const NL_JUDGE_SYSTEM: &str = "You judge a condition against a conversation. Answer Yes or No only.";
pub const NL_CLASSIFY_SYSTEM: &str = "You classify the user's latest message against numbered conditions. \
Reply with the number of the first condition that holds, or 0 if none holds.";
pub const SELECT_SYSTEM: &str = "You route a customer-service conversation to exactly one agent. \
Reply with the agent name only.";
pub const FIRST_SUCCESS_JUDGE_SYSTEM: &str = "You check whether a candidate response satisfactorily answers \
the user's latest message, given the agents available and the conversation so far. Answer Yes or No only.";
pub const BEST_OF_N_JUDGE_SYSTEM: &str = "You compare candidate responses to the user's latest message, \
given the agents available and the conversation so far. Reply with the number of the best candidate only.";
pub const FALLBACK_SYSTEM: &str =
    "The assistant could not handle the user's last message. Reply to the user following this policy:";
pub const KB_SYSTEM: &str = "Answer the user's question using only the passages below. Keep the answer short.";
pub const GUARDRAIL_FORMAT: &str =
    "Start your reply with a line reading exactly `GUARDRAIL: PASS` or `GUARDRAIL: BLOCK`.";
pub const DEBUG_PROMPT: &str = "Is there any infinite loop in the logic of this chatbot? If so, please point it out. Otherwise, simply reply \"No.\"";
pub const BUILTIN_APOLOGY: &str = "Sorry, I can't help with that right now.";
pub const DEFAULT_REFUSAL: &str = "Sorry, I can only help with questions about our services.";

pub const JUDGE_WINDOW: usize = 6;
pub const AGENT_WINDOW: usize = 20;

pub fn render_turns(transcript: &[TranscriptEntry], last: usize) -> String {
    let start = transcript.len().saturating_sub(last);
    transcript[start..]
        .iter()
        .map(|t| match t.speaker {
            Speaker::User => format!("User: {}", t.text),
            Speaker::Bot => format!("Bot: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn chat_window(transcript: &[TranscriptEntry], last: usize) -> Vec<ChatMessage> {
    let start = transcript.len().saturating_sub(last);
    transcript[start..]
        .iter()
        .map(|t| {
            ChatMessage::new(
                match t.speaker {
                    Speaker::User => Role::User,
                    Speaker::Bot => Role::Assistant,
                },
                t.text.clone(),
            )
        })
        .collect()
}

pub fn last_user_text(transcript: &[TranscriptEntry]) -> &str {
    transcript
        .iter()
        .rev()
        .find(|t| t.speaker == Speaker::User)
        .map(|t| t.text.as_str())
        .unwrap_or("")
}

pub fn nl_judge(transcript: &[TranscriptEntry], condition: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(NL_JUDGE_SYSTEM),
        ChatMessage::user(format!(
            "{}\nCondition: {condition}",
            render_turns(transcript, JUDGE_WINDOW)
        )),
    ]
}

pub fn nl_classify(transcript: &[TranscriptEntry], conditions: &[&str]) -> Vec<ChatMessage> {
    let listed: Vec<String> = conditions
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", i + 1))
        .collect();
    let mut messages = vec![ChatMessage::system(format!("{NL_CLASSIFY_SYSTEM}\n{}", listed.join("\n")))];
    messages.extend(chat_window(transcript, JUDGE_WINDOW));
    messages
}

fn agent_list(agents: &[&AgentDef]) -> String {
    agents
        .iter()
        .map(|a| format!("- {}: {}", a.name, a.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn ensemble_context(ensemble: &AgentDef, policy: Option<&str>, candidates: &[&AgentDef]) -> String {
    let mut s = format!("Agents of {}:\n{}", ensemble.name, agent_list(candidates));
    if let Some(p) = policy {
        s.push_str(&format!("\nPolicy: {p}"));
    }
    s
}

pub fn select(
    ensemble: &AgentDef,
    policy: Option<&str>,
    candidates: &[&AgentDef],
    transcript: &[TranscriptEntry],
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(format!(
        "{SELECT_SYSTEM}\n{}",
        ensemble_context(ensemble, policy, candidates)
    ))];
    messages.extend(chat_window(transcript, JUDGE_WINDOW));
    messages
}

pub fn first_success_judge(
    ensemble: &AgentDef,
    policy: Option<&str>,
    candidates: &[&AgentDef],
    transcript: &[TranscriptEntry],
    candidate: &str,
    response: &str,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(format!(
            "{FIRST_SUCCESS_JUDGE_SYSTEM}\n{}",
            ensemble_context(ensemble, policy, candidates)
        )),
        ChatMessage::user(format!(
            "{}\nCandidate ({candidate}): {response}",
            render_turns(transcript, JUDGE_WINDOW)
        )),
    ]
}

pub fn best_of_n_judge(
    ensemble: &AgentDef,
    policy: Option<&str>,
    candidates: &[&AgentDef],
    transcript: &[TranscriptEntry],
    responses: &[(String, String)],
) -> Vec<ChatMessage> {
    let listed: Vec<String> = responses
        .iter()
        .enumerate()
        .map(|(i, (name, text))| format!("Candidate {} ({name}): {text}", i + 1))
        .collect();
    vec![
        ChatMessage::system(format!(
            "{BEST_OF_N_JUDGE_SYSTEM}\n{}",
            ensemble_context(ensemble, policy, candidates)
        )),
        ChatMessage::user(format!("{}\n{}", render_turns(transcript, JUDGE_WINDOW), listed.join("\n"))),
    ]
}

pub fn fallback(policy: &str, transcript: &[TranscriptEntry]) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(format!("{FALLBACK_SYSTEM}\n{policy}"))];
    messages.extend(chat_window(transcript, JUDGE_WINDOW));
    messages
}

pub fn kb_synthesis(passages: &[(String, String)], question: &str) -> Vec<ChatMessage> {
    let body: Vec<String> = passages
        .iter()
        .map(|(source, text)| format!("[{source}]\n{text}"))
        .collect();
    vec![
        ChatMessage::system(format!("{KB_SYSTEM}\n\n{}", body.join("\n\n"))),
        ChatMessage::user(question),
    ]
}

/// System prompt of an LLM agent.
pub fn agent_system(
    agent: &AgentDef,
    prompt: &str,
    args: &[(String, Value)],
    peers: Option<&[&AgentDef]>,
    guardrail: bool,
) -> String {
    let mut s = String::new();
    if !agent.description().is_empty() {
        s.push_str(agent.description());
        s.push_str("\n\n");
    }
    s.push_str(prompt.trim_end());
    if !args.is_empty() {
        let listed: Vec<String> = args
            .iter()
            .map(|(k, v)| match v {
                Value::Null => format!("{k} = (unset)"),
                v => format!("{k} = {}", render_value(v)),
            })
            .collect();
        s.push_str(&format!(
            "\n\nArguments: {}\nTo record an argument, write <<set name=value>>.",
            listed.join("; ")
        ));
    }
    if guardrail {
        s.push_str(&format!("\n\n{GUARDRAIL_FORMAT}"));
    } else {
        s.push_str("\n\nWhen your task is complete, write <<deactivate>>.");
    }
    if let Some(peers) = peers {
        if !peers.is_empty() {
            s.push_str(&format!(
                "\nTo hand the conversation to another agent, write <<handoff NAME>>. Agents:\n{}",
                agent_list(peers)
            ));
        }
    }
    s
}

pub fn debug_prompt(source: &str) -> String {
    format!("{source}\n\n{DEBUG_PROMPT}")
}
