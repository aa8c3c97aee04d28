//! Instruction templates and message rendering.
//!
//! Templates are plain text with `{question}`, `{options}`, `{answers}` and
//! `{reference}` placeholders. Substitution is single-pass over the template,
//! so placeholder-like text inside task content is never re-expanded.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::backend::ChatMessage;
use crate::data::{Answer, TaskRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateName {
    MultipleChoice,
    FreeForm,
    SelfJustify,
    /// Self-justify variant for free-form tasks, asking for `Answer: VALUE`.
    SelfJustifyValue,
    IclPreamble,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::MultipleChoice,
        TemplateName::FreeForm,
        TemplateName::SelfJustify,
        TemplateName::SelfJustifyValue,
        TemplateName::IclPreamble,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::MultipleChoice => "multiple_choice.txt",
            TemplateName::FreeForm => "free_form.txt",
            TemplateName::SelfJustify => "self_justify.txt",
            TemplateName::SelfJustifyValue => "self_justify_value.txt",
            TemplateName::IclPreamble => "icl_preamble.txt",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            TemplateName::MultipleChoice | TemplateName::FreeForm => &["question"],
            TemplateName::SelfJustify | TemplateName::SelfJustifyValue => {
                &["question", "answers"]
            }
            TemplateName::IclPreamble => &["reference"],
        }
    }
}

const MULTIPLE_CHOICE: &str = include_str!("../templates/multiple_choice.txt");
const FREE_FORM: &str = include_str!("../templates/free_form.txt");
const SELF_JUSTIFY: &str = include_str!("../templates/self_justify.txt");
const SELF_JUSTIFY_VALUE: &str = include_str!("../templates/self_justify_value.txt");
const ICL_PREAMBLE: &str = include_str!("../templates/icl_preamble.txt");

/// Alternative instruction headers for prompt-stability evaluation. Each
/// replaces the instruction lines above the blank line in the task template.
pub const PARAPHRASES: [(&str, &str, &str); 5] = [
    (
        "rephrase-1",
        "Select the correct option for the multiple-choice question below.\nReply in the format: 'Answer: LETTER' (without quotes).",
        "Solve the question below.\nReply with the value in the format: 'Answer: VALUE' (without quotes).",
    ),
    (
        "rephrase-2",
        "Read the question and choose the single best option.\nFormat your reply as 'Answer: LETTER' (without quotes).",
        "Read the question and compute the answer.\nFormat your reply as 'Answer: VALUE' (without quotes).",
    ),
    (
        "rephrase-3",
        "Pick the right answer to this multiple-choice question.\nEnd your response with 'Answer: LETTER' (without quotes).",
        "Work out the answer to this question.\nEnd your response with 'Answer: VALUE' (without quotes).",
    ),
    (
        "rephrase-4",
        "You will be given a question with several options; identify the correct one.\nRespond using the format 'Answer: LETTER' (without quotes).",
        "You will be given a question; determine the numeric result.\nRespond using the format 'Answer: VALUE' (without quotes).",
    ),
    (
        "rephrase-5",
        "Choose the option that correctly answers the question.\nWrite your final choice as 'Answer: LETTER' (without quotes).",
        "Answer the question with a single value.\nWrite your final value as 'Answer: VALUE' (without quotes).",
    ),
];

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{(question|options|answers|reference)\}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub multiple_choice: String,
    pub free_form: String,
    pub self_justify: String,
    pub self_justify_value: String,
    pub icl_preamble: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::embedded()
    }
}

impl TemplateSet {
    pub fn embedded() -> Self {
        TemplateSet {
            multiple_choice: MULTIPLE_CHOICE.to_string(),
            free_form: FREE_FORM.to_string(),
            self_justify: SELF_JUSTIFY.to_string(),
            self_justify_value: SELF_JUSTIFY_VALUE.to_string(),
            icl_preamble: ICL_PREAMBLE.to_string(),
        }
    }

    /// Embedded templates with any files present in `dir` taking precedence.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = TemplateSet::embedded();
        for name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            if path.exists() {
                let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for key in name.required() {
                    if !body.contains(&format!("{{{key}}}")) {
                        return Err(Error::Template(format!(
                            "{} lacks the {{{key}}} placeholder",
                            path.display()
                        )));
                    }
                }
                *set.get_mut(name) = body;
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &str {
        match name {
            TemplateName::MultipleChoice => &self.multiple_choice,
            TemplateName::FreeForm => &self.free_form,
            TemplateName::SelfJustify => &self.self_justify,
            TemplateName::SelfJustifyValue => &self.self_justify_value,
            TemplateName::IclPreamble => &self.icl_preamble,
        }
    }

    fn get_mut(&mut self, name: TemplateName) -> &mut String {
        match name {
            TemplateName::MultipleChoice => &mut self.multiple_choice,
            TemplateName::FreeForm => &mut self.free_form,
            TemplateName::SelfJustify => &mut self.self_justify,
            TemplateName::SelfJustifyValue => &mut self.self_justify_value,
            TemplateName::IclPreamble => &mut self.icl_preamble,
        }
    }

    /// Task templates with the instruction header swapped for paraphrase `i`.
    pub fn paraphrased(&self, i: usize) -> Result<TemplateSet> {
        let (_, mc, ff) = PARAPHRASES
            .get(i)
            .ok_or_else(|| Error::Template(format!("no paraphrase #{i}")))?;
        let swap = |template: &str, header: &str| -> Result<String> {
            let (_, rest) = template.split_once("\n\n").ok_or_else(|| {
                Error::Template("task template has no instruction header".into())
            })?;
            Ok(format!("{header}\n\n{rest}"))
        };
        let mut set = self.clone();
        set.multiple_choice = swap(&self.multiple_choice, mc)?;
        set.free_form = swap(&self.free_form, ff)?;
        Ok(set)
    }
}

/// Substitute placeholders; any placeholder without a value is an error.
pub fn fill(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for caps in PLACEHOLDER.captures_iter(template) {
        let whole = caps.get(0).expect("match");
        let key = &caps[1];
        let value = values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Template(format!("placeholder {{{key}}} left unfilled")))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// `LETTER. text` lines in letter order.
pub fn render_options(task: &TaskRecord) -> String {
    task.options
        .iter()
        .map(|o| format!("{}. {}", o.letter, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Canonical assistant text for an answer.
pub fn answer_line(answer: &Answer) -> String {
    format!("Answer: {answer}")
}

/// The task's user message: multiple-choice template when it has options,
/// free-form otherwise.
pub fn render_user_prompt(templates: &TemplateSet, task: &TaskRecord) -> Result<String> {
    let options = render_options(task);
    let template = if task.is_multiple_choice() {
        &templates.multiple_choice
    } else {
        &templates.free_form
    };
    fill(
        template,
        &[("question", &task.question), ("options", &options)],
    )
}

/// Reference block for in-context propagation: question, options and gold.
pub fn render_reference(task: &TaskRecord) -> Result<String> {
    let gold = task.answer.as_ref().ok_or_else(|| {
        Error::Precondition(format!("reference task {} has no gold answer", task.id))
    })?;
    let mut out = format!("Question:\n{}\n\n", task.question);
    if task.is_multiple_choice() {
        out.push_str(&format!("Options:\n{}\n\n", render_options(task)));
    }
    out.push_str(&answer_line(gold));
    Ok(out)
}

pub fn render_icl_preamble(templates: &TemplateSet, refs: &[String]) -> Result<String> {
    fill(&templates.icl_preamble, &[("reference", &refs.join("\n\n"))])
}

/// Messages for one inference call. References, when present, go in a
/// leading system message.
pub fn render_task(
    templates: &TemplateSet,
    task: &TaskRecord,
    refs: &[String],
) -> Result<Vec<ChatMessage>> {
    let mut messages = Vec::with_capacity(2);
    if !refs.is_empty() {
        messages.push(ChatMessage::system(render_icl_preamble(templates, refs)?));
    }
    messages.push(ChatMessage::user(render_user_prompt(templates, task)?));
    Ok(messages)
}

/// Self-justify prompt over collaborator answers, numbered `1.`, `2.`, ...
/// in the order given.
pub fn render_self_justify(
    templates: &TemplateSet,
    task: &TaskRecord,
    answers: &[(usize, String)],
) -> Result<Vec<ChatMessage>> {
    if answers.len() < 2 {
        return Err(Error::Precondition(format!(
            "self-justify needs at least 2 answers, got {}",
            answers.len()
        )));
    }
    let mut sorted: Vec<&(usize, String)> = answers.iter().collect();
    sorted.sort_by_key(|(idx, _)| *idx);
    let listed = sorted
        .iter()
        .enumerate()
        .map(|(pos, (_, text))| format!("{}. {}", pos + 1, text.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    let template = if task.is_multiple_choice() {
        &templates.self_justify
    } else {
        &templates.self_justify_value
    };
    let body = fill(
        template,
        &[
            ("question", &task.question),
            ("options", &render_options(task)),
            ("answers", &listed),
        ],
    )?;
    Ok(vec![ChatMessage::user(body)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Role;

    fn mc_task() -> TaskRecord {
        TaskRecord::new("t1", "Which planet is largest?")
            .with_options(["Mars", "Jupiter", "Venus", "Earth"])
            .with_answer(Answer::choice('B'))
    }

    #[test]
    fn mc_without_refs_is_single_user_message() {
        let msgs = render_task(&TemplateSet::embedded(), &mc_task(), &[]).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].role, Role::User);
        assert!(msgs[0]
            .content
            .contains("Your response should be in the format: 'Answer: LETTER'"));
        assert!(msgs[0].content.contains("A. Mars\nB. Jupiter"));
    }

    #[test]
    fn refs_go_in_system_message_in_order() {
        let refs = vec!["ref one".to_string(), "ref two".into(), "ref three".into()];
        let msgs = render_task(&TemplateSet::embedded(), &mc_task(), &refs).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        let sys = &msgs[0].content;
        assert!(sys.starts_with("You are an expert in the question answering."));
        let (a, b, c) = (
            sys.find("ref one").unwrap(),
            sys.find("ref two").unwrap(),
            sys.find("ref three").unwrap(),
        );
        assert!(a < b && b < c);
    }

    #[test]
    fn free_form_uses_value_format() {
        let task = TaskRecord::new("f", "What is 2+2?").with_answer(Answer::numeric(4.0));
        let msgs = render_task(&TemplateSet::embedded(), &task, &[]).unwrap();
        assert!(msgs[0].content.contains("'Answer: VALUE'"));
        assert!(msgs[0]
            .content
            .contains("Provide your answer on a new line after 'Answer:'"));
    }

    #[test]
    fn self_justify_lists_answers_in_order() {
        let answers = vec![
            (1, "Answer: A".to_string()),
            (2, "Answer: B".into()),
            (3, "Answer: A".into()),
        ];
        let msgs = render_self_justify(&TemplateSet::embedded(), &mc_task(), &answers).unwrap();
        let body = &msgs[0].content;
        assert!(body.contains("Multiple Answers:\n1. Answer: A\n2. Answer: B\n3. Answer: A\n"));
        assert!(body.contains("Please consider them thoroughly"));
        assert!(body.ends_with("Now, please give me the final correct answer:"));
    }

    #[test]
    fn self_justify_needs_two_answers() {
        let err =
            render_self_justify(&TemplateSet::embedded(), &mc_task(), &[(1, "x".into())]);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn unfilled_placeholder_is_an_error() {
        assert!(matches!(
            fill("{question} / {options}", &[("question", "q")]),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn substituted_text_is_not_re_expanded() {
        let out = fill("Q: {question}\n{options}", &[("question", "{options}"), ("options", "X")])
            .unwrap();
        assert_eq!(out, "Q: {options}\nX");
    }

    #[test]
    fn reference_requires_gold() {
        let mut task = mc_task();
        assert_eq!(
            render_reference(&task).unwrap(),
            "Question:\nWhich planet is largest?\n\nOptions:\nA. Mars\nB. Jupiter\nC. Venus\nD. Earth\n\nAnswer: B"
        );
        task.answer = None;
        assert!(render_reference(&task).is_err());
    }

    #[test]
    fn paraphrases_keep_the_task_skeleton() {
        let base = TemplateSet::embedded();
        for i in 0..PARAPHRASES.len() {
            let set = base.paraphrased(i).unwrap();
            let prompt = render_user_prompt(&set, &mc_task()).unwrap();
            assert!(prompt.contains("\n\nQuestion:\nWhich planet is largest?\n\nOptions:\nA. Mars"));
            assert!(!prompt.starts_with("Answer the multiple-choice question."));
        }
        assert!(base.paraphrased(5).is_err());
    }

    #[test]
    fn override_dir_replaces_selected_templates() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("multiple_choice.txt"), "Q={question}\nO={options}").unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.multiple_choice, "Q={question}\nO={options}");
        assert_eq!(set.free_form, TemplateSet::embedded().free_form);

        fs::write(dir.path().join("icl_preamble.txt"), "no placeholder").unwrap();
        assert!(TemplateSet::from_dir(dir.path()).is_err());
    }
}
